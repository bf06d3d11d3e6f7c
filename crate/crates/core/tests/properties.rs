use freqalign::alignment::{rescale_factor, smr_rescale_with, PowerLawFit, RescaleMode};
use freqalign::detector::{evaluate_scores, mixup_augment};
use freqalign::lab::{add_noise, blur, compress_sim, PerturbSpec};
use freqalign::metrics::{classification_metrics, psnr, rspd, ssim, Label};
use freqalign::nn::{NetworkBuilder, Tensor};
use freqalign::rdc::noise::{make_noised_real_detailed, NoiseSpec};
use freqalign::spectral::{
    decompose, dft2, idft2, profile_radius, rescale_radial, spectral_profile,
};
use freqalign::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(n: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(n, n, c, |_, _, _| rng.random_range(0.0..1.0))
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (
        prop_oneof![Just(8usize), Just(16), Just(32)],
        prop_oneof![Just(1usize), Just(3)],
        any::<u64>(),
    )
        .prop_map(|(n, c, s)| random_image(n, c, s))
}

fn fit(a: f64, b: f64) -> PowerLawFit {
    PowerLawFit {
        a,
        b,
        fit_lo: 0.2,
        fit_hi: 1.0,
        residual: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transform_round_trip(img in image_strategy(), shift in any::<bool>()) {
        let back = idft2(&dft2(&img, shift).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-5);
    }

    #[test]
    fn parseval(img in image_strategy()) {
        let n = img.width() as f64;
        let spatial: f64 = img.data().iter().map(|v| v * v).sum();
        let energy = dft2(&img, false).unwrap().energy();
        prop_assert!((energy - n * n * spatial).abs() <= 1e-4 * n * n * spatial);
    }

    #[test]
    fn decomposition_partitions(img in image_strategy(), r0 in 0.0f64..1.0) {
        let (low, high) = decompose(&img, r0).unwrap();
        let sum = low.zip_map(&high, |a, b| a + b).unwrap();
        prop_assert!(sum.max_abs_diff(&img) < 1e-5);
    }

    #[test]
    fn low_band_energy_is_monotone(img in image_strategy(), r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let e = |r: f64| decompose(&img, r).unwrap().0.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!(e(lo) <= e(hi) + 1e-9);
    }

    #[test]
    fn profile_shape(img in image_strategy()) {
        let p = spectral_profile(&img).unwrap();
        let n = img.width();
        prop_assert_eq!(p.len(), n / 2);
        prop_assert_eq!(p.radii[0], 0.0);
        prop_assert_eq!(*p.radii.last().unwrap(), 1.0);
    }

    #[test]
    fn rspd_symmetric_and_zero_on_self(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a: Vec<Image> = (0..3).map(|i| random_image(16, 1, s1.wrapping_add(i))).collect();
        let b: Vec<Image> = (0..3).map(|i| random_image(16, 1, s2.wrapping_add(i))).collect();
        prop_assert_eq!(rspd(&a, &a).unwrap(), 0.0);
        prop_assert!((rspd(&a, &b).unwrap() - rspd(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_as_error_grows(img in image_strategy(), d1 in 0.001f64..0.2, d2 in 0.001f64..0.2) {
        prop_assume!((d1 - d2).abs() > 1e-6);
        let (small, large) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        // Offsets applied without clamping keep the MSE exactly d^2.
        let off = |d: f64| Image::new(img.width(), img.height(), img.channels(), img.data().iter().map(|v| v + d).collect()).unwrap();
        prop_assert!(psnr(&img, &off(small)).unwrap() > psnr(&img, &off(large)).unwrap());
        if img.width() >= 11 {
            prop_assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        } else {
            prop_assert!(ssim(&img, &img).is_err());
        }
    }

    #[test]
    fn acc_and_er_complement(scores in proptest::collection::vec(0.0f64..1.0, 1..60)) {
        let labels = vec![Label::Fake; scores.len()];
        let e = evaluate_scores(&scores, &labels).unwrap();
        prop_assert_eq!(e.acc.unwrap() + e.er.unwrap(), 100.0);
        let preds: Vec<Label> = scores.iter().map(|&s| if s >= 0.5 { Label::Fake } else { Label::Real }).collect();
        let (acc, er) = classification_metrics(&preds, &labels).unwrap();
        prop_assert_eq!(acc + er, 100.0);
        prop_assert_eq!(acc, e.acc.unwrap());
    }

    #[test]
    fn smr_identity_for_equal_fits(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..-0.5, r_t in 0.05f64..0.9) {
        let img = random_image(16, 1, seed).map(|v| 0.2 + 0.6 * v);
        for mode in [RescaleMode::Thresholded, RescaleMode::Plain] {
            let out = smr_rescale_with(&img, &fit(a, b), &fit(a, b), r_t, mode).unwrap();
            prop_assert!(out.image.max_abs_diff(&img) < 1e-9);
        }
    }

    #[test]
    fn smr_leaves_low_band_untouched(img in image_strategy(), ar in 0.1f64..3.0, br in -3.0f64..0.0, r_t in 0.05f64..0.9) {
        let (fr, ff) = (fit(ar, br), fit(1.0, -1.0));
        let orig = dft2(&img, true).unwrap();
        let mut s = orig.clone();
        rescale_radial(&mut s, |r| rescale_factor(r, &fr, &ff, r_t, RescaleMode::Thresholded)).unwrap();
        let n = img.width();
        for y in 0..n {
            for x in 0..n {
                if profile_radius(x, y, n) < r_t {
                    for c in 0..img.channels() {
                        prop_assert_eq!(s.at(x, y, c), orig.at(x, y, c));
                    }
                }
            }
        }
    }

    #[test]
    fn noising_keeps_low_band(seed in any::<u64>(), a in 0.5f64..=2.0, b in -4.0f64..=4.0) {
        let img = random_image(16, 1, seed);
        let spec = NoiseSpec::new(a, b, 0.2).unwrap();
        let mut s = dft2(&img, true).unwrap();
        let orig = s.clone();
        rescale_radial(&mut s, |r| spec.factor(r)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if profile_radius(x, y, 16) < 0.2 {
                    prop_assert_eq!(s.at(x, y, 0), orig.at(x, y, 0));
                }
            }
        }
        let out = make_noised_real_detailed(&img, &spec).unwrap();
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mixup_zero_residual_is_identity(s1 in any::<u64>(), s2 in any::<u64>(), delta in -3.0f64..3.0) {
        let real = random_image(8, 1, s1);
        let aligned = random_image(8, 1, s2);
        let (r, f) = mixup_augment(&real, &aligned, &aligned, delta).unwrap();
        prop_assert_eq!(r, real);
        prop_assert_eq!(f, aligned);
    }

    #[test]
    fn perturbations_keep_range_and_dims(img in image_strategy(), k in 0usize..4, q in 10u32..=75, v in 5.0f64..=20.0, seed in any::<u64>()) {
        let outs = [
            blur(&img, [3, 5, 7, 9][k]).unwrap(),
            compress_sim(&img, q).unwrap(),
            add_noise(&img, v, seed).unwrap(),
            PerturbSpec::Noise { variance: v, seed }.apply(&img, None).unwrap(),
        ];
        for o in outs {
            prop_assert_eq!(o.dims(), img.dims());
            prop_assert!(o.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn upsample_then_pool_is_identity_on_constants(value in -2.0f64..2.0, c in 1usize..4, n in 1usize..5) {
        let mut b = NetworkBuilder::new(&[c, 2 * n, 2 * n], 0);
        let u = b.upsample(b.input());
        let p = b.max_pool(u);
        let net = b.finish(p);
        let x = Tensor::new(&[1, c, 2 * n, 2 * n], vec![value; c * 4 * n * n]).unwrap();
        let y = net.predict(&x).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(y.data().iter().all(|v| *v == value));
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), xs in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let build = || {
            let mut b = NetworkBuilder::new(&[1, 4, 4], seed);
            let h = b.conv3x3("c", b.input(), 2);
            let r = b.relu(h);
            let d = b.dense("d", r, 1);
            let s = b.sigmoid(d);
            b.finish(s)
        };
        let x = Tensor::new(&[1, 1, 4, 4], xs).unwrap();
        prop_assert_eq!(build().predict(&x).unwrap(), build().predict(&x).unwrap());
    }
}
