use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Label;

pub const BLUR_KERNELS: [usize; 4] = [3, 5, 7, 9];
pub const QUALITY_RANGE: (u32, u32) = (10, 75);
pub const VARIANCE_RANGE: (f64, f64) = (5.0, 20.0);
pub const EPSILONS: [f64; 2] = [4.0 / 255.0, 8.0 / 255.0];

/// Standard JPEG luminance quantization table, row-major.
pub const LUMINANCE_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Gaussian sigma for an odd kernel size.
pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_kernel(kernel: usize) -> Vec<f64> {
    let sigma = blur_sigma(kernel);
    let c = (kernel / 2) as f64;
    let mut k: Vec<f64> = (0..kernel)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn blur(img: &Image, kernel: usize) -> Result<Image> {
    if kernel.is_multiple_of(2) || !BLUR_KERNELS.contains(&kernel) {
        return Err(Error::invalid(format!(
            "blur kernel {kernel} not in {{3, 5, 7, 9}}"
        )));
    }
    let (w, h, c) = img.dims();
    if w <= kernel / 2 || h <= kernel / 2 {
        return Err(Error::invalid("image smaller than the blur radius"));
    }
    let k = gaussian_kernel(kernel);
    let r = (kernel / 2) as isize;
    let mut tmp = Image::zeros(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = (0..kernel)
                    .map(|i| k[i] * img.get(reflect(x as isize + i as isize - r, w), y, ch))
                    .sum();
                tmp.set(x, y, ch, v);
            }
        }
    }
    let mut out = Image::zeros(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = (0..kernel)
                    .map(|i| k[i] * tmp.get(x, reflect(y as isize + i as isize - r, h), ch))
                    .sum();
                out.set(x, y, ch, v);
            }
        }
    }
    Ok(out)
}

/// Quality-scaled quantization table (libjpeg rule).
pub fn quant_table(quality: u32) -> Result<[u32; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("quality {quality} outside 1..=100")));
    }
    let s = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut t = [0u32; 64];
    for (o, &base) in t.iter_mut().zip(&LUMINANCE_TABLE) {
        *o = ((base * s + 50) / 100).max(1);
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// Block DCT quantization round trip on the 8-bit scale, output rounded to
/// 8-bit levels. Every channel uses the luminance table.
pub fn compress_sim(img: &Image, quality: u32) -> Result<Image> {
    let table = quant_table(quality)?;
    let (w, h, c) = img.dims();
    if w % 8 != 0 || h % 8 != 0 {
        return Err(Error::invalid(format!("{w}x{h} is not a multiple of 8")));
    }
    let basis = dct_basis();
    let mut out = Image::zeros(w, h, c);
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = img.get(bx + x, by + y, ch) * 255.0 - 128.0;
                    }
                }
                // Rows then columns of the orthonormal DCT-II.
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y][u] = (0..8).map(|x| basis[u][x] * block[y][x]).sum();
                    }
                }
                for v in 0..8 {
                    for u in 0..8 {
                        let coef: f64 = (0..8).map(|y| basis[v][y] * tmp[y][u]).sum();
                        let q = table[v * 8 + u] as f64;
                        block[v][u] = (coef / q).round() * q;
                    }
                }
                for v in 0..8 {
                    for x in 0..8 {
                        tmp[v][x] = (0..8).map(|u| basis[u][x] * block[v][u]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let p: f64 = (0..8).map(|v| basis[v][y] * tmp[v][x]).sum();
                        let level = (p + 128.0).round().clamp(0.0, 255.0);
                        out.set(bx + x, by + y, ch, level / 255.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise with `sigma = sqrt(variance) / 255`, clamped.
pub fn add_noise(img: &Image, variance: f64, seed: u64) -> Result<Image> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!(
            "noise variance {variance} must be >= 0"
        )));
    }
    if variance == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt() / 255.0).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v += normal.sample(&mut rng));
    out.clamp_unit();
    Ok(out)
}

/// Fast gradient sign step on the detector's classification loss against
/// `label`: `clamp(img + eps * sign(dL/dimg))`.
pub fn fgsm(img: &Image, detector: &Detector, eps: f64, label: Label) -> Result<Image> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("epsilon {eps} must be >= 0")));
    }
    let (_, grad) = detector.loss_input_gradient(img, label)?;
    if eps == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.zip_map(&grad, |v, g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        v + eps * s
    })?;
    out.clamp_unit();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Blur,
    Compress,
    Noise,
    Fgsm,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::Blur,
        PerturbKind::Compress,
        PerturbKind::Noise,
        PerturbKind::Fgsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Blur => "blur",
            PerturbKind::Compress => "compress",
            PerturbKind::Noise => "noise",
            PerturbKind::Fgsm => "fgsm",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blur" => Ok(PerturbKind::Blur),
            "compress" | "jpeg" => Ok(PerturbKind::Compress),
            "noise" => Ok(PerturbKind::Noise),
            "fgsm" => Ok(PerturbKind::Fgsm),
            other => Err(Error::invalid(format!("unknown perturbation '{other}'"))),
        }
    }
}

/// A fully specified perturbation of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PerturbSpec {
    Blur { kernel: usize },
    Compress { quality: u32 },
    Noise { variance: f64, seed: u64 },
    Fgsm { epsilon: f64 },
}

impl PerturbSpec {
    /// Draws parameters from the reference ranges.
    pub fn sample<R: Rng + ?Sized>(kind: PerturbKind, rng: &mut R) -> Self {
        match kind {
            PerturbKind::Blur => PerturbSpec::Blur {
                kernel: BLUR_KERNELS[rng.random_range(0..4)],
            },
            PerturbKind::Compress => PerturbSpec::Compress {
                quality: rng.random_range(QUALITY_RANGE.0..=QUALITY_RANGE.1),
            },
            PerturbKind::Noise => PerturbSpec::Noise {
                variance: rng.random_range(VARIANCE_RANGE.0..=VARIANCE_RANGE.1),
                seed: rng.random(),
            },
            PerturbKind::Fgsm => PerturbSpec::Fgsm {
                epsilon: EPSILONS[rng.random_range(0..2)],
            },
        }
    }

    pub fn kind(&self) -> PerturbKind {
        match self {
            PerturbSpec::Blur { .. } => PerturbKind::Blur,
            PerturbSpec::Compress { .. } => PerturbKind::Compress,
            PerturbSpec::Noise { .. } => PerturbKind::Noise,
            PerturbSpec::Fgsm { .. } => PerturbKind::Fgsm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PerturbSpec::Blur { kernel } => BLUR_KERNELS.contains(&kernel),
            PerturbSpec::Compress { quality } => (1..=100).contains(&quality),
            PerturbSpec::Noise { variance, .. } => variance >= 0.0 && variance.is_finite(),
            PerturbSpec::Fgsm { epsilon } => epsilon >= 0.0 && epsilon.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid perturbation parameters {self:?}"
            )))
        }
    }

    /// Applies the perturbation; FGSM needs a detector and the true label.
    pub fn apply(&self, img: &Image, attack: Option<(&Detector, Label)>) -> Result<Image> {
        self.validate()?;
        match *self {
            PerturbSpec::Blur { kernel } => blur(img, kernel),
            PerturbSpec::Compress { quality } => compress_sim(img, quality),
            PerturbSpec::Noise { variance, seed } => add_noise(img, variance, seed),
            PerturbSpec::Fgsm { epsilon } => {
                let (det, label) = attack.ok_or_else(|| {
                    Error::UnsupportedDetector("FGSM needs a differentiable detector".into())
                })?;
                fgsm(img, det, epsilon, label)
            }
        }
    }
}

/// Perturbs every image with freshly sampled parameters of `kind`.
pub fn perturb_all(
    images: &[Image],
    kind: PerturbKind,
    seed: u64,
    attack: Option<(&Detector, Label)>,
) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|img| PerturbSpec::sample(kind, &mut rng).apply(img, attack))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorArch, DetectorKind};
    use crate::metrics::psnr;

    fn random_image(n: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn small_detector(seed: u64) -> Detector {
        Detector::new(
            DetectorKind::PixelCnn,
            DetectorArch {
                widths: [2, 3, 4],
                hidden: 4,
            },
            1,
            16,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn blur_constant_and_impulse() {
        let flat = Image::filled(16, 16, 1, 0.37);
        for k in BLUR_KERNELS {
            assert!(blur(&flat, k).unwrap().max_abs_diff(&flat) < 1e-6);
        }
        let mut imp = Image::zeros(16, 16, 1);
        imp.set(8, 8, 0, 1.0);
        let out = blur(&imp, 5).unwrap();
        let g = gaussian_kernel(5);
        for dy in 0..5 {
            for dx in 0..5 {
                assert!((out.get(6 + dx, 6 + dy, 0) - g[dx] * g[dy]).abs() < 1e-12);
            }
        }
        assert_eq!(out.get(2, 8, 0), 0.0);
        assert!(blur(&flat, 4).is_err());
        assert!(blur(&flat, 11).is_err());
    }

    #[test]
    fn blur_matches_sliding_window_oracle() {
        let img = random_image(12, 3, 3);
        let out = blur(&img, 3).unwrap();
        let g = gaussian_kernel(3);
        let refl = |i: isize, n: isize| {
            if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            }
        };
        for ch in 0..3 {
            for y in 0..12isize {
                for x in 0..12isize {
                    let mut s = 0.0;
                    for j in -1..=1isize {
                        for i in -1..=1isize {
                            let (xx, yy) = (refl(x + i, 12) as usize, refl(y + j, 12) as usize);
                            s += g[(i + 1) as usize] * g[(j + 1) as usize] * img.get(xx, yy, ch);
                        }
                    }
                    assert!((out.get(x as usize, y as usize, ch) - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sigma_rule() {
        assert!((blur_sigma(3) - 0.8).abs() < 1e-12);
        assert!((blur_sigma(9) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn quant_table_rule() {
        assert!(quant_table(100).unwrap().iter().all(|&v| v == 1));
        assert_eq!(quant_table(50).unwrap(), LUMINANCE_TABLE);
        // Quality 10 scales by 500: 16 * 500 / 100 = 80.
        assert_eq!(quant_table(10).unwrap()[0], 80);
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
    }

    #[test]
    fn compress_bounds() {
        let img = random_image(16, 1, 4);
        assert!(compress_sim(&img, 100).unwrap().max_abs_diff(&img) <= 2.0 / 255.0);
        // The DC step is table[0] / 8 levels, so it stays within one level from quality 50 up.
        let flat = Image::filled(16, 16, 1, 0.6);
        for q in [50, 75, 90, 100] {
            assert!(compress_sim(&flat, q).unwrap().max_abs_diff(&flat) <= 1.0 / 255.0);
        }
        let mid = Image::filled(16, 16, 1, 128.0 / 255.0);
        for q in [1, 10, 30] {
            assert!(compress_sim(&mid, q).unwrap().max_abs_diff(&mid) < 1e-12);
        }
        assert!(compress_sim(&random_image(12, 1, 0), 50).is_err());
    }

    #[test]
    fn compress_quality_is_monotone() {
        let imgs = crate::lab::gen_synthetic(&crate::lab::SynthSpec::new(
            crate::lab::SynthKind::Real,
            32,
            5,
            3,
        ))
        .unwrap();
        for img in &imgs {
            let p: Vec<f64> = [10, 30, 50, 75]
                .iter()
                .map(|&q| psnr(img, &compress_sim(img, q).unwrap()).unwrap())
                .collect();
            assert!(p.windows(2).all(|w| w[0] <= w[1] + 1e-9), "{p:?}");
        }
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let img = Image::filled(64, 64, 1, 0.5);
        assert_eq!(add_noise(&img, 0.0, 1).unwrap(), img);
        let out = add_noise(&img, 16.0, 7).unwrap();
        let d: Vec<f64> = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| a - b)
            .collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 4.0 / 255.0).abs() < 0.1 * 4.0 / 255.0, "{sd}");
        assert_eq!(out, add_noise(&img, 16.0, 7).unwrap());
        assert!(add_noise(&img, -1.0, 0).is_err());
    }

    #[test]
    fn fgsm_steps_along_gradient_sign() {
        let det = small_detector(5);
        let img = random_image(16, 1, 6).map(|v| 0.1 + 0.8 * v);
        assert_eq!(fgsm(&img, &det, 0.0, Label::Fake).unwrap(), img);
        let eps = 4.0 / 255.0;
        let out = fgsm(&img, &det, eps, Label::Fake).unwrap();
        let (l0, g) = det.loss_input_gradient(&img, Label::Fake).unwrap();
        for ((o, i), gv) in out.data().iter().zip(img.data()).zip(g.data()) {
            assert!((o - i).abs() <= eps + 1e-15);
            assert_eq!((o - i).abs() > 0.0, *gv != 0.0);
            if *gv != 0.0 {
                assert_eq!((o - i).signum(), gv.signum());
            }
        }
        let (l1, _) = det.loss_input_gradient(&out, Label::Fake).unwrap();
        assert!(l1 > l0);
    }

    #[test]
    fn fgsm_needs_pixel_detector() {
        let img = random_image(16, 1, 6);
        let mlp =
            Detector::new(DetectorKind::ProfileMlp, DetectorArch::default(), 1, 16, 0).unwrap();
        assert!(matches!(
            fgsm(&img, &mlp, 4.0 / 255.0, Label::Fake),
            Err(Error::UnsupportedDetector(_))
        ));
        let spec = PerturbSpec::Fgsm {
            epsilon: 4.0 / 255.0,
        };
        assert!(matches!(
            spec.apply(&img, None),
            Err(Error::UnsupportedDetector(_))
        ));
    }

    #[test]
    fn sampled_specs_stay_in_range_and_keep_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = small_detector(2);
        let img = random_image(16, 1, 3);
        for _ in 0..40 {
            for kind in PerturbKind::ALL {
                let spec = PerturbSpec::sample(kind, &mut rng);
                spec.validate().unwrap();
                match spec {
                    PerturbSpec::Compress { quality } => assert!((10..=75).contains(&quality)),
                    PerturbSpec::Noise { variance, .. } => {
                        assert!((5.0..=20.0).contains(&variance))
                    }
                    PerturbSpec::Fgsm { epsilon } => assert!(EPSILONS.contains(&epsilon)),
                    PerturbSpec::Blur { kernel } => assert!(BLUR_KERNELS.contains(&kernel)),
                }
                let out = spec.apply(&img, Some((&det, Label::Fake))).unwrap();
                assert_eq!(out.dims(), img.dims());
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PerturbKind::ALL {
            assert_eq!(k.name().parse::<PerturbKind>().unwrap(), k);
        }
        assert!("sharpen".parse::<PerturbKind>().is_err());
    }
}
