//! Image-quality, spectral-distance and classification metrics.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{uniform_dims, Image};
use crate::spectral::{average_profiles, mean_profile, SpectralProfile};

/// Peak signal-to-noise ratio with peak 1. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable 'valid' Gaussian filtering: output is `(w-10) x (h-10)`.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Per-plane local moments, reusable across many SSIM evaluations.
#[derive(Debug, Clone)]
pub struct SsimStats {
    width: usize,
    height: usize,
    plane: Vec<f64>,
    mu: Vec<f64>,
    mean_sq: Vec<f64>,
}

impl SsimStats {
    pub fn new(plane: Vec<f64>, width: usize, height: usize) -> Result<Self> {
        if width < SSIM_WINDOW || height < SSIM_WINDOW {
            return Err(Error::invalid(format!(
                "image {width}x{height} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
            )));
        }
        let k = gaussian_window();
        let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
        let mu = filter_valid(&plane, width, height, &k);
        let mean_sq = filter_valid(&sq, width, height, &k);
        Ok(Self {
            width,
            height,
            plane,
            mu,
            mean_sq,
        })
    }

    /// Stats of the channel-averaged image.
    pub fn gray(img: &Image) -> Result<Self> {
        Self::new(img.gray_plane(), img.width(), img.height())
    }

    /// Mean SSIM between two planes of identical size.
    pub fn ssim(&self, other: &SsimStats) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::invalid("SSIM operands differ in size"));
        }
        let k = gaussian_window();
        let prod: Vec<f64> = self
            .plane
            .iter()
            .zip(&other.plane)
            .map(|(a, b)| a * b)
            .collect();
        let cross = filter_valid(&prod, self.width, self.height, &k);
        let mut total = 0.0;
        for i in 0..cross.len() {
            let (mx, my) = (self.mu[i], other.mu[i]);
            let vx = self.mean_sq[i] - mx * mx;
            let vy = other.mean_sq[i] - my * my;
            let cov = cross[i] - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
        }
        Ok(total / cross.len() as f64)
    }
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (w, h, channels) = a.dims();
    let mut total = 0.0;
    for c in 0..channels {
        let sa = SsimStats::new(a.plane(c), w, h)?;
        let sb = SsimStats::new(b.plane(c), w, h)?;
        total += sa.ssim(&sb)?;
    }
    Ok(total / channels as f64)
}

/// Distance between two mean profiles, in percent.
pub fn profile_distance(a: &SpectralProfile, b: &SpectralProfile) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("profile length mismatch"));
    }
    let sum: f64 = a.bins.iter().zip(&b.bins).map(|(x, y)| (x - y).abs()).sum();
    Ok(100.0 * sum / a.len() as f64)
}

/// Real-referenced spectral profile distance, in percent.
pub fn rspd(real: &[Image], test: &[Image]) -> Result<f64> {
    let (rw, rh, _) = uniform_dims(real)?;
    let (tw, th, _) = uniform_dims(test)?;
    if (rw, rh) != (tw, th) {
        return Err(Error::invalid(format!(
            "set sizes differ: {rw}x{rh} vs {tw}x{th}"
        )));
    }
    profile_distance(&mean_profile(real)?, &mean_profile(test)?)
}

/// RSPD from precomputed per-image profiles.
pub fn rspd_from_profiles(real: &[SpectralProfile], test: &[SpectralProfile]) -> Result<f64> {
    profile_distance(&average_profiles(real)?, &average_profiles(test)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "0" => Ok(Label::Real),
            "fake" | "1" => Ok(Label::Fake),
            other => Err(Error::invalid(format!("unknown label '{other}'"))),
        }
    }
}

/// Accuracy on fake samples and the complementary error rate, both in percent.
pub fn classification_metrics(preds: &[Label], truth: &[Label]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(Error::invalid(format!(
            "label vectors must be non-empty and equal length ({} vs {})",
            preds.len(),
            truth.len()
        )));
    }
    let (mut fakes, mut correct) = (0usize, 0usize);
    for (p, t) in preds.iter().zip(truth) {
        if *t == Label::Fake {
            fakes += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    if fakes == 0 {
        return Err(Error::invalid("no fake samples in ground truth"));
    }
    let acc = 100.0 * correct as f64 / fakes as f64;
    Ok((acc, 100.0 - acc))
}

fn ser_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// Flat metric bundle; fields not computed for a run stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "ser_db")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub rspd: Option<f64>,
    pub acc: Option<f64>,
    pub er: Option<f64>,
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,value")?;
        let fields = [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("rspd", self.rspd),
            ("acc", self.acc),
            ("er", self.er),
        ];
        for (name, v) in fields {
            match v {
                Some(x) if x.is_infinite() => writeln!(out, "{name},inf")?,
                Some(x) => writeln!(out, "{name},{x}")?,
                None => writeln!(out, "{name},")?,
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::spectral_profile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, channels: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, channels, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 3, 1).map(|v| v * 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 16.0 / 255.0);
        let expect = 10.0 * (255.0f64 * 255.0 / (16.0 * 16.0)).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 24.049).abs() < 1e-3);

        let p = Image::new(1, 1, 1, vec![0.0]).unwrap();
        let q = Image::new(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(psnr(&p, &q).unwrap(), 0.0);
        assert!(psnr(&p, &Image::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let a = Image::filled(4, 4, 1, 0.5);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let b = a.map(|v| v + k as f64 * 0.01);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        for seed in 0..5 {
            let a = random_image(24, 3, seed);
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            let b = random_image(24, 3, seed + 50);
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }
    }

    /// Direct per-window evaluation without separable filtering.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (w, h, _) = a.dims();
        let k = gaussian_window();
        let (pa, pb) = (a.plane(0), b.plane(0));
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let wt = k[i] * k[j];
                        let (x, y) = (pa[(y0 + j) * w + x0 + i], pb[(y0 + j) * w + x0 + i]);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, c) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + SSIM_C1) * (2.0 * c + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_inverted_binary_image_is_negative() {
        let a = Image::from_fn(16, 16, 1, |x, _, _| if x < 8 { 0.0 } else { 1.0 });
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        let o = ssim_oracle(&a, &b);
        assert!(o < 0.0);
        assert!((s - o).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = random_image(16, 1, 7);
        let b = random_image(16, 1, 8).map(|v| 0.5 * v + 0.25);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::zeros(10, 16, 1);
        assert!(matches!(ssim(&a, &a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rspd_examples() {
        let set: Vec<Image> = (0..3).map(|s| random_image(16, 1, s)).collect();
        assert_eq!(rspd(&set, &set).unwrap(), 0.0);

        let p = spectral_profile(&set[0]).unwrap();
        let mut q = p.clone();
        q.bins.iter_mut().for_each(|b| *b += 0.01);
        assert!((profile_distance(&p, &q).unwrap() - 1.0).abs() < 1e-9);

        assert!(rspd(&[], &set).is_err());
        assert!(rspd(&set, &[Image::zeros(8, 8, 1)]).is_err());
    }

    #[test]
    fn rspd_is_symmetric() {
        let a: Vec<Image> = (0..3).map(|s| random_image(16, 1, s)).collect();
        let b: Vec<Image> = (10..12)
            .map(|s| random_image(16, 1, s).map(|v| v * 0.3))
            .collect();
        assert_eq!(rspd(&a, &b).unwrap(), rspd(&b, &a).unwrap());
    }

    #[test]
    fn classification_examples() {
        use Label::*;
        assert_eq!(
            classification_metrics(&[Fake, Fake], &[Fake, Fake]).unwrap(),
            (100.0, 0.0)
        );
        assert_eq!(
            classification_metrics(&[Real, Real], &[Fake, Fake]).unwrap(),
            (0.0, 100.0)
        );
        assert_eq!(
            classification_metrics(&[Fake, Fake, Real, Fake], &[Fake; 4]).unwrap(),
            (75.0, 25.0)
        );
        assert!(classification_metrics(&[], &[]).is_err());
        assert!(classification_metrics(&[Real], &[Real]).is_err());
    }

    #[test]
    fn report_exports() {
        let r = MetricsReport {
            psnr: Some(f64::INFINITY),
            ssim: Some(1.0),
            rspd: Some(0.0),
            acc: Some(75.0),
            er: Some(25.0),
        };
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "metric,value\npsnr,inf\nssim,1\nrspd,0\nacc,75\ner,25\n"
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["psnr"], "inf");
        assert_eq!(v["acc"], 75.0);
    }
}
