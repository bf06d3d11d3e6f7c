use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Label;
use crate::spectral::{fft2_real, ifft2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Real,
    /// Block-constant 2x upsampling artifact.
    FakeA,
    /// High-frequency grating spikes.
    FakeB,
}

impl SynthKind {
    pub fn label(self) -> Label {
        match self {
            SynthKind::Real => Label::Real,
            _ => Label::Fake,
        }
    }

    pub fn family(self) -> &'static str {
        match self {
            SynthKind::Real => "real",
            SynthKind::FakeA => "fake-a",
            SynthKind::FakeB => "fake-b",
        }
    }

    fn tag(self) -> u64 {
        match self {
            SynthKind::Real => 0x52,
            SynthKind::FakeA => 0x41,
            SynthKind::FakeB => 0x42,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.family())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(SynthKind::Real),
            "fake-a" | "fakea" | "a" => Ok(SynthKind::FakeA),
            "fake-b" | "fakeb" | "b" => Ok(SynthKind::FakeB),
            other => Err(Error::invalid(format!(
                "unknown synthetic family '{other}'"
            ))),
        }
    }
}

/// Parameters of a synthetic batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    pub kind: SynthKind,
    /// Artifact strength of the fake families (1 is the reference level).
    pub strength: f64,
    pub channels: usize,
    /// Peak amplitude of the central brightening shared by both fake families.
    pub fingerprint: f64,
    /// Log-spectrum amplitude `A` in `ln(1 + |F|) ~ A r^-2`.
    pub spectral_amplitude: f64,
    /// Largest per-image sensor noise standard deviation, in 8-bit levels.
    pub sensor_noise: f64,
    /// When set, the field uses a power spectrum `~ r^-2` (amplitude `1/r`)
    /// scaled to this pixel standard deviation instead of the log law.
    pub natural_std: Option<f64>,
    /// Per-grating amplitude of fake-B at strength 1.
    pub grating: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            count: 1,
            seed: 0,
            kind: SynthKind::Real,
            strength: 1.0,
            channels: 1,
            fingerprint: 0.08,
            spectral_amplitude: 0.15,
            sensor_noise: 1.0,
            natural_std: None,
            grating: 0.015,
        }
    }
}

impl SynthSpec {
    pub fn new(kind: SynthKind, size: usize, count: usize, seed: u64) -> Self {
        Self {
            kind,
            size,
            count,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "size {} is not a positive multiple of 16",
                self.size
            )));
        }
        if self.kind != SynthKind::Real && !(self.strength > 0.0) {
            return Err(Error::invalid("fake families need strength > 0"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!(
                "unsupported channel count {}",
                self.channels
            )));
        }
        if !(self.fingerprint >= 0.0)
            || !(self.spectral_amplitude > 0.0)
            || !(self.sensor_noise >= 0.0)
        {
            return Err(Error::invalid(
                "fingerprint and sensor noise must be >= 0, spectral amplitude > 0",
            ));
        }
        Ok(())
    }
}

/// Per-item seed derived from a batch seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Radius below which the field amplitude is held constant.
const LOW_CAP: f64 = 0.2;

/// Gaussian random field whose radially averaged log-magnitude spectrum
/// follows `amplitude * r^-2`.
fn power_law_field(n: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut spec = fft2_real(&noise, n, n);
    let half = (n / 2 - 1) as f64;
    // White noise has E|W|^2 = n^2.
    let norm = 1.0 / n as f64;
    for y in 0..n {
        let ky = if y <= n / 2 { y } else { n - y } as f64;
        for x in 0..n {
            let kx = if x <= n / 2 { x } else { n - x } as f64;
            let r = (kx * kx + ky * ky).sqrt() / half;
            let i = y * n + x;
            if r == 0.0 {
                spec[i] = Complex64::new(0.0, 0.0);
                continue;
            }
            let m = (amplitude / r.max(LOW_CAP).powi(2)).exp() - 1.0;
            spec[i] *= m * norm;
        }
    }
    ifft2(&spec, n, n).iter().map(|c| c.re).collect()
}

/// Gaussian random field with amplitude spectrum `1/r`, scaled to `std`.
fn natural_field(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut spec = fft2_real(&noise, n, n);
    let half = (n / 2 - 1) as f64;
    for y in 0..n {
        let ky = if y <= n / 2 { y } else { n - y } as f64;
        for x in 0..n {
            let kx = if x <= n / 2 { x } else { n - x } as f64;
            let r = (kx * kx + ky * ky).sqrt() / half;
            let i = y * n + x;
            spec[i] *= if r == 0.0 {
                0.0
            } else {
                1.0 / r.max(1.0 / half)
            };
        }
    }
    let f: Vec<f64> = ifft2(&spec, n, n).iter().map(|c| c.re).collect();
    let sd = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    f.into_iter().map(|v| v * std / sd).collect()
}

fn gaussian_blob(n: usize, cx: f64, cy: f64, sigma: f64, amp: f64, plane: &mut [f64]) {
    let k = 1.0 / (2.0 * sigma * sigma);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            plane[y * n + x] += amp * (-(dx * dx + dy * dy) * k).exp();
        }
    }
}

/// One natural-looking base image (before any fake-specific artifact).
fn base_image(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let n = spec.size;
    let a = spec.spectral_amplitude * rng.random_range(0.85..1.15);
    let luminance = match spec.natural_std {
        Some(sd) => natural_field(n, sd * rng.random_range(0.85..1.15), rng),
        None => power_law_field(n, a, rng),
    };
    let mut blobs = vec![0.0; n * n];
    for _ in 0..4 {
        let (cx, cy) = (
            rng.random_range(0.0..n as f64),
            rng.random_range(0.0..n as f64),
        );
        let sigma = rng.random_range(n as f64 / 10.0..n as f64 / 4.0);
        let amp = rng.random_range(-0.12..0.12);
        gaussian_blob(n, cx, cy, sigma, amp, &mut blobs);
    }
    let offset = rng.random_range(0.42..0.58);
    let noise_sigma = spec.sensor_noise * rng.random_range(0.5..1.0) / 255.0;
    let mut planes = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let (gain, tint) = if spec.channels == 1 {
            (1.0, 0.0)
        } else {
            (rng.random_range(0.85..1.15), rng.random_range(-0.05..0.05))
        };
        let detail = if spec.channels == 1 {
            None
        } else {
            Some(power_law_field(n, a * 0.5, rng))
        };
        planes.push(
            (0..n * n)
                .map(|i| {
                    let n: f64 = StandardNormal.sample(&mut *rng);
                    offset
                        + tint
                        + gain * (luminance[i] + blobs[i])
                        + detail.as_ref().map_or(0.0, |d| 0.3 * d[i])
                        + noise_sigma * n
                })
                .collect::<Vec<f64>>(),
        );
    }
    Image::from_planes(n, n, &planes)
}

/// Adds the central brightening shared by every fake family.
fn add_fingerprint(img: &mut Image, peak: f64, rng: &mut ChaCha8Rng) {
    let n = img.width();
    let amp = peak * rng.random_range(0.5..1.0);
    let mut blob = vec![0.0; n * n];
    let c = (n as f64 - 1.0) / 2.0;
    gaussian_blob(n, c, c, n as f64 / 5.0, amp, &mut blob);
    let ch = img.channels();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v += blob[i / ch];
    }
}

/// `img + s * (up(down(img)) - img)` with 2x2 average pooling and nearest
/// upsampling; `s = 1` gives exactly block-constant images.
pub fn blockify(img: &Image, strength: f64) -> Image {
    let (w, h, c) = img.dims();
    Image::from_fn(w, h, c, |x, y, ch| {
        let (bx, by) = (x & !1, y & !1);
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if bx + dx < w && by + dy < h {
                sum += img.get(bx + dx, by + dy, ch);
                cnt += 1.0;
            }
        }
        let v = img.get(x, y, ch);
        v + strength * (sum / cnt - v)
    })
}

/// Adds seeded sinusoidal gratings whose frequencies sit at profile radius
/// 0.5..0.9, away from the axes.
fn add_gratings(img: &mut Image, grating: f64, strength: f64, rng: &mut ChaCha8Rng) {
    let n = img.width();
    let half = (n / 2 - 1) as f64;
    let ch = img.channels();
    for _ in 0..3 {
        let r = rng.random_range(0.5..0.9) * half;
        let theta = rng.random_range(0.25..(PI / 2.0 - 0.25))
            + if rng.random_bool(0.5) { PI / 2.0 } else { 0.0 };
        let kx = (r * theta.cos()).round();
        let ky = (r * theta.sin()).round();
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = grating * strength * rng.random_range(0.7..1.0);
        for y in 0..n {
            for x in 0..n {
                let t = 2.0 * PI * (kx * x as f64 + ky * y as f64) / n as f64 + phase;
                let v = amp * t.cos();
                for c in 0..ch {
                    let i = (y * n + x) * ch + c;
                    img.data_mut()[i] += v;
                }
            }
        }
    }
}

/// Generates one item of a batch. Items are independent, so
/// `generate_one(spec, i)` equals item `i` of [`gen_synthetic`].
pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed ^ (spec.kind.tag() << 56),
        index as u64,
    ));
    let mut img = base_image(spec, &mut rng)?;
    match spec.kind {
        SynthKind::Real => {}
        SynthKind::FakeA => {
            add_fingerprint(&mut img, spec.fingerprint, &mut rng);
            img = blockify(&img, spec.strength);
        }
        SynthKind::FakeB => {
            add_fingerprint(&mut img, spec.fingerprint, &mut rng);
            add_gratings(&mut img, spec.grating, spec.strength, &mut rng);
        }
    }
    img.clamp_unit();
    Ok(img)
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}
