//! Fourier analysis substrate: 2D DFT, ideal and Butterworth radial filters,
//! and azimuthally averaged spectral profiles.
//!
//! Two radius normalizations are in use and they are deliberately distinct:
//!
//! * [`filter_radius`] maps the spectrum corner to 1, so an ideal mask of
//!   radius 1 covers every coefficient. Used by [`decompose`] and
//!   [`butterworth_lowpass`].
//! * [`profile_radius`] maps the last profile bin (`N/2 - 1`) to 1. Profiles,
//!   power-law fits and radial rescaling all use this scale so that a fitted
//!   `a * r^b` can be evaluated directly on spectrum coefficients.

use std::cell::RefCell;
use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{uniform_dims, Image};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized in-place 2D FFT of a row-major `height x width` plane.
pub(crate) fn fft2_in_place(buf: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), width * height);
    let row_fft = plan(width, inverse);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        row_fft.process_with_scratch(row, &mut scratch);
    }
    let col_fft = plan(height, inverse);
    let mut scratch = vec![Complex64::default(); col_fft.get_inplace_scratch_len()];
    let mut col = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
}

/// Forward transform of a real plane (unnormalized).
pub(crate) fn fft2_real(plane: &[f64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, width, height, false);
    buf
}

/// Inverse transform including the `1/(MN)` normalization.
pub(crate) fn ifft2(coeffs: &[Complex64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf = coeffs.to_vec();
    fft2_in_place(&mut buf, width, height, true);
    let norm = 1.0 / (width * height) as f64;
    for c in &mut buf {
        *c *= norm;
    }
    buf
}

/// Moves the DC coefficient from `(0, 0)` to `(height/2, width/2)`.
pub fn fftshift<T: Copy>(data: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..height {
        let sy = (y + height / 2) % height;
        for x in 0..width {
            let sx = (x + width / 2) % width;
            out[sy * width + sx] = data[y * width + x];
        }
    }
    out
}

/// Inverse of [`fftshift`], also for odd sizes.
pub fn ifftshift<T: Copy>(data: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..height {
        let sy = (y + height / 2) % height;
        for x in 0..width {
            let sx = (x + width / 2) % width;
            out[y * width + x] = data[sy * width + sx];
        }
    }
    out
}

/// Euclidean distance (in coefficient units) of shifted position `(x, y)`
/// from the centroid `(height/2, width/2)`.
#[inline]
pub fn centroid_distance(x: usize, y: usize, width: usize, height: usize) -> f64 {
    let dx = x as f64 - (width / 2) as f64;
    let dy = y as f64 - (height / 2) as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Distance normalized so the spectrum corner sits at 1.
#[inline]
pub fn filter_radius(x: usize, y: usize, width: usize, height: usize) -> f64 {
    let hw = (width / 2) as f64;
    let hh = (height / 2) as f64;
    centroid_distance(x, y, width, height) / (hw * hw + hh * hh).sqrt()
}

/// Distance normalized so that profile bin `N/2 - 1` sits at 1 (square `N x N`).
#[inline]
pub fn profile_radius(x: usize, y: usize, n: usize) -> f64 {
    centroid_distance(x, y, n, n) / (n / 2 - 1) as f64
}

/// Complex 2D DFT coefficients of an image, one plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    /// One row-major `height x width` plane per channel.
    pub coeffs: Vec<Vec<Complex64>>,
    /// True when DC sits at `(height/2, width/2)`.
    pub shifted: bool,
}

impl Spectrum {
    pub fn channels(&self) -> usize {
        self.coeffs.len()
    }

    pub fn to_shifted(&self) -> Spectrum {
        if self.shifted {
            return self.clone();
        }
        Spectrum {
            coeffs: self
                .coeffs
                .iter()
                .map(|p| fftshift(p, self.width, self.height))
                .collect(),
            shifted: true,
            ..*self
        }
    }

    pub fn to_unshifted(&self) -> Spectrum {
        if !self.shifted {
            return self.clone();
        }
        Spectrum {
            coeffs: self
                .coeffs
                .iter()
                .map(|p| ifftshift(p, self.width, self.height))
                .collect(),
            shifted: false,
            ..*self
        }
    }

    /// Coefficient at array position `(x, y)` of channel `c` (in the current layout).
    pub fn at(&self, x: usize, y: usize, c: usize) -> Complex64 {
        self.coeffs[c][y * self.width + x]
    }

    /// Total energy `sum |F|^2` over all channels.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().flatten().map(|c| c.norm_sqr()).sum()
    }

    /// Multiplies every coefficient of a shifted spectrum by `mask`.
    pub fn apply_mask(&mut self, mask: &FrequencyMask) -> Result<()> {
        if !self.shifted {
            return Err(Error::invalid("masks apply to center-shifted spectra"));
        }
        if mask.width != self.width || mask.height != self.height {
            return Err(Error::invalid("mask size does not match spectrum"));
        }
        for plane in &mut self.coeffs {
            for (c, m) in plane.iter_mut().zip(&mask.values) {
                *c *= *m;
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.coeffs.is_empty() {
            return Err(Error::invalid("empty spectrum"));
        }
        if self.channels() != 1 && self.channels() != 3 {
            return Err(Error::invalid(format!(
                "unsupported channel count {}",
                self.channels()
            )));
        }
        for (c, plane) in self.coeffs.iter().enumerate() {
            if plane.len() != self.width * self.height {
                return Err(Error::invalid(format!(
                    "channel {c} has {} coefficients, declared size is {}x{}",
                    plane.len(),
                    self.width,
                    self.height
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel 2D DFT. With `shift`, DC is moved to the centroid.
pub fn dft2(img: &Image, shift: bool) -> Result<Spectrum> {
    let (w, h, _) = img.dims();
    if w == 0 || h == 0 {
        return Err(Error::invalid("zero-sized image"));
    }
    let coeffs = img
        .planes()
        .iter()
        .map(|p| {
            let f = fft2_real(p, w, h);
            if shift {
                fftshift(&f, w, h)
            } else {
                f
            }
        })
        .collect();
    Ok(Spectrum {
        width: w,
        height: h,
        coeffs,
        shifted: shift,
    })
}

/// Result of an inverse transform: the real part plus the largest discarded
/// imaginary magnitude.
#[derive(Debug, Clone)]
pub struct Inverse {
    pub image: Image,
    pub imag_residue: f64,
}

/// Inverse DFT keeping the real part and reporting the imaginary residue.
/// The output is not clamped.
pub fn idft2_full(spec: &Spectrum) -> Result<Inverse> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut residue = 0.0f64;
    let planes: Vec<Vec<f64>> = spec
        .coeffs
        .iter()
        .map(|p| {
            let unshifted;
            let src = if spec.shifted {
                unshifted = ifftshift(p, w, h);
                &unshifted
            } else {
                p
            };
            ifft2(src, w, h)
                .into_iter()
                .map(|c| {
                    residue = residue.max(c.im.abs());
                    c.re
                })
                .collect()
        })
        .collect();
    Ok(Inverse {
        image: Image::from_planes(w, h, &planes)?,
        imag_residue: residue,
    })
}

pub fn idft2(spec: &Spectrum) -> Result<Image> {
    Ok(idft2_full(spec)?.image)
}

/// Real-valued per-coefficient weights over a center-shifted spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl FrequencyMask {
    /// Binary disc: 1 where [`filter_radius`] `<= r0`.
    pub fn ideal(width: usize, height: usize, r0: f64) -> Self {
        Self::radial(width, height, |r| if r <= r0 { 1.0 } else { 0.0 })
    }

    /// `1 / (1 + (r/r0)^(2*order))` on the [`filter_radius`] scale.
    pub fn butterworth(width: usize, height: usize, r0: f64, order: u32) -> Self {
        Self::radial(width, height, |r| {
            1.0 / (1.0 + (r / r0).powi(2 * order as i32))
        })
    }

    pub fn radial(width: usize, height: usize, f: impl Fn(f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(filter_radius(x, y, width, height)));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            ..*self
        }
    }
}

fn require_square(img: &Image) -> Result<usize> {
    if !img.is_square() {
        return Err(Error::invalid(format!(
            "square image required, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(img.width())
}

fn filtered(img: &Image, mask: &FrequencyMask) -> Result<Image> {
    let mut spec = dft2(img, true)?;
    spec.apply_mask(mask)?;
    idft2(&spec)
}

/// Ideal-filter split into low and high frequency parts; `low + high == img`.
pub fn decompose(img: &Image, r0: f64) -> Result<(Image, Image)> {
    let n = require_square(img)?;
    if !(0.0..=1.0).contains(&r0) {
        return Err(Error::invalid(format!("radius {r0} outside [0, 1]")));
    }
    let mask = FrequencyMask::ideal(n, n, r0);
    let spec = dft2(img, true)?;
    let mut low = spec.clone();
    low.apply_mask(&mask)?;
    let mut high = spec;
    high.apply_mask(&mask.complement())?;
    Ok((idft2(&low)?, idft2(&high)?))
}

/// Low-pass with the ideal disc mask only.
pub fn ideal_lowpass(img: &Image, r0: f64) -> Result<Image> {
    let n = require_square(img)?;
    if !(0.0..=1.0).contains(&r0) {
        return Err(Error::invalid(format!("radius {r0} outside [0, 1]")));
    }
    filtered(img, &FrequencyMask::ideal(n, n, r0))
}

pub fn butterworth_lowpass(img: &Image, r0: f64, order: u32) -> Result<Image> {
    let n = require_square(img)?;
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(Error::invalid(format!("cut-off {r0} outside (0, 1]")));
    }
    if order == 0 {
        return Err(Error::invalid("Butterworth order must be >= 1"));
    }
    filtered(img, &FrequencyMask::butterworth(n, n, r0, order))
}

/// Azimuthally averaged `ln(1 + |F|)` over integer radial bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub bins: Vec<f64>,
    pub radii: Vec<f64>,
}

impl SpectralProfile {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Radii `k / (len - 1)` for `k = 0..len`.
    pub fn radii_for(len: usize) -> Vec<f64> {
        (0..len).map(|k| k as f64 / (len - 1) as f64).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,r_k,value")?;
        for (k, (r, v)) in self.radii.iter().zip(&self.bins).enumerate() {
            writeln!(out, "{k},{r},{v}")?;
        }
        Ok(())
    }
}

fn profile_size(img: &Image) -> Result<usize> {
    let n = require_square(img)?;
    if n % 2 != 0 || n < 4 {
        return Err(Error::invalid(format!(
            "profile needs an even size >= 4, got {n}"
        )));
    }
    Ok(n)
}

/// Radial bin index of every shifted coefficient position (row-major).
pub(crate) fn bin_map(n: usize) -> Vec<usize> {
    let last = n / 2 - 1;
    let mut map = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let k = centroid_distance(x, y, n, n).round() as usize;
            map.push(k.min(last));
        }
    }
    map
}

/// Channel-averaged `ln(1 + |F|)` per shifted coefficient.
fn log_magnitude(img: &Image) -> Result<Vec<f64>> {
    let spec = dft2(img, true)?;
    let inv = 1.0 / spec.channels() as f64;
    let mut acc = vec![0.0; spec.width * spec.height];
    for plane in &spec.coeffs {
        for (a, c) in acc.iter_mut().zip(plane) {
            *a += c.norm().ln_1p();
        }
    }
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

pub fn spectral_profile(img: &Image) -> Result<SpectralProfile> {
    let n = profile_size(img)?;
    let logmag = log_magnitude(img)?;
    let bins_n = n / 2;
    let mut sums = vec![0.0; bins_n];
    let mut counts = vec![0usize; bins_n];
    for (k, v) in bin_map(n).into_iter().zip(logmag) {
        sums[k] += v;
        counts[k] += 1;
    }
    let bins = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    Ok(SpectralProfile {
        bins,
        radii: SpectralProfile::radii_for(bins_n),
    })
}

/// Element-wise mean of profiles; all must share a length.
pub fn average_profiles(profiles: &[SpectralProfile]) -> Result<SpectralProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::invalid("empty profile set"))?;
    let len = first.len();
    if profiles.iter().any(|p| p.len() != len) {
        return Err(Error::invalid("profiles of different lengths"));
    }
    let mut bins = vec![0.0; len];
    for p in profiles {
        for (b, v) in bins.iter_mut().zip(&p.bins) {
            *b += v;
        }
    }
    let inv = 1.0 / profiles.len() as f64;
    bins.iter_mut().for_each(|b| *b *= inv);
    Ok(SpectralProfile {
        bins,
        radii: first.radii.clone(),
    })
}

pub fn mean_profile(imgs: &[Image]) -> Result<SpectralProfile> {
    uniform_dims(imgs)?;
    let profiles = imgs
        .iter()
        .map(spectral_profile)
        .collect::<Result<Vec<_>>>()?;
    average_profiles(&profiles)
}

/// Dense `N x N` grid of mean log-magnitudes, for visualization.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub count: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# mean_log_spectrum N={} count={}",
            self.size, self.count
        )?;
        for row in self.values.chunks_exact(self.size) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn mean_log_spectrum(imgs: &[Image]) -> Result<Heatmap> {
    uniform_dims(imgs)?;
    let n = require_square(&imgs[0])?;
    let mut acc = vec![0.0; n * n];
    for img in imgs {
        for (a, v) in acc.iter_mut().zip(log_magnitude(img)?) {
            *a += v;
        }
    }
    let inv = 1.0 / imgs.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(Heatmap {
        size: n,
        count: imgs.len(),
        values: acc,
    })
}

/// Multiplies every coefficient of a shifted square spectrum by
/// `factor(profile_radius)`. Coefficients where the factor is exactly 1 are
/// left untouched bit for bit.
pub fn rescale_radial(spec: &mut Spectrum, factor: impl Fn(f64) -> f64) -> Result<()> {
    if !spec.shifted || spec.width != spec.height {
        return Err(Error::invalid(
            "radial rescale needs a shifted square spectrum",
        ));
    }
    let n = spec.width;
    if n < 4 {
        return Err(Error::invalid("radial rescale needs size >= 4"));
    }
    for y in 0..n {
        for x in 0..n {
            let f = factor(profile_radius(x, y, n));
            if f == 1.0 {
                continue;
            }
            for plane in &mut spec.coeffs {
                plane[y * n + x] *= f;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, channels: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, channels, |_, _, _| rng.random::<f64>())
    }

    fn impulse(n: usize) -> Image {
        let mut img = Image::zeros(n, n, 1);
        img.set(3, 2, 0, 1.0);
        img
    }

    /// Textbook O(N^4) DFT.
    fn naive_dft(plane: &[f64], n: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); n * n];
        for u in 0..n {
            for v in 0..n {
                let mut acc = Complex64::default();
                for y in 0..n {
                    for x in 0..n {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / n as f64 + (v * x) as f64 / n as f64);
                        acc += Complex64::from_polar(plane[y * n + x], ph);
                    }
                }
                out[u * n + v] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_only_dc() {
        let spec = dft2(&Image::filled(8, 8, 1, 0.5), false).unwrap();
        assert!((spec.at(0, 0, 0).re - 32.0).abs() < 1e-6);
        for (i, c) in spec.coeffs[0].iter().enumerate().skip(1) {
            assert!(c.norm() < 1e-6, "coefficient {i} = {c}");
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let spec = dft2(&impulse(8), true).unwrap();
        for c in &spec.coeffs[0] {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let img = random_image(6, 1, 3);
        let fast = dft2(&img, false).unwrap();
        let slow = naive_dft(&img.plane(0), 6);
        for (a, b) in fast.coeffs[0].iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn parseval_holds() {
        let img = random_image(16, 1, 11);
        let spec = dft2(&img, false).unwrap();
        let pixel_energy: f64 = img.data().iter().map(|v| v * v).sum();
        let rel = (spec.energy() - 256.0 * pixel_energy).abs() / (256.0 * pixel_energy);
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn conjugate_symmetry_for_real_input() {
        let img = random_image(8, 1, 5);
        let spec = dft2(&img, false).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                let a = spec.at(v, u, 0);
                let b = spec.at((8 - v) % 8, (8 - u) % 8, 0);
                assert!((a - b.conj()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_round_trip_odd_and_even() {
        for (w, h) in [(4, 4), (5, 3), (7, 6)] {
            let data: Vec<usize> = (0..w * h).collect();
            assert_eq!(ifftshift(&fftshift(&data, w, h), w, h), data);
            let shifted = fftshift(&data, w, h);
            assert_eq!(shifted[(h / 2) * w + w / 2], 0, "DC lands on the centroid");
        }
    }

    #[test]
    fn inverse_examples() {
        let zero = Spectrum {
            width: 8,
            height: 8,
            coeffs: vec![vec![Complex64::default(); 64]],
            shifted: false,
        };
        assert!(idft2(&zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut dc = zero.clone();
        dc.coeffs[0][0] = Complex64::new(32.0, 0.0);
        let img = idft2(&dc).unwrap();
        assert!(img.data().iter().all(|v| (v - 0.5).abs() < 1e-12));

        let mut bad = zero;
        bad.coeffs[0].pop();
        assert!(matches!(idft2(&bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn round_trip_reports_small_residue() {
        let img = random_image(12, 3, 8);
        let inv = idft2_full(&dft2(&img, true).unwrap()).unwrap();
        assert!(inv.image.max_abs_diff(&img) < 1e-5);
        assert!(inv.imag_residue < 1e-9);
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        assert!(matches!(
            Image::new(0, 0, 1, vec![]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn decompose_extremes() {
        let img = random_image(16, 3, 21);
        let (low, high) = decompose(&img, 0.0).unwrap();
        let means = img.channel_means();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    assert!((low.get(x, y, c) - means[c]).abs() < 1e-9);
                    assert!((high.get(x, y, c) - (img.get(x, y, c) - means[c])).abs() < 1e-9);
                }
            }
        }
        let (low, high) = decompose(&img, 1.0).unwrap();
        assert!(low.max_abs_diff(&img) < 1e-5);
        assert!(high.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn decompose_rejects_non_square() {
        let img = Image::zeros(8, 4, 1);
        assert!(matches!(decompose(&img, 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ideal_mask_partition() {
        let mask = FrequencyMask::ideal(10, 10, 0.4);
        let comp = mask.complement();
        assert!(mask.values.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(mask
            .values
            .iter()
            .zip(&comp.values)
            .all(|(a, b)| a + b == 1.0));
    }

    #[test]
    fn butterworth_examples() {
        let flat = Image::filled(16, 16, 1, 0.3);
        let out = butterworth_lowpass(&flat, 0.3, 2).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-6);

        // (2, 2) off-center on 8x8 is at sqrt(8) / sqrt(32) = 0.5 of the corner distance.
        let imp = impulse(8);
        let out = butterworth_lowpass(&imp, 0.5, 1).unwrap();
        let before = dft2(&imp, true).unwrap();
        let after = dft2(&out, true).unwrap();
        let (x, y) = (4 + 2, 4 + 2);
        let ratio = after.at(x, y, 0).norm() / before.at(x, y, 0).norm();
        assert!((ratio - 0.5).abs() < 1e-12, "ratio {ratio}");

        assert!(butterworth_lowpass(&imp, 0.0, 1).is_err());
        assert!(butterworth_lowpass(&imp, -0.2, 1).is_err());
    }

    /// Random field with a steep spectral fall-off, like natural images.
    fn smooth_random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..24)
            .map(|_| {
                let (fx, fy) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
                let amp = 0.15 / (1.0 + fx * fx + fy * fy);
                (fx, fy, amp, rng.random_range(0.0..6.3))
            })
            .collect();
        Image::from_fn(n, n, 1, |x, y, _| {
            let t = |f: f64, p: usize| 2.0 * std::f64::consts::PI * f * p as f64 / n as f64;
            0.5 + waves
                .iter()
                .map(|&(fx, fy, a, ph)| a * (t(fx, x) + t(fy, y) + ph).sin())
                .sum::<f64>()
        })
    }

    #[test]
    fn butterworth_high_order_approaches_ideal() {
        for seed in 0..5 {
            let img = smooth_random_image(32, 100 + seed);
            let blf = butterworth_lowpass(&img, 0.5, 50).unwrap();
            let (low, _) = decompose(&img, 0.5).unwrap();
            let d = blf.max_abs_diff(&low);
            assert!(d <= 0.02, "seed {seed}: {d}");
        }
    }

    /// Brute-force binning written independently of `bin_map`.
    fn profile_oracle(img: &Image) -> Vec<f64> {
        let n = img.width();
        let spec = dft2(img, false).unwrap();
        let half = n / 2;
        let mut sums = vec![0.0; half];
        let mut counts = vec![0.0; half];
        for u in 0..n {
            for v in 0..n {
                // unshifted frequency -> signed offset from DC in shifted layout
                let fy = if u < n - n / 2 {
                    u as f64
                } else {
                    u as f64 - n as f64
                };
                let fx = if v < n - n / 2 {
                    v as f64
                } else {
                    v as f64 - n as f64
                };
                let k = ((fy * fy + fx * fx).sqrt().round() as usize).min(half - 1);
                let mut m = 0.0;
                for c in 0..img.channels() {
                    m += spec.coeffs[c][u * n + v].norm().ln_1p();
                }
                sums[k] += m / img.channels() as f64;
                counts[k] += 1.0;
            }
        }
        sums.iter().zip(&counts).map(|(s, c)| s / c).collect()
    }

    #[test]
    fn profile_examples() {
        let p = spectral_profile(&impulse(8)).unwrap();
        assert!(p.bins.iter().all(|b| (b - 2f64.ln()).abs() < 1e-12));
        assert_eq!(p.radii, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);

        let p = spectral_profile(&Image::zeros(8, 8, 1)).unwrap();
        assert!(p.bins.iter().all(|&b| b == 0.0));

        let img = Image::filled(8, 8, 1, 0.5);
        let p = spectral_profile(&img).unwrap();
        let oracle = profile_oracle(&img);
        assert!((p.bins[0] - 33f64.ln()).abs() < 1e-12);
        for (a, b) in p.bins.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(p.bins[1..].iter().all(|b| b.abs() < 1e-9));
    }

    #[test]
    fn profile_matches_oracle_on_random_color_images() {
        for seed in 0..4 {
            let img = random_image(10, 3, seed);
            let p = spectral_profile(&img).unwrap();
            for (a, b) in p.bins.iter().zip(profile_oracle(&img)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn profile_rejects_bad_sizes() {
        assert!(spectral_profile(&Image::zeros(8, 6, 1)).is_err());
        assert!(spectral_profile(&Image::zeros(7, 7, 1)).is_err());
    }

    #[test]
    fn mean_profile_examples() {
        let img = random_image(8, 1, 1);
        let single = spectral_profile(&img).unwrap();
        assert_eq!(mean_profile(std::slice::from_ref(&img)).unwrap(), single);
        let twice = mean_profile(&[img.clone(), img.clone()]).unwrap();
        for (a, b) in twice.bins.iter().zip(&single.bins) {
            assert!((a - b).abs() < 1e-12);
        }

        let a = impulse(8);
        let b = a.map(|v| 3.0 * v);
        let m = mean_profile(&[a, b]).unwrap();
        let expect = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!(m.bins.iter().all(|v| (v - expect).abs() < 1e-12));

        assert!(mean_profile(&[]).is_err());
        assert!(mean_profile(&[Image::zeros(8, 8, 1), Image::zeros(10, 10, 1)]).is_err());
    }

    #[test]
    fn mean_log_spectrum_examples() {
        let h = mean_log_spectrum(&[impulse(8)]).unwrap();
        assert!(h.values.iter().all(|v| (v - 2f64.ln()).abs() < 1e-12));
        let h = mean_log_spectrum(&[Image::zeros(8, 8, 1)]).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));

        let (a, b) = (random_image(8, 1, 40), random_image(8, 1, 41));
        let h = mean_log_spectrum(&[a.clone(), b.clone()]).unwrap();
        let sa = dft2(&a, true).unwrap();
        let sb = dft2(&b, true).unwrap();
        for i in 0..64 {
            let want = (sa.coeffs[0][i].norm().ln_1p() + sb.coeffs[0][i].norm().ln_1p()) / 2.0;
            assert!((h.values[i] - want).abs() < 1e-6);
        }
        assert!(mean_log_spectrum(&[]).is_err());

        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# mean_log_spectrum N=8 count=2\n"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn rescale_radial_leaves_unit_factor_untouched() {
        let img = random_image(8, 1, 9);
        let orig = dft2(&img, true).unwrap();
        let mut spec = orig.clone();
        rescale_radial(&mut spec, |r| if r < 0.5 { 1.0 } else { 2.0 }).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let r = profile_radius(x, y, 8);
                let (a, b) = (orig.at(x, y, 0), spec.at(x, y, 0));
                if r < 0.5 {
                    assert_eq!(a, b);
                } else {
                    assert_eq!(a * 2.0, b);
                }
            }
        }
    }
}
