//! Coarse frequency alignment: power-law modelling of spectral profiles and
//! spectral magnitude rescaling of a fake image toward the real statistics,
//! followed (optionally) by the learned calibration in [`crate::rdc`].

use serde::{Deserialize, Serialize};

use crate::detector::Preprocessor;
use crate::error::{Error, Result};
use crate::image::{uniform_dims, Image};
use crate::metrics::SsimStats;
use crate::rdc::RdcModel;
use crate::spectral::{
    average_profiles, dft2, idft2, rescale_radial, spectral_profile, SpectralProfile,
};

/// `E[profile(r)] ~ a * r^b`, fitted over `[fit_lo, fit_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub fit_lo: f64,
    pub fit_hi: f64,
    /// RMS misfit in log-log space.
    pub residual: f64,
}

impl PowerLawFit {
    pub fn eval(&self, r: f64) -> f64 {
        self.a * r.powf(self.b)
    }
}

/// How the real/fake power-law ratio is applied to the spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Ratio gated by the threshold radius and blended with the sigmoid weight.
    #[default]
    Thresholded,
    /// Bare ratio at every non-DC coefficient.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Number of SSIM-nearest samples retrieved from each corpus.
    pub k: usize,
    /// Threshold radius below which the spectrum is left untouched.
    pub r_t: f64,
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub mode: RescaleMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            k: 50,
            r_t: 0.2,
            fit_lo: 0.2,
            fit_hi: 1.0,
            mode: RescaleMode::Thresholded,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        if !(self.r_t > 0.0 && self.r_t < 1.0) {
            return Err(Error::invalid(format!("r_T = {} outside (0, 1)", self.r_t)));
        }
        if !(self.fit_lo < self.fit_hi) {
            return Err(Error::invalid("fit_lo must be below fit_hi"));
        }
        Ok(())
    }
}

/// Least-squares line through `(ln r, ln value)` of one profile over `[lo, hi]`,
/// skipping `r = 0` and non-positive values.
pub fn fit_profile(profile: &SpectralProfile, lo: f64, hi: f64) -> Result<PowerLawFit> {
    if !(lo < hi) {
        return Err(Error::DegenerateFit(format!(
            "empty fit range [{lo}, {hi}]"
        )));
    }
    let pts: Vec<(f64, f64)> = profile
        .radii
        .iter()
        .zip(&profile.bins)
        .filter(|(&r, &v)| r > 0.0 && r >= lo && r <= hi && v > 0.0)
        .map(|(&r, &v)| (r.ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "{} usable bins in [{lo}, {hi}], need at least 2",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(
            "all usable bins share one radius".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PowerLawFit {
        a: intercept.exp(),
        b: slope,
        fit_lo: lo,
        fit_hi: hi,
        residual,
    })
}

/// Fits the mean of `profiles`.
pub fn fit_power_law(profiles: &[SpectralProfile], lo: f64, hi: f64) -> Result<PowerLawFit> {
    fit_profile(&average_profiles(profiles)?, lo, hi)
}

/// Sigmoid weight: 0 below `r_t`, `1/(1+exp(-(r-r_t)))` at and above it.
pub fn smooth_factor(r: f64, r_t: f64) -> f64 {
    if r < r_t {
        0.0
    } else {
        1.0 / (1.0 + (-(r - r_t)).exp())
    }
}

/// Multiplier applied to a coefficient at profile radius `r`.
///
/// Exactly 1 wherever the weight is 0, so sub-threshold coefficients are
/// untouched. In [`RescaleMode::Plain`] DC is kept as is, since `r^b` is
/// singular there.
pub fn rescale_factor(
    r: f64,
    fit_real: &PowerLawFit,
    fit_fake: &PowerLawFit,
    r_t: f64,
    mode: RescaleMode,
) -> f64 {
    let ratio = |r: f64| (fit_real.a / fit_fake.a) * r.powf(fit_real.b - fit_fake.b);
    match mode {
        RescaleMode::Thresholded => {
            let s = smooth_factor(r, r_t);
            if s == 0.0 {
                1.0
            } else {
                1.0 + (ratio(r) - 1.0) * s
            }
        }
        RescaleMode::Plain => {
            if r == 0.0 {
                1.0
            } else {
                ratio(r)
            }
        }
    }
}

/// Rescaled image before clamping, plus the clamped version's clip fraction.
#[derive(Debug, Clone)]
pub struct Rescaled {
    pub image: Image,
    pub clamp_fraction: f64,
}

pub fn smr_rescale_with(
    fake: &Image,
    fit_real: &PowerLawFit,
    fit_fake: &PowerLawFit,
    r_t: f64,
    mode: RescaleMode,
) -> Result<Rescaled> {
    if !fake.is_square() {
        return Err(Error::invalid("spectral rescaling needs a square image"));
    }
    if !(fit_fake.a > 0.0) || !fit_fake.a.is_finite() {
        return Err(Error::InvalidFit(format!(
            "fake amplitude a- = {} must be > 0",
            fit_fake.a
        )));
    }
    if !(fit_real.a > 0.0) || !fit_real.a.is_finite() {
        return Err(Error::InvalidFit(format!(
            "real amplitude a+ = {} must be > 0",
            fit_real.a
        )));
    }
    let mut spec = dft2(fake, true)?;
    rescale_radial(&mut spec, |r| {
        rescale_factor(r, fit_real, fit_fake, r_t, mode)
    })?;
    let mut image = idft2(&spec)?;
    let clamp_fraction = image.clamp_unit();
    Ok(Rescaled {
        image,
        clamp_fraction,
    })
}

/// Rescales the spectrum of `fake` by the real/fake power-law ratio above `r_t`.
/// Output is clamped to `[0, 1]`.
pub fn smr_rescale(
    fake: &Image,
    fit_real: &PowerLawFit,
    fit_fake: &PowerLawFit,
    r_t: f64,
) -> Result<Image> {
    Ok(smr_rescale_with(fake, fit_real, fit_fake, r_t, RescaleMode::Thresholded)?.image)
}

/// Indices of the `k` highest-SSIM entries, ties broken by lower index.
pub fn rank_by_similarity(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// A corpus with cached grayscale SSIM moments and spectral profiles.
#[derive(Debug, Clone)]
pub struct IndexedCorpus {
    stats: Vec<SsimStats>,
    profiles: Vec<SpectralProfile>,
}

impl IndexedCorpus {
    pub fn new(images: &[Image]) -> Result<Self> {
        uniform_dims(images)?;
        let stats = images
            .iter()
            .map(SsimStats::gray)
            .collect::<Result<Vec<_>>>()?;
        let profiles = images
            .iter()
            .map(spectral_profile)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stats, profiles })
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn profiles(&self) -> &[SpectralProfile] {
        &self.profiles
    }

    pub fn retrieve(&self, query: &SsimStats, k: usize) -> Result<Vec<usize>> {
        if self.len() < k {
            return Err(Error::invalid(format!(
                "corpus of {} images cannot supply K = {k}",
                self.len()
            )));
        }
        let scores = self
            .stats
            .iter()
            .map(|s| query.ssim(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(rank_by_similarity(&scores, k))
    }

    pub fn fit(&self, indices: &[usize], cfg: &AlignConfig) -> Result<PowerLawFit> {
        let picked: Vec<SpectralProfile> =
            indices.iter().map(|&i| self.profiles[i].clone()).collect();
        fit_power_law(&picked, cfg.fit_lo, cfg.fit_hi)
    }
}

/// Returns the indices of the `k` corpus images most similar to `query`.
pub fn retrieve_similar(query: &Image, corpus: &[Image], k: usize) -> Result<Vec<usize>> {
    if corpus.len() < k {
        return Err(Error::invalid(format!(
            "corpus of {} images cannot supply K = {k}",
            corpus.len()
        )));
    }
    let q = SsimStats::gray(query)?;
    let scores = corpus
        .iter()
        .map(|img| q.ssim(&SsimStats::gray(img)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_similarity(&scores, k))
}

/// Everything one rescaling run produced.
#[derive(Debug, Clone)]
pub struct SmrOutcome {
    pub image: Image,
    pub fit_real: PowerLawFit,
    pub fit_fake: PowerLawFit,
    pub real_neighbors: Vec<usize>,
    pub fake_neighbors: Vec<usize>,
    pub clamp_fraction: f64,
}

/// Frozen real and fake corpora plus alignment settings.
#[derive(Debug, Clone)]
pub struct Aligner {
    real: IndexedCorpus,
    fake: IndexedCorpus,
    cfg: AlignConfig,
}

impl Aligner {
    pub fn new(real_corpus: &[Image], fake_corpus: &[Image], cfg: AlignConfig) -> Result<Self> {
        cfg.validate()?;
        let real = IndexedCorpus::new(real_corpus)?;
        let fake = IndexedCorpus::new(fake_corpus)?;
        if real_corpus[0].dims() != fake_corpus[0].dims() {
            return Err(Error::invalid("real and fake corpora differ in image size"));
        }
        for (name, c) in [("real", &real), ("fake", &fake)] {
            if c.len() < cfg.k {
                return Err(Error::invalid(format!(
                    "{name} corpus has {} images, K = {}",
                    c.len(),
                    cfg.k
                )));
            }
        }
        Ok(Self { real, fake, cfg })
    }

    pub fn config(&self) -> &AlignConfig {
        &self.cfg
    }

    pub fn smr_detailed(&self, fake: &Image) -> Result<SmrOutcome> {
        let q = SsimStats::gray(fake)?;
        let real_neighbors = self.real.retrieve(&q, self.cfg.k)?;
        let fake_neighbors = self.fake.retrieve(&q, self.cfg.k)?;
        let fit_real = self.real.fit(&real_neighbors, &self.cfg)?;
        let fit_fake = self.fake.fit(&fake_neighbors, &self.cfg)?;
        let out = smr_rescale_with(fake, &fit_real, &fit_fake, self.cfg.r_t, self.cfg.mode)?;
        Ok(SmrOutcome {
            image: out.image,
            fit_real,
            fit_fake,
            real_neighbors,
            fake_neighbors,
            clamp_fraction: out.clamp_fraction,
        })
    }

    pub fn smr(&self, fake: &Image) -> Result<Image> {
        Ok(self.smr_detailed(fake)?.image)
    }

    /// Rescaling followed by one pass through the calibration model.
    pub fn align(&self, fake: &Image, model: &RdcModel) -> Result<Image> {
        model.infer(&self.smr(fake)?)
    }
}

/// Rescaling plus calibration bundled as a detector preprocessing step.
#[derive(Debug, Clone)]
pub struct AlignPipeline {
    pub aligner: Aligner,
    pub model: RdcModel,
}

impl AlignPipeline {
    pub fn new(aligner: Aligner, model: RdcModel) -> Self {
        Self { aligner, model }
    }

    pub fn align(&self, img: &Image) -> Result<Image> {
        self.aligner.align(img, &self.model)
    }
}

impl Preprocessor for AlignPipeline {
    fn preprocess(&self, img: &Image) -> Result<Image> {
        self.align(img)
    }
}

/// One-shot rescaling against unindexed corpora.
pub fn smr(
    fake: &Image,
    real_corpus: &[Image],
    fake_corpus: &[Image],
    cfg: &AlignConfig,
) -> Result<Image> {
    Aligner::new(real_corpus, fake_corpus, *cfg)?.smr(fake)
}

/// Full two-step alignment: rescaling, then calibration by `model`.
pub fn align(
    fake: &Image,
    real_corpus: &[Image],
    fake_corpus: &[Image],
    cfg: &AlignConfig,
    model: &RdcModel,
) -> Result<Image> {
    Aligner::new(real_corpus, fake_corpus, *cfg)?.align(fake, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::profile_radius;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_profile(n_bins: usize, f: impl Fn(f64) -> f64) -> SpectralProfile {
        let radii = SpectralProfile::radii_for(n_bins);
        SpectralProfile {
            bins: radii.iter().map(|&r| f(r)).collect(),
            radii,
        }
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

    fn smooth_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q): (f64, f64) = (rng.random(), rng.random());
        Image::from_fn(n, n, 1, |x, y, _| {
            let t = 2.0 * std::f64::consts::PI / n as f64;
            0.5 + 0.2 * ((x as f64 * t + p * 6.0).sin() * (2.0 * y as f64 * t + q * 6.0).cos())
        })
    }

    #[test]
    fn noiseless_fits_are_exact() {
        let p = synthetic_profile(32, |r| 3.0 * r.powf(-0.8));
        let f = fit_profile(&p, 0.2, 1.0).unwrap();
        assert!((f.a - 3.0).abs() < 1e-6 && (f.b + 0.8).abs() < 1e-6);
        assert!(f.residual < 1e-9);

        let p = synthetic_profile(32, |_| 5.0);
        let f = fit_profile(&p, 0.2, 1.0).unwrap();
        assert!((f.a - 5.0).abs() < 1e-9 && f.b.abs() < 1e-9);
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        let p = synthetic_profile(32, |_| 0.0);
        assert!(matches!(
            fit_profile(&p, 0.2, 1.0),
            Err(Error::DegenerateFit(_))
        ));
        let p = synthetic_profile(32, |r| r + 1.0);
        assert!(matches!(
            fit_profile(&p, 0.5, 0.52),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn smooth_factor_examples() {
        assert_eq!(smooth_factor(0.2, 0.2), 0.5);
        assert_eq!(smooth_factor(0.1, 0.2), 0.0);
        assert!((smooth_factor(1.0, 0.2) - 0.68997).abs() < 1e-5);
    }

    #[test]
    fn equal_fits_are_identity() {
        let img = smooth_image(16, 2);
        let f = fit(2.0, -1.3);
        let out = smr_rescale(&img, &f, &f, 0.2).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-5);
    }

    #[test]
    fn threshold_at_one_only_touches_the_rim() {
        let img = smooth_image(16, 3);
        let out = smr_rescale(&img, &fit(2.0, -1.0), &fit(1.0, -2.0), 1.0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-5);
    }

    #[test]
    fn per_coefficient_factor_matches_hand_evaluation() {
        let (fr, ff, rt) = (fit(1.5, -1.2), fit(0.9, -2.1), 0.2);
        let n = 16;
        // one high-frequency coefficient pair
        let img = Image::from_fn(n, n, 1, |x, y, _| {
            0.5 + 0.1
                * (2.0 * std::f64::consts::PI * (5.0 * x as f64 + 3.0 * y as f64) / n as f64).cos()
        });
        let before = dft2(&img, true).unwrap();
        let spec_out = {
            let mut s = before.clone();
            rescale_radial(&mut s, |r| {
                rescale_factor(r, &fr, &ff, rt, RescaleMode::Thresholded)
            })
            .unwrap();
            s
        };
        for y in 0..n {
            for x in 0..n {
                let r = profile_radius(x, y, n);
                let s = if r < rt {
                    0.0
                } else {
                    1.0 / (1.0 + (rt - r).exp())
                };
                let hand = 1.0 + (1.5 / 0.9 * r.powf(-1.2 + 2.1) - 1.0) * s;
                let (a, b) = (before.at(x, y, 0), spec_out.at(x, y, 0));
                if r < rt {
                    assert_eq!(a, b);
                } else {
                    assert!((b - a * hand).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn plain_mode_applies_bare_ratio() {
        let (fr, ff) = (fit(1.5, -1.0), fit(1.0, -2.0));
        assert_eq!(rescale_factor(0.0, &fr, &ff, 0.2, RescaleMode::Plain), 1.0);
        let r: f64 = 0.1;
        let want = 1.5 * r.powf(1.0);
        assert!((rescale_factor(r, &fr, &ff, 0.2, RescaleMode::Plain) - want).abs() < 1e-12);
        // the thresholded mode with S = 1 everywhere would coincide
        let thr = 1.0 + (want - 1.0) * 1.0;
        assert!((thr - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_fake_amplitude() {
        let img = smooth_image(16, 1);
        let err = smr_rescale(&img, &fit(1.0, -1.0), &fit(0.0, -1.0), 0.2);
        assert!(matches!(err, Err(Error::InvalidFit(_))));
    }

    #[test]
    fn retrieval_examples() {
        let corpus: Vec<Image> = (0..20).map(|s| smooth_image(16, s)).collect();
        assert_eq!(retrieve_similar(&corpus[7], &corpus, 1).unwrap(), vec![7]);
        let same = vec![corpus[0].clone(); 6];
        assert_eq!(
            retrieve_similar(&corpus[3], &same, 4).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(retrieve_similar(&corpus[0], &corpus[..3], 4).is_err());
    }

    #[test]
    fn retrieval_matches_exhaustive_ranking() {
        let corpus: Vec<Image> = (0..20).map(|s| smooth_image(16, 100 + s)).collect();
        let q = smooth_image(16, 999);
        let got = retrieve_similar(&q, &corpus, 5).unwrap();
        let mut scored: Vec<(f64, usize)> = corpus
            .iter()
            .enumerate()
            .map(|(i, c)| (crate::metrics::ssim(&q, c).unwrap(), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = scored.iter().take(5).map(|p| p.1).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn identical_corpora_make_smr_identity() {
        let corpus: Vec<Image> = (0..6).map(|s| smooth_image(16, s)).collect();
        let cfg = AlignConfig {
            k: 3,
            ..Default::default()
        };
        let out = smr(&corpus[2], &corpus, &corpus, &cfg).unwrap();
        assert!(out.max_abs_diff(&corpus[2]) < 1e-5);
    }
}
