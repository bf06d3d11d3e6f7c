use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{
    bce, label_for, Detector, DetectorArch, DetectorKind, Preprocess, Preprocessor,
};
use crate::error::{Error, Result};
use crate::image::{uniform_dims, Image};
use crate::lab::{PerturbKind, PerturbSpec};
use crate::metrics::Label;
use crate::nn::{OptimizerState, Tensor};
use crate::spectral::ideal_lowpass;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
    pub family: String,
}

impl LabeledImage {
    pub fn new(image: Image, label: Label, family: impl Into<String>) -> Self {
        Self {
            image,
            label,
            family: family.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defense {
    None,
    /// Blur, compression and noise augmentation.
    Mda,
    /// Fakes replaced by their aligned version at random.
    P1,
    /// Alignment as preprocessing at training and test time.
    P2,
    /// Preprocessing plus residual mix-up.
    P3,
}

impl Defense {
    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Mda => "mda",
            Defense::P1 => "fa-p1",
            Defense::P2 => "fa-p2",
            Defense::P3 => "fa-p3",
        }
    }

    pub fn needs_alignment(self) -> bool {
        matches!(self, Defense::P1 | Defense::P2 | Defense::P3)
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Defense::None),
            "mda" => Ok(Defense::Mda),
            "p1" | "fa-p1" => Ok(Defense::P1),
            "p2" | "fa-p2" => Ok(Defense::P2),
            "p3" | "fa-p3" => Ok(Defense::P3),
            other => Err(Error::invalid(format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseProtocol {
    pub variant: Defense,
    /// Chance that a training sample is augmented (MDA, P1, P3).
    pub probability: f64,
    /// Use `|delta|` instead of a signed normal draw in the mix-up.
    pub abs_delta: bool,
}

impl Default for DefenseProtocol {
    fn default() -> Self {
        Self {
            variant: Defense::None,
            probability: 0.5,
            abs_delta: false,
        }
    }
}

impl DefenseProtocol {
    pub fn new(variant: Defense) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        Ok(())
    }
}

/// Residual mix-up: the alignment residual `|fake - aligned|`, scaled by
/// `delta`, is added to both the real and the aligned image.
pub fn mixup_augment(
    real: &Image,
    fake: &Image,
    aligned: &Image,
    delta: f64,
) -> Result<(Image, Image)> {
    real.ensure_same_dims(fake)?;
    fake.ensure_same_dims(aligned)?;
    let residual = fake.zip_map(aligned, |f, a| (f - a).abs())?;
    let mut r = real.zip_map(&residual, |v, d| v + delta * d)?;
    let mut f = aligned.zip_map(&residual, |v, d| v + delta * d)?;
    r.clamp_unit();
    f.clamp_unit();
    Ok((r, f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub arch: DetectorArch,
    /// Low-pass radius applied to every input, if any.
    pub low_pass: Option<f64>,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
            arch: DetectorArch::default(),
            low_pass: None,
            seed: 0,
        }
    }
}

fn standardize_profiles(det: &Detector, samples: &[Image]) -> Result<(Vec<f64>, Vec<f64>)> {
    let refs: Vec<&Image> = samples.iter().collect();
    let feats = det.features(&refs)?;
    let len = feats.item_len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; len];
    let mut var = vec![0.0; len];
    for i in 0..samples.len() {
        for (m, v) in mean.iter_mut().zip(feats.item(i)) {
            *m += v / n;
        }
    }
    for i in 0..samples.len() {
        for ((s, v), m) in var.iter_mut().zip(feats.item(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    Ok((mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect()))
}

/// Binary cross-entropy training under a defense protocol. `on_epoch` runs
/// after every epoch with the epoch index and the current detector.
pub fn train_detector_with(
    kind: DetectorKind,
    train: &[LabeledImage],
    protocol: &DefenseProtocol,
    cfg: &DetectorTrainConfig,
    pipeline: Option<&dyn Preprocessor>,
    mut on_epoch: impl FnMut(usize, &Detector) -> Result<()>,
) -> Result<Detector> {
    protocol.validate()?;
    if !train.iter().any(|s| s.label == Label::Real)
        || !train.iter().any(|s| s.label == Label::Fake)
    {
        return Err(Error::invalid(
            "training set must contain both real and fake samples",
        ));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid(
            "batch size and learning rate must be positive",
        ));
    }
    let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let (w, h, c) = uniform_dims(&images)?;
    if w != h {
        return Err(Error::invalid("detector training needs square images"));
    }
    let mut det = Detector::new(kind, cfg.arch.clone(), c, w, cfg.seed)?;
    let variant = protocol.variant;
    let need_pipeline = || -> Result<&dyn Preprocessor> {
        pipeline.ok_or_else(|| {
            Error::invalid(format!("protocol {variant} needs an alignment pipeline"))
        })
    };

    // Fixed inputs (after any preprocessing) and, for P1/P3, aligned fakes.
    let low = |img: &Image| -> Result<Image> {
        match cfg.low_pass {
            Some(r0) => ideal_lowpass(img, r0),
            None => Ok(img.clone()),
        }
    };
    let mut base = Vec::with_capacity(train.len());
    let mut aligned: Vec<Option<Image>> = vec![None; train.len()];
    match variant {
        Defense::P2 | Defense::P3 => {
            let p = need_pipeline()?;
            for s in train {
                base.push(p.preprocess(&s.image)?);
            }
            if variant == Defense::P3 {
                for (i, s) in train.iter().enumerate() {
                    if s.label == Label::Fake {
                        aligned[i] = Some(base[i].clone());
                    }
                }
            }
            det.preprocess = Preprocess::Align;
        }
        Defense::P1 => {
            let p = need_pipeline()?;
            for (i, s) in train.iter().enumerate() {
                base.push(low(&s.image)?);
                if s.label == Label::Fake {
                    aligned[i] = Some(low(&p.preprocess(&s.image)?)?);
                }
            }
        }
        Defense::None | Defense::Mda => {
            for s in train {
                base.push(low(&s.image)?);
            }
        }
    }
    if let (Some(r0), false) = (cfg.low_pass, matches!(variant, Defense::P2 | Defense::P3)) {
        det.preprocess = Preprocess::LowPass { r0 };
    }
    if kind == DetectorKind::ProfileMlp {
        let norm = standardize_profiles(&det, &base)?;
        det.set_norm(norm);
    }

    let reals: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].label == Label::Real)
        .collect();
    let mut opt = OptimizerState::new(cfg.lr, det.network().params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec7_0a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        // Epoch view of the training inputs after stochastic augmentation.
        let mut inputs: Vec<Image> = base.clone();
        match variant {
            Defense::Mda => {
                for (i, img) in inputs.iter_mut().enumerate() {
                    if rng.random_bool(protocol.probability) {
                        let kind = [PerturbKind::Blur, PerturbKind::Compress, PerturbKind::Noise]
                            [rng.random_range(0..3)];
                        let spec = PerturbSpec::sample(kind, &mut rng);
                        *img = low(&spec.apply(&train[i].image, None)?)?;
                    }
                }
            }
            Defense::P1 => {
                for (i, img) in inputs.iter_mut().enumerate() {
                    if let Some(a) = &aligned[i] {
                        if rng.random_bool(protocol.probability) {
                            *img = a.clone();
                        }
                    }
                }
            }
            Defense::P3 => {
                for i in 0..train.len() {
                    if train[i].label != Label::Fake || !rng.random_bool(protocol.probability) {
                        continue;
                    }
                    let j = reals[rng.random_range(0..reals.len())];
                    let mut delta: f64 = StandardNormal.sample(&mut rng);
                    if protocol.abs_delta {
                        delta = delta.abs();
                    }
                    let a = aligned[i].as_ref().expect("aligned fake");
                    let (r, f) = mixup_augment(&base[j], &train[i].image, a, delta)?;
                    inputs[j] = r;
                    inputs[i] = f;
                }
            }
            Defense::None | Defense::P2 => {}
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Image> = batch.iter().map(|&i| &inputs[i]).collect();
            let x = det.features(&refs)?;
            let net = det.network();
            let trace = net.forward(&x)?;
            let probs = trace.output().data();
            let inv = 1.0 / batch.len() as f64;
            let mut seed = Tensor::zeros(&[batch.len(), 1]);
            let mut loss = 0.0;
            for (k, &i) in batch.iter().enumerate() {
                let (l, g) = bce(probs[k], train[i].label);
                loss += l * inv;
                seed.data_mut()[k] = g * inv;
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            let grads = net.backward_from(&trace, &[(det.logit_node(), &seed)])?;
            opt.adam_step(det.network_mut().params_mut(), &grads.params)?;
        }
        on_epoch(epoch, &det)?;
    }
    Ok(det)
}

pub fn train_detector(
    kind: DetectorKind,
    train: &[LabeledImage],
    protocol: &DefenseProtocol,
    cfg: &DetectorTrainConfig,
    pipeline: Option<&dyn Preprocessor>,
) -> Result<Detector> {
    train_detector_with(kind, train, protocol, cfg, pipeline, |_, _| Ok(()))
}

/// Detection results; accuracy is measured on fakes, real accuracy separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub acc: Option<f64>,
    pub er: Option<f64>,
    pub real_acc: Option<f64>,
    pub fakes: usize,
    pub reals: usize,
}

pub fn evaluate_scores(scores: &[f64], labels: &[Label]) -> Result<Evaluation> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("evaluation needs a non-empty test set"));
    }
    let (mut fakes, mut reals, mut fake_ok, mut real_ok) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let hit = label_for(s) == l;
        match l {
            Label::Fake => {
                fakes += 1;
                fake_ok += hit as usize;
            }
            Label::Real => {
                reals += 1;
                real_ok += hit as usize;
            }
        }
    }
    let pct = |ok: usize, n: usize| {
        if n == 0 {
            None
        } else {
            Some(100.0 * ok as f64 / n as f64)
        }
    };
    let acc = pct(fake_ok, fakes);
    Ok(Evaluation {
        acc,
        er: acc.map(|a| 100.0 - a),
        real_acc: pct(real_ok, reals),
        fakes,
        reals,
    })
}

pub fn evaluate(
    detector: &Detector,
    test: &[LabeledImage],
    pipeline: Option<&dyn Preprocessor>,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty test set"));
    }
    let images: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
    evaluate_scores(&detector.scores(&images, pipeline)?, &labels)
}
