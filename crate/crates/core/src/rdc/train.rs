use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{rdc_loss, FeatureExtractor};
use super::model::{RdcArch, RdcModel, DEFAULT_WIDTHS};
use super::noise::{make_noised_real_detailed, NoiseSpec};
use crate::error::{Error, Result};
use crate::image::{uniform_dims, Image};
use crate::lab::blur;
use crate::nn::{images_to_tensor, tensor_to_image, OptimizerState, Tensor};

/// Training-time augmentations applied to real images before noising, each
/// with probability 1/2. Rotation and colour jitter change the target too;
/// blur and noise only degrade the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentations {
    pub noise: bool,
    pub color_jitter: bool,
    pub blur: bool,
    pub rotation: bool,
}

impl Default for Augmentations {
    fn default() -> Self {
        Self {
            noise: true,
            color_jitter: true,
            blur: true,
            rotation: true,
        }
    }
}

impl Augmentations {
    pub fn none() -> Self {
        Self {
            noise: false,
            color_jitter: false,
            blur: false,
            rotation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdcTrainConfig {
    pub lambda: f64,
    pub lr: f64,
    /// Images per optimizer step. Larger batches (e.g. 80) are supported but
    /// slow on a CPU.
    pub batch_size: usize,
    pub epochs: usize,
    /// Range of the per-batch decomposition radius used by the loss.
    pub radius_range: (f64, f64),
    /// Threshold radius of the spectral noising.
    pub r_t: f64,
    pub widths: [usize; 4],
    pub augment: Augmentations,
    pub seed: u64,
}

impl Default for RdcTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            lr: 1.6e-3,
            batch_size: 8,
            epochs: 20,
            radius_range: (0.1, 0.5),
            r_t: 0.2,
            widths: DEFAULT_WIDTHS,
            augment: Augmentations::default(),
            seed: 0,
        }
    }
}

impl RdcTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda = {} must be > 0",
                self.lambda
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let (lo, hi) = self.radius_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "radius range ({lo}, {hi}) must lie in (0, 1]"
            )));
        }
        if !(self.r_t > 0.0) {
            return Err(Error::invalid("noising threshold must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub clamp_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRdc {
    pub model: RdcModel,
    pub curve: Vec<EpochRecord>,
}

pub fn write_loss_curve<W: Write>(curve: &[EpochRecord], mut out: W) -> Result<()> {
    writeln!(out, "epoch,loss,lr,clamp_fraction")?;
    for r in curve {
        writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.lr, r.clamp_fraction)?;
    }
    Ok(())
}

fn rotate90(img: &Image, turns: usize) -> Image {
    let n = img.width();
    let mut out = img.clone();
    for _ in 0..turns % 4 {
        let src = out.clone();
        out = Image::from_fn(n, n, img.channels(), |x, y, c| src.get(y, n - 1 - x, c));
    }
    out
}

/// Geometric and photometric augmentation shared by input and target.
fn augment_pair(img: &Image, aug: &Augmentations, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    if aug.rotation && rng.random_bool(0.5) {
        out = rotate90(&out, rng.random_range(1..4));
    }
    if aug.color_jitter && rng.random_bool(0.5) {
        let gain = rng.random_range(0.9..1.1);
        let offset = rng.random_range(-0.05..0.05);
        let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
        out = out.map(|v| (v - mean) * gain + mean + offset);
        out.clamp_unit();
    }
    out
}

/// Blur and additive noise corrupt the network input only, so the model
/// also learns to undo them.
fn corrupt_input(img: &Image, aug: &Augmentations, rng: &mut ChaCha8Rng) -> Result<Image> {
    let mut out = img.clone();
    if aug.blur && rng.random_bool(0.5) {
        out = blur(&out, 3)?;
    }
    if aug.noise && rng.random_bool(0.5) {
        let sigma = rng.random_range(0.0..3.0) / 255.0;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma > 0");
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v += normal.sample(rng));
        }
        out.clamp_unit();
    }
    Ok(out)
}

/// Trains the calibration network on real images only: each real image is
/// augmented, spectrally noised with a fresh random spec, and the network
/// learns to undo the distortion under the dual-domain loss.
pub fn train_rdc(reals: &[Image], cfg: &RdcTrainConfig) -> Result<TrainedRdc> {
    if reals.is_empty() {
        return Err(Error::invalid("RDC training needs at least one real image"));
    }
    cfg.validate()?;
    let (w, h, c) = uniform_dims(reals)?;
    if w != h {
        return Err(Error::invalid(format!(
            "RDC training needs square images, got {w}x{h}"
        )));
    }
    let arch = RdcArch::new(c, w, cfg.widths)?;
    let mut model = RdcModel::new(arch, cfg.seed)?;
    let extractor = FeatureExtractor::seeded(c, w, h, cfg.seed ^ 0x5eed_fea7);
    let mut opt = OptimizerState::new(cfg.lr, model.network().params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_ab1e);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..reals.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr;
        let (mut loss_sum, mut clamp_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let r = rng.random_range(cfg.radius_range.0..=cfg.radius_range.1);
            let mut targets = Vec::with_capacity(batch.len());
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let target = augment_pair(&reals[i], &cfg.augment, &mut rng);
                let corrupted = corrupt_input(&target, &cfg.augment, &mut rng)?;
                let spec = NoiseSpec::sample(&mut rng, cfg.r_t);
                let noised = make_noised_real_detailed(&corrupted, &spec)?;
                clamp_sum += noised.clamp_fraction;
                inputs.push(noised.image);
                targets.push(target);
            }
            let x = images_to_tensor(&inputs.iter().collect::<Vec<_>>())?;
            let net = model.network();
            let trace = net.forward(&x)?;
            let out = trace.output();
            let mut grad = Tensor::zeros(out.dims());
            let item = out.item_len();
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for (k, target) in targets.iter().enumerate() {
                let y = tensor_to_image(out, k).map_err(|_| Error::TrainingDiverged {
                    epoch,
                    loss: f64::NAN,
                })?;
                let (terms, g) = rdc_loss(target, &y, r, cfg.lambda, &extractor)?;
                batch_loss += terms.total;
                let gt = images_to_tensor(&[&g])?;
                for (d, v) in grad.data_mut()[k * item..(k + 1) * item]
                    .iter_mut()
                    .zip(gt.data())
                {
                    *d = v * inv;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            let grads = net.backward(&trace, &grad)?;
            if grads.params.iter().any(|g| !g.all_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: batch_loss * inv,
                });
            }
            opt.adam_step(model.network_mut().params_mut(), &grads.params)?;
        }
        let n = reals.len() as f64;
        let loss = loss_sum / n;
        curve.push(EpochRecord {
            epoch,
            loss,
            lr,
            clamp_fraction: clamp_sum / n,
        });
        opt.end_epoch(loss);
    }
    model.meta.epochs = cfg.epochs;
    model.meta.final_loss = curve.last().map(|r| r.loss);
    Ok(TrainedRdc { model, curve })
}
