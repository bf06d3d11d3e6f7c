//! Learned calibration: spectral noising of real images, the encoder-decoder
//! network, its dual-domain loss and training.

pub mod loss;
pub mod model;
pub mod noise;
pub mod train;

pub use loss::{focal_freq_loss, perceptual_loss, rdc_loss, FeatureExtractor, LossGrad, LossTerms};
pub use model::{RdcArch, RdcMeta, RdcModel, DEFAULT_WIDTHS};
pub use noise::{make_noised_real, make_noised_real_detailed, NoiseSpec};
pub use train::{
    train_rdc, write_loss_curve, Augmentations, EpochRecord, RdcTrainConfig, TrainedRdc,
};
