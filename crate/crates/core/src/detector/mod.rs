//! Reference detectors, defense protocols and the frequency-bias experiments.

pub mod experiment;
pub mod model;
pub mod train;

pub use experiment::{
    build_bias_corpus, experiment_bias_bands, experiment_bias_bands_on, experiment_bias_epochs,
    experiment_bias_epochs_on, experiment_defense_on, BiasConfig, BiasCorpus, ExperimentReport,
    ExperimentRow, Memoized,
};
pub use model::{bce, label_for, Detector, DetectorArch, DetectorKind, Preprocess, Preprocessor};
pub use train::{
    evaluate, evaluate_scores, mixup_augment, train_detector, train_detector_with, Defense,
    DefenseProtocol, DetectorTrainConfig, Evaluation, LabeledImage,
};
