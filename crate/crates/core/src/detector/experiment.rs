use std::cell::RefCell;
use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::{Detector, DetectorKind, Preprocess, Preprocessor};
use super::train::{
    evaluate_scores, train_detector, train_detector_with, Defense, DefenseProtocol,
    DetectorTrainConfig, Evaluation, LabeledImage,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lab::{gen_synthetic, perturb_all, PerturbKind, SynthKind, SynthSpec};
use crate::metrics::Label;

/// Caches preprocessing results by image content.
pub struct Memoized<'a> {
    inner: &'a dyn Preprocessor,
    cache: RefCell<HashMap<u64, Image>>,
}

impl<'a> Memoized<'a> {
    pub fn new(inner: &'a dyn Preprocessor) -> Self {
        Self {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn key(img: &Image) -> u64 {
        let mut h = DefaultHasher::new();
        img.dims().hash(&mut h);
        for v in img.data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

impl Preprocessor for Memoized<'_> {
    fn preprocess(&self, img: &Image) -> Result<Image> {
        let k = Self::key(img);
        if let Some(hit) = self.cache.borrow().get(&k) {
            if hit.dims() == img.dims() {
                return Ok(hit.clone());
            }
        }
        let out = self.inner.preprocess(img)?;
        self.cache.borrow_mut().insert(k, out.clone());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub condition: String,
    pub train_family: String,
    pub test_family: String,
    pub r0_or_epoch: String,
    pub acc: f64,
    pub er: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<ExperimentRow>,
    /// Accuracy on the real test images per condition.
    pub real_acc: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "condition,train_family,test_family,r0_or_epoch,acc,er")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.condition, r.train_family, r.test_family, r.r0_or_epoch, r.acc, r.er
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Accuracy of the row matching `condition` and `test_family`.
    pub fn acc(&self, condition: &str, test_family: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.test_family == test_family)
            .map(|r| r.acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub bands: Vec<Option<f64>>,
    pub detector: DetectorTrainConfig,
    /// Template for the synthetic families (kind, count and seed are overridden).
    pub synth: SynthSpec,
    pub seed: u64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            size: 64,
            train_per_class: 400,
            test_per_class: 200,
            bands: vec![None, Some(0.75), Some(0.5), Some(0.25)],
            detector: DetectorTrainConfig {
                epochs: 30,
                ..DetectorTrainConfig::default()
            },
            synth: SynthSpec::default(),
            seed: 0,
        }
    }
}

/// Training data and the held-out test families shared by the experiments.
#[derive(Debug, Clone)]
pub struct BiasCorpus {
    pub train: Vec<LabeledImage>,
    pub test_reals: Vec<Image>,
    /// `(family, fakes)` in report order.
    pub test_fakes: Vec<(String, Vec<Image>)>,
}

pub const TRAIN_FAMILY: &str = "fake-a";

fn synth(cfg: &BiasConfig, kind: SynthKind, count: usize, salt: u64) -> Result<Vec<Image>> {
    let spec = SynthSpec {
        kind,
        size: cfg.size,
        count,
        seed: cfg.seed.wrapping_add(salt),
        ..cfg.synth.clone()
    };
    gen_synthetic(&spec)
}

/// Generates the corpus. FGSM fakes are crafted on a separately trained
/// unprotected pixel CNN (a transfer attack), so every detector faces the
/// same perturbed images.
pub fn build_bias_corpus(cfg: &BiasConfig) -> Result<BiasCorpus> {
    let n_tr = cfg.train_per_class;
    let n_te = cfg.test_per_class;
    let mut train = Vec::with_capacity(2 * n_tr);
    train.extend(
        synth(cfg, SynthKind::Real, n_tr, 1)?
            .into_iter()
            .map(|i| LabeledImage::new(i, Label::Real, "real")),
    );
    train.extend(
        synth(cfg, SynthKind::FakeA, n_tr, 2)?
            .into_iter()
            .map(|i| LabeledImage::new(i, Label::Fake, TRAIN_FAMILY)),
    );
    let test_reals = synth(cfg, SynthKind::Real, n_te, 3)?;
    let fake_a = synth(cfg, SynthKind::FakeA, n_te, 4)?;
    let fake_b = synth(cfg, SynthKind::FakeB, n_te, 5)?;

    let mut surrogate_set = Vec::with_capacity(2 * n_tr);
    surrogate_set.extend(
        synth(cfg, SynthKind::Real, n_tr, 6)?
            .into_iter()
            .map(|i| LabeledImage::new(i, Label::Real, "real")),
    );
    surrogate_set.extend(
        synth(cfg, SynthKind::FakeA, n_tr, 7)?
            .into_iter()
            .map(|i| LabeledImage::new(i, Label::Fake, TRAIN_FAMILY)),
    );
    let surrogate_cfg = DetectorTrainConfig {
        seed: cfg.detector.seed ^ 0x5a11,
        low_pass: None,
        ..cfg.detector.clone()
    };
    let surrogate = train_detector(
        DetectorKind::PixelCnn,
        &surrogate_set,
        &DefenseProtocol::new(Defense::None),
        &surrogate_cfg,
        None,
    )?;

    let mut test_fakes = vec![
        (TRAIN_FAMILY.to_string(), fake_a.clone()),
        ("fake-b".to_string(), fake_b),
    ];
    for (i, kind) in PerturbKind::ALL.iter().enumerate() {
        let attack = (*kind == PerturbKind::Fgsm).then_some((&surrogate, Label::Fake));
        let perturbed = perturb_all(
            &fake_a,
            *kind,
            cfg.seed.wrapping_add(100 + i as u64),
            attack,
        )?;
        test_fakes.push((format!("{TRAIN_FAMILY}+{kind}"), perturbed));
    }
    Ok(BiasCorpus {
        train,
        test_reals,
        test_fakes,
    })
}

fn eval_all(
    det: &Detector,
    corpus: &BiasCorpus,
    pipeline: Option<&dyn Preprocessor>,
) -> Result<(f64, Vec<(String, Evaluation)>)> {
    let real_scores = det.scores(&corpus.test_reals, pipeline)?;
    let real = evaluate_scores(&real_scores, &vec![Label::Real; real_scores.len()])?;
    let mut out = Vec::with_capacity(corpus.test_fakes.len());
    for (family, fakes) in &corpus.test_fakes {
        let s = det.scores(fakes, pipeline)?;
        out.push((
            family.clone(),
            evaluate_scores(&s, &vec![Label::Fake; s.len()])?,
        ));
    }
    Ok((real.real_acc.unwrap_or(0.0), out))
}

fn band_name(r0: Option<f64>) -> (String, String) {
    match r0 {
        None => ("full-band".into(), "none".into()),
        Some(r) => (format!("lowpass-{r}"), format!("{r}")),
    }
}

/// Trains one detector per band on low-passed inputs and tests it on every
/// family and perturbation.
pub fn experiment_bias_bands_on(cfg: &BiasConfig, corpus: &BiasCorpus) -> Result<ExperimentReport> {
    let mut report = ExperimentReport {
        experiment: "bias-bands".into(),
        seed: cfg.seed,
        rows: Vec::new(),
        real_acc: Vec::new(),
    };
    for &band in &cfg.bands {
        if let Some(r0) = band {
            if !(0.0..=1.0).contains(&r0) {
                return Err(Error::invalid(format!("band radius {r0} outside [0, 1]")));
            }
        }
        let dcfg = DetectorTrainConfig {
            low_pass: band,
            ..cfg.detector.clone()
        };
        let det = train_detector(
            DetectorKind::PixelCnn,
            &corpus.train,
            &DefenseProtocol::default(),
            &dcfg,
            None,
        )?;
        let (real_acc, evals) = eval_all(&det, corpus, None)?;
        let (condition, r0) = band_name(band);
        report.real_acc.push((condition.clone(), real_acc));
        for (family, e) in evals {
            report.rows.push(ExperimentRow {
                condition: condition.clone(),
                train_family: TRAIN_FAMILY.into(),
                test_family: family,
                r0_or_epoch: r0.clone(),
                acc: e.acc.expect("fake-only set"),
                er: e.er.expect("fake-only set"),
            });
        }
    }
    Ok(report)
}

pub fn experiment_bias_bands(cfg: &BiasConfig) -> Result<ExperimentReport> {
    experiment_bias_bands_on(cfg, &build_bias_corpus(cfg)?)
}

/// Trains a full-band detector and evaluates every condition after each epoch.
pub fn experiment_bias_epochs_on(
    cfg: &BiasConfig,
    corpus: &BiasCorpus,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport {
        experiment: "bias-epochs".into(),
        seed: cfg.seed,
        rows: Vec::new(),
        real_acc: Vec::new(),
    };
    let dcfg = DetectorTrainConfig {
        low_pass: None,
        ..cfg.detector.clone()
    };
    train_detector_with(
        DetectorKind::PixelCnn,
        &corpus.train,
        &DefenseProtocol::default(),
        &dcfg,
        None,
        |epoch, det| {
            let (real_acc, evals) = eval_all(det, corpus, None)?;
            let tag = format!("{}", epoch + 1);
            report.real_acc.push((format!("epoch-{tag}"), real_acc));
            for (family, e) in evals {
                report.rows.push(ExperimentRow {
                    condition: "epoch".into(),
                    train_family: TRAIN_FAMILY.into(),
                    test_family: family,
                    r0_or_epoch: tag.clone(),
                    acc: e.acc.expect("fake-only set"),
                    er: e.er.expect("fake-only set"),
                });
            }
            Ok(())
        },
    )?;
    Ok(report)
}

pub fn experiment_bias_epochs(cfg: &BiasConfig) -> Result<ExperimentReport> {
    experiment_bias_epochs_on(cfg, &build_bias_corpus(cfg)?)
}

/// Trains one detector per defense and evaluates it on every test family plus
/// the aligned versions of the trained fake family (the alignment attack).
pub fn experiment_defense_on(
    cfg: &BiasConfig,
    corpus: &BiasCorpus,
    defenses: &[Defense],
    pipeline: &dyn Preprocessor,
) -> Result<ExperimentReport> {
    let memo = Memoized::new(pipeline);
    let mut corpus = corpus.clone();
    let attacked = corpus
        .test_fakes
        .iter()
        .find(|(f, _)| f == TRAIN_FAMILY)
        .map(|(_, imgs)| {
            imgs.iter()
                .map(|i| memo.preprocess(i))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?
        .ok_or_else(|| Error::invalid("corpus lacks the trained fake family"))?;
    corpus
        .test_fakes
        .push((format!("{TRAIN_FAMILY}+fa"), attacked));

    let mut report = ExperimentReport {
        experiment: "defense".into(),
        seed: cfg.seed,
        rows: Vec::new(),
        real_acc: Vec::new(),
    };
    let dcfg = DetectorTrainConfig {
        low_pass: None,
        ..cfg.detector.clone()
    };
    for &d in defenses {
        let det = train_detector(
            DetectorKind::PixelCnn,
            &corpus.train,
            &DefenseProtocol::new(d),
            &dcfg,
            Some(&memo),
        )?;
        debug_assert_eq!(
            det.preprocess == Preprocess::Align,
            matches!(d, Defense::P2 | Defense::P3)
        );
        let (real_acc, evals) = eval_all(&det, &corpus, Some(&memo))?;
        report.real_acc.push((d.name().into(), real_acc));
        for (family, e) in evals {
            report.rows.push(ExperimentRow {
                condition: d.name().into(),
                train_family: TRAIN_FAMILY.into(),
                test_family: family,
                r0_or_epoch: "none".into(),
                acc: e.acc.expect("fake-only set"),
                er: e.er.expect("fake-only set"),
            });
        }
    }
    Ok(report)
}
