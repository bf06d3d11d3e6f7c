use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Label;
use crate::nn::format::{self, NamedTensor};
use crate::nn::{images_to_tensor, tensor_to_image, Network, NetworkBuilder, NodeId, Tensor};
use crate::spectral::{ideal_lowpass, spectral_profile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    /// Two-layer perceptron on the standardized spectral profile.
    ProfileMlp,
    /// Three conv+ReLU+pool blocks and a dense scorer.
    PixelCnn,
}

impl DetectorKind {
    fn code(self) -> f64 {
        match self {
            DetectorKind::ProfileMlp => 0.0,
            DetectorKind::PixelCnn => 1.0,
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorKind::ProfileMlp => "profile-mlp",
            DetectorKind::PixelCnn => "pixel-cnn",
        })
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "profile-mlp" => Ok(DetectorKind::ProfileMlp),
            "pixel-cnn" => Ok(DetectorKind::PixelCnn),
            other => Err(Error::invalid(format!("unknown detector kind '{other}'"))),
        }
    }
}

/// Input transform applied before the network, at training and test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Preprocess {
    None,
    LowPass {
        r0: f64,
    },
    /// Full frequency alignment; needs an alignment pipeline at inference.
    Align,
}

impl Preprocess {
    fn encode(self) -> [f64; 2] {
        match self {
            Preprocess::None => [0.0, 0.0],
            Preprocess::LowPass { r0 } => [1.0, r0],
            Preprocess::Align => [2.0, 0.0],
        }
    }

    fn decode(v: &[f64]) -> Result<Self> {
        match v {
            [c, _] if *c == 0.0 => Ok(Preprocess::None),
            [c, r0] if *c == 1.0 => Ok(Preprocess::LowPass { r0: *r0 }),
            [c, _] if *c == 2.0 => Ok(Preprocess::Align),
            _ => Err(Error::InvalidModel("unknown preprocessing record".into())),
        }
    }
}

/// Turns raw images into detector inputs for [`Preprocess::Align`].
pub trait Preprocessor {
    fn preprocess(&self, img: &Image) -> Result<Image>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorArch {
    /// Conv widths of the pixel CNN.
    pub widths: [usize; 3],
    /// Hidden units of the profile MLP.
    pub hidden: usize,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32],
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    kind: DetectorKind,
    arch: DetectorArch,
    channels: usize,
    size: usize,
    pub preprocess: Preprocess,
    net: Network,
    logit: NodeId,
    /// Per-bin mean and standard deviation for the profile MLP.
    norm: Option<(Vec<f64>, Vec<f64>)>,
    seed: u64,
}

impl Detector {
    pub fn new(
        kind: DetectorKind,
        arch: DetectorArch,
        channels: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if size < 8 || !size.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "detector input size {size} must be a multiple of 8"
            )));
        }
        let (net, logit) = match kind {
            DetectorKind::PixelCnn => {
                let mut b = NetworkBuilder::new(&[channels, size, size], seed);
                let mut h = b.input();
                for (i, &w) in arch.widths.iter().enumerate() {
                    let c = b.conv3x3(&format!("block{i}.conv"), h, w);
                    let r = b.relu(c);
                    h = b.max_pool(r);
                }
                let logit = b.dense("score", h, 1);
                let out = b.sigmoid(logit);
                (b.finish(out), logit)
            }
            DetectorKind::ProfileMlp => {
                let mut b = NetworkBuilder::new(&[size / 2], seed);
                let d = b.dense("hidden", b.input(), arch.hidden);
                let r = b.relu(d);
                let logit = b.dense("score", r, 1);
                let out = b.sigmoid(logit);
                (b.finish(out), logit)
            }
        };
        Ok(Self {
            kind,
            arch,
            channels,
            size,
            preprocess: Preprocess::None,
            net,
            logit,
            norm: None,
            seed,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub(crate) fn logit_node(&self) -> NodeId {
        self.logit
    }

    pub(crate) fn set_norm(&mut self, norm: (Vec<f64>, Vec<f64>)) {
        self.norm = Some(norm);
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.channels, self.size)
    }

    fn check(&self, img: &Image) -> Result<()> {
        let (w, h, c) = img.dims();
        if w != self.size || h != self.size || c != self.channels {
            return Err(Error::invalid(format!(
                "detector expects {n}x{n}x{}, got {w}x{h}x{c}",
                self.channels,
                n = self.size
            )));
        }
        Ok(())
    }

    /// Applies the preprocessing descriptor to a raw image.
    pub fn prepare(&self, img: &Image, pipeline: Option<&dyn Preprocessor>) -> Result<Image> {
        self.check(img)?;
        match self.preprocess {
            Preprocess::None => Ok(img.clone()),
            Preprocess::LowPass { r0 } => ideal_lowpass(img, r0),
            Preprocess::Align => pipeline
                .ok_or_else(|| {
                    Error::State("detector needs the alignment pipeline it was trained with".into())
                })?
                .preprocess(img),
        }
    }

    /// Network input for already prepared images.
    pub(crate) fn features(&self, prepared: &[&Image]) -> Result<Tensor> {
        match self.kind {
            DetectorKind::PixelCnn => {
                // Centred pixels; a constant shift leaves input gradients unchanged.
                let mut t = images_to_tensor(prepared)?;
                t.data_mut().iter_mut().for_each(|v| *v -= 0.5);
                Ok(t)
            }
            DetectorKind::ProfileMlp => {
                let len = self.size / 2;
                let mut data = Vec::with_capacity(prepared.len() * len);
                for img in prepared {
                    let p = spectral_profile(img)?;
                    match &self.norm {
                        Some((mean, std)) => data.extend(
                            p.bins
                                .iter()
                                .zip(mean)
                                .zip(std)
                                .map(|((v, m), s)| (v - m) / s),
                        ),
                        None => data.extend(p.bins),
                    }
                }
                Tensor::new(&[prepared.len(), len], data)
            }
        }
    }

    /// Fake-class probabilities for prepared inputs.
    pub(crate) fn scores_prepared(&self, prepared: &[Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(prepared.len());
        for chunk in prepared.chunks(32) {
            let refs: Vec<&Image> = chunk.iter().collect();
            out.extend_from_slice(self.net.predict(&self.features(&refs)?)?.data());
        }
        Ok(out)
    }

    pub fn scores(
        &self,
        images: &[Image],
        pipeline: Option<&dyn Preprocessor>,
    ) -> Result<Vec<f64>> {
        let prepared = images
            .iter()
            .map(|i| self.prepare(i, pipeline))
            .collect::<Result<Vec<_>>>()?;
        self.scores_prepared(&prepared)
    }

    pub fn predict(&self, img: &Image, pipeline: Option<&dyn Preprocessor>) -> Result<Label> {
        Ok(label_for(
            self.scores(std::slice::from_ref(img), pipeline)?[0],
        ))
    }

    /// Binary cross-entropy against `label` and its gradient with respect to
    /// the raw input image.
    pub fn loss_input_gradient(&self, img: &Image, label: Label) -> Result<(f64, Image)> {
        if self.kind != DetectorKind::PixelCnn {
            return Err(Error::UnsupportedDetector(format!(
                "{} is not differentiable in pixel space",
                self.kind
            )));
        }
        if self.preprocess == Preprocess::Align {
            return Err(Error::UnsupportedDetector(
                "alignment preprocessing is not differentiable".into(),
            ));
        }
        let x = self.prepare(img, None)?;
        let trace = self.net.forward(&images_to_tensor(&[&x])?)?;
        let p = trace.output().data()[0];
        let (loss, g) = bce(p, label);
        let seed = Tensor::new(&[1, 1], vec![g])?;
        let grads = self.net.backward_from(&trace, &[(self.logit, &seed)])?;
        let mut grad = tensor_to_image(&grads.input, 0)?;
        if let Preprocess::LowPass { r0 } = self.preprocess {
            grad = ideal_lowpass(&grad, r0)?;
        }
        Ok((loss, grad))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let scalar = |v: Vec<f64>| Tensor::new(&[v.len()], v).expect("dims");
        let a = &self.arch;
        let mut out = vec![
            NamedTensor::new(
                "meta.arch",
                scalar(vec![
                    self.kind.code(),
                    self.channels as f64,
                    self.size as f64,
                    a.widths[0] as f64,
                    a.widths[1] as f64,
                    a.widths[2] as f64,
                    a.hidden as f64,
                ]),
            ),
            NamedTensor::new("meta.preprocess", scalar(self.preprocess.encode().to_vec())),
            NamedTensor::new("meta.seed", format::u64_to_tensor(self.seed)),
        ];
        if let Some((mean, std)) = &self.norm {
            out.push(NamedTensor::new("meta.norm_mean", scalar(mean.clone())));
            out.push(NamedTensor::new("meta.norm_std", scalar(std.clone())));
        }
        out.extend(
            self.net
                .params()
                .iter()
                .map(|p| NamedTensor::new(p.name.clone(), p.value.clone())),
        );
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let arch = format::find(tensors, "meta.arch")?.data().to_vec();
        if arch.len() != 7 || arch.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::InvalidModel(
                "corrupt detector architecture record".into(),
            ));
        }
        let kind = if arch[0] == 0.0 {
            DetectorKind::ProfileMlp
        } else {
            DetectorKind::PixelCnn
        };
        let u = |i: usize| arch[i] as usize;
        let darch = DetectorArch {
            widths: [u(3), u(4), u(5)],
            hidden: u(6),
        };
        let seed = format::tensor_to_u64(format::find(tensors, "meta.seed")?)?;
        let mut det = Self::new(kind, darch, u(1), u(2), seed)
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        det.preprocess = Preprocess::decode(format::find(tensors, "meta.preprocess")?.data())?;
        if let (Ok(m), Ok(s)) = (
            format::find(tensors, "meta.norm_mean"),
            format::find(tensors, "meta.norm_std"),
        ) {
            det.norm = Some((m.data().to_vec(), s.data().to_vec()));
        }
        for p in det.net.params_mut() {
            let t =
                format::find(tensors, &p.name).map_err(|e| Error::InvalidModel(e.to_string()))?;
            if t.dims() != p.value.dims() {
                return Err(Error::InvalidModel(format!(
                    "{}: dims {:?} != {:?}",
                    p.name,
                    t.dims(),
                    p.value.dims()
                )));
            }
            p.value = t.clone();
        }
        Ok(det)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&format::load(path)?)
    }
}

pub fn label_for(score: f64) -> Label {
    if score >= 0.5 {
        Label::Fake
    } else {
        Label::Real
    }
}

/// Binary cross-entropy of probability `p` and its derivative with respect
/// to the logit.
pub fn bce(p: f64, label: Label) -> (f64, f64) {
    let y = if label == Label::Fake { 1.0 } else { 0.0 };
    let pc = p.clamp(1e-12, 1.0 - 1e-12);
    (-(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()), p - y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, 1, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn small(kind: DetectorKind) -> Detector {
        Detector::new(
            kind,
            DetectorArch {
                widths: [2, 3, 4],
                hidden: 5,
            },
            1,
            16,
            3,
        )
        .unwrap()
    }

    struct Invert;

    impl Preprocessor for Invert {
        fn preprocess(&self, img: &Image) -> Result<Image> {
            Ok(img.map(|v| 1.0 - v))
        }
    }

    #[test]
    fn scores_are_probabilities() {
        let imgs: Vec<Image> = (0..5).map(|i| random_image(16, i)).collect();
        for kind in [DetectorKind::PixelCnn, DetectorKind::ProfileMlp] {
            let s = small(kind).scores(&imgs, None).unwrap();
            assert_eq!(s.len(), 5);
            assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(label_for(0.5), Label::Fake);
        assert_eq!(label_for(0.4999), Label::Real);
    }

    #[test]
    fn rejects_wrong_input_size() {
        assert!(small(DetectorKind::PixelCnn)
            .scores(&[random_image(8, 0)], None)
            .is_err());
        assert!(Detector::new(DetectorKind::PixelCnn, DetectorArch::default(), 1, 12, 0).is_err());
    }

    #[test]
    fn preprocessing_descriptor_is_honoured() {
        let img = random_image(16, 1);
        let mut det = small(DetectorKind::PixelCnn);
        det.preprocess = Preprocess::LowPass { r0: 0.3 };
        assert_eq!(
            det.prepare(&img, None).unwrap(),
            ideal_lowpass(&img, 0.3).unwrap()
        );
        det.preprocess = Preprocess::Align;
        assert!(matches!(det.prepare(&img, None), Err(Error::State(_))));
        assert_eq!(
            det.prepare(&img, Some(&Invert)).unwrap(),
            img.map(|v| 1.0 - v)
        );
        assert!(matches!(
            det.loss_input_gradient(&img, Label::Fake),
            Err(Error::UnsupportedDetector(_))
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let img = random_image(16, 2);
        for pre in [Preprocess::None, Preprocess::LowPass { r0: 0.5 }] {
            let mut det = small(DetectorKind::PixelCnn);
            det.preprocess = pre;
            for label in [Label::Real, Label::Fake] {
                let (_, g) = det.loss_input_gradient(&img, label).unwrap();
                let eps = 1e-5;
                for i in (0..img.data().len()).step_by(7) {
                    let mut p = img.clone();
                    p.data_mut()[i] += eps;
                    let mut m = img.clone();
                    m.data_mut()[i] -= eps;
                    let num = (det.loss_input_gradient(&p, label).unwrap().0
                        - det.loss_input_gradient(&m, label).unwrap().0)
                        / (2.0 * eps);
                    assert!(
                        relative_error(g.data()[i], num) < 1e-3 || (g.data()[i] - num).abs() < 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn bce_values() {
        let (l, g) = bce(0.8, Label::Fake);
        assert!((l + 0.8f64.ln()).abs() < 1e-12);
        assert!((g + 0.2).abs() < 1e-12);
        let (l, g) = bce(0.8, Label::Real);
        assert!((l + 0.2f64.ln()).abs() < 1e-12);
        assert!((g - 0.8).abs() < 1e-12);
        assert!(bce(0.0, Label::Fake).0.is_finite());
    }

    #[test]
    fn serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| random_image(16, 10 + i)).collect();
        for kind in [DetectorKind::PixelCnn, DetectorKind::ProfileMlp] {
            let mut det = small(kind);
            det.preprocess = Preprocess::LowPass { r0: 0.4 };
            if kind == DetectorKind::ProfileMlp {
                det.set_norm((vec![0.5; 8], vec![2.0; 8]));
            }
            let path = dir.path().join(format!("{kind}.fqal"));
            det.save(&path).unwrap();
            let back = Detector::load(&path).unwrap();
            // Payloads are f32, so a reload is exact only from the second save on.
            assert_eq!(back.kind(), kind);
            assert_eq!(back.preprocess, Preprocess::LowPass { r0: 0.4f32 as f64 });
            for (a, b) in back
                .scores(&imgs, None)
                .unwrap()
                .iter()
                .zip(det.scores(&imgs, None).unwrap())
            {
                assert!((a - b).abs() < 1e-5);
            }
            back.save(&path).unwrap();
            let again = Detector::load(&path).unwrap();
            assert_eq!(
                again.scores(&imgs, None).unwrap(),
                back.scores(&imgs, None).unwrap()
            );
        }
        let path = dir.path().join("rdc-like.fqal");
        crate::nn::format::save(
            &path,
            &[crate::nn::format::NamedTensor::new(
                "x",
                Tensor::zeros(&[1]),
            )],
        )
        .unwrap();
        assert!(Detector::load(&path).is_err());
    }
}
