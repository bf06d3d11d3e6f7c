use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::format::{self, NamedTensor};
use crate::nn::{images_to_tensor, tensor_to_image, Network, NetworkBuilder, Tensor};

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Shape of the encoder-decoder: input channels, square size and the channel
/// width of each of the four encoder blocks (decoders mirror them).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdcArch {
    pub channels: usize,
    pub size: usize,
    pub widths: [usize; 4],
}

impl RdcArch {
    pub fn new(channels: usize, size: usize, widths: [usize; 4]) -> Result<Self> {
        let arch = Self {
            channels,
            size,
            widths,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!(
                "unsupported channel count {}",
                self.channels
            )));
        }
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "size {} is not a positive multiple of 16",
                self.size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        Ok(())
    }

    /// Four encoder blocks (two conv+ReLU, then pooling) and four decoder
    /// blocks (upsample, conv+ReLU, concatenation with the mirrored encoder
    /// output, two conv+ReLU). A final conv predicts a residual that is added
    /// to the input; it starts at zero.
    pub fn build(&self, seed: u64) -> Network {
        let mut b = NetworkBuilder::new(&[self.channels, self.size, self.size], seed);
        let mut h = b.input();
        let mut skips = Vec::with_capacity(4);
        for (i, &w) in self.widths.iter().enumerate() {
            let c = b.conv3x3(&format!("enc{i}.conv0"), h, w);
            let c = b.relu(c);
            let c = b.conv3x3(&format!("enc{i}.conv1"), c, w);
            let c = b.relu(c);
            skips.push(c);
            h = b.max_pool(c);
        }
        for j in 0..4 {
            let w = self.widths[3 - j];
            let u = b.upsample(h);
            let u = b.conv3x3(&format!("dec{j}.up"), u, w);
            let u = b.relu(u);
            let cat = b.concat(u, skips[3 - j]);
            let c = b.conv3x3(&format!("dec{j}.conv0"), cat, w);
            let c = b.relu(c);
            let c = b.conv3x3(&format!("dec{j}.conv1"), c, w);
            h = b.relu(c);
        }
        let out = b.conv3x3("head", h, self.channels);
        let out = b.add(out, 0);
        let mut net = b.finish(out);
        // A zero head makes the untrained model the identity map.
        for p in net
            .params_mut()
            .iter_mut()
            .filter(|p| p.name.starts_with("head."))
        {
            p.value.fill(0.0);
        }
        net
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RdcMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Learned calibration network mapping a spectrally distorted image back to
/// the real-image manifold.
#[derive(Debug, Clone)]
pub struct RdcModel {
    arch: RdcArch,
    net: Network,
    pub meta: RdcMeta,
}

impl RdcModel {
    /// Randomly initialized model.
    pub fn new(arch: RdcArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = arch.build(seed);
        Ok(Self {
            arch,
            net,
            meta: RdcMeta {
                seed,
                ..RdcMeta::default()
            },
        })
    }

    pub fn arch(&self) -> &RdcArch {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    fn check(&self, img: &Image) -> Result<()> {
        let (w, h, c) = img.dims();
        if w != self.arch.size || h != self.arch.size || c != self.arch.channels {
            return Err(Error::invalid(format!(
                "model expects {n}x{n}x{}, got {w}x{h}x{c}",
                self.arch.channels,
                n = self.arch.size
            )));
        }
        Ok(())
    }

    /// Single forward pass, clamped to `[0, 1]`.
    pub fn infer(&self, x: &Image) -> Result<Image> {
        Ok(self
            .infer_batch(std::slice::from_ref(x))?
            .pop()
            .expect("one output"))
    }

    pub fn infer_batch(&self, xs: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(8) {
            for x in chunk {
                self.check(x)?;
            }
            let refs: Vec<&Image> = chunk.iter().collect();
            let y = self.net.predict(&images_to_tensor(&refs)?)?;
            for i in 0..chunk.len() {
                let mut img = tensor_to_image(&y, i)?;
                img.clamp_unit();
                out.push(img);
            }
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let a = &self.arch;
        let arch: Vec<f64> = [a.channels, a.size]
            .iter()
            .chain(&a.widths)
            .map(|&v| v as f64)
            .collect();
        let mut out = vec![
            NamedTensor::new("meta.arch", Tensor::new(&[arch.len()], arch).expect("dims")),
            NamedTensor::new("meta.seed", format::u64_to_tensor(self.meta.seed)),
            NamedTensor::new(
                "meta.train",
                Tensor::new(
                    &[2],
                    vec![
                        self.meta.epochs as f64,
                        self.meta.final_loss.unwrap_or(f64::NAN),
                    ],
                )
                .expect("dims"),
            ),
        ];
        out.extend(
            self.net
                .params()
                .iter()
                .map(|p| NamedTensor::new(p.name.clone(), p.value.clone())),
        );
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let arch_t = format::find(tensors, "meta.arch")?;
        let v: Vec<usize> = arch_t
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(())
                }
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidModel("corrupt architecture record".into()))?;
        if v.len() != 6 {
            return Err(Error::InvalidModel(
                "architecture record needs 6 entries".into(),
            ));
        }
        let arch = RdcArch::new(v[0], v[1], [v[2], v[3], v[4], v[5]])
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        let seed = format::tensor_to_u64(format::find(tensors, "meta.seed")?)?;
        let train = format::find(tensors, "meta.train")?;
        let (epochs, loss) = match train.data() {
            [e, l] => (*e as usize, if l.is_finite() { Some(*l) } else { None }),
            _ => {
                return Err(Error::InvalidModel(
                    "training record needs 2 entries".into(),
                ))
            }
        };
        let mut model = Self::new(arch, seed)?;
        model.meta = RdcMeta {
            seed,
            epochs,
            final_loss: loss,
        };
        for p in model.net.params_mut() {
            let t =
                format::find(tensors, &p.name).map_err(|e| Error::InvalidModel(e.to_string()))?;
            if t.dims() != p.value.dims() {
                return Err(Error::InvalidModel(format!(
                    "{}: stored dims {:?}, expected {:?}",
                    p.name,
                    t.dims(),
                    p.value.dims()
                )));
            }
            p.value = t.clone();
        }
        let known = model.net.params().len() + 3;
        if tensors.len() != known {
            return Err(Error::InvalidModel(format!(
                "expected {known} tensors, found {}",
                tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&format::load(path)?)
    }
}
