use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{images_to_tensor, tensor_to_image, Network, NetworkBuilder, NodeId, Tensor};
use crate::spectral::{decompose, fft2_real, ifft2};

/// Scalar loss with its gradient with respect to the second argument.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Image,
}

/// Frozen feature stack used by the perceptual term. Features are read at
/// the tap nodes; the default stack is three seeded conv+ReLU layers.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    net: Network,
    taps: Vec<NodeId>,
}

pub const EXTRACTOR_WIDTHS: [usize; 3] = [8, 16, 32];

impl FeatureExtractor {
    pub fn seeded(channels: usize, width: usize, height: usize, seed: u64) -> Self {
        Self::with_widths(channels, width, height, &EXTRACTOR_WIDTHS, seed)
    }

    pub fn with_widths(
        channels: usize,
        width: usize,
        height: usize,
        widths: &[usize],
        seed: u64,
    ) -> Self {
        let mut b = NetworkBuilder::new(&[channels, height, width], seed);
        let mut h = b.input();
        let mut taps = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let c = b.conv3x3(&format!("feat{i}"), h, w);
            h = b.relu(c);
            taps.push(h);
        }
        let mut net = b.finish(h);
        net.freeze_all();
        Self { net, taps }
    }

    /// A single layer that passes pixels through unchanged.
    pub fn identity(channels: usize, width: usize, height: usize) -> Self {
        Self {
            net: NetworkBuilder::new(&[channels, height, width], 0).finish(0),
            taps: vec![0],
        }
    }

    pub fn layer_count(&self) -> usize {
        self.taps.len()
    }

    fn check(&self, img: &Image) -> Result<()> {
        let (w, h, c) = img.dims();
        if self.net.input_shape() != [c, h, w] {
            return Err(Error::invalid(format!(
                "extractor expects [C, H, W] = {:?}, image is [{c}, {h}, {w}]",
                self.net.input_shape()
            )));
        }
        Ok(())
    }
}

/// Mean over layers of the mean absolute feature difference, with the
/// gradient with respect to `b`.
pub fn perceptual_loss(a: &Image, b: &Image, extractor: &FeatureExtractor) -> Result<LossGrad> {
    a.ensure_same_dims(b)?;
    extractor.check(a)?;
    let x = images_to_tensor(&[a, b])?;
    let trace = extractor.net.forward(&x)?;
    let k = extractor.taps.len() as f64;
    let mut value = 0.0;
    let mut seeds = Vec::with_capacity(extractor.taps.len());
    for &tap in &extractor.taps {
        let act = trace.activation(tap);
        let (fa, fb) = (act.item(0), act.item(1));
        let len = fa.len() as f64;
        let mut seed = Tensor::zeros(act.dims());
        let half = fa.len();
        let mut sum = 0.0;
        for (j, (va, vb)) in fa.iter().zip(fb).enumerate() {
            let d = vb - va;
            sum += d.abs();
            let sign = if d == 0.0 { 0.0 } else { d.signum() };
            seed.data_mut()[half + j] = sign / (k * len);
        }
        value += sum / len / k;
        seeds.push((tap, seed));
    }
    let seed_refs: Vec<(NodeId, &Tensor)> = seeds.iter().map(|(n, t)| (*n, t)).collect();
    let grads = extractor.net.backward_from(&trace, &seed_refs)?;
    Ok(LossGrad {
        value,
        grad: tensor_to_image(&grads.input, 1)?,
    })
}

/// Mean cubed magnitude of the orthonormal spectral difference (the magnitude
/// doubles as the focusing weight), averaged over channels, with the gradient
/// w.r.t. `b`.
pub fn focal_freq_loss(a: &Image, b: &Image) -> Result<LossGrad> {
    a.ensure_same_dims(b)?;
    if !a.is_square() {
        return Err(Error::invalid("focal frequency loss needs square images"));
    }
    let (w, h, c) = a.dims();
    let mn = (w * h) as f64;
    let norm = mn.sqrt().recip();
    let mut value = 0.0;
    let mut grad_planes = Vec::with_capacity(c);
    for (pa, pb) in a.planes().iter().zip(b.planes()) {
        let diff: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
        let e = fft2_real(&diff, w, h);
        let mut weighted: Vec<Complex64> = Vec::with_capacity(e.len());
        for z in &e {
            let z = z * norm;
            let m = z.norm();
            value += m * m * m;
            weighted.push(z * m);
        }
        let back = ifft2(&weighted, w, h);
        grad_planes.push(
            back.iter()
                .map(|z| -3.0 * norm * z.re / c as f64)
                .collect::<Vec<f64>>(),
        );
    }
    value /= mn * c as f64;
    Ok(LossGrad {
        value,
        grad: Image::from_planes(w, h, &grad_planes)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub perceptual: f64,
    pub focal: f64,
    pub total: f64,
}

/// Dual-domain objective: perceptual term on the low-frequency parts plus
/// `lambda` times the focal frequency term on the high-frequency parts, both
/// split at radius `r`. The gradient is with respect to `output`.
pub fn rdc_loss(
    target: &Image,
    output: &Image,
    r: f64,
    lambda: f64,
    extractor: &FeatureExtractor,
) -> Result<(LossTerms, Image)> {
    target.ensure_same_dims(output)?;
    let (a_low, a_high) = decompose(target, r)?;
    let (b_low, b_high) = decompose(output, r)?;
    let p = perceptual_loss(&a_low, &b_low, extractor)?;
    let f = focal_freq_loss(&a_high, &b_high)?;
    // Both projections are self-adjoint, so the chain rule re-applies them.
    let (gp_low, _) = decompose(&p.grad, r)?;
    let (_, gf_high) = decompose(&f.grad, r)?;
    let grad = gp_low.zip_map(&gf_high, |x, y| x + lambda * y)?;
    let terms = LossTerms {
        perceptual: p.value,
        focal: f.value,
        total: p.value + lambda * f.value,
    };
    Ok((terms, grad))
}
