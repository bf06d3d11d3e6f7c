use super::network::Network;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_EPSILON: f64 = 1e-4;

/// Relative error used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic parameter gradients with central finite differences.
///
/// `loss` maps the network output to `(loss, dloss/doutput)`. Returns the
/// maximum relative error over all entries of all non-frozen parameters.
pub fn grad_check<L>(net: &Network, input: &Tensor, loss: L) -> Result<f64>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    grad_check_sampled(net, input, loss, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_param` evenly spaced entries of
/// each parameter tensor.
pub fn grad_check_sampled<L>(
    net: &Network,
    input: &Tensor,
    loss: L,
    per_param: usize,
) -> Result<f64>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let trace = net.forward(input)?;
    let (_, seed) = loss(trace.output())?;
    let analytic = net.backward(&trace, &seed)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (pi, p) in net.params().iter().enumerate() {
        if p.frozen {
            continue;
        }
        let len = p.value.len();
        let stride = len.div_ceil(per_param.max(1)).max(1);
        for j in (0..len).step_by(stride) {
            let orig = p.value.data()[j];
            probe.params_mut()[pi].value.data_mut()[j] = orig + FD_EPSILON;
            let (lp, _) = loss(&probe.predict(input)?)?;
            probe.params_mut()[pi].value.data_mut()[j] = orig - FD_EPSILON;
            let (lm, _) = loss(&probe.predict(input)?)?;
            probe.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_EPSILON);
            worst = worst.max(relative_error(analytic.params[pi].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of the gradient with respect to the network input.
pub fn input_grad_check<L>(net: &Network, input: &Tensor, loss: L) -> Result<f64>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let trace = net.forward(input)?;
    let (_, seed) = loss(trace.output())?;
    let analytic = net.backward(&trace, &seed)?;
    let mut x = input.clone();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + FD_EPSILON;
        let (lp, _) = loss(&net.predict(&x)?)?;
        x.data_mut()[j] = orig - FD_EPSILON;
        let (lm, _) = loss(&net.predict(&x)?)?;
        x.data_mut()[j] = orig;
        let numeric = (lp - lm) / (2.0 * FD_EPSILON);
        worst = worst.max(relative_error(analytic.input.data()[j], numeric));
    }
    Ok(worst)
}

/// Mean squared error against `target` with its output gradient.
pub fn mse_loss(target: &Tensor) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> + '_ {
    move |out: &Tensor| {
        let n = out.len() as f64;
        let mut g = out.clone();
        let mut l = 0.0;
        for (d, t) in g.data_mut().iter_mut().zip(target.data()) {
            let e = *d - t;
            l += e * e;
            *d = 2.0 * e / n;
        }
        Ok((l / n, g))
    }
}
