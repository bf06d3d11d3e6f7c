use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{smooth_factor, Rescaled};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::spectral::{dft2, idft2, rescale_radial};

pub const A_PRIME_RANGE: (f64, f64) = (0.5, 2.0);
pub const B_PRIME_RANGE: (f64, f64) = (-4.0, 4.0);

/// Random spectral distortion imitating the effect of spectral rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub a_prime: f64,
    pub b_prime: f64,
    pub r_t: f64,
}

impl NoiseSpec {
    pub fn new(a_prime: f64, b_prime: f64, r_t: f64) -> Result<Self> {
        let spec = Self {
            a_prime,
            b_prime,
            r_t,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, r_t: f64) -> Self {
        Self {
            a_prime: rng.random_range(A_PRIME_RANGE.0..=A_PRIME_RANGE.1),
            b_prime: rng.random_range(B_PRIME_RANGE.0..=B_PRIME_RANGE.1),
            r_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(A_PRIME_RANGE.0..=A_PRIME_RANGE.1).contains(&self.a_prime) {
            return Err(Error::invalid(format!(
                "a' = {} outside [0.5, 2]",
                self.a_prime
            )));
        }
        if !(B_PRIME_RANGE.0..=B_PRIME_RANGE.1).contains(&self.b_prime) {
            return Err(Error::invalid(format!(
                "b' = {} outside [-4, 4]",
                self.b_prime
            )));
        }
        if !(self.r_t > 0.0) || !self.r_t.is_finite() {
            return Err(Error::invalid(format!(
                "threshold radius {} must be > 0",
                self.r_t
            )));
        }
        Ok(())
    }

    /// Multiplier for a coefficient at profile radius `r`; exactly 1 below `r_t`.
    pub fn factor(&self, r: f64) -> f64 {
        let s = smooth_factor(r, self.r_t);
        if s == 0.0 {
            1.0
        } else {
            1.0 + (self.a_prime * r.powf(self.b_prime) - 1.0) * s
        }
    }
}

/// Noises `real` and reports the fraction of values clipped to `[0, 1]`.
pub fn make_noised_real_detailed(real: &Image, spec: &NoiseSpec) -> Result<Rescaled> {
    if !real.is_square() {
        return Err(Error::invalid("noising needs a square image"));
    }
    spec.validate()?;
    let mut s = dft2(real, true)?;
    rescale_radial(&mut s, |r| spec.factor(r))?;
    let mut image = idft2(&s)?;
    let clamp_fraction = image.clamp_unit();
    Ok(Rescaled {
        image,
        clamp_fraction,
    })
}

pub fn make_noised_real(real: &Image, spec: &NoiseSpec) -> Result<Image> {
    Ok(make_noised_real_detailed(real, spec)?.image)
}
