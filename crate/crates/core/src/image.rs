//! Floating-point pixel rasters.

use crate::error::{Error, Result};

/// A `width x height` raster with 1 or 3 interleaved channels.
///
/// Pixels are stored row-major with channels interleaved, so the sample for
/// `(x, y, c)` lives at `(y * width + x) * channels + c`. Values are nominally
/// in `[0, 1]`; operations that may leave that range document whether they
/// clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("zero-sized image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && (channels == 1 || channels == 3));
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    /// Builds an image by evaluating `f(x, y, c)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    /// Interleaves per-channel planes (each `width * height`, row-major).
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        if planes.iter().any(|p| p.len() != width * height) {
            return Err(Error::invalid("plane size does not match image dimensions"));
        }
        let mut data = vec![0.0; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Image::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Extracts channel `c` as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Channel-averaged luminance plane.
    pub fn gray_plane(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let inv = 1.0 / self.channels as f64;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect()
    }

    pub fn to_gray(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.gray_plane(),
        }
    }

    /// Clamps in place and returns the fraction of samples that were outside `[0, 1]`.
    pub fn clamp_unit(&mut self) -> f64 {
        let mut clipped = 0usize;
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
                clipped += 1;
            } else if *v > 1.0 {
                *v = 1.0;
                clipped += 1;
            }
        }
        clipped as f64 / self.data.len() as f64
    }

    pub fn clamped(mut self) -> Image {
        self.clamp_unit();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        })
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.width * self.height) as f64;
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        sums.into_iter().map(|s| s / n).collect()
    }
}

/// Checks that every image in a non-empty set has the same dimensions.
pub fn uniform_dims(imgs: &[Image]) -> Result<(usize, usize, usize)> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::invalid("empty image set"))?;
    let dims = first.dims();
    if let Some(bad) = imgs.iter().find(|i| i.dims() != dims) {
        return Err(Error::invalid(format!(
            "mixed image sizes in set: {:?} vs {:?}",
            dims,
            bad.dims()
        )));
    }
    Ok(dims)
}
