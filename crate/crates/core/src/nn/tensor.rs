use crate::error::{Error, Result};
use crate::image::Image;

/// Dense row-major tensor of up to four axes (batch, channel, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::invalid(format!(
                "tensor rank {} not in 1..=4",
                dims.len()
            )));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} to {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally sized items along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        if items.iter().any(|t| t.dims != first.dims) {
            return Err(Error::invalid("stacked tensors differ in shape"));
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&dims, data)
    }
}

/// Packs equally sized images into a `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no images to pack"))?;
    let (w, h, c) = first.dims();
    if images.iter().any(|i| i.dims() != (w, h, c)) {
        return Err(Error::invalid("images differ in size"));
    }
    let mut data = Vec::with_capacity(images.len() * w * h * c);
    for img in images {
        for ch in 0..c {
            data.extend(img.data().iter().skip(ch).step_by(c));
        }
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Unpacks batch item `n` of a `[N, C, H, W]` tensor.
pub fn tensor_to_image(t: &Tensor, n: usize) -> Result<Image> {
    if t.dims().len() != 4 {
        return Err(Error::invalid(format!(
            "expected [N, C, H, W], got {:?}",
            t.dims()
        )));
    }
    let (c, h, w) = (t.dims()[1], t.dims()[2], t.dims()[3]);
    let item = t.item(n);
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for (i, v) in item[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
            data[i * c + ch] = *v;
        }
    }
    Image::new(w, h, c, data)
}
