//! Minimal dense tensor: a flat `f64` buffer plus a shape.
//!
//! Layout is row-major (last axis contiguous). Convolutional code uses the
//! NCHW convention. All numeric work in the crate happens in `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::InvalidInput(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidInput(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Dimensions of a 4-D tensor as (n, c, h, w). Panics on other ranks;
    /// used only on internal paths where rank is an invariant.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in add");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// One image (or feature map) sliced out of a batched NCHW tensor,
    /// returned as a C×H×W tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let (b, c, h, w) = self.dims4();
        assert!(n < b);
        let plane = c * h * w;
        Tensor {
            shape: vec![c, h, w],
            data: self.data[n * plane..(n + 1) * plane].to_vec(),
        }
    }
}

/// Concatenates C×H×W or N×C×H×W tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let rank = parts[0].shape().len();
    assert!(rank == 4, "concat_channels expects batched NCHW tensors");
    let (n, _, h, w) = parts[0].dims4();
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    for p in parts {
        let (pn, _, ph, pw) = p.dims4();
        assert_eq!((pn, ph, pw), (n, h, w), "spatial/batch mismatch in concat");
    }
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    let hw = h * w;
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data()[b * pc * hw..(b + 1) * pc * hw];
            let dst = &mut out.data_mut()[(b * total_c + c_off) * hw..(b * total_c + c_off + pc) * hw];
            dst.copy_from_slice(src);
            c_off += pc;
        }
    }
    out
}

/// Splits a channel-axis gradient back into per-part gradients (inverse of
/// [`concat_channels`]).
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let (n, c, h, w) = grad.dims4();
    assert_eq!(channels.iter().sum::<usize>(), c);
    let hw = h * w;
    let mut outs: Vec<Tensor> = channels
        .iter()
        .map(|&pc| Tensor::zeros(&[n, pc, h, w]))
        .collect();
    for b in 0..n {
        let mut c_off = 0;
        for (part, &pc) in outs.iter_mut().zip(channels) {
            let src = &grad.data()[(b * c + c_off) * hw..(b * c + c_off + pc) * hw];
            let dst = &mut part.data_mut()[b * pc * hw..(b + 1) * pc * hw];
            dst.copy_from_slice(src);
            c_off += pc;
        }
    }
    outs
}
