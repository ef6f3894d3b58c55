//! Dense row-major f64 tensors up to rank 4.
//!
//! One global convention: dims are ordered (frames, height, width,
//! channels), last dim fastest-varying. Tensors are immutable once
//! built, all public operations return fresh values, and every public
//! operation leaves only finite elements behind.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    /// Build a tensor, validating rank, extents, element count, and
    /// finiteness.
    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::InvalidShape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in dims {dims:?}")));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} imply {expect} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite element {bad}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of (f, h, w, c) in a rank-4 tensor.
    pub fn offset4(&self, f: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((f * self.dims[1] + h) * self.dims[2] + w) * self.dims[3] + c
    }

    pub fn at4(&self, f: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.offset4(f, h, w, c)]
    }

    /// True when both tensors match in shape and every element is
    /// bit-identical (distinguishes -0.0 from 0.0, unlike `==`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn elementwise(&self, other: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::InvalidShape(format!(
                "elementwise on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| match op {
                ElementwiseOp::Add => a + b,
                ElementwiseOp::Sub => a - b,
                ElementwiseOp::Mul => a * b,
            })
            .collect();
        Tensor::from_vec(self.dims.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|a| a * k).collect();
        Tensor::from_vec(self.dims.clone(), data)
    }

    /// Mean over all elements, summed left to right for determinism.
    pub fn reduce_mean(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v;
        }
        acc / self.data.len() as f64
    }
}

/// Pixel-space video, dims (F, H, W, C), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    tensor: Tensor,
}

impl PixelVideo {
    pub fn new(tensor: Tensor) -> Result<PixelVideo> {
        if tensor.rank() != 4 {
            return Err(Error::InvalidShape(format!(
                "pixel video must be rank 4, got {:?}",
                tensor.dims()
            )));
        }
        let c = tensor.dims()[3];
        if c != 1 && c != 3 {
            return Err(Error::InvalidShape(format!("channels must be 1 or 3, got {c}")));
        }
        if let Some(bad) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(PixelVideo { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn frames(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn at(&self, f: usize, h: usize, w: usize, c: usize) -> f64 {
        self.tensor.at4(f, h, w, c)
    }
}

/// Latent-space video, dims (F_l, H_l, W_l, C_l).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<LatentVideo> {
        if tensor.rank() != 4 {
            return Err(Error::InvalidShape(format!(
                "latent video must be rank 4, got {:?}",
                tensor.dims()
            )));
        }
        Ok(LatentVideo { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn frames(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn at(&self, f: usize, h: usize, w: usize, c: usize) -> f64 {
        self.tensor.at4(f, h, w, c)
    }

    /// Channel slice at one spatiotemporal voxel.
    pub fn voxel(&self, f: usize, h: usize, w: usize) -> &[f64] {
        let start = self.tensor.offset4(f, h, w, 0);
        &self.tensor.data()[start..start + self.channels()]
    }
}
