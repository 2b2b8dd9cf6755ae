//! Dense rank-3 arrays in channel-major (CHW) order.
//!
//! One type serves both images (values in `[0, 1]`) and feature maps. All
//! heavy math lives in [`crate::nn`]; this module only provides storage,
//! indexing, and a few elementwise helpers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Shape of a rank-3 tensor, also used in configs to describe image sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl core::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Rank-3 `f64` array, channel-major: index `(c, y, x)` maps to
/// `c * h * w + y * w + x`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: ImageShape,
    data: Vec<f64>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor({})", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: ImageShape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(CoreError::shape(
                format!("{} values for {shape}", shape.len()),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(c, y, x);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Errors unless `other` has this tensor's shape; `what` names the operand
    /// in the message.
    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CoreError::shape(
                format!("{what} of shape {}", self.shape),
                other.shape,
            ))
        }
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// `self += scale * other` (shapes must already match).
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        let mut max = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = fabs(a - b);
            if d > max {
                max = d;
            }
        }
        max
    }

    pub fn squared_l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn fabs(x: f64) -> f64 {
    libm::fabs(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_channel_major() {
        let shape = ImageShape::new(2, 3, 4);
        let mut t = Tensor::zeros(shape);
        *t.at_mut(1, 2, 3) = 7.0;
        assert_eq!(t.data()[1 * 12 + 2 * 4 + 3], 7.0);
        assert_eq!(t.at(1, 2, 3), 7.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let shape = ImageShape::new(1, 2, 2);
        assert!(Tensor::from_vec(shape, vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(shape, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn linf_distance_picks_largest_coordinate_gap() {
        let shape = ImageShape::new(1, 1, 3);
        let a = Tensor::from_vec(shape, vec![0.0, 0.5, 1.0]).unwrap();
        let b = Tensor::from_vec(shape, vec![0.1, 0.2, 1.0]).unwrap();
        assert_eq!(a.linf_distance(&b), 0.3);
    }

    #[test]
    fn clamp_in_place_bounds_values() {
        let shape = ImageShape::new(1, 1, 3);
        let mut t = Tensor::from_vec(shape, vec![-0.5, 0.5, 1.5]).unwrap();
        t.clamp_in_place(0.0, 1.0);
        assert_eq!(t.data(), &[0.0, 0.5, 1.0]);
    }
}
