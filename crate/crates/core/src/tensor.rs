//! Dense rank-4 tensors in (batch, channel, height, width) layout.

use crate::error::{Error, Result};

/// Dense rank-4 array of f32 stored row-major as b -> c -> h -> w, with an
/// optional gradient buffer of identical shape.
///
/// Values are expected to be finite; boundary code (file loaders, batch
/// generators, evaluation entry points) enforces this via
/// [`Tensor4::ensure_finite`]. Training loops instead watch the loss, so a
/// diverging run is flagged rather than aborted.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: (usize, usize, usize, usize),
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor4 {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            dims: (b, c, h, w),
            data: vec![0.0; b * c * h * w],
            grad: None,
        }
    }

    pub fn from_vec(b: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != b * c * h * w {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::from_vec",
                detail: format!(
                    "data length {} != {}x{}x{}x{} = {}",
                    data.len(),
                    b,
                    c,
                    h,
                    w,
                    b * c * h * w
                ),
            });
        }
        Ok(Tensor4 {
            dims: (b, c, h, w),
            data,
            grad: None,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims.0
    }

    pub fn channels(&self) -> usize {
        self.dims.1
    }

    pub fn height(&self) -> usize {
        self.dims.2
    }

    pub fn width(&self) -> usize {
        self.dims.3
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> f32 {
        let (_, cc, hh, ww) = self.dims;
        self.data[((b * cc + c) * hh + i) * ww + j]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, i: usize, j: usize) -> &mut f32 {
        let (_, cc, hh, ww) = self.dims;
        &mut self.data[((b * cc + c) * hh + i) * ww + j]
    }

    /// Contiguous (h*w) plane of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let (_, cc, hh, ww) = self.dims;
        let start = (b * cc + c) * hh * ww;
        &self.data[start..start + hh * ww]
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::set_grad",
                detail: format!("grad length {} != data length {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn same_dims(&self, other: &Tensor4) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor4, scale: f32) {
        debug_assert!(self.same_dims(other));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn l2_distance(&self, other: &Tensor4) -> f64 {
        debug_assert!(self.same_dims(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}
