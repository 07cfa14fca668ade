//! Dense 4-D tensors in (sample, channel, height, width) order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents `[N, C, H, W]`. Lower-rank data uses trailing singleton extents.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Row-major 64-bit tensor with an optional gradient slot of identical shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::Geometry {
                op: "tensor",
                detail: format!(
                    "{} values do not fill shape {:?} ({} expected)",
                    data.len(),
                    shape,
                    numel(&shape)
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Shape without values; only for serialization skeletons.
    pub(crate) fn hollow(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Vec::new(),
            grad: None,
        }
    }

    /// A `[1, 1, 1, 1]` tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
            grad: None,
        }
    }

    /// A matrix stored as `[rows, cols, 1, 1]`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    /// Number of values in one sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Gathers the listed samples (N axis) into a new tensor.
    pub fn select_samples(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::invalid(format!(
                    "sample index {i} out of range for {:?}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let [_, c, h, w] = self.shape;
        Tensor::from_vec([indices.len(), c, h, w], data)
    }

    /// Gathers the listed channels (C axis) into a new tensor.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
            return Err(Error::invalid(format!(
                "channel index {bad} out of range for {:?}",
                self.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels.len() * plane);
        for i in 0..n {
            for &k in channels {
                let start = (i * c + k) * plane;
                data.extend_from_slice(&self.data[start..start + plane]);
            }
        }
        Tensor::from_vec([n, channels.len(), h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// `alpha * self + beta * other`.
    pub fn lincomb(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "lincomb",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect();
        Tensor::from_vec(self.shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors along the sample axis.
    pub fn concat_samples(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, pc, ph, pw] = p.shape;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_samples",
                    lhs: first.shape,
                    rhs: p.shape,
                });
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec([n, c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn channel_and_sample_selection() {
        let t = Tensor::from_vec([2, 3, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        let c = t.select_channels(&[2, 0]).unwrap();
        assert_eq!(c.shape(), [2, 2, 1, 2]);
        assert_eq!(c.data(), &[4.0, 5.0, 0.0, 1.0, 10.0, 11.0, 6.0, 7.0]);
        let s = t.select_samples(&[1]).unwrap();
        assert_eq!(s.data(), &t.data()[6..]);
        assert!(t.select_samples(&[2]).is_err());
    }

    #[test]
    fn grad_slot_shape_checked() {
        let mut t = Tensor::zeros([1, 1, 2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }
}
