//! Dense row-major `f64` tensors.
//!
//! Complex data is stored with a trailing axis of extent 2 holding
//! `(re, im)`. Tensors are immutable once shared through the autodiff tape.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from external data, rejecting inconsistent shapes and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "at flat index {pos} of tensor {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for internal results. Shape consistency is a
    /// debug assertion only.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("{:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
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

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// True when the trailing axis has extent 2.
    pub fn is_complex(&self) -> bool {
        self.shape.last() == Some(&2)
    }

    /// Elementwise complex modulus of a complex tensor; drops the trailing axis.
    pub fn complex_abs(&self) -> Result<Tensor> {
        if !self.is_complex() {
            return Err(Error::shape(
                "complex_abs",
                format!("{:?} has no complex axis", self.shape),
            ));
        }
        let shape = self.shape[..self.ndim() - 1].to_vec();
        let data = self
            .data
            .chunks_exact(2)
            .map(|c| c[0].hypot(c[1]))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Embeds a real tensor as the real part of a complex tensor.
    pub fn to_complex(&self) -> Tensor {
        let mut shape = self.shape.clone();
        shape.push(2);
        let mut data = Vec::with_capacity(self.len() * 2);
        for &v in &self.data {
            data.push(v);
            data.push(0.0);
        }
        Tensor::from_parts(shape, data)
    }

    /// Row-major sub-tensor at `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Result<Tensor> {
        if self.ndim() == 0 || index >= self.shape[0] {
            return Err(Error::shape(
                "index_axis0",
                format!("{index} out of {:?}", self.shape),
            ));
        }
        let inner = self.len() / self.shape[0];
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.expect_same_shape("stack", p)?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Complex inner product `Σ conj(a)·b` of two complex tensors, returned as
/// `(re, im)`.
pub fn complex_inner(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    a.expect_same_shape("complex_inner", b)?;
    if !a.is_complex() {
        return Err(Error::shape(
            "complex_inner",
            format!("{:?} has no complex axis", a.shape()),
        ));
    }
    let mut re = 0.0;
    let mut im = 0.0;
    for (x, y) in a.data().chunks_exact(2).zip(b.data().chunks_exact(2)) {
        re += x[0] * y[0] + x[1] * y[1];
        im += x[0] * y[1] - x[1] * y[0];
    }
    Ok((re, im))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn complex_helpers() {
        let t = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, -2.0]).unwrap();
        assert_eq!(t.complex_abs().unwrap().data(), &[5.0, 2.0]);
        let r = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(r.to_complex().data(), &[1.0, 0.0, 2.0, 0.0]);
        let (re, im) = complex_inner(&t, &t).unwrap();
        assert_eq!((re, im), (29.0, 0.0));
    }

    #[test]
    fn stack_and_index() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.index_axis0(0).unwrap(), a);
        assert!(s.index_axis0(2).is_err());
    }
}
