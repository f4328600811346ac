//! Dense 5-D tensors laid out as (batch, channels, time, height, width).

use std::fmt;

use rand::Rng;

use crate::error::{dim_err, Result};

/// Shape of a [`Tensor5D`] in (N, C, T, H, W) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape([n, c, t, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn t(&self) -> usize {
        self.0[2]
    }
    pub fn h(&self) -> usize {
        self.0[3]
    }
    pub fn w(&self) -> usize {
        self.0[4]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements of one (t, h, w) volume.
    pub fn plane(&self) -> usize {
        self.t() * self.h() * self.w()
    }

    pub fn with_c(mut self, c: usize) -> Self {
        self.0[1] = c;
        self
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, t, h, w] = self.0;
        write!(f, "({n},{c},{t},{h},{w})")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor5D {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor5D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor5D")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor5D {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.0.iter().any(|&d| d == 0) {
            return Err(dim_err!("zero-sized dimension in {shape:?}"));
        }
        if shape.numel() != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {} values, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor5D { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor5D {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor5D {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    /// A (1, len, 1, 1, 1) tensor, the layout used for vectors.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor5D {
            shape: Shape::new(1, values.len(), 1, 1, 1),
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn uniform<R: Rng>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor5D { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        let [_, cs, ts, hs, ws] = self.shape.0;
        (((n * cs + c) * ts + t) * hs + h) * ws + w
    }

    pub fn at(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, t, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Values of item `n`, channel `c`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor5D {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor5D) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor5D) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor5D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = Tensor5D::from_vec(Shape::new(1, 2, 1, 1, 2), vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("needs 4"));
    }

    #[test]
    fn rejects_zero_dim() {
        assert!(Tensor5D::from_vec(Shape::new(1, 0, 1, 1, 1), vec![]).is_err());
    }

    #[test]
    fn index_is_row_major() {
        let t = Tensor5D::from_vec(Shape::new(2, 2, 2, 2, 2), (0..32).map(f64::from).collect())
            .unwrap();
        assert_eq!(t.at(1, 0, 1, 0, 1), 21.0);
        assert_eq!(t.channel(1, 1), &(24..32).map(f64::from).collect::<Vec<_>>()[..]);
    }
}
