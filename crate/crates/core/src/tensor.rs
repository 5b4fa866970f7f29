//! Minimal dense row-major f64 tensor used by the simulator and the graph
//! interpreter.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Self { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    /// Panics if `data.len()` does not match the product of `dims`.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match dims {dims:?}"
        );
        Self { dims: dims.to_vec(), data }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            for axis in (0..dims.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < dims[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        t
    }

    pub fn random(dims: &[usize], rng: &mut impl Rng, scale: f64) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for axis in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.dims[axis + 1];
        }
        strides
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Product of all dims except the trailing two.
    pub fn batch(&self) -> usize {
        self.dims[..self.dims.len().saturating_sub(2)].iter().product()
    }

    /// (rows, cols) of the trailing matrix.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (1, 1),
            1 => (1, self.dims[0]),
            n => (self.dims[n - 2], self.dims[n - 1]),
        }
    }

    /// Row-major slice of the `b`-th trailing matrix.
    pub fn matrix(&self, b: usize) -> &[f64] {
        let (r, c) = self.matrix_dims();
        &self.data[b * r * c..(b + 1) * r * c]
    }

    pub fn matrix_mut(&mut self, b: usize) -> &mut [f64] {
        let (r, c) = self.matrix_dims();
        &mut self.data[b * r * c..(b + 1) * r * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), self.data.len(), "reshape changes size");
        self.dims = dims.to_vec();
        self
    }

    /// General axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let src_strides = self.strides();
        Self::from_fn(&out_dims, |idx| {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum();
            self.data[off]
        })
    }

    /// Numpy-style right-aligned broadcast of `self` to `dims`.
    pub fn broadcast_to(&self, dims: &[usize]) -> Option<Self> {
        if self.dims.len() > dims.len() {
            return None;
        }
        let lead = dims.len() - self.dims.len();
        for (i, &d) in self.dims.iter().enumerate() {
            if d != 1 && d != dims[lead + i] {
                return None;
            }
        }
        let strides = self.strides();
        Some(Self::from_fn(dims, |idx| {
            let mut off = 0;
            for (i, &d) in self.dims.iter().enumerate() {
                if d != 1 {
                    off += idx[lead + i] * strides[i];
                }
            }
            self.data[off]
        }))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on differently shaped tensors");
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
    fn permute_swaps_trailing_axes() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = t.permute(&[0, 2, 1]);
        assert_eq!(p.dims(), &[2, 4, 3]);
        assert_eq!(p.get(&[1, 3, 2]), 123.0);
    }

    #[test]
    fn broadcast_right_aligned() {
        let row = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let b = row.broadcast_to(&[2, 2, 3]).unwrap();
        assert_eq!(b.get(&[1, 1, 2]), 3.0);
        assert!(row.broadcast_to(&[2, 4]).is_none());
    }
}
