//! Dense row-major `f64` tensors and the strided index helpers shared by the ops.

use std::fmt;

/// A dense, row-major, owned `f64` tensor.
///
/// A rank-0 tensor (empty shape) holds exactly one element and is used for scalars.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape's element count.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Self {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Rows `start..start+len` along axis 0, as an owned tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(self.rank() >= 1 && start + len <= self.shape[0], "slice_rows out of range");
        let row = self.data.len() / self.shape[0].max(1);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * row..(start + len) * row].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Self {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let inner = parts[0].shape.clone();
        let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            assert_eq!(p.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Self::new(shape, data)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Self {
        crate::ops::matmul_tensor(self, other)
    }

    /// Rounds every element to the nearest `f32`.
    pub fn to_f32_precision(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.data.len() > SHOWN {
            write!(f, " {head:?}...")
        } else {
            write!(f, " {head:?}")
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// NumPy-style broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` viewed as broadcast to `target`: zero on broadcast axes.
///
/// Panics if `src` cannot broadcast to `target`.
pub fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    assert!(src.len() <= target.len(), "cannot broadcast {src:?} to {target:?}");
    let offset = target.len() - src.len();
    let src_strides = contiguous_strides(src);
    (0..target.len())
        .map(|i| {
            if i < offset {
                0
            } else {
                let d = src[i - offset];
                assert!(
                    d == target[i] || d == 1,
                    "cannot broadcast {src:?} to {target:?}"
                );
                if d == 1 {
                    0
                } else {
                    src_strides[i - offset]
                }
            }
        })
        .collect()
}

/// Calls `f(out_linear, src_linear)` for every position of `shape`, where `src_linear`
/// is computed from `strides` (which may contain zeros for broadcast axes).
pub fn for_each_strided(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut index = vec![0usize; rank];
    let mut src = 0usize;
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut out = 0usize;
    loop {
        let mut s = src;
        for _ in 0..inner {
            f(out, s);
            out += 1;
            s += inner_stride;
        }
        // advance all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            index[axis] += 1;
            src += strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            src -= strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn strided_walk_matches_manual_broadcast() {
        let shape = [2, 3];
        let strides = broadcast_strides(&[3], &shape);
        let mut seen = Vec::new();
        for_each_strided(&shape, &strides, |o, s| seen.push((o, s)));
        assert_eq!(seen, vec![(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 2)]);

        let strides = broadcast_strides(&[2, 1], &shape);
        let mut seen = Vec::new();
        for_each_strided(&shape, &strides, |_, s| seen.push(s));
        assert_eq!(seen, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::new([2], vec![1.0, 2.0]);
        let b = Tensor::new([2], vec![3.0, 4.0]);
        let s = Tensor::stack(&[a, b.clone()]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_rows(1, 1).reshape([2]), b);
    }
}
