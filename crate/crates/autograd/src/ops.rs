//! Differentiable primitives. Composite operations live in [`crate::nn`].

use std::rc::Rc;

use crate::tensor::{broadcast_shape, broadcast_strides, for_each_strided, numel, Tensor};
use crate::var::{Backward, Var};

// ----- tensor-level kernels ---------------------------------------------------------

fn broadcast_to_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let strides = broadcast_strides(t.shape(), shape);
    let src = t.data();
    let mut out = vec![0.0; numel(shape)];
    for_each_strided(shape, &strides, |o, s| out[o] = src[s]);
    Tensor::new(shape, out)
}

fn sum_to_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let strides = broadcast_strides(shape, t.shape());
    let src = t.data();
    let mut out = vec![0.0; numel(shape)];
    for_each_strided(t.shape(), &strides, |o, s| out[s] += src[o]);
    Tensor::new(shape, out)
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    let a = broadcast_to_tensor(a, &shape);
    let b = broadcast_to_tensor(b, &shape);
    a.zip_map(&b, f)
}

pub(crate) fn matmul_tensor(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands");
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: all three buffers are dense row-major with the strides given.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                k as isize,
                1,
                b.data().as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new([m, n], out)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    assert_eq!(perm.len(), t.rank(), "permutation rank mismatch");
    let in_strides = crate::tensor::contiguous_strides(t.shape());
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    for_each_strided(&shape, &strides, |o, s| out[o] = src[s]);
    Tensor::new(shape, out)
}

/// (outer, dim, inner) factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, dim, inner) = split_axis(t.shape(), axis);
    assert!(start + len <= dim, "narrow {start}+{len} exceeds axis size {dim}");
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let src = t.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    Tensor::new(shape, out)
}

fn embed_tensor(t: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    assert!(start + len <= full, "embed {start}+{len} exceeds axis size {full}");
    let mut shape = t.shape().to_vec();
    shape[axis] = full;
    let src = t.data();
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape, out)
}

fn index_select_tensor(t: &Tensor, index: &[usize]) -> Tensor {
    let rows = t.shape()[0];
    let row = t.numel() / rows.max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = index.len();
    let mut out = Vec::with_capacity(index.len() * row);
    for &i in index {
        assert!(i < rows, "index {i} out of range for {rows} rows");
        out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(shape, out)
}

fn index_add_tensor(t: &Tensor, index: &[usize], rows: usize) -> Tensor {
    let row = if index.is_empty() { 0 } else { t.numel() / index.len() };
    let mut shape = t.shape().to_vec();
    shape[0] = rows;
    let mut out = vec![0.0; numel(&shape)];
    for (r, &i) in index.iter().enumerate() {
        let dst = &mut out[i * row..(i + 1) * row];
        for (d, s) in dst.iter_mut().zip(&t.data()[r * row..(r + 1) * row]) {
            *d += s;
        }
    }
    Tensor::new(shape, out)
}

/// Kernel geometry for [`Var::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
}

impl Patch {
    pub fn same(k: usize) -> Self {
        Self { kh: k, kw: k, pad: k / 2, stride: 1 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(h + 2 * self.pad >= self.kh && w + 2 * self.pad >= self.kw, "kernel larger than input");
        ((h + 2 * self.pad - self.kh) / self.stride + 1, (w + 2 * self.pad - self.kw) / self.stride + 1)
    }
}

/// Visits (column-matrix offset, image offset) pairs; each pair covers `c` contiguous values.
fn for_each_patch_pair(shape: &[usize], p: Patch, mut f: impl FnMut(usize, usize)) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = p.output_hw(h, w);
    let k = p.kh * p.kw * c;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                for ky in 0..p.kh {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.kw {
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let col = row * k + (ky * p.kw + kx) * c;
                        let img = ((b * h + iy as usize) * w + ix as usize) * c;
                        f(col, img);
                    }
                }
            }
        }
    }
}

fn im2col_tensor(t: &Tensor, p: Patch) -> Tensor {
    assert_eq!(t.rank(), 4, "im2col expects [n, h, w, c]");
    let s = t.shape();
    let c = s[3];
    let (ho, wo) = p.output_hw(s[1], s[2]);
    let rows = s[0] * ho * wo;
    let k = p.kh * p.kw * c;
    let mut out = vec![0.0; rows * k];
    let src = t.data();
    for_each_patch_pair(s, p, |col, img| out[col..col + c].copy_from_slice(&src[img..img + c]));
    Tensor::new([rows, k], out)
}

fn col2im_tensor(t: &Tensor, p: Patch, image_shape: &[usize]) -> Tensor {
    let c = image_shape[3];
    let mut out = vec![0.0; numel(image_shape)];
    let src = t.data();
    for_each_patch_pair(image_shape, p, |col, img| {
        for (d, s) in out[img..img + c].iter_mut().zip(&src[col..col + c]) {
            *d += s;
        }
    });
    Tensor::new(image_shape, out)
}

/// A fixed linear resampling of the spatial grid of `[n, h, w, c]` images.
///
/// Output pixel `p` is `sum(weight * input[q])` over its taps `(q, weight)`; channels and
/// batch entries are treated independently. Flips, shifts, affine warps with bilinear
/// sampling and resizes are all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    taps: Vec<Vec<(usize, f64)>>,
}

impl SpatialMap {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize), taps: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(taps.len(), out_hw.0 * out_hw.1, "one tap list per output pixel");
        let n_in = in_hw.0 * in_hw.1;
        assert!(taps.iter().flatten().all(|&(q, _)| q < n_in), "tap outside input grid");
        Self { in_hw, out_hw, taps }
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self::new((h, w), (h, w), (0..h * w).map(|p| vec![(p, 1.0)]).collect())
    }

    /// Maps output pixel (y, x) to the input pixel returned by `src`, or to zero.
    pub fn from_pixel_fn(
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        src: impl Fn(usize, usize) -> Option<(usize, usize)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for y in 0..out_hw.0 {
            for x in 0..out_hw.1 {
                taps.push(match src(y, x) {
                    Some((sy, sx)) => vec![(sy * in_hw.1 + sx, 1.0)],
                    None => Vec::new(),
                });
            }
        }
        Self::new(in_hw, out_hw, taps)
    }

    /// Bilinear sampling at input coordinates `src(y, x) -> (sy, sx)` in pixel units,
    /// with zero padding outside the grid.
    pub fn bilinear(
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        src: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let (ih, iw) = (in_hw.0 as isize, in_hw.1 as isize);
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for y in 0..out_hw.0 {
            for x in 0..out_hw.1 {
                let (sy, sx) = src(y, x);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let mut list = Vec::with_capacity(4);
                for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                        let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                        let wgt = wy * wx;
                        if wgt != 0.0 && yy >= 0 && yy < ih && xx >= 0 && xx < iw {
                            list.push((yy as usize * in_hw.1 + xx as usize, wgt));
                        }
                    }
                }
                taps.push(list);
            }
        }
        Self::new(in_hw, out_hw, taps)
    }

    pub fn transposed(&self) -> Self {
        let mut taps = vec![Vec::new(); self.in_hw.0 * self.in_hw.1];
        for (p, list) in self.taps.iter().enumerate() {
            for &(q, w) in list {
                taps[q].push((p, w));
            }
        }
        Self { in_hw: self.out_hw, out_hw: self.in_hw, taps }
    }

    fn apply(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        assert!(
            t.rank() == 4 && (s[1], s[2]) == self.in_hw,
            "spatial map expects [n, {}, {}, c], got {:?}",
            self.in_hw.0,
            self.in_hw.1,
            s
        );
        let (n, c) = (s[0], s[3]);
        let n_in = self.in_hw.0 * self.in_hw.1;
        let n_out = self.out_hw.0 * self.out_hw.1;
        let src = t.data();
        let mut out = vec![0.0; n * n_out * c];
        for b in 0..n {
            for (p, list) in self.taps.iter().enumerate() {
                let dst = &mut out[(b * n_out + p) * c..(b * n_out + p + 1) * c];
                for &(q, w) in list {
                    let from = &src[(b * n_in + q) * c..(b * n_in + q + 1) * c];
                    for (d, v) in dst.iter_mut().zip(from) {
                        *d += w * v;
                    }
                }
            }
        }
        Tensor::new([n, self.out_hw.0, self.out_hw.1, c], out)
    }
}

// ----- backward rules -----------------------------------------------------------------

struct AddOp;
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_to(inputs[0].shape())), Some(g.sum_to(inputs[1].shape()))]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_to(inputs[0].shape())), Some(g.neg().sum_to(inputs[1].shape()))]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            a.requires_grad().then(|| g.mul(b).sum_to(a.shape())),
            b.requires_grad().then(|| g.mul(a).sum_to(b.shape())),
        ]
    }
}

struct DivOp;
impl Backward for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, g: &Var, inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            a.requires_grad().then(|| g.div(b).sum_to(a.shape())),
            b.requires_grad().then(|| g.mul(out).div(b).neg().sum_to(b.shape())),
        ]
    }
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.0))]
    }
}

struct AddScalarOp;
impl Backward for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

struct PowfOp(f64);
impl Backward for PowfOp {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let p = self.0;
        vec![Some(g.mul(&inputs[0].powf(p - 1.0).scale(p)))]
    }
}

struct ExpOp;
impl Backward for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(out))]
    }
}

struct LnOp;
impl Backward for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.div(&inputs[0]))]
    }
}

struct ReluOp;
impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let mask = inputs[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        vec![Some(g.mul(&Var::constant(mask)))]
    }
}

struct SumToOp;
impl Backward for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_to(inputs[0].shape()))]
    }
}

struct BroadcastToOp;
impl Backward for BroadcastToOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_to(inputs[0].shape()))]
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reshape(inputs[0].shape()))]
    }
}

struct PermuteOp(Vec<usize>);
impl Backward for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let mut inverse = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inverse[p] = i;
        }
        vec![Some(g.permute(&inverse))]
    }
}

struct MatmulOp;
impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            a.requires_grad().then(|| g.matmul(&b.t())),
            b.requires_grad().then(|| a.t().matmul(g)),
        ]
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
}
impl Backward for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.embed(self.axis, self.start, inputs[0].shape()[self.axis]))]
    }
}

struct EmbedOp {
    axis: usize,
    start: usize,
}
impl Backward for EmbedOp {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.narrow(self.axis, self.start, inputs[0].shape()[self.axis]))]
    }
}

struct ConcatOp;
impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        let mut start = 0;
        inputs
            .iter()
            .map(|part| {
                let len = part.shape()[0];
                let piece = part.requires_grad().then(|| g.narrow(0, start, len));
                start += len;
                piece
            })
            .collect()
    }
}

struct IndexSelectOp(Rc<Vec<usize>>);
impl Backward for IndexSelectOp {
    fn name(&self) -> &'static str {
        "index_select"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.index_add_rc(&self.0, inputs[0].shape()[0]))]
    }
}

struct IndexAddOp(Rc<Vec<usize>>);
impl Backward for IndexAddOp {
    fn name(&self) -> &'static str {
        "index_add"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.index_select_rc(&self.0))]
    }
}

struct Im2colOp(Patch);
impl Backward for Im2colOp {
    fn name(&self) -> &'static str {
        "im2col"
    }
    fn backward(&self, g: &Var, inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.col2im(self.0, inputs[0].shape()))]
    }
}

struct Col2imOp(Patch);
impl Backward for Col2imOp {
    fn name(&self) -> &'static str {
        "col2im"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.im2col(self.0))]
    }
}

struct ResampleOp {
    forward: Rc<SpatialMap>,
    backward: Rc<SpatialMap>,
}
impl Backward for ResampleOp {
    fn name(&self) -> &'static str {
        "resample"
    }
    fn backward(&self, g: &Var, _inputs: &[Var], _out: &Var) -> Vec<Option<Var>> {
        vec![Some(g.resample_pair(self.backward.clone(), self.forward.clone()))]
    }
}

// ----- public Var API -----------------------------------------------------------------

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let v = binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(v, AddOp, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(v, SubOp, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = binary(self.value(), other.value(), |a, b| a * b);
        Var::from_op(v, MulOp, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = binary(self.value(), other.value(), |a, b| a / b);
        Var::from_op(v, DivOp, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|v| v * c), ScaleOp(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|v| v + c), AddScalarOp, vec![self.clone()])
    }

    pub fn powf(&self, p: f64) -> Var {
        Var::from_op(self.value().map(|v| v.powf(p)), PowfOp(p), vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), ExpOp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f64::ln), LnOp, vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.value().map(|v| v.max(0.0)), ReluOp, vec![self.clone()])
    }

    /// Sums broadcast axes away so that the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(sum_to_tensor(self.value(), shape), SumToOp, vec![self.clone()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(broadcast_to_tensor(self.value(), shape), BroadcastToOp, vec![self.clone()])
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(self.value().reshape(shape), ReshapeOp, vec![self.clone()])
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        Var::from_op(permute_tensor(self.value(), perm), PermuteOp(perm.to_vec()), vec![self.clone()])
    }

    /// Transpose of a rank-2 value.
    pub fn t(&self) -> Var {
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = matmul_tensor(self.value(), other.value());
        Var::from_op(v, MatmulOp, vec![self.clone(), other.clone()])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        if start == 0 && len == self.shape()[axis] {
            return self.clone();
        }
        let v = narrow_tensor(self.value(), axis, start, len);
        Var::from_op(v, NarrowOp { axis, start }, vec![self.clone()])
    }

    /// Places `self` at `start` along `axis` inside a zero tensor of size `full` there.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Var {
        if start == 0 && full == self.shape()[axis] {
            return self.clone();
        }
        let v = embed_tensor(self.value(), axis, start, full);
        Var::from_op(v, EmbedOp { axis, start }, vec![self.clone()])
    }

    /// Concatenation along axis 0.
    pub fn concat(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let inner = &parts[0].shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(&p.shape()[1..], inner, "concat trailing shape mismatch");
            rows += p.shape()[0];
            data.extend_from_slice(p.value().data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(inner);
        Var::from_op(Tensor::new(shape, data), ConcatOp, parts.to_vec())
    }

    /// Stacks equally-shaped values along a new leading axis.
    pub fn stack(parts: &[Var]) -> Var {
        let reshaped: Vec<Var> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(&s)
            })
            .collect();
        Var::concat(&reshaped)
    }

    /// Rows of axis 0 picked by `index` (repeats allowed).
    pub fn index_select(&self, index: &[usize]) -> Var {
        self.index_select_rc(&Rc::new(index.to_vec()))
    }

    fn index_select_rc(&self, index: &Rc<Vec<usize>>) -> Var {
        let v = index_select_tensor(self.value(), index);
        Var::from_op(v, IndexSelectOp(index.clone()), vec![self.clone()])
    }

    /// Scatter-add of rows into a zero tensor with `rows` rows; adjoint of `index_select`.
    pub fn index_add(&self, index: &[usize], rows: usize) -> Var {
        self.index_add_rc(&Rc::new(index.to_vec()), rows)
    }

    fn index_add_rc(&self, index: &Rc<Vec<usize>>, rows: usize) -> Var {
        assert_eq!(self.shape()[0], index.len(), "index_add row count mismatch");
        let v = index_add_tensor(self.value(), index, rows);
        Var::from_op(v, IndexAddOp(index.clone()), vec![self.clone()])
    }

    /// Patch extraction of `[n, h, w, c]` images into `[n*ho*wo, kh*kw*c]`.
    pub fn im2col(&self, patch: Patch) -> Var {
        let v = im2col_tensor(self.value(), patch);
        Var::from_op(v, Im2colOp(patch), vec![self.clone()])
    }

    /// Adjoint of [`Var::im2col`]: accumulates patch columns back into an image.
    pub fn col2im(&self, patch: Patch, image_shape: &[usize]) -> Var {
        let v = col2im_tensor(self.value(), patch, image_shape);
        Var::from_op(v, Col2imOp(patch), vec![self.clone()])
    }

    pub fn resample(&self, map: &Rc<SpatialMap>) -> Var {
        self.resample_pair(map.clone(), Rc::new(map.transposed()))
    }

    fn resample_pair(&self, forward: Rc<SpatialMap>, backward: Rc<SpatialMap>) -> Var {
        let v = forward.apply(self.value());
        Var::from_op(v, ResampleOp { forward, backward }, vec![self.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var::grad;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec())
    }

    #[test]
    fn broadcasting_add_reduces_grad() {
        let a = Var::param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = Var::param(t(&[3], &[10., 20., 30.]));
        let y = a.add(&b).sum();
        assert_eq!(y.item(), 21.0 + 120.0);
        let g = grad(&y, &[a, b], false);
        assert_eq!(g[0].value().data(), &[1.0; 6]);
        assert_eq!(g[1].value().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Var::constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = Var::constant(t(&[2, 1], &[5., 6.]));
        assert_eq!(a.matmul(&b).value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element (i, j, k) of x lands at (k, i, j)
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        assert_eq!(permute_tensor(&p, &[1, 2, 0]), x);
    }

    #[test]
    fn narrow_embed_are_adjoint() {
        let x = Tensor::from_fn([2, 5, 3], |i| i as f64);
        let n = narrow_tensor(&x, 1, 1, 3);
        let e = embed_tensor(&n, 1, 1, 5);
        assert_eq!(narrow_tensor(&e, 1, 1, 3), n);
        assert_eq!(e.data()[0..3], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn im2col_single_channel_3x3() {
        // 1x2x2x1 image with same padding: first row is the top-left patch.
        let x = t(&[1, 2, 2, 1], &[1., 2., 3., 4.]);
        let cols = im2col_tensor(&x, Patch::same(3));
        assert_eq!(cols.shape(), &[4, 9]);
        assert_eq!(&cols.data()[0..9], &[0., 0., 0., 0., 1., 2., 0., 3., 4.]);
    }

    #[test]
    fn resample_flip_is_involution() {
        let map = Rc::new(SpatialMap::from_pixel_fn((2, 3), (2, 3), |y, x| Some((y, 2 - x))));
        let x = Var::constant(Tensor::from_fn([1, 2, 3, 2], |i| i as f64));
        let back = x.resample(&map).resample(&map);
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn index_select_repeats_accumulate_grad() {
        let x = Var::param(t(&[3, 1], &[1., 2., 3.]));
        let y = x.index_select(&[2, 2, 0]).sum();
        let g = grad(&y, &[x], false).remove(0);
        assert_eq!(g.value().data(), &[1.0, 0.0, 2.0]);
    }
}
