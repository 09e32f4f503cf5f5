//! Composite layers built from the primitives. Images are `[n, h, w, c]` throughout.

use crate::ops::Patch;
use crate::tensor::Tensor;
use crate::var::Var;

/// 2-D convolution. `weight` is `[kh, kw, c_in, c_out]`, `bias` is `[c_out]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, patch: Patch) -> Var {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be [n, h, w, c], got {xs:?}");
    assert!(
        ws.len() == 4 && ws[0] == patch.kh && ws[1] == patch.kw && ws[2] == xs[3],
        "conv2d weight {ws:?} incompatible with input {xs:?} and kernel {}x{}",
        patch.kh,
        patch.kw
    );
    let (ho, wo) = patch.output_hw(xs[1], xs[2]);
    let c_out = ws[3];
    let cols = x.im2col(patch);
    let mut y = cols.matmul(&weight.reshape(&[ws[0] * ws[1] * ws[2], c_out]));
    if let Some(b) = bias {
        y = y.add(b);
    }
    y.reshape(&[xs[0], ho, wo, c_out])
}

/// `x @ weight + bias`, with `weight` stored `[in, out]`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let y = x.matmul(weight);
    match bias {
        Some(b) => y.add(b),
        None => y,
    }
}

/// Per-sample, per-channel normalization over the spatial axes (no affine part).
pub fn instance_norm(x: &Var, eps: f64) -> Var {
    let s = x.shape();
    let hw = (s[1] * s[2]) as f64;
    let mean = x.sum_axes_keep(&[1, 2]).scale(1.0 / hw);
    let centered = x.sub(&mean);
    let var = centered.square().sum_axes_keep(&[1, 2]).scale(1.0 / hw);
    centered.mul(&var.add_scalar(eps).powf(-0.5))
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Var) -> Var {
    let s = x.shape().to_vec();
    let (h2, w2) = (s[1] / 2, s[2] / 2);
    assert!(h2 > 0 && w2 > 0, "avg_pool2 on spatial size {}x{}", s[1], s[2]);
    let cropped = x.narrow(1, 0, 2 * h2).narrow(2, 0, 2 * w2);
    cropped
        .reshape(&[s[0], h2, 2, w2, 2, s[3]])
        .sum_to(&[s[0], h2, 1, w2, 1, s[3]])
        .reshape(&[s[0], h2, w2, s[3]])
        .scale(0.25)
}

/// Mean over the spatial axes: `[n, h, w, c] -> [n, c]`.
pub fn global_avg_pool(x: &Var) -> Var {
    let s = x.shape();
    x.sum_axes_keep(&[1, 2]).reshape(&[s[0], s[3]]).scale(1.0 / (s[1] * s[2]) as f64)
}

pub fn flatten(x: &Var) -> Var {
    let n = x.shape()[0];
    x.reshape(&[n, x.numel() / n.max(1)])
}

/// Row-wise log-sum-exp of a `[rows, k]` value, returned as `[rows, 1]`.
///
/// The stabilizing shift is a detached row maximum; the result and its derivatives
/// do not depend on the shift.
pub fn logsumexp_rows(x: &Var) -> Var {
    let s = x.shape();
    assert_eq!(s.len(), 2, "logsumexp_rows expects rank 2");
    let (rows, k) = (s[0], s[1]);
    let data = x.value().data();
    let max: Vec<f64> = (0..rows)
        .map(|r| data[r * k..(r + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = Var::constant(Tensor::new([rows, 1], max));
    x.sub(&shift).exp().sum_axes_keep(&[1]).ln().add(&shift)
}

pub fn log_softmax(x: &Var) -> Var {
    x.sub(&logsumexp_rows(x))
}

/// One-hot `[n, classes]` constant.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        assert!(l < classes, "label {l} out of range for {classes} classes");
        t.data_mut()[r * classes + l] = 1.0;
    }
    t
}

/// Mean cross-entropy of `[n, classes]` logits against integer labels.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Var {
    let s = logits.shape();
    assert_eq!(s[0], labels.len(), "cross_entropy batch mismatch");
    let target = Var::constant(one_hot(labels, s[1]));
    log_softmax(logits).mul(&target).sum().scale(-1.0 / labels.len() as f64)
}

/// Scales each row of a `[rows, d]` value to unit L2 norm.
pub fn l2_normalize_rows(x: &Var, eps: f64) -> Var {
    x.mul(&x.square().sum_axes_keep(&[1]).add_scalar(eps).powf(-0.5))
}

/// Row-wise squared L2 norms of a tensor viewed as `[rows, rest]`.
pub fn row_sq_norms(t: &Tensor) -> Vec<f64> {
    let rows = t.shape()[0];
    let d = t.numel() / rows.max(1);
    (0..rows).map(|r| t.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::check_gradients;
    use crate::var::grad;

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let logits = Var::constant(Tensor::zeros([3, 10]));
        let l = cross_entropy(&logits, &[0, 4, 9]);
        assert!((l.item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Var::constant(Tensor::from_fn([2, 3, 3, 2], |i| ((i * 37) % 11) as f64));
        let y = instance_norm(&x, 0.0);
        let m = y.sum_axes_keep(&[1, 2]).scale(1.0 / 9.0);
        assert!(m.value().data().iter().all(|v| v.abs() < 1e-12));
        let v = y.square().sum_axes_keep(&[1, 2]).scale(1.0 / 9.0);
        assert!(v.value().data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn avg_pool_drops_odd_edge() {
        let x = Var::constant(Tensor::from_fn([1, 3, 3, 1], |i| i as f64));
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
    }

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let x0 = Tensor::from_fn([2, 4, 4, 2], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let w0 = Tensor::from_fn([3, 3, 2, 3], |i| ((i * 104729) % 17) as f64 / 17.0 - 0.5);
        let b0 = Tensor::from_fn([3], |i| 0.1 * i as f64);
        let f = |v: &[Var]| {
            let h = conv2d(&v[0], &v[1], Some(&v[2]), Patch::same(3));
            let h = instance_norm(&h, 1e-5).relu();
            let h = avg_pool2(&h);
            cross_entropy(&flatten(&h), &[1, 5])
        };
        let report = check_gradients(f, &[x0, w0, b0], 1e-6);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn second_order_through_conv() {
        // Hessian-vector product via double backward against finite differences of the gradient.
        let x = Tensor::from_fn([1, 3, 3, 1], |i| (i as f64 * 0.37).sin());
        let w0 = Tensor::from_fn([3, 3, 1, 2], |i| (i as f64 * 0.61).cos() * 0.5);
        let dir = Tensor::from_fn([3, 3, 1, 2], |i| ((i % 3) as f64) - 1.0);
        let loss = |w: &Var| {
            let y = conv2d(&Var::constant(x.clone()), w, None, Patch::same(3)).relu();
            cross_entropy(&flatten(&y), &[3])
        };
        let grad_dot = |w: &Var| {
            let g = grad(&loss(w), &[w.clone()], true).remove(0);
            g.mul(&Var::constant(dir.clone())).sum()
        };
        let w = Var::param(w0.clone());
        let hvp = grad(&grad_dot(&w), &[w.clone()], false).remove(0);
        let eps = 1e-6;
        for i in 0..w0.numel() {
            let mut plus = w0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = w0.clone();
            minus.data_mut()[i] -= eps;
            let fd = (grad_dot(&Var::param(plus)).item() - grad_dot(&Var::param(minus)).item()) / (2.0 * eps);
            assert!((fd - hvp.value().data()[i]).abs() < 1e-6, "hvp[{i}]: {fd} vs {}", hvp.value().data()[i]);
        }
    }
}
