//! Central finite-difference gradient checking.

use crate::tensor::Tensor;
use crate::var::{grad, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`,
    /// where `floor` is 1e-3 of the largest gradient magnitude across all checked inputs.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Central difference `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let plus = f(&x);
            x[i] = point[i] - eps;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central differences.
pub fn check_gradients(f: impl Fn(&[Var]) -> Var, inputs: &[Tensor], eps: f64) -> GradCheckReport {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let analytic = grad(&f(&vars), &vars, false);

    let numeric: Vec<Vec<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(k, input)| {
            // Not under no_grad: `f` may itself differentiate internally.
            let eval = |flat: &[f64]| {
                let args: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            Var::constant(Tensor::new(t.shape(), flat.to_vec()))
                        } else {
                            Var::constant(t.clone())
                        }
                    })
                    .collect();
                f(&args).item()
            };
            numeric_gradient(eval, input.data(), eps)
        })
        .collect();

    let largest = analytic
        .iter()
        .flat_map(|a| a.value().data().iter())
        .chain(numeric.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * largest).max(1e-12);
    let mut report = GradCheckReport { max_abs_error: 0.0, max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&ai, &ni)) in a.value().data().iter().zip(n).enumerate() {
            let abs = (ai - ni).abs();
            let rel = abs / ai.abs().max(ni.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_numeric_gradient() {
        let g = numeric_gradient(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn elementwise_chain_passes() {
        let x = Tensor::new([4], vec![0.3, -1.2, 2.0, 0.7]);
        let r = check_gradients(|v| v[0].exp().mul(&v[0]).ln().add_scalar(1.0).powf(2.0).sum(), &[x.map(f64::abs)], 1e-6);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    proptest::proptest! {
        #[test]
        fn matmul_chain_matches_numeric(a in proptest::collection::vec(-1.0f64..1.0, 6), b in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let inputs = [Tensor::new([2, 3], a), Tensor::new([3, 2], b)];
            let r = check_gradients(|v| v[0].matmul(&v[1]).exp().sum().add(&v[0].square().sum()), &inputs, 1e-6);
            proptest::prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
        }
    }
}
