//! Losses of the min-max game and the differentiable siamese augmentation.
//!
//! Feature grids are `[|B'|, |H'|, d]`: row `i` holds the penultimate features of the images
//! composed from basis `i` by each sampled hallucinator, in the order of a basis-major
//! [`ComposedBatch`](crate::factor::ComposedBatch).
//!
//! The contrastive and cosine losses sum over the `|H'|(|H'| - 1)` ordered pairs `j != k` and
//! divide by `|H'|^2 |B'|`, not by the pair count.

pub mod dsa;

use haba_autograd::nn::{cross_entropy, l2_normalize_rows, logsumexp_rows};
use haba_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

pub use dsa::{apply_dsa, dsa_augment, DsaOp, DsaParams, DsaPolicy, DsaTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_task: f64,
    pub lambda_dd: f64,
    pub lambda_cos: f64,
    pub tau: f64,
    /// Same-label entries count as positives in the contrastive numerator.
    pub supervised: bool,
    /// L2-normalize features before the contrastive dot products.
    pub normalize_features: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 0.1,
            lambda_task: 1.0,
            lambda_dd: 1.0,
            lambda_cos: 0.1,
            tau: 0.5,
            supervised: true,
            normalize_features: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_con, self.lambda_task, self.lambda_dd, self.lambda_cos];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(usage(format!("loss weights must be finite and non-negative: {lambdas:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(usage(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// A scalar loss plus notes about degenerate cases encountered.
pub struct LossReport {
    pub loss: Var,
    pub flags: Vec<String>,
}

impl LossReport {
    fn clean(loss: Var) -> Self {
        Self { loss, flags: Vec::new() }
    }

    fn degenerate(flag: impl Into<String>) -> Self {
        Self { loss: Var::scalar(0.0), flags: vec![flag.into()] }
    }
}

fn grid_dims(penults: &Var) -> Result<(usize, usize, usize)> {
    match *penults.shape() {
        [b, h, d] if b > 0 && d > 0 => Ok((b, h, d)),
        _ => Err(usage(format!("feature grid must be [bases, hallucinators, dim], got {:?}", penults.shape()))),
    }
}

/// `[|B'|, d]` features of hallucinator column `j`.
fn column(grid: &Var, j: usize) -> Var {
    let (b, _, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    grid.narrow(1, j, 1).reshape(&[b, d])
}

/// Reshapes basis-major `[|B'| * |H'|, d]` penultimate features into a grid.
pub fn to_grid(penult: &Var, num_bases: usize, num_halls: usize) -> Result<Var> {
    let s = penult.shape();
    if s.len() != 2 || s[0] != num_bases * num_halls {
        return Err(usage(format!("{:?} features cannot form a {num_bases}x{num_halls} grid", s)));
    }
    Ok(penult.reshape(&[num_bases, num_halls, s[1]]))
}

/// Row-wise `log(sum(mask * exp(x)))` of `[rows, k]`; every row needs one unmasked entry.
fn masked_logsumexp_rows(x: &Var, mask: &Tensor) -> Var {
    let (rows, k) = (x.shape()[0], x.shape()[1]);
    let data = x.value().data();
    let max: Vec<f64> = (0..rows)
        .map(|r| (0..k).filter(|&c| mask.data()[r * k + c] != 0.0).map(|c| data[r * k + c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    // masked-out entries are replaced by the row max first, so exp cannot overflow into inf * 0
    let fill = Tensor::from_fn([rows, k], |i| if mask.data()[i] == 0.0 { max[i / k] } else { 0.0 });
    let shift = Var::constant(Tensor::new([rows, 1], max));
    let mask = Var::constant(mask.clone());
    let kept = x.mul(&mask).add(&Var::constant(fill));
    kept.sub(&shift).exp().mul(&mask).sum_axes_keep(&[1]).ln().add(&shift)
}

/// Contrastive loss of the adversary over a feature grid; `labels` are per basis.
pub fn contrastive_loss(penults: &Var, labels: &[usize], w: &LossWeights) -> Result<LossReport> {
    let (nb, nh, d) = grid_dims(penults)?;
    if labels.len() != nb {
        return Err(usage(format!("{} labels for {nb} bases", labels.len())));
    }
    if nh < 2 {
        return Ok(LossReport::degenerate("contrastive loss needs at least two hallucinators; returned 0"));
    }
    if !penults.value().is_finite() {
        return Err(Error::Numerical("non-finite features in contrastive loss".into()));
    }
    let grid = if w.normalize_features {
        l2_normalize_rows(&penults.reshape(&[nb * nh, d]), 1e-12).reshape(&[nb, nh, d])
    } else {
        penults.clone()
    };
    let positives = Tensor::from_fn([nb, nb], |i| {
        let (a, u) = (i / nb, i % nb);
        if a == u || (w.supervised && labels[a] == labels[u]) {
            1.0
        } else {
            0.0
        }
    });
    let mut total: Option<Var> = None;
    for j in 0..nh {
        let anchors = column(&grid, j);
        for k in (0..nh).filter(|&k| k != j) {
            let sims = anchors.matmul(&column(&grid, k).t()).scale(1.0 / w.tau);
            let term = logsumexp_rows(&sims).sub(&masked_logsumexp_rows(&sims, &positives)).sum();
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
    }
    let loss = total.expect("at least one pair").scale(1.0 / (nh * nh * nb) as f64);
    Ok(LossReport::clean(loss))
}

/// Mean cosine similarity between features of the same basis under different hallucinators.
pub fn cosine_loss(penults: &Var) -> Result<LossReport> {
    let (nb, nh, d) = grid_dims(penults)?;
    if nh < 2 {
        return Ok(LossReport::degenerate("cosine loss needs at least two hallucinators; returned 0"));
    }
    let v = penults.value().data();
    for r in 0..nb * nh {
        if v[r * d..(r + 1) * d].iter().all(|&x| x == 0.0) {
            return Err(Error::Numerical(format!("zero-norm feature for basis {} hallucinator {}", r / nh, r % nh)));
        }
    }
    let unit = l2_normalize_rows(&penults.reshape(&[nb * nh, d]), 0.0).reshape(&[nb, nh, d]);
    // sum over j != k of <u_ij, u_ik> = |sum_j u_ij|^2 - sum_j |u_ij|^2, and |u_ij| = 1
    let summed = unit.sum_axes_keep(&[1]).square().sum();
    let loss = summed.add_scalar(-((nb * nh) as f64)).scale(1.0 / (nh * nh * nb) as f64);
    Ok(LossReport::clean(loss))
}

/// Mean cross-entropy.
pub fn task_loss(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(usage(format!("logits {:?} do not match {} labels", s, labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(usage(format!("label {l} out of range for {} classes", s[1])));
    }
    Ok(cross_entropy(logits, labels))
}

/// `lambda_con * L_con + lambda_task * L_task`; `logits` rows follow the basis-major grid and
/// `labels` are per basis.
pub fn adversary_loss(penults: &Var, logits: &Var, labels: &[usize], w: &LossWeights) -> Result<LossReport> {
    let (_, nh, _) = grid_dims(penults)?;
    let con = contrastive_loss(penults, labels, w)?;
    let row_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat(l).take(nh)).collect();
    let task = task_loss(logits, &row_labels)?;
    let loss = con.loss.scale(w.lambda_con).add(&task.scale(w.lambda_task));
    Ok(LossReport { loss, flags: con.flags })
}

/// `lambda_dd * dd + lambda_cos * cos`.
pub fn synthetic_loss(dd: &Var, cos: &Var, w: &LossWeights) -> Var {
    dd.scale(w.lambda_dd).add(&cos.scale(w.lambda_cos))
}
