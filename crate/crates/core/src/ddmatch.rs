//! Matching objectives `L_DD` and expert-trajectory recording.
//!
//! Trajectory matching unrolls `N` differentiable SGD steps on synthetic images from an expert
//! checkpoint `t` at rate `alpha = exp(synth_lr_log)` and returns
//! `|phi_hat(t+N) - phi*(t+M)|^2 / |phi*(t) - phi*(t+M)|^2`. Expert snapshots are taken once per
//! epoch, so `M` counts epochs, and `t` is drawn uniformly from `[0, max_start]`.
//!
//! Gradient matching compares, class by class, task-loss gradients of one network on real and
//! synthetic images through the sum of `1 - cos` over weight tensors (biases are skipped).
//! Distribution matching sums, over classes, the squared distance between mean penultimate
//! embeddings of real and synthetic images under a freshly initialized network.
//!
//! Real and synthetic images of a class share one augmentation draw.

use std::fmt;
use std::str::FromStr;

use haba_autograd::nn::cross_entropy;
use haba_autograd::{grad, no_grad, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageDataset;
use crate::error::{usage, Error, Result};
use crate::factor::ComposedBatch;
use crate::nets::{build_model, forward, sgd_step_vars, ModelParams, ModelSpec};
use crate::objectives::{dsa_augment, DsaPolicy};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Trajectory,
    Gradient,
    Distribution,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Trajectory => "trajectory",
            Objective::Gradient => "gradient",
            Objective::Distribution => "distribution",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        [Objective::Trajectory, Objective::Gradient, Objective::Distribution]
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| usage(format!("unknown objective {s:?} (trajectory, gradient, distribution)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub objective: Objective,
    /// `N`: unrolled synthetic steps.
    pub syn_steps: usize,
    /// `M`: expert epochs spanned by one match.
    pub expert_epochs: usize,
    /// Largest start checkpoint index.
    pub max_start: usize,
    /// Composed images per unrolled step; 0 uses the whole sampled grid.
    pub inner_batch: usize,
    /// Expert learning rate `beta`.
    pub beta: f64,
    /// Real images per class for gradient and distribution matching.
    pub real_per_class: usize,
    /// Augment the synthetic batch inside each unrolled step.
    pub augment_inner: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Trajectory,
            syn_steps: 10,
            expert_epochs: 2,
            max_start: 2,
            inner_batch: 0,
            beta: 0.01,
            real_per_class: 64,
            augment_inner: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self, trajectory_len: Option<usize>) -> Result<()> {
        if self.syn_steps == 0 || self.expert_epochs == 0 || self.real_per_class == 0 {
            return Err(usage("syn_steps, expert_epochs and real_per_class must be at least 1"));
        }
        if let Some(len) = trajectory_len {
            if self.max_start + self.expert_epochs >= len {
                return Err(usage(format!(
                    "max_start {} + expert_epochs {} needs at least {} checkpoints, trajectory has {len}",
                    self.max_start,
                    self.expert_epochs,
                    self.max_start + self.expert_epochs + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub augment: DsaPolicy,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { epochs: 5, beta: 0.01, batch_size: 64, augment: DsaPolicy::none() }
    }
}

/// Checkpoints `phi*_0 .. phi*_epochs` of a model trained on real data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrajectory {
    pub spec: ModelSpec,
    pub checkpoints: Vec<ModelParams>,
    /// Real-data updates between consecutive checkpoints.
    pub interval: usize,
    pub beta: f64,
    pub seed: u64,
}

/// Trains a fresh model with plain SGD at rate `beta`, snapshotting after every epoch.
pub fn record_expert(spec: &ModelSpec, data: &ImageDataset, cfg: &ExpertConfig, seed: u64) -> Result<ExpertTrajectory> {
    if cfg.epochs == 0 {
        return Err(usage("expert recording needs at least one epoch"));
    }
    if cfg.batch_size == 0 || !(cfg.beta >= 0.0) {
        return Err(usage("expert batch size must be positive and beta non-negative"));
    }
    let mut params = build_model(spec, seed)?;
    let mut checkpoints = vec![params.clone().quantized()];
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "expert-order", epoch as u64));
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let vars = params.to_vars(true);
            let x = dsa_augment(&Var::constant(data.gather(chunk)), aug_seed(seed, epoch, step), &cfg.augment);
            let loss = cross_entropy(&forward(&vars, spec, &x)?.logits, &data.labels_of(chunk));
            if !loss.item().is_finite() {
                return Err(Error::Diverged(format!("expert loss {} at epoch {epoch} step {step}", loss.item())));
            }
            let grads = grad(&loss, &vars, false);
            params = params.sgd_step(&params.from_vars(&grads), cfg.beta)?;
            if let Some(bad) = params.tensors.iter().position(|t| !t.is_finite()) {
                return Err(Error::Diverged(format!(
                    "expert parameter {} became non-finite at epoch {epoch} step {step} (loss {})",
                    params.names[bad],
                    loss.item()
                )));
            }
        }
        checkpoints.push(params.clone().quantized());
    }
    Ok(ExpertTrajectory { spec: spec.clone(), checkpoints, interval: steps_per_epoch, beta: cfg.beta, seed })
}

fn aug_seed(seed: u64, a: usize, b: usize) -> u64 {
    use rand::RngCore;
    rng::stream(seed, "augment", ((a as u64) << 32) | b as u64).next_u64()
}

impl ModelParams {
    fn quantized(self) -> Self {
        Self { names: self.names, tensors: self.tensors.iter().map(Tensor::to_f32_precision).collect() }
    }
}

/// `N` differentiable SGD steps from `start`. `steps[s]` lists the rows of `images` used at step
/// `s`; `augment(x, s)` transforms that step's batch; `logits(params, x)` is the model.
pub fn unroll(
    start: &[Var],
    images: &Var,
    labels: &[usize],
    alpha: &Var,
    steps: &[Vec<usize>],
    augment: &dyn Fn(&Var, usize) -> Var,
    logits: &dyn Fn(&[Var], &Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    let mut params = start.to_vec();
    for (s, rows) in steps.iter().enumerate() {
        let x = augment(&images.index_select(rows), s);
        let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        let loss = cross_entropy(&logits(&params, &x)?, &y);
        if !loss.item().is_finite() {
            return Err(Error::Numerical(format!("non-finite inner loss at unrolled step {s}")));
        }
        let g = grad(&loss, &params, true);
        params = sgd_step_vars(&params, &g, alpha);
    }
    Ok(params)
}

/// `|unrolled - target|^2 / |start - target|^2`.
pub fn trajectory_ratio(unrolled: &[Var], start: &ModelParams, target: &ModelParams) -> Result<Var> {
    let denom = start.sq_distance(target);
    if denom < 1e-12 {
        return Err(Error::DegenerateExpert { start: 0, end: 0, distance: denom });
    }
    let mut num: Option<Var> = None;
    for (p, t) in unrolled.iter().zip(&target.tensors) {
        let d = p.sub(&Var::constant(t.clone())).square().sum();
        num = Some(match num {
            Some(n) => n.add(&d),
            None => d,
        });
    }
    Ok(num.expect("non-empty parameters").scale(1.0 / denom))
}

/// Row lists for each unrolled step: without replacement from a shuffled pool when it is large
/// enough, otherwise with replacement.
fn inner_batches(pool: usize, batch: usize, steps: usize, r: &mut rng::Rng) -> Vec<Vec<usize>> {
    let batch = if batch == 0 { pool } else { batch };
    (0..steps)
        .map(|_| {
            if batch <= pool {
                let mut all: Vec<usize> = (0..pool).collect();
                all.shuffle(r);
                all.truncate(batch);
                all
            } else {
                (0..batch).map(|_| r.gen_range(0..pool)).collect()
            }
        })
        .collect()
}

/// Trajectory-matching loss of a composed batch, differentiable with respect to the composed
/// images and `synth_lr_log`. The start checkpoint is drawn from `seed` unless `start` is given.
pub fn trajectory_matching_loss(
    batch: &ComposedBatch,
    synth_lr_log: &Var,
    traj: &ExpertTrajectory,
    cfg: &MatchConfig,
    augment: &DsaPolicy,
    seed: u64,
    start: Option<usize>,
) -> Result<Var> {
    cfg.validate(Some(traj.checkpoints.len()))?;
    let mut r = rng::stream(seed, "trajectory-match", 0);
    let t = match start {
        Some(t) if t <= cfg.max_start => t,
        Some(t) => return Err(usage(format!("start checkpoint {t} exceeds max_start {}", cfg.max_start))),
        None => r.gen_range(0..=cfg.max_start),
    };
    let end = t + cfg.expert_epochs;
    let (from, to) = (&traj.checkpoints[t], &traj.checkpoints[end]);
    let steps = inner_batches(batch.len(), cfg.inner_batch, cfg.syn_steps, &mut r);
    let policy = if cfg.augment_inner { augment.clone() } else { DsaPolicy::none() };
    let aug = |x: &Var, s: usize| dsa_augment(x, aug_seed(seed, t, s), &policy);
    let spec = &traj.spec;
    let model = |p: &[Var], x: &Var| Ok(forward(p, spec, x)?.logits);
    let alpha = synth_lr_log.exp();
    let unrolled = unroll(&from.to_vars(true), &batch.images, &batch.labels, &alpha, &steps, &aug, &model)?;
    trajectory_ratio(&unrolled, from, to).map_err(|e| match e {
        Error::DegenerateExpert { distance, .. } => Error::DegenerateExpert { start: t, end, distance },
        other => other,
    })
}

/// Real images per class: `(class, [n, h, w, c])`, drawn with replacement when a class is short.
pub fn sample_real_per_class(data: &ImageDataset, classes: &[usize], per_class: usize, seed: u64) -> Vec<(usize, Tensor)> {
    classes
        .iter()
        .filter_map(|&c| {
            let pool = data.indices_of_class(c);
            if pool.is_empty() {
                return None;
            }
            let mut r = rng::stream(seed, "real-batch", c as u64);
            let idx: Vec<usize> = if pool.len() >= per_class {
                pool.choose_multiple(&mut r, per_class).copied().collect()
            } else {
                (0..per_class).map(|_| pool[r.gen_range(0..pool.len())]).collect()
            };
            Some((c, data.gather(&idx)))
        })
        .collect()
}

fn classes_of(batch: &ComposedBatch) -> Vec<usize> {
    let mut c = batch.labels.clone();
    c.sort_unstable();
    c.dedup();
    c
}

fn rows_of(batch: &ComposedBatch, class: usize) -> Vec<usize> {
    (0..batch.len()).filter(|&r| batch.labels[r] == class).collect()
}

pub struct MatchReport {
    pub loss: Var,
    pub flags: Vec<String>,
}

/// Gradient matching of the per-class synthetic rows of `batch` against `real`.
pub fn gradient_matching_loss(
    batch: &ComposedBatch,
    real: &[(usize, Tensor)],
    spec: &ModelSpec,
    net: &ModelParams,
    augment: &DsaPolicy,
    seed: u64,
) -> Result<MatchReport> {
    let layout = spec.layout()?;
    let mut flags = Vec::new();
    let mut total = Var::scalar(0.0);
    for class in classes_of(batch) {
        let Some((_, real_x)) = real.iter().find(|(c, _)| *c == class) else {
            flags.push(format!("class {class} absent from the real batch; skipped"));
            continue;
        };
        let s = aug_seed(seed, class, 0);
        let params = net.to_vars(true);
        let real_in = dsa_augment(&Var::constant(real_x.clone()), s, augment);
        let real_loss = cross_entropy(&forward(&params, spec, &real_in)?.logits, &vec![class; real_x.shape()[0]]);
        let g_real = grad(&real_loss, &params, false);
        let rows = rows_of(batch, class);
        let syn_in = dsa_augment(&batch.images.index_select(&rows), s, augment);
        let syn_loss = cross_entropy(&forward(&params, spec, &syn_in)?.logits, &vec![class; rows.len()]);
        let g_syn = grad(&syn_loss, &params, true);
        for (layer, (gr, gs)) in g_real.iter().zip(&g_syn).enumerate() {
            if layout[layer].fan_in.is_none() {
                continue;
            }
            let nr = gr.value().sq_norm();
            let ns = gs.value().sq_norm();
            if nr == 0.0 || ns == 0.0 {
                flags.push(format!("class {class}: zero gradient in {}; skipped", layout[layer].name));
                continue;
            }
            let dot = gs.mul(gr).sum();
            let norm_s = gs.square().sum().powf(0.5);
            let cos = dot.div(&norm_s).scale(1.0 / nr.sqrt());
            total = total.add(&cos.neg().add_scalar(1.0));
        }
    }
    Ok(MatchReport { loss: total, flags })
}

/// Sum over classes of `|mean embed(real) - mean embed(synthetic)|^2`.
pub fn mean_embedding_distance(
    batch: &ComposedBatch,
    real: &[(usize, Tensor)],
    embed: &dyn Fn(&Var, usize) -> Result<Var>,
) -> Result<MatchReport> {
    let mut flags = Vec::new();
    let mut total = Var::scalar(0.0);
    for class in classes_of(batch) {
        let Some((_, real_x)) = real.iter().find(|(c, _)| *c == class) else {
            flags.push(format!("class {class} absent from the real batch; skipped"));
            continue;
        };
        let rows = rows_of(batch, class);
        let real_mean = no_grad(|| embed(&Var::constant(real_x.clone()), class).map(|e| mean_rows(&e)))?.detach();
        let syn_mean = mean_rows(&embed(&batch.images.index_select(&rows), class)?);
        total = total.add(&syn_mean.sub(&real_mean).square().sum());
    }
    Ok(MatchReport { loss: total, flags })
}

fn mean_rows(x: &Var) -> Var {
    let n = x.shape()[0];
    x.sum_to(&[1, x.shape()[1]]).scale(1.0 / n as f64)
}

/// Distribution matching under a network freshly initialized from `seed`.
pub fn distribution_matching_loss(
    batch: &ComposedBatch,
    real: &[(usize, Tensor)],
    spec: &ModelSpec,
    augment: &DsaPolicy,
    seed: u64,
) -> Result<MatchReport> {
    let net = build_model(spec, rng::stream(seed, "dm-net", 0).gen())?.to_vars(false);
    let embed = |x: &Var, class: usize| Ok(forward(&net, spec, &dsa_augment(x, aug_seed(seed, class, 1), augment))?.penult);
    mean_embedding_distance(batch, real, &embed)
}
