//! The alternating outer loop: synthetic updates (bases, hallucinators, `alpha`) against the
//! adversary feature extractor.
//!
//! One iteration samples distinct hallucinators `H'` and bases `B'`, composes the basis-major grid,
//! computes `L_S = lambda_dd L_DD + lambda_cos L_cos` and descends on the sampled entries, then
//! computes `L_F = lambda_con L_con + lambda_task L_task` on the same (detached, augmented) batch
//! and descends on the adversary. The adversary persists across iterations and never shares
//! weights with the networks used inside `L_DD`.

use haba_autograd::{grad, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageDataset;
use crate::ddmatch::{
    distribution_matching_loss, gradient_matching_loss, sample_real_per_class, trajectory_matching_loss, ExpertTrajectory,
    MatchConfig, Objective,
};
use crate::error::{usage, Error, Result};
use crate::factor::{compose_pairs_vars, init_factorization, BudgetReport, FactorConfig, FactorVars, FactorizedDataset};
use crate::nets::{build_model, forward, ModelParams, ModelSpec, NetConfig};
use crate::objectives::{adversary_loss, cosine_loss, dsa_augment, synthetic_loss, to_grid, DsaPolicy, LossWeights};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub dataset: String,
    pub factor: FactorConfig,
    /// `|H'|`, hallucinators sampled per iteration.
    pub halls_per_iter: usize,
    /// `|B'|`; `None` uses every basis.
    pub basis_batch: Option<usize>,
    pub weights: LossWeights,
    pub matching: MatchConfig,
    /// Network for gradient/distribution matching and the adversary. Trajectory matching uses
    /// the expert's architecture instead.
    pub net: NetConfig,
    /// Shared learning rate of bases and hallucinators.
    pub synth_lr: f64,
    /// Learning rate of `synth_lr_log` (trajectory objective only).
    pub lr_lr: f64,
    pub adversary_lr: f64,
    pub momentum: f64,
    pub dsa: DsaPolicy,
    /// Keeps hallucinators at their initial values (pure basis distillation).
    pub freeze_hallucinators: bool,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            dataset: "cifar10".into(),
            factor: FactorConfig::default(),
            halls_per_iter: 2,
            basis_batch: None,
            weights: LossWeights::default(),
            matching: MatchConfig::default(),
            net: NetConfig::default(),
            synth_lr: 1000.0,
            lr_lr: 1e-5,
            adversary_lr: 0.001,
            momentum: 0.0,
            dsa: DsaPolicy::all(),
            freeze_hallucinators: false,
            iterations: 1000,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.halls_per_iter == 0 || self.halls_per_iter > self.factor.num_hallucinators {
            return Err(usage(format!(
                "halls_per_iter {} must be in [1, {}]",
                self.halls_per_iter, self.factor.num_hallucinators
            )));
        }
        if self.basis_batch == Some(0) {
            return Err(usage("basis_batch must be positive"));
        }
        for (name, v) in [("synth_lr", self.synth_lr), ("lr_lr", self.lr_lr), ("adversary_lr", self.adversary_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(usage(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(usage(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        self.weights.validate()?;
        self.matching.validate(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub l_dd: f64,
    pub l_cos: f64,
    pub l_s: f64,
    pub l_f: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Momentum buffers, shaped like what they accelerate.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocities {
    pub bases: Tensor,
    pub halls: Vec<Vec<Tensor>>,
    pub synth_lr_log: f64,
    pub adversary: Vec<Tensor>,
}

impl Velocities {
    fn zeros(fd: &FactorizedDataset, adversary: &ModelParams) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            bases: z(&fd.bases),
            halls: fd.hallucinators.iter().map(|h| h.tensors.iter().map(z).collect()).collect(),
            synth_lr_log: 0.0,
            adversary: adversary.tensors.iter().map(z).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub fd: FactorizedDataset,
    pub adversary: ModelParams,
    /// Completed iterations.
    pub iteration: usize,
    pub metrics: Vec<IterationMetrics>,
    pub velocities: Velocities,
}

/// The error that stopped a run and the state after the last completed iteration (`None` when
/// setup itself failed).
#[derive(Debug)]
pub struct DistillAbort {
    pub error: Error,
    pub last_good: Option<Box<DistillState>>,
}

impl std::fmt::Display for DistillAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.last_good {
            Some(st) => write!(f, "distillation stopped after {} iterations: {}", st.iteration, self.error),
            None => write!(f, "distillation setup failed: {}", self.error),
        }
    }
}

impl std::error::Error for DistillAbort {}

/// What one iteration samples.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationPlan {
    /// Sorted, distinct local hallucinator indices.
    pub halls: Vec<usize>,
    /// Sorted, distinct basis indices.
    pub bases: Vec<usize>,
    pub seed: u64,
}

impl IterationPlan {
    fn pairs(&self) -> Vec<(usize, usize)> {
        FactorizedDataset::grid(&self.bases, &self.halls)
    }
}

/// Gradients of `L_S` for the tracked synthetic entries.
#[derive(Clone, Debug)]
pub struct SyntheticGrads {
    pub bases: Tensor,
    /// `(global hallucinator index, parameter gradients)`.
    pub halls: Vec<(usize, Vec<Tensor>)>,
    pub synth_lr_log: f64,
}

/// `L_DD`, `L_cos` and `L_S` with the graph handles they were computed from.
pub struct SyntheticObjective {
    pub l_dd: Var,
    pub l_cos: Var,
    pub l_s: Var,
    pub vars: FactorVars,
    /// The augmented composed batch, detached, for the adversary.
    pub augmented: Tensor,
    /// Basis labels in plan order.
    pub basis_labels: Vec<usize>,
    pub flags: Vec<String>,
}

impl SyntheticObjective {
    pub fn grads(&self) -> SyntheticGrads {
        let mut wrt = vec![self.vars.bases.clone(), self.vars.synth_lr_log.clone()];
        for (_, ps) in &self.vars.halls {
            wrt.extend(ps.iter().cloned());
        }
        let g = grad(&self.l_s, &wrt, false);
        let mut it = g.into_iter().map(|v| v.value().clone());
        let bases = it.next().expect("bases gradient");
        let synth_lr_log = it.next().expect("lr gradient").item();
        let halls = self.vars.halls.iter().map(|(id, ps)| (*id, it.by_ref().take(ps.len()).collect())).collect();
        SyntheticGrads { bases, halls, synth_lr_log }
    }
}

pub struct Distiller<'a> {
    pub cfg: &'a DistillConfig,
    pub data: &'a ImageDataset,
    pub traj: Option<&'a ExpertTrajectory>,
    /// Architecture of the adversary and of the matching networks.
    pub spec: ModelSpec,
    pub state: DistillState,
}

impl<'a> Distiller<'a> {
    /// Fresh factorization and adversary from `cfg.seed`.
    pub fn new(cfg: &'a DistillConfig, data: &'a ImageDataset, traj: Option<&'a ExpertTrajectory>) -> Result<Self> {
        let fd = init_factorization(&cfg.factor, data, cfg.seed)?;
        Self::resume(cfg, data, traj, fd)
    }

    /// Starts from an existing factorization with a fresh adversary.
    pub fn resume(cfg: &'a DistillConfig, data: &'a ImageDataset, traj: Option<&'a ExpertTrajectory>, fd: FactorizedDataset) -> Result<Self> {
        cfg.validate()?;
        fd.validate()?;
        if fd.num_hallucinators < cfg.halls_per_iter {
            return Err(usage(format!("factorization has {} hallucinators, fewer than halls_per_iter", fd.num_hallucinators)));
        }
        if fd.geometry.image_shape != data.image_shape() || fd.class_count != data.class_count {
            return Err(usage("factorization does not match the dataset's image shape or class count"));
        }
        let spec = match (cfg.matching.objective, traj) {
            (Objective::Trajectory, Some(t)) => {
                cfg.matching.validate(Some(t.checkpoints.len()))?;
                if t.spec.input_shape != data.image_shape() || t.spec.class_count != data.class_count {
                    return Err(usage("expert trajectory was recorded for a different image shape or class count"));
                }
                t.spec.clone()
            }
            (Objective::Trajectory, None) => return Err(usage("the trajectory objective needs an expert trajectory")),
            (_, Some(_)) => return Err(usage(format!("an expert trajectory is only used by the trajectory objective, not {}", cfg.matching.objective))),
            (_, None) => cfg.net.spec(data.image_shape(), data.class_count),
        };
        let adversary = build_model(&spec, rng::stream(cfg.seed, "adversary-init", 0).gen())?;
        let velocities = Velocities::zeros(&fd, &adversary);
        let state = DistillState { fd, adversary, iteration: 0, metrics: Vec::new(), velocities };
        Ok(Self { cfg, data, traj, spec, state })
    }

    pub fn plan(&self, iteration: usize) -> IterationPlan {
        let fd = &self.state.fd;
        let mut r = rng::stream(self.cfg.seed, "distill-iter", iteration as u64);
        let mut halls = sample(&mut r, fd.num_hallucinators, self.cfg.halls_per_iter).into_vec();
        halls.sort_unstable();
        let nb = fd.num_bases();
        let mut bases = match self.cfg.basis_batch {
            Some(n) if n < nb => sample(&mut r, nb, n).into_vec(),
            _ => (0..nb).collect(),
        };
        bases.sort_unstable();
        IterationPlan { halls, bases, seed: r.gen() }
    }

    /// `L_S` at the current factorization for a fixed plan.
    pub fn synthetic_objective(&self, plan: &IterationPlan) -> Result<SyntheticObjective> {
        let fd = &self.state.fd;
        let pairs = plan.pairs();
        let globals: Vec<usize> = pairs.iter().map(|&(b, j)| fd.global_hall(fd.labels[b], j)).collect();
        let vars = FactorVars::new(fd, &globals, true);
        let batch = compose_pairs_vars(fd, &vars, &pairs)?;
        let mut flags = Vec::new();
        let l_dd = match self.cfg.matching.objective {
            Objective::Trajectory => {
                let traj = self.traj.expect("checked at construction");
                trajectory_matching_loss(&batch, &vars.synth_lr_log, traj, &self.cfg.matching, &self.cfg.dsa, plan.seed, None)?
            }
            Objective::Gradient => {
                let real = self.real_batch(&batch.labels, plan.seed);
                let net = build_model(&self.spec, rng::stream(plan.seed, "gm-net", 0).gen())?;
                let rep = gradient_matching_loss(&batch, &real, &self.spec, &net, &self.cfg.dsa, plan.seed)?;
                flags.extend(rep.flags);
                rep.loss
            }
            Objective::Distribution => {
                let real = self.real_batch(&batch.labels, plan.seed);
                let rep = distribution_matching_loss(&batch, &real, &self.spec, &self.cfg.dsa, plan.seed)?;
                flags.extend(rep.flags);
                rep.loss
            }
        };
        let augmented = dsa_augment(&batch.images, rng::stream(plan.seed, "batch-dsa", 0).gen(), &self.cfg.dsa);
        let adv = self.state.adversary.to_vars(false);
        let penult = forward(&adv, &self.spec, &augmented)?.penult;
        let cos = cosine_loss(&to_grid(&penult, plan.bases.len(), plan.halls.len())?)?;
        flags.extend(cos.flags);
        let l_s = synthetic_loss(&l_dd, &cos.loss, &self.cfg.weights);
        Ok(SyntheticObjective {
            l_dd,
            l_cos: cos.loss,
            l_s,
            vars,
            augmented: augmented.value().clone(),
            basis_labels: plan.bases.iter().map(|&b| fd.labels[b]).collect(),
            flags,
        })
    }

    fn real_batch(&self, labels: &[usize], seed: u64) -> Vec<(usize, Tensor)> {
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        sample_real_per_class(self.data, &classes, self.cfg.matching.real_per_class, seed)
    }

    /// `L_F` of the current adversary on a composed batch; returns the loss and its parameter handles.
    pub fn adversary_objective(&self, images: &Tensor, basis_labels: &[usize], halls: usize) -> Result<(Var, Vec<Var>, Vec<String>)> {
        let params = self.state.adversary.to_vars(true);
        let out = forward(&params, &self.spec, &Var::constant(images.clone()))?;
        let grid = to_grid(&out.penult, basis_labels.len(), halls)?;
        let rep = adversary_loss(&grid, &out.logits, basis_labels, &self.cfg.weights)?;
        Ok((rep.loss, params, rep.flags))
    }

    /// Runs one iteration. On error the state is left as it was before the call.
    pub fn step(&mut self) -> Result<&IterationMetrics> {
        let backup = self.state.clone();
        match self.try_step() {
            Ok(()) => Ok(self.state.metrics.last().expect("metrics appended")),
            Err(e) => {
                self.state = backup;
                Err(e)
            }
        }
    }

    fn try_step(&mut self) -> Result<()> {
        let it = self.state.iteration;
        let plan = self.plan(it);
        let obj = self.synthetic_objective(&plan)?;
        let (l_dd, l_cos, l_s) = (obj.l_dd.item(), obj.l_cos.item(), obj.l_s.item());
        if !l_s.is_finite() {
            return Err(Error::Numerical(format!("non-finite synthetic loss at iteration {it}: L_DD {l_dd}, L_cos {l_cos}")));
        }
        let grads = obj.grads();
        let rates = self.rates();
        step_synthetic(&mut self.state, &grads, &plan.bases, &rates)?;

        let (l_f, params, adv_flags) = self.adversary_objective(&obj.augmented, &obj.basis_labels, plan.halls.len())?;
        if !l_f.item().is_finite() {
            return Err(Error::Numerical(format!("non-finite adversary loss at iteration {it}")));
        }
        let g: Vec<Tensor> = grad(&l_f, &params, false).into_iter().map(|v| v.value().clone()).collect();
        step_adversary(&mut self.state, &g, self.cfg.adversary_lr, self.cfg.momentum)?;

        let mut flags = obj.flags;
        flags.extend(adv_flags);
        flags.dedup();
        self.state.metrics.push(IterationMetrics {
            iteration: it,
            l_dd,
            l_cos,
            l_s,
            l_f: l_f.item(),
            alpha: self.state.fd.synth_lr_log.exp(),
            flags,
        });
        self.state.iteration += 1;
        Ok(())
    }

    pub fn rates(&self) -> SyntheticRates {
        SyntheticRates {
            lr: self.cfg.synth_lr,
            lr_lr: if self.cfg.matching.objective == Objective::Trajectory { self.cfg.lr_lr } else { 0.0 },
            momentum: self.cfg.momentum,
            freeze_hallucinators: self.cfg.freeze_hallucinators,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticRates {
    pub lr: f64,
    pub lr_lr: f64,
    pub momentum: f64,
    pub freeze_hallucinators: bool,
}

fn momentum_update(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, m: f64) {
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = m * *v + g;
        *p -= lr * *v;
    }
}

/// Descends on the sampled bases rows, the hallucinators in `grads`, and `synth_lr_log`; every
/// other entry stays bit-identical. Stored values are rounded to `f32` afterwards.
pub fn step_synthetic(state: &mut DistillState, grads: &SyntheticGrads, sampled_bases: &[usize], rates: &SyntheticRates) -> Result<()> {
    let finite = grads.bases.is_finite() && grads.synth_lr_log.is_finite() && grads.halls.iter().all(|(_, ts)| ts.iter().all(Tensor::is_finite));
    if !finite {
        return Err(Error::Numerical("non-finite synthetic gradient".into()));
    }
    let fd = &mut state.fd;
    let vel = &mut state.velocities;
    let row = fd.geometry.basis_elements();
    for &b in sampled_bases {
        if b >= fd.num_bases() {
            return Err(usage(format!("basis {b} out of range")));
        }
        let span = b * row..(b + 1) * row;
        momentum_update(
            &mut fd.bases.data_mut()[span.clone()],
            &mut vel.bases.data_mut()[span.clone()],
            &grads.bases.data()[span],
            rates.lr,
            rates.momentum,
        );
    }
    if !rates.freeze_hallucinators {
        for (id, gs) in &grads.halls {
            let hall = fd.hallucinators.get_mut(*id).ok_or_else(|| usage(format!("hallucinator {id} out of range")))?;
            for ((p, v), g) in hall.tensors.iter_mut().zip(&mut vel.halls[*id]).zip(gs) {
                momentum_update(p.data_mut(), v.data_mut(), g.data(), rates.lr, rates.momentum);
            }
        }
    }
    if rates.lr_lr != 0.0 {
        vel.synth_lr_log = rates.momentum * vel.synth_lr_log + grads.synth_lr_log;
        fd.synth_lr_log -= rates.lr_lr * vel.synth_lr_log;
    }
    fd.quantize();
    fd.validate().map_err(|_| Error::Numerical("synthetic update produced non-finite values".into()))
}

pub fn step_adversary(state: &mut DistillState, grads: &[Tensor], lr: f64, momentum: f64) -> Result<()> {
    if grads.len() != state.adversary.tensors.len() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("adversary gradient is non-finite or mis-shaped".into()));
    }
    for ((p, v), g) in state.adversary.tensors.iter_mut().zip(&mut state.velocities.adversary).zip(grads) {
        momentum_update(p.data_mut(), v.data_mut(), g.data(), lr, momentum);
    }
    Ok(())
}

/// Runs `cfg.iterations` iterations from a fresh initialization.
pub fn run_distillation(cfg: &DistillConfig, data: &ImageDataset, traj: Option<&ExpertTrajectory>) -> std::result::Result<DistillState, DistillAbort> {
    let mut d = Distiller::new(cfg, data, traj).map_err(|error| DistillAbort { error, last_good: None })?;
    for _ in 0..cfg.iterations {
        if let Err(error) = d.step() {
            return Err(DistillAbort { error, last_good: Some(Box::new(d.state)) });
        }
    }
    Ok(d.state)
}

/// Storage of the configured factorization and the real-image baseline it is compared with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillBudget {
    #[serde(flatten)]
    pub report: BudgetReport,
    /// Images per class of the baseline this budget is compared against (`BPC + 1`).
    pub matched_ipc: usize,
    /// Whole real images per class that fit in the parameter budget.
    pub equivalent_ipc: usize,
    pub equivalent_ipc_rounded: bool,
}

pub fn budget_report(factor: &FactorConfig, image_shape: [usize; 3], class_count: usize) -> Result<DistillBudget> {
    let geom = factor.geometry(image_shape)?;
    let groups = if factor.class_independent { class_count } else { 1 };
    let report = BudgetReport::new(&geom, groups * factor.num_hallucinators, factor.bases_per_class * class_count, class_count);
    let (ipc, rounded) = report.images_per_class();
    Ok(DistillBudget { report, matched_ipc: factor.bases_per_class + 1, equivalent_ipc: ipc, equivalent_ipc_rounded: rounded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_blobs, BlobSpec, Split};
    use crate::ddmatch::{record_expert, ExpertConfig};
    use crate::factor::BasisInit;
    use crate::nets::Arch;

    fn blobs(classes: usize, per_class: usize) -> ImageDataset {
        generate_blobs(&BlobSpec { classes, train_per_class: per_class, noise: 0.2, ..Default::default() }, Split::Train).unwrap()
    }

    fn dm_config() -> DistillConfig {
        DistillConfig {
            dataset: "blobs".into(),
            factor: FactorConfig { bases_per_class: 2, num_hallucinators: 3, basis_init: BasisInit::Noise, ..Default::default() },
            matching: MatchConfig { objective: Objective::Distribution, real_per_class: 16, ..Default::default() },
            net: NetConfig { arch: Arch::Convnet, depth: 2, width: 8 },
            synth_lr: 0.1,
            iterations: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_is_the_initialization() {
        let data = blobs(2, 10);
        let cfg = DistillConfig { iterations: 0, ..dm_config() };
        let st = run_distillation(&cfg, &data, None).unwrap();
        assert_eq!(st.fd, init_factorization(&cfg.factor, &data, cfg.seed).unwrap());
        assert!(st.metrics.is_empty());
    }

    #[test]
    fn zero_rates_leave_everything_unchanged() {
        let data = blobs(2, 10);
        let cfg = DistillConfig { synth_lr: 0.0, lr_lr: 0.0, adversary_lr: 0.0, ..dm_config() };
        let st = run_distillation(&cfg, &data, None).unwrap();
        let init = Distiller::new(&cfg, &data, None).unwrap().state;
        assert_eq!(st.fd, init.fd);
        assert_eq!(st.adversary, init.adversary);
        assert_eq!(st.metrics.len(), 3);
        assert!(st.metrics.windows(2).all(|w| w[0].iteration + 1 == w[1].iteration));
    }

    #[test]
    fn runs_are_deterministic() {
        let data = blobs(2, 10);
        let cfg = dm_config();
        let a = run_distillation(&cfg, &data, None).unwrap();
        let b = run_distillation(&cfg, &data, None).unwrap();
        assert_eq!(a.fd.fingerprint(), b.fd.fingerprint());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn sampled_hallucinators_are_distinct_and_others_untouched() {
        let data = blobs(2, 10);
        let cfg = DistillConfig {
            factor: FactorConfig { num_hallucinators: 4, ..dm_config().factor },
            halls_per_iter: 2,
            basis_batch: Some(2),
            ..dm_config()
        };
        let mut d = Distiller::new(&cfg, &data, None).unwrap();
        for it in 0..5 {
            let mut before = d.state.fd.clone();
            let plan = d.plan(it);
            assert_eq!(plan.halls.len(), 2);
            assert!(plan.halls[0] < plan.halls[1]);
            assert_eq!(plan.bases.len(), 2);
            d.step().unwrap();
            before.quantize();
            let after = &d.state.fd;
            for j in (0..4).filter(|j| !plan.halls.contains(j)) {
                assert_eq!(after.hallucinators[j], before.hallucinators[j], "hallucinator {j} moved");
            }
            let row = after.geometry.basis_elements();
            for b in (0..after.num_bases()).filter(|b| !plan.bases.contains(b)) {
                assert_eq!(after.bases.data()[b * row..(b + 1) * row], before.bases.data()[b * row..(b + 1) * row]);
            }
        }
    }

    #[test]
    fn synthetic_and_adversary_steps_descend() {
        let data = blobs(2, 10);
        let cfg = dm_config();
        for seed in 0..3 {
            let cfg = DistillConfig { seed, ..cfg.clone() };
            let mut d = Distiller::new(&cfg, &data, None).unwrap();
            let plan = d.plan(0);
            let obj = d.synthetic_objective(&plan).unwrap();
            let before = obj.l_s.item();
            let grads = obj.grads();
            let start = d.state.clone();
            let mut lr = 1.0;
            let mut decreased = false;
            for _ in 0..30 {
                d.state = start.clone();
                let rates = SyntheticRates { lr, lr_lr: 0.0, momentum: 0.0, freeze_hallucinators: false };
                step_synthetic(&mut d.state, &grads, &plan.bases, &rates).unwrap();
                if d.synthetic_objective(&plan).unwrap().l_s.item() < before {
                    decreased = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(decreased, "seed {seed}: no synthetic descent");

            d.state = start.clone();
            let (l_f, params, _) = d.adversary_objective(&obj.augmented, &obj.basis_labels, plan.halls.len()).unwrap();
            let g: Vec<Tensor> = grad(&l_f, &params, false).into_iter().map(|v| v.value().clone()).collect();
            let mut lr = 0.1;
            let mut decreased = false;
            for _ in 0..30 {
                d.state = start.clone();
                step_adversary(&mut d.state, &g, lr, 0.0).unwrap();
                if d.adversary_objective(&obj.augmented, &obj.basis_labels, plan.halls.len()).unwrap().0.item() < l_f.item() {
                    decreased = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(decreased, "seed {seed}: no adversary descent");
        }
    }

    #[test]
    fn zero_adversary_weights_or_rate_freeze_the_adversary() {
        let data = blobs(2, 10);
        let quiet = LossWeights { lambda_con: 0.0, lambda_task: 0.0, ..Default::default() };
        for cfg in [DistillConfig { weights: quiet, ..dm_config() }, DistillConfig { adversary_lr: 0.0, ..dm_config() }] {
            let st = run_distillation(&cfg, &data, None).unwrap();
            assert_eq!(st.adversary, Distiller::new(&cfg, &data, None).unwrap().state.adversary);
        }
    }

    #[test]
    fn distribution_matching_loss_falls() {
        let data = blobs(2, 30);
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in 0..3 {
            let cfg = DistillConfig { iterations: 50, seed, synth_lr: 1.0, ..dm_config() };
            let st = run_distillation(&cfg, &data, None).unwrap();
            let l: Vec<f64> = st.metrics.iter().map(|m| m.l_dd).collect();
            first += l[..10].iter().sum::<f64>();
            last += l[40..].iter().sum::<f64>();
        }
        assert!(last < first, "first {first} last {last}");
    }

    #[test]
    fn trajectory_objective_runs_and_moves_alpha() {
        let data = blobs(2, 8);
        let spec = NetConfig { arch: Arch::Convnet, depth: 2, width: 4 }.spec(data.image_shape(), 2);
        let traj = record_expert(&spec, &data, &ExpertConfig { epochs: 3, beta: 0.05, batch_size: 4, ..Default::default() }, 0).unwrap();
        let cfg = DistillConfig {
            matching: MatchConfig { syn_steps: 2, expert_epochs: 1, max_start: 1, ..Default::default() },
            synth_lr: 10.0,
            lr_lr: 1e-2,
            iterations: 2,
            ..dm_config()
        };
        let st = run_distillation(&cfg, &data, Some(&traj)).unwrap();
        assert!(st.metrics.iter().all(|m| m.l_dd.is_finite() && m.l_dd >= 0.0));
        assert_ne!(st.fd.synth_lr_log, (0.01f64).ln() as f32 as f64);
        assert!(run_distillation(&cfg, &data, None).is_err());
        assert!(run_distillation(&dm_config(), &data, Some(&traj)).is_err());
    }

    #[test]
    fn divergence_aborts_with_last_good_state() {
        let data = blobs(2, 10);
        let cfg = DistillConfig { synth_lr: 1e306, iterations: 5, ..dm_config() };
        let err = run_distillation(&cfg, &data, None).unwrap_err();
        assert!(matches!(err.error, Error::Numerical(_)), "{}", err.error);
        let st = err.last_good.expect("setup succeeded");
        assert_eq!(st.metrics.len(), st.iteration);
        st.fd.validate().unwrap();
    }

    #[test]
    fn single_hallucinator_degrades_gracefully() {
        let data = blobs(2, 10);
        let cfg = DistillConfig { halls_per_iter: 1, ..dm_config() };
        let st = run_distillation(&cfg, &data, None).unwrap();
        assert!(st.metrics.iter().all(|m| m.l_cos == 0.0 && !m.flags.is_empty()));
    }

    #[test]
    fn budget_numbers() {
        let f = FactorConfig { bases_per_class: 9, num_hallucinators: 5, ..Default::default() };
        let b = budget_report(&f, [32, 32, 3], 10).unwrap();
        assert_eq!(b.report.per_hallucinator, 6312);
        assert_eq!(b.report.hallucinator_total, 31_560);
        assert_eq!(b.report.basis_total, 276_480);
        assert_eq!(b.matched_ipc, 10);
        let ratio = 6312.0 / 3072.0;
        assert!((2.0..=2.1).contains(&ratio));
        let tiny = budget_report(&FactorConfig { bases_per_class: 1, num_hallucinators: 1, ..Default::default() }, [32, 32, 3], 10).unwrap();
        assert_eq!(tiny.report.total, 6312 + 30_720);
        assert!(budget_report(&FactorConfig { num_hallucinators: 0, ..Default::default() }, [32, 32, 3], 10).is_err());
    }
}
