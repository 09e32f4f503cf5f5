//! Downstream evaluation of a frozen factorization.
//!
//! Hallucinators act as online augmentors: every training batch draws bases in a shuffled order
//! and, per sample, a uniformly random hallucinator, and composes without recording a graph. The
//! nominal dataset size is `|B|`; `|H| |B|` distinct images are reachable. With
//! `online_composition` off the model trains on the preprocessed bases directly.
//!
//! Training is SGD with momentum and weight decay under a cosine-decayed learning rate. Each
//! repeat uses a fresh model; failed repeats (non-finite loss) are excluded from the statistics
//! and reported.

use std::fmt;

use haba_autograd::{grad, no_grad, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageDataset;
use crate::ddmatch::ExpertTrajectory;
use crate::distill::{run_distillation, DistillConfig};
use crate::error::{usage, Error, Result};
use crate::factor::{init_factorization, BasisInit, BudgetReport, FactorConfig, FactorizedDataset};
use crate::nets::{accuracy, build_model, forward, Arch, ModelParams, ModelSpec, NetConfig};
use crate::objectives::{contrastive_loss, dsa_augment, task_loss, to_grid, DsaPolicy, LossWeights};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub net: NetConfig,
    pub epochs: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub online_composition: bool,
    pub use_dsa: bool,
    pub dsa: DsaPolicy,
    /// Adds `lambda_con * L_con` over two hallucinators per basis.
    pub use_con_downstream: bool,
    pub con_weights: LossWeights,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            epochs: 300,
            lr: 0.01,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 5e-4,
            online_composition: true,
            use_dsa: true,
            dsa: DsaPolicy::all(),
            use_con_downstream: false,
            con_weights: LossWeights::default(),
            repeats: 5,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(usage("repeats, epochs and batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(usage("lr and weight_decay must be non-negative and momentum in [0, 1)"));
        }
        self.con_weights.validate()
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub arch: Arch,
    /// Test accuracy of each successful repeat, in `[0, 1]`.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
    pub failed: Vec<usize>,
    pub flags: Vec<String>,
    /// Mean training loss per epoch, per successful repeat.
    pub loss_curves: Vec<Vec<f64>>,
    pub fd_hash: String,
    pub budget: BudgetReport,
    /// `|B|`.
    pub nominal_size: usize,
    /// `|H| |B|`.
    pub reachable_images: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sgd_momentum(params: &mut ModelParams, vel: &mut [Tensor], grads: &[Var], lr: f64, cfg: &EvalConfig) {
    for ((p, v), g) in params.tensors.iter_mut().zip(vel.iter_mut()).zip(grads) {
        let g = g.value();
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

/// Images and labels for one step: composed under `no_grad`, so no hallucinator or basis value
/// can receive a gradient.
fn training_batch(fd: &FactorizedDataset, bases: &[usize], cfg: &EvalConfig, hall_rng: &mut rng::Rng) -> Result<(Tensor, Vec<usize>, usize)> {
    let labels: Vec<usize>;
    let per_basis;
    let images = if !cfg.online_composition {
        per_basis = 1;
        labels = bases.iter().map(|&b| fd.labels[b]).collect();
        no_grad(|| fd.geometry.preprocess(&Var::constant(fd.bases.clone())).index_select(bases).value().clone())
    } else if cfg.use_con_downstream && fd.num_hallucinators >= 2 {
        per_basis = 2;
        let mut pairs = Vec::with_capacity(bases.len() * 2);
        for &b in bases {
            let mut two: Vec<usize> = rand::seq::index::sample(hall_rng, fd.num_hallucinators, 2).into_vec();
            two.sort_unstable();
            pairs.extend(two.into_iter().map(|j| (b, j)));
        }
        let batch = fd.compose_pairs(&pairs)?;
        labels = batch.labels.clone();
        batch.images.value().clone()
    } else {
        per_basis = 1;
        let pairs: Vec<(usize, usize)> = bases.iter().map(|&b| (b, hall_rng.gen_range(0..fd.num_hallucinators))).collect();
        let batch = fd.compose_pairs(&pairs)?;
        if batch.images.requires_grad() {
            return Err(Error::Numerical("composed training images carry a gradient path".into()));
        }
        labels = batch.labels.clone();
        batch.images.value().clone()
    };
    Ok((images, labels, per_basis))
}

struct RepeatOutcome {
    accuracy: f64,
    losses: Vec<f64>,
}

fn train_repeat(fd: &FactorizedDataset, spec: &ModelSpec, cfg: &EvalConfig, test: &ImageDataset, repeat: usize) -> Result<RepeatOutcome> {
    let model_seed: u64 = rng::stream(cfg.seed, "eval-model", repeat as u64).gen();
    let mut params = build_model(spec, model_seed)?;
    let mut vel: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut order_rng = rng::stream(cfg.seed, "eval-order", repeat as u64);
    let mut hall_rng = rng::stream(cfg.seed, "eval-hall", repeat as u64);
    let n = fd.num_bases();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let policy = if cfg.use_dsa { cfg.dsa.clone() } else { DsaPolicy::none() };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels, per_basis) = training_batch(fd, chunk, cfg, &mut hall_rng)?;
            let aug_seed = rng::stream(cfg.seed, "eval-dsa", ((repeat as u64) << 32) | step as u64).gen();
            let x = dsa_augment(&Var::constant(images), aug_seed, &policy);
            let vars = params.to_vars(true);
            let out = forward(&vars, spec, &x)?;
            let mut loss = task_loss(&out.logits, &labels)?;
            if per_basis == 2 {
                let basis_labels: Vec<usize> = labels.iter().step_by(2).copied().collect();
                let con = contrastive_loss(&to_grid(&out.penult, chunk.len(), 2)?, &basis_labels, &cfg.con_weights)?;
                loss = loss.add(&con.loss.scale(cfg.con_weights.lambda_con));
            }
            let l = loss.item();
            if !l.is_finite() {
                return Err(Error::Diverged(format!("downstream loss {l} at epoch {epoch}")));
            }
            epoch_loss += l * chunk.len() as f64;
            let g = grad(&loss, &vars, false);
            sgd_momentum(&mut params, &mut vel, &g, cfg.lr_at(step, total), cfg);
            step += 1;
        }
        losses.push(epoch_loss / n as f64);
    }
    if params.tensors.iter().any(|t| !t.is_finite()) {
        return Err(Error::Diverged("downstream parameters became non-finite".into()));
    }
    Ok(RepeatOutcome { accuracy: accuracy(&params, spec, &test.images, &test.labels)?, losses })
}

/// Trains `cfg.repeats` fresh models on compositions of `fd` and tests them on `test`.
pub fn train_downstream(fd: &FactorizedDataset, cfg: &EvalConfig, test: &ImageDataset) -> Result<EvalResult> {
    cfg.validate()?;
    fd.validate()?;
    if test.image_shape() != fd.geometry.image_shape || test.class_count != fd.class_count {
        return Err(usage("test split does not match the factorization's image shape or class count"));
    }
    let hash = fd.fingerprint();
    let spec = cfg.net.spec(fd.geometry.image_shape, fd.class_count);
    let mut accuracies = Vec::new();
    let mut loss_curves = Vec::new();
    let mut failed = Vec::new();
    let mut flags = Vec::new();
    for repeat in 0..cfg.repeats {
        match train_repeat(fd, &spec, cfg, test, repeat) {
            Ok(out) => {
                accuracies.push(out.accuracy);
                loss_curves.push(out.losses);
            }
            Err(Error::Diverged(msg)) => {
                failed.push(repeat);
                flags.push(format!("repeat {repeat} failed: {msg}"));
            }
            Err(e) => return Err(e),
        }
    }
    if fd.fingerprint() != hash {
        return Err(Error::Numerical("evaluation modified the factorized dataset".into()));
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalResult {
        arch: cfg.net.arch,
        accuracies,
        mean,
        std,
        failed,
        flags,
        loss_curves,
        fd_hash: hash,
        budget: fd.count_parameters(),
        nominal_size: fd.num_bases(),
        reachable_images: fd.num_hallucinators * fd.num_bases(),
    })
}

/// One result per architecture, same data pipeline.
pub fn cross_architecture_eval(fd: &FactorizedDataset, archs: &[Arch], cfg: &EvalConfig, test: &ImageDataset) -> Result<Vec<EvalResult>> {
    if archs.is_empty() {
        return Err(usage("cross-architecture evaluation needs at least one architecture"));
    }
    archs
        .iter()
        .map(|&arch| train_downstream(fd, &EvalConfig { net: NetConfig { arch, ..cfg.net.clone() }, ..cfg.clone() }, test))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Class-balanced real images.
    RandomReal,
    /// Pure-image distillation through the same pipeline with one frozen identity hallucinator.
    ImageDistillStub,
}

pub struct BaselineOutcome {
    pub result: EvalResult,
    pub ipc: usize,
    pub flags: Vec<String>,
}

/// Identity-hallucinator factorization config holding `ipc` real images per class.
pub fn image_only_factor(ipc: usize, channels: usize) -> FactorConfig {
    FactorConfig {
        bases_per_class: ipc,
        num_hallucinators: 1,
        class_independent: false,
        basis_side: None,
        basis_channels: None,
        hall_depth: 0,
        hall_channels: channels,
        basis_init: BasisInit::Real,
        ..FactorConfig::default()
    }
}

/// Evaluates a pure-image baseline holding as many whole images per class as `budget` allows.
/// The stub needs the distillation config (its factorization fields are replaced) and, for the
/// trajectory objective, an expert. Both modes pick initial images with `selection_seed`.
pub fn baseline_same_budget(
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &EvalConfig,
    budget: &BudgetReport,
    mode: BaselineMode,
    selection_seed: u64,
    stub: Option<(&DistillConfig, Option<&ExpertTrajectory>)>,
) -> Result<BaselineOutcome> {
    let (ipc, rounded) = budget.images_per_class();
    let mut flags = Vec::new();
    if rounded {
        flags.push(format!("budget of {} parameters rounded down to {ipc} images per class", budget.total));
    }
    if ipc == 0 {
        return Err(usage(format!("budget of {} parameters holds no whole image per class", budget.total)));
    }
    let factor = image_only_factor(ipc, train.image_shape()[2]);
    let fd = match mode {
        BaselineMode::RandomReal => init_factorization(&factor, train, selection_seed)?,
        BaselineMode::ImageDistillStub => {
            let (dcfg, traj) = stub.ok_or_else(|| usage("the distillation stub needs a distillation config"))?;
            let dcfg = DistillConfig {
                factor,
                halls_per_iter: 1,
                freeze_hallucinators: true,
                seed: selection_seed,
                ..dcfg.clone()
            };
            run_distillation(&dcfg, train, traj).map_err(|a| a.error)?.fd
        }
    };
    Ok(BaselineOutcome { result: train_downstream(&fd, cfg, test)?, ipc, flags })
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    /// `"BPC"` for factorizations, `"IPC"` for image sets.
    pub unit: String,
    pub count: usize,
    /// Stored parameters as a percentage of the full training set's pixels.
    pub ratio_percent: f64,
    pub mean: f64,
    pub std: f64,
}

impl ResultRow {
    pub const HEADER: &'static str = "method\tdataset\tunit\tcount\tratio_pct\taccuracy_pct";

    pub fn new(method: &str, dataset: &str, unit: &str, count: usize, budget: &BudgetReport, train_size: usize, result: &EvalResult) -> Self {
        let full = (train_size * budget.image_elements).max(1) as f64;
        Self {
            method: method.into(),
            dataset: dataset.into(),
            unit: unit.into(),
            count,
            ratio_percent: 100.0 * budget.total as f64 / full,
            mean: result.mean,
            std: result.std,
        }
    }
}

impl fmt::Display for ResultRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{:.3}\t{:.2}±{:.2}",
            self.method,
            self.dataset,
            self.unit,
            self.count,
            self.ratio_percent,
            100.0 * self.mean,
            100.0 * self.std
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_blobs, BlobSpec, Split};
    use crate::distill::DistillConfig;
    use crate::ddmatch::{MatchConfig, Objective};

    fn blobs(split: Split) -> ImageDataset {
        let spec = BlobSpec { classes: 3, train_per_class: 12, test_per_class: 10, noise: 0.15, ..Default::default() };
        generate_blobs(&spec, split).unwrap()
    }

    fn quick() -> EvalConfig {
        EvalConfig {
            net: NetConfig { arch: Arch::Convnet, depth: 2, width: 8 },
            epochs: 20,
            lr: 0.05,
            batch_size: 8,
            repeats: 2,
            ..Default::default()
        }
    }

    #[test]
    fn mean_and_population_std() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15 && (s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identity_hallucinators_match_training_on_bases() {
        let train = blobs(Split::Train);
        let test = blobs(Split::Test);
        let fd = init_factorization(&image_only_factor(2, 1), &train, 0).unwrap();
        let on = train_downstream(&fd, &quick(), &test).unwrap();
        let off = train_downstream(&fd, &EvalConfig { online_composition: false, ..quick() }, &test).unwrap();
        assert_eq!(on.accuracies, off.accuracies);
        assert_eq!(on.loss_curves, off.loss_curves);
    }

    #[test]
    fn repeats_are_deterministic_and_fd_untouched() {
        let train = blobs(Split::Train);
        let test = blobs(Split::Test);
        let fd = init_factorization(&FactorConfig { bases_per_class: 2, num_hallucinators: 3, ..Default::default() }, &train, 1).unwrap();
        let before = fd.fingerprint();
        let a = train_downstream(&fd, &quick(), &test).unwrap();
        let b = train_downstream(&fd, &quick(), &test).unwrap();
        assert_eq!(a, b);
        assert_eq!(fd.fingerprint(), before);
        assert_eq!(a.fd_hash, before);
        assert_eq!(a.accuracies.len(), 2);
        assert_eq!((a.nominal_size, a.reachable_images), (6, 18));
        let (m, s) = mean_std(&a.accuracies);
        assert_eq!((m, s), (a.mean, a.std));
    }

    #[test]
    fn contrastive_downstream_variant_runs() {
        let train = blobs(Split::Train);
        let test = blobs(Split::Test);
        let fd = init_factorization(&FactorConfig { bases_per_class: 2, num_hallucinators: 3, ..Default::default() }, &train, 1).unwrap();
        let r = train_downstream(&fd, &EvalConfig { use_con_downstream: true, epochs: 3, repeats: 1, ..quick() }, &test).unwrap();
        assert!(r.loss_curves[0].iter().all(|l| l.is_finite()));
    }

    #[test]
    fn diverging_repeats_are_excluded() {
        let train = blobs(Split::Train);
        let test = blobs(Split::Test);
        let fd = init_factorization(&image_only_factor(2, 1), &train, 0).unwrap();
        let r = train_downstream(&fd, &EvalConfig { lr: 1e300, momentum: 0.0, ..quick() }, &test).unwrap();
        assert_eq!(r.failed, vec![0, 1]);
        assert!(r.accuracies.is_empty() && r.mean.is_nan());
        assert_eq!(r.flags.len(), 2);
    }

    #[test]
    fn cross_architecture_results() {
        let train = blobs(Split::Train);
        let test = blobs(Split::Test);
        let fd = init_factorization(&FactorConfig { bases_per_class: 1, num_hallucinators: 2, ..Default::default() }, &train, 0).unwrap();
        let cfg = EvalConfig { epochs: 2, repeats: 1, ..quick() };
        let one = cross_architecture_eval(&fd, &[Arch::Convnet], &cfg, &test).unwrap();
        assert_eq!(one[0], train_downstream(&fd, &cfg, &test).unwrap());
        let all = cross_architecture_eval(&fd, &Arch::ALL, &cfg, &test).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.iter().all(|r| r.fd_hash == fd.fingerprint()));
        assert_eq!(all.iter().map(|r| r.arch).collect::<Vec<_>>(), Arch::ALL.to_vec());
        assert!(cross_architecture_eval(&fd, &[], &cfg, &test).is_err());
    }

    #[test]
    fn baselines_pick_matched_images() {
        let train = blobs(Split::Train);
        let test = blobs(Split::Test);
        let cfg = EvalConfig { epochs: 2, repeats: 1, ..quick() };
        let geom = image_only_factor(1, 1).geometry([8, 8, 1]).unwrap();
        let exact = BudgetReport::new(&geom, 0, 3 * 4, 3);
        let real = baseline_same_budget(&train, &test, &cfg, &exact, BaselineMode::RandomReal, 5, None).unwrap();
        assert_eq!(real.ipc, 4);
        assert!(real.flags.is_empty());
        assert_eq!(real.result.nominal_size, 12);

        let dcfg = DistillConfig {
            matching: MatchConfig { objective: Objective::Distribution, ..Default::default() },
            net: NetConfig { arch: Arch::Convnet, depth: 2, width: 4 },
            iterations: 0,
            ..Default::default()
        };
        let stub = baseline_same_budget(&train, &test, &cfg, &exact, BaselineMode::ImageDistillStub, 5, Some((&dcfg, None))).unwrap();
        assert_eq!(stub.result, real.result);

        let uneven = BudgetReport::new(&geom, 1, 3 * 4, 3);
        let r = baseline_same_budget(&train, &test, &cfg, &uneven, BaselineMode::RandomReal, 5, None).unwrap();
        assert_eq!((r.ipc, r.flags.len()), (4, 1));
        let empty = BudgetReport::new(&geom, 0, 1, 3);
        assert!(baseline_same_budget(&train, &test, &cfg, &empty, BaselineMode::RandomReal, 5, None).is_err());
    }

    #[test]
    fn result_row_format() {
        let geom = image_only_factor(1, 3).geometry([32, 32, 3]).unwrap();
        let budget = BudgetReport::new(&geom, 0, 10, 10);
        let result = EvalResult {
            arch: Arch::Convnet,
            accuracies: vec![0.5, 0.7],
            mean: 0.6,
            std: 0.1,
            failed: vec![],
            flags: vec![],
            loss_curves: vec![],
            fd_hash: String::new(),
            budget: budget.clone(),
            nominal_size: 10,
            reachable_images: 10,
        };
        let row = ResultRow::new("random", "cifar10", "IPC", 1, &budget, 50_000, &result);
        assert_eq!(row.to_string(), "random\tcifar10\tIPC\t1\t0.020\t60.00±10.00");
        assert_eq!(ResultRow::HEADER.split('\t').count(), row.to_string().split('\t').count());
    }

    proptest::proptest! {
        #[test]
        fn mean_std_is_recomputable(values in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let (m, s) = mean_std(&values);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            proptest::prop_assert!((m - mean).abs() < 1e-12 && (s - var.sqrt()).abs() < 1e-12);
        }
    }
}
