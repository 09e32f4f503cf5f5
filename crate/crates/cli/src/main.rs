//! `haba`: record experts, distill, evaluate, export and inspect factorized datasets.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use haba_core::dataio::{apply_zca, fit_zca, load_dataset, sample_class_balanced, ImageDataset, Split, ZcaStats};
use haba_core::ddmatch::{record_expert, Objective};
use haba_core::distill::{budget_report, Distiller, IterationMetrics};
use haba_core::evalharness::{baseline_same_budget, cross_architecture_eval, BaselineMode, ResultRow};
use haba_core::export::export_images;
use haba_core::factor::BasisInit;
use haba_core::nets::Arch;
use haba_core::objectives::DsaPolicy;
use haba_core::store::{self, Checkpoint};

use config::{file_digest, load_file, parse_archs, parse_enum, write_resolved, DataConfig, DistillRun, EvalRun, ExpertRun};

#[derive(Parser)]
#[command(name = "haba", version, about = "Factorized dataset distillation with bases and hallucinators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert trajectories on real data.
    Expert(ExpertArgs),
    /// Distill a dataset into bases and hallucinators.
    Distill(DistillArgs),
    /// Train downstream classifiers on a factorized dataset and report test accuracy.
    Eval(EvalArgs),
    /// Write PNG grids of the bases and of every hallucinator's compositions.
    ExportImages(ExportArgs),
    /// Print the manifest of a checkpoint and, for factorized datasets, its budget.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// mnist, fashion-mnist, cifar10, cifar100, svhn or blobs.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Fit ZCA whitening on the training split.
    #[arg(long)]
    zca: bool,
    #[arg(long)]
    zca_epsilon: Option<f64>,
    /// Whiten with previously saved statistics.
    #[arg(long)]
    zca_stats: Option<PathBuf>,
    /// Use a class-balanced subset with this many training images per class.
    #[arg(long)]
    train_per_class: Option<usize>,
}

impl DataArgs {
    fn apply(&self, d: &mut DataConfig) {
        set(&mut d.dataset, self.dataset.clone());
        set(&mut d.root, self.data_root.clone());
        d.zca |= self.zca;
        set(&mut d.zca_epsilon, self.zca_epsilon);
        if self.zca_stats.is_some() {
            d.zca_stats = self.zca_stats.clone();
        }
        if self.train_per_class.is_some() {
            d.train_per_class = self.train_per_class;
        }
    }
}

#[derive(Args)]
struct NetArgs {
    /// convnet, resnet_s, vgg_s or alexnet_s.
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

impl NetArgs {
    fn apply(&self, n: &mut haba_core::nets::NetConfig) {
        set(&mut n.arch, self.arch);
        set(&mut n.depth, self.depth);
        set(&mut n.width, self.width);
    }
}

#[derive(Args)]
struct ExpertArgs {
    /// TOML or JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Expert learning rate.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Augmentations used while training the expert ("none" or a comma list).
    #[arg(long)]
    dsa: Option<DsaPolicy>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trajectories (seeds seed, seed+1, ...).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    net: NetArgs,
    /// trajectory, gradient or distribution.
    #[arg(long)]
    objective: Option<Objective>,
    /// Expert trajectory file (trajectory objective).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Bases per class.
    #[arg(long)]
    bpc: Option<usize>,
    #[arg(long)]
    num_hallucinators: Option<usize>,
    #[arg(long)]
    halls_per_iter: Option<usize>,
    #[arg(long)]
    basis_batch: Option<usize>,
    #[arg(long)]
    class_independent: bool,
    #[arg(long)]
    basis_side: Option<usize>,
    #[arg(long)]
    basis_channels: Option<usize>,
    #[arg(long)]
    hall_depth: Option<usize>,
    #[arg(long)]
    hall_channels: Option<usize>,
    /// real or noise.
    #[arg(long, value_parser = parse_enum::<BasisInit>)]
    basis_init: Option<BasisInit>,
    /// Initial synthetic learning rate alpha.
    #[arg(long)]
    lr_init: Option<f64>,
    /// Learning rate of bases and hallucinators.
    #[arg(long)]
    synth_lr: Option<f64>,
    /// Learning rate of log(alpha).
    #[arg(long)]
    lr_lr: Option<f64>,
    #[arg(long)]
    adversary_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lambda_con: Option<f64>,
    #[arg(long)]
    lambda_task: Option<f64>,
    #[arg(long)]
    lambda_dd: Option<f64>,
    #[arg(long)]
    lambda_cos: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Unrolled synthetic steps N.
    #[arg(long)]
    syn_steps: Option<usize>,
    /// Expert epochs M.
    #[arg(long)]
    expert_epochs: Option<usize>,
    #[arg(long)]
    max_start: Option<usize>,
    #[arg(long)]
    inner_batch: Option<usize>,
    #[arg(long)]
    real_per_class: Option<usize>,
    #[arg(long)]
    dsa: Option<DsaPolicy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Print a progress line every this many iterations (0: never).
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    net: NetArgs,
    /// Factorized dataset to evaluate.
    #[arg(long)]
    fd: Option<PathBuf>,
    /// Comma-separated architectures for cross-architecture evaluation.
    #[arg(long)]
    archs: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Train on the bases without hallucinator composition.
    #[arg(long)]
    no_online: bool,
    #[arg(long)]
    no_dsa: bool,
    #[arg(long)]
    dsa: Option<DsaPolicy>,
    /// Add the contrastive term downstream.
    #[arg(long)]
    con_downstream: bool,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Method name in the results table.
    #[arg(long)]
    method: Option<String>,
    /// Also evaluate a same-budget baseline: random_real or image_distill_stub.
    #[arg(long, value_parser = parse_enum::<BaselineMode>)]
    baseline: Option<BaselineMode>,
    /// Distillation config (TOML/JSON, `DistillConfig` fields) for the stub baseline.
    #[arg(long)]
    stub_config: Option<PathBuf>,
    #[arg(long)]
    stub_trajectory: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    fd: PathBuf,
    /// ZCA statistics to invert before writing pixels.
    #[arg(long)]
    zca_stats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Expert(a) => expert(a),
        Command::Distill(a) => distill(a),
        Command::Eval(a) => eval(a),
        Command::ExportImages(a) => export(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct LoadedData {
    train: ImageDataset,
    test: ImageDataset,
    zca: Option<ZcaStats>,
    inputs: Vec<(String, String)>,
}

/// Loads both splits, subsamples, and whitens; fitted statistics are saved to `out/zca.haba`.
fn load_data(cfg: &DataConfig, out: &Path, seed: u64) -> Result<LoadedData> {
    let mut train = load_dataset(&cfg.dataset, &cfg.root, Split::Train)?;
    let mut test = load_dataset(&cfg.dataset, &cfg.root, Split::Test)?;
    if let Some(k) = cfg.train_per_class {
        train = train.subset(&sample_class_balanced(&train, k, seed)?)?;
    }
    let mut inputs = vec![("dataset".to_string(), cfg.dataset.clone()), ("train_images".to_string(), train.len().to_string())];
    let zca = match (&cfg.zca_stats, cfg.zca) {
        (Some(p), _) => {
            inputs.push(("zca_stats".into(), file_digest(p)?));
            Some(store::load_zca(p)?)
        }
        (None, true) => {
            let z = fit_zca(&train, cfg.zca_epsilon)?;
            store::save_checkpoint(&Checkpoint::Zca(z.clone()), &out.join("zca.haba"))?;
            Some(z)
        }
        (None, false) => None,
    };
    if let Some(z) = &zca {
        train = train.with_images(apply_zca(z, &train.images)?)?;
        test = test.with_images(apply_zca(z, &test.images)?)?;
        inputs.push(("zca_fingerprint".into(), z.fingerprint()));
    }
    Ok(LoadedData { train, test, zca, inputs })
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn expert(a: ExpertArgs) -> Result<()> {
    let mut run: ExpertRun = load_file(a.config.as_deref())?;
    a.data.apply(&mut run.data);
    a.net.apply(&mut run.net);
    set(&mut run.expert.epochs, a.epochs);
    set(&mut run.expert.beta, a.beta);
    set(&mut run.expert.batch_size, a.batch_size);
    set(&mut run.expert.augment, a.dsa);
    set(&mut run.seed, a.seed);
    set(&mut run.count, a.count);
    run.count = run.count.max(1);
    prepare_out(&a.out)?;
    let data = load_data(&run.data, &a.out, run.seed)?;
    let spec = run.net.spec(data.train.image_shape(), data.train.class_count);
    let mut inputs = data.inputs;
    for k in 0..run.count as u64 {
        let seed = run.seed + k;
        let traj = record_expert(&spec, &data.train, &run.expert, seed)?;
        let path = a.out.join(format!("expert_{}_seed{seed}.haba", spec.arch));
        store::save_checkpoint(&Checkpoint::Trajectory(traj), &path)?;
        inputs.push((format!("trajectory_seed{seed}"), file_digest(&path)?));
        println!("wrote {}", path.display());
    }
    write_resolved(&a.out, "expert", &run, inputs)?;
    Ok(())
}

fn distill(a: DistillArgs) -> Result<()> {
    let mut run: DistillRun = load_file(a.config.as_deref())?;
    a.data.apply(&mut run.data);
    let d = &mut run.distill;
    a.net.apply(&mut d.net);
    set(&mut d.matching.objective, a.objective);
    set(&mut d.iterations, a.iterations);
    set(&mut d.factor.bases_per_class, a.bpc);
    set(&mut d.factor.num_hallucinators, a.num_hallucinators);
    set(&mut d.halls_per_iter, a.halls_per_iter);
    if a.basis_batch.is_some() {
        d.basis_batch = a.basis_batch;
    }
    d.factor.class_independent |= a.class_independent;
    if a.basis_side.is_some() {
        d.factor.basis_side = a.basis_side;
    }
    if a.basis_channels.is_some() {
        d.factor.basis_channels = a.basis_channels;
    }
    set(&mut d.factor.hall_depth, a.hall_depth);
    set(&mut d.factor.hall_channels, a.hall_channels);
    set(&mut d.factor.basis_init, a.basis_init);
    set(&mut d.factor.lr_init, a.lr_init);
    set(&mut d.synth_lr, a.synth_lr);
    set(&mut d.lr_lr, a.lr_lr);
    set(&mut d.adversary_lr, a.adversary_lr);
    set(&mut d.momentum, a.momentum);
    set(&mut d.weights.lambda_con, a.lambda_con);
    set(&mut d.weights.lambda_task, a.lambda_task);
    set(&mut d.weights.lambda_dd, a.lambda_dd);
    set(&mut d.weights.lambda_cos, a.lambda_cos);
    set(&mut d.weights.tau, a.tau);
    set(&mut d.matching.syn_steps, a.syn_steps);
    set(&mut d.matching.expert_epochs, a.expert_epochs);
    set(&mut d.matching.max_start, a.max_start);
    set(&mut d.matching.inner_batch, a.inner_batch);
    set(&mut d.matching.real_per_class, a.real_per_class);
    set(&mut d.dsa, a.dsa);
    set(&mut d.seed, a.seed);
    if a.trajectory.is_some() {
        run.trajectory = a.trajectory.clone();
    }
    set(&mut run.checkpoint_every, a.checkpoint_every);
    run.distill.dataset = run.data.dataset.clone();

    prepare_out(&a.out)?;
    let data = load_data(&run.data, &a.out, run.distill.seed)?;
    let mut inputs = data.inputs;
    let traj = match &run.trajectory {
        Some(p) => {
            inputs.push(("trajectory".into(), file_digest(p)?));
            Some(store::load_trajectory(p)?)
        }
        None => None,
    };
    let cfg = &run.distill;
    let budget = budget_report(&cfg.factor, data.train.image_shape(), data.train.class_count)?;
    fs::write(a.out.join("budget.json"), serde_json::to_string_pretty(&budget)?)?;
    write_resolved(&a.out, "distill", &run, inputs)?;

    let mut distiller = Distiller::new(cfg, &data.train, traj.as_ref())?;
    distiller.state.fd.meta.zca_fingerprint = data.zca.as_ref().map(ZcaStats::fingerprint);
    let fd_path = a.out.join("fd.haba");
    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let write_metric = |f: &mut fs::File, m: &IterationMetrics| -> Result<()> { Ok(writeln!(f, "{}", serde_json::to_string(m)?)?) };
    for it in 0..cfg.iterations {
        match distiller.step() {
            Ok(m) => {
                write_metric(&mut metrics, m)?;
                if a.log_every > 0 && (it + 1) % a.log_every == 0 {
                    eprintln!("iter {:>6}  L_DD {:.5}  L_cos {:.4}  L_F {:.4}  alpha {:.3e}", m.iteration, m.l_dd, m.l_cos, m.l_f, m.alpha);
                }
            }
            Err(e) => {
                let path = a.out.join("fd.last_good.haba");
                store::save_checkpoint(&Checkpoint::Factorized(distiller.state.fd.clone()), &path)?;
                bail!("{e} (last good state after {} iterations written to {})", distiller.state.iteration, path.display());
            }
        }
        if run.checkpoint_every > 0 && (it + 1) % run.checkpoint_every == 0 {
            store::save_checkpoint(&Checkpoint::Factorized(distiller.state.fd.clone()), &fd_path)?;
        }
    }
    metrics.flush()?;
    let st = &distiller.state;
    store::save_checkpoint(&Checkpoint::Factorized(st.fd.clone()), &fd_path)?;
    store::save_checkpoint(
        &Checkpoint::Params { params: st.adversary.clone(), spec: Some(distiller.spec.clone()) },
        &a.out.join("adversary.haba"),
    )?;
    println!("wrote {} after {} iterations (fingerprint {})", fd_path.display(), st.iteration, st.fd.fingerprint());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut run: EvalRun = load_file(a.config.as_deref())?;
    a.data.apply(&mut run.data);
    let e = &mut run.eval;
    a.net.apply(&mut e.net);
    set(&mut e.epochs, a.epochs);
    set(&mut e.lr, a.lr);
    set(&mut e.batch_size, a.batch_size);
    set(&mut e.momentum, a.momentum);
    set(&mut e.weight_decay, a.weight_decay);
    if a.no_online {
        e.online_composition = false;
    }
    if a.no_dsa {
        e.use_dsa = false;
    }
    set(&mut e.dsa, a.dsa);
    e.use_con_downstream |= a.con_downstream;
    set(&mut e.repeats, a.repeats);
    set(&mut e.seed, a.seed);
    if a.fd.is_some() {
        run.fd = a.fd.clone();
    }
    if let Some(s) = &a.archs {
        run.archs = parse_archs(s)?;
    }
    set(&mut run.method, a.method.clone());
    if a.baseline.is_some() {
        run.baseline = a.baseline;
    }
    if let Some(p) = &a.stub_config {
        run.stub = Some(load_file(Some(p))?);
    }
    if a.stub_trajectory.is_some() {
        run.stub_trajectory = a.stub_trajectory.clone();
    }
    if run.archs.is_empty() {
        run.archs = vec![run.eval.net.arch];
    }

    prepare_out(&a.out)?;
    let fd_path = run.fd.clone().context("eval needs --fd")?;
    let fd = store::load_factorized(&fd_path)?;
    let data = load_data(&run.data, &a.out, run.eval.seed)?;
    let found = data.zca.as_ref().map(ZcaStats::fingerprint);
    if fd.meta.zca_fingerprint != found {
        bail!(
            "factorized dataset was distilled with ZCA {:?}, evaluation data uses {:?}; pass the matching --zca-stats",
            fd.meta.zca_fingerprint,
            found
        );
    }
    let mut inputs = data.inputs.clone();
    inputs.push(("fd".into(), file_digest(&fd_path)?));
    write_resolved(&a.out, "eval", &run, inputs)?;

    let results = cross_architecture_eval(&fd, &run.archs, &run.eval, &data.test)?;
    let budget = fd.count_parameters();
    let bpc = fd.num_bases() / fd.class_count.max(1);
    let mut rows = Vec::new();
    for r in &results {
        let method = if results.len() > 1 { format!("{}@{}", run.method, r.arch) } else { run.method.clone() };
        rows.push(ResultRow::new(&method, &run.data.dataset, "BPC", bpc, &budget, data.train.len(), r));
        for f in &r.flags {
            eprintln!("note: {f}");
        }
    }
    if let Some(mode) = run.baseline {
        let cfg = haba_core::evalharness::EvalConfig { net: haba_core::nets::NetConfig { arch: run.archs[0], ..run.eval.net.clone() }, ..run.eval.clone() };
        let stub_traj = run.stub_trajectory.as_deref().map(store::load_trajectory).transpose()?;
        let stub = run.stub.as_ref().map(|c| (c, stub_traj.as_ref()));
        let out = baseline_same_budget(&data.train, &data.test, &cfg, &budget, mode, run.eval.seed, stub)?;
        for f in &out.flags {
            eprintln!("note: {f}");
        }
        let name = match mode {
            BaselineMode::RandomReal => "random_real",
            BaselineMode::ImageDistillStub => "image_distill_stub",
        };
        rows.push(ResultRow::new(name, &run.data.dataset, "IPC", out.ipc, &out.result.budget, data.train.len(), &out.result));
    }
    let mut table = String::from(ResultRow::HEADER);
    table.push('\n');
    for row in &rows {
        println!("{row}");
        table.push_str(&format!("{row}\n"));
    }
    fs::write(a.out.join("results.tsv"), table)?;
    fs::write(a.out.join("results.json"), serde_json::to_string_pretty(&results)?)?;
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let fd = store::load_factorized(&a.fd)?;
    let zca = a.zca_stats.as_deref().map(store::load_zca).transpose()?;
    if let (Some(want), Some(z)) = (&fd.meta.zca_fingerprint, &zca) {
        if *want != z.fingerprint() {
            bail!("ZCA statistics {} do not match the factorized dataset's {want}", z.fingerprint());
        }
    }
    for p in export_images(&fd, &a.out, zca.as_ref())? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let manifest = store::read_manifest(&a.path)?;
    println!("kind: {}", manifest.kind);
    let payload: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    println!("tensors: {} ({} payload bytes)", manifest.tensors.len(), payload);
    for t in manifest.tensors.iter().take(12) {
        println!("  {:<24} {:?} @{}", t.name, t.shape, t.offset);
    }
    if manifest.tensors.len() > 12 {
        println!("  ... {} more", manifest.tensors.len() - 12);
    }
    if manifest.kind == "factorized" {
        let fd = store::load_factorized(&a.path)?;
        let b = fd.count_parameters();
        println!("hallucinators |H|: {} ({} stored)", fd.num_hallucinators, b.hallucinator_instances);
        println!("bases |B|: {}", b.num_bases);
        println!("params per hallucinator: {}", b.per_hallucinator);
        println!("hallucinator params: {}", b.hallucinator_total);
        println!("basis params: {}", b.basis_total);
        println!("total params: {}", b.total);
        println!("image equivalents: {:.3}", b.image_equivalents);
        println!("alpha: {:.6e}", fd.synth_lr_log.exp());
        println!("fingerprint: {}", fd.fingerprint());
    }
    println!("meta: {}", serde_json::to_string(&manifest.meta)?);
    Ok(())
}
