//! `vnt`: data generation, training, evaluation, auditing and benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vn_core::attention::EncoderConfig;
use vn_core::audit::{audit_model, audit_stack, AuditConfig, AuditReport, LayerStack, StackSpec};
use vn_core::baseline::VanillaConfig;
use vn_core::data::{
    gen_polka, gen_shapes, gen_trajectories, Dataset, PolkaSpec, ShapeKind, ShapesSpec, TaskKind, TrajFrame, TrajMotion,
    TrajSpec,
};
use vn_core::models::{load_checkpoint, save_checkpoint, AnyModel, ClassifierConfig, ForecasterConfig, FusionMode, ModelConfig, TRAJ_ATTRS};
use vn_core::train::{
    append_metrics, bench_encoder, evaluate, init_threads_from_env, stability_run, BenchRow, EvalMetrics, RunConfig, TrainOptions,
    Trainer, BENCH_HEADER,
};
use vn_core::{Error, Scalar};

/// Exit status when an audit verdict is FAIL.
const EXIT_AUDIT_FAIL: u8 = 1;
/// Exit status for configuration, input and runtime errors.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "vnt", version, about = "Rotation-equivariant VN-Transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[command(subcommand)]
        what: GenCmd,
    },
    /// Train a model; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Audit a checkpoint or a declared layer stack for equivariance.
    Audit(AuditArgs),
    /// Time full-token against latent-token encoders.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum GenCmd {
    /// Noisy surface samples, one surface family per class.
    Shapes {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 128)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this surface for every class (e.g. `scalene`).
        #[arg(long)]
        shared: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-point CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Add class-dependent polka dots to a shapes file.
    Polka {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        r_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        r_hi: f64,
        #[arg(long, default_value_t = 30)]
        dots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vehicle-like trajectories split into past and future.
    Traj {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 11)]
        t_in: usize,
        #[arg(long, default_value_t = 80)]
        t_out: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep paths in the xy plane instead of rotating each one.
        #[arg(long)]
        canonical: bool,
        /// Constant-velocity paths only.
        #[arg(long)]
        straight: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Baseline {
    Vanilla,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (split by `train_frac` unless `--test` is given).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Run config with `[model]` and `[train]` sections. Without it a default
    /// model for the dataset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fusion mode for default models: early, late or spatial.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Comma-separated bias sizes; one run per value.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Train a standard transformer instead of the VN model.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Random rotations about z on training samples.
    #[arg(long)]
    augment_z: bool,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Single-precision runs on clouds scaled by 1e-4, with and without a
    /// bias, over `--stability-seeds`.
    #[arg(long)]
    stability: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    stability_seeds: Vec<u64>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum RotateTest {
    None,
    Uniform,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also evaluate on a copy with every cloud randomly rotated.
    #[arg(long, value_enum, default_value = "none")]
    rotate_test: RotateTest,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    checkpoint: Option<PathBuf>,
    /// Layer stack declared in TOML (`[[layer]]` entries).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    #[arg(long)]
    inputs: Option<usize>,
    #[arg(long)]
    rotations: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample violations as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    #[arg(long, default_value_t = 32)]
    latent: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also time a latent encoder with as many latents as tokens.
    #[arg(long)]
    control: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads_from_env().map_err(anyhow::Error::from).and_then(|_| run(cli));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Gen { what } => cmd_gen(what).map(|_| 0),
        Cmd::Train(a) => cmd_train(a).map(|_| 0),
        Cmd::Eval(a) => cmd_eval(a).map(|_| 0),
        Cmd::Audit(a) => cmd_audit(a),
        Cmd::Bench(a) => cmd_bench(a).map(|_| 0),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_gen(what: GenCmd) -> Result<()> {
    let (ds, out) = match what {
        GenCmd::Shapes { classes, per_class, points, seed, shared, out, csv } => {
            let shared = shared.as_deref().map(ShapeKind::parse).transpose()?;
            let ds = gen_shapes(&ShapesSpec { classes, per_class, points, seed, shared })?;
            if let Some(csv) = csv {
                fs::write(&csv, ds.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
            }
            (ds, out)
        }
        GenCmd::Polka { input, seed, r_lo, r_hi, dots, out } => {
            let base = load(&input)?;
            (gen_polka(&base, &PolkaSpec { r_lo, r_hi, dots }, seed)?, out)
        }
        GenCmd::Traj { count, t_in, t_out, seed, canonical, straight, out } => {
            let spec = TrajSpec {
                count,
                t_in,
                t_out,
                seed,
                frame: if canonical { TrajFrame::Canonical } else { TrajFrame::Uniform },
                motion: if straight { TrajMotion::Straight } else { TrajMotion::Mixed },
                ..TrajSpec::default()
            };
            (gen_trajectories(&spec)?, out)
        }
    };
    ds.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} records to {}", ds.len(), out.display());
    Ok(())
}

fn default_model(ds: &Dataset, fusion: Option<FusionMode>) -> ModelConfig {
    let encoder = EncoderConfig::default();
    match ds.task {
        TaskKind::Classification => {
            let fusion = fusion.unwrap_or(if ds.d_a == 0 { FusionMode::SpatialOnly } else { FusionMode::EarlyFusion });
            ModelConfig::Classifier(ClassifierConfig {
                classes: ds.k,
                fusion,
                d_a: if fusion == FusionMode::SpatialOnly { 0 } else { ds.d_a },
                head_hidden: 64,
                attr_hidden: 32,
                encoder,
            })
        }
        TaskKind::Forecasting => ModelConfig::Forecaster(ForecasterConfig {
            t_out: ds.k,
            fusion: fusion.unwrap_or(FusionMode::EarlyFusion),
            attr_hidden: 32,
            encoder,
        }),
    }
}

fn vanilla_for(ds: &Dataset) -> ModelConfig {
    let (classes, t_out, d_a) = match ds.task {
        TaskKind::Classification => (Some(ds.k), None, ds.d_a),
        TaskKind::Forecasting => (None, Some(ds.k), TRAJ_ATTRS),
    };
    ModelConfig::Vanilla(VanillaConfig { classes, t_out, d_a, d_model: 32, heads: 4, depth: 2, mlp_hidden: 64 })
}

fn set_eps(model: &mut ModelConfig, eps: f64) -> Result<()> {
    match model {
        ModelConfig::Classifier(c) => c.encoder.eps = eps,
        ModelConfig::Forecaster(c) => c.encoder.eps = eps,
        ModelConfig::Vanilla(_) => bail!(Error::Config("--epsilon does not apply to the baseline".into())),
    }
    Ok(())
}

fn resolve_config(a: &TrainArgs, train: &Dataset) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig { model: default_model(train, a.fusion), train: TrainOptions::default() },
    };
    if a.baseline == Some(Baseline::Vanilla) && !matches!(cfg.model, ModelConfig::Vanilla(_)) {
        cfg.model = vanilla_for(train);
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.augment_z |= a.augment_z;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load(&a.data)?;
    let (train, test) = match &a.test {
        Some(p) => (data, load(p)?),
        None => {
            let frac = TrainOptions::default().train_frac;
            data.split(frac, a.seed.unwrap_or(0))?
        }
    };
    let cfg = resolve_config(&a, &train)?;
    cfg.check_dataset(&train)?;
    cfg.check_dataset(&test)?;
    fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;

    if a.stability {
        return stability(&a, &cfg, &train, &test);
    }
    if a.epsilon.is_empty() {
        let m = train_one(&cfg, &train, &test, &a.run_dir, a.precision)?;
        println!("final {}", describe(&m));
        return Ok(());
    }
    let mut summary = Vec::new();
    for &eps in &a.epsilon {
        let mut c = cfg.clone();
        set_eps(&mut c.model, eps)?;
        let dir = a.run_dir.join(format!("eps-{eps:e}"));
        fs::create_dir_all(&dir)?;
        let m = train_one(&c, &train, &test, &dir, a.precision)?;
        summary.push((eps, m));
    }
    println!("epsilon,metric,value");
    for (eps, m) in &summary {
        let (name, v) = headline(m);
        println!("{eps:e},{name},{v}");
    }
    Ok(())
}

fn train_one(cfg: &RunConfig, train: &Dataset, test: &Dataset, dir: &Path, precision: Precision) -> Result<EvalMetrics> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    match precision {
        Precision::F64 => train_typed::<f64>(cfg, train, test, dir),
        Precision::F32 => train_typed::<f32>(cfg, train, test, dir),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, train: &Dataset, test: &Dataset, dir: &Path) -> Result<EvalMetrics> {
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    let metrics = dir.join("metrics.csv");
    let mut trainer = Trainer::<T>::new(cfg)?;
    trainer.fit(train, Some(test), |m, model| {
        append_metrics(&metrics, m)?;
        save_checkpoint(model.as_dyn(), ckpt.join(format!("epoch-{:04}.vnpt", m.epoch)))?;
        save_checkpoint(model.as_dyn(), ckpt.join("last.vnpt"))?;
        println!("{}", m.csv_row());
        Ok(())
    })?;
    let final_metrics = evaluate(trainer.model.as_dyn(), test)?;
    if !matches!(trainer.model, AnyModel::Vanilla(_)) {
        let report = audit_model(&trainer.model, &AuditConfig::for_scalar::<T>())?;
        fs::write(dir.join("audit.txt"), report.to_text())?;
    }
    Ok(final_metrics)
}

fn headline(m: &EvalMetrics) -> (&'static str, f64) {
    match (m.accuracy, m.ade) {
        (Some(a), _) => ("accuracy", a),
        (_, Some(d)) => ("ade", d),
        _ => ("none", f64::NAN),
    }
}

fn describe(m: &EvalMetrics) -> String {
    let (name, v) = headline(m);
    format!("{name}={v} n={}", m.n)
}

fn stability(a: &TrainArgs, cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    if !cfg.model.is_classifier() || matches!(cfg.model, ModelConfig::Vanilla(_)) {
        bail!(Error::Config("the stability experiment needs a VN classifier".into()));
    }
    let mut lines = vec!["eps,seed,accuracy,failure".to_string()];
    for eps in [0.0, 1e-6] {
        for r in stability_run(cfg, train, test, eps, &a.stability_seeds, 1e-4)? {
            lines.push(format!(
                "{:e},{},{},{}",
                r.eps,
                r.seed,
                r.accuracy.map(|x| x.to_string()).unwrap_or_default(),
                r.failure.unwrap_or_default().replace(',', ";")
            ));
        }
    }
    let text = lines.join("\n") + "\n";
    fs::write(a.run_dir.join("stability.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (cfg, model) = load_checkpoint::<f64>(&a.checkpoint)?;
    let ds = load(&a.data)?;
    RunConfig { model: cfg, train: TrainOptions::default() }.check_dataset(&ds)?;
    let base = evaluate(model.as_dyn(), &ds)?;
    println!("unrotated {}", describe(&base));
    if a.rotate_test == RotateTest::Uniform {
        let rotated = evaluate(model.as_dyn(), &ds.rotated(a.seed)?)?;
        println!("rotated {}", describe(&rotated));
        let gap = headline(&rotated).1 - headline(&base).1;
        println!("gap {gap:e}");
        if base.accuracy.is_some() {
            let changed = base.classes().iter().zip(rotated.classes()).filter(|(x, y)| **x != *y).count();
            println!("changed_predictions {changed}");
        }
    }
    Ok(())
}

fn audit_config<T: Scalar>(a: &AuditArgs) -> AuditConfig {
    let mut c = AuditConfig::for_scalar::<T>();
    c.seed = a.seed;
    if let Some(v) = a.inputs {
        c.n_inputs = v;
    }
    if let Some(v) = a.rotations {
        c.n_rotations = v;
    }
    if let Some(v) = a.tol {
        c.tol = v;
    }
    c
}

fn audit_typed<T: Scalar>(a: &AuditArgs) -> Result<AuditReport> {
    let cfg = audit_config::<T>(a);
    if let Some(p) = &a.checkpoint {
        let (_, model) = load_checkpoint::<T>(p)?;
        if matches!(model, AnyModel::Vanilla(_)) {
            bail!(Error::Config("the baseline is not equivariant and cannot be audited".into()));
        }
        // Stored biases are audited as written, so a corrupted file fails.
        Ok(vn_core::audit::audit_stored(&model, &cfg)?)
    } else {
        let p = a.spec.as_ref().ok_or_else(|| anyhow!("either --checkpoint or --spec is required"))?;
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let stack = LayerStack::<T>::build(StackSpec::from_toml(&text)?)?;
        Ok(audit_stack(&stack, &cfg)?)
    }
}

fn cmd_audit(a: AuditArgs) -> Result<u8> {
    let report = match a.precision {
        Precision::F64 => audit_typed::<f64>(&a)?,
        Precision::F32 => audit_typed::<f32>(&a)?,
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(if report.verdict { 0 } else { EXIT_AUDIT_FAIL })
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let head_dim = (a.channels / a.heads).max(1);
    let full = EncoderConfig {
        depth: a.depth,
        channels: a.channels,
        heads: a.heads,
        head_dim,
        mlp_hidden: a.channels,
        eps: 0.0,
        latent: None,
        s: 3,
    };
    let mut rows: Vec<BenchRow> = vec![
        bench_encoder("full", &full, a.tokens, a.steps, a.seed)?,
        bench_encoder("latent", &EncoderConfig { latent: Some(a.latent), ..full.clone() }, a.tokens, a.steps, a.seed)?,
    ];
    if a.control {
        let control = EncoderConfig { latent: Some(a.tokens), ..full.clone() };
        rows.push(bench_encoder("latent-control", &control, a.tokens, a.steps, a.seed)?);
    }
    let mut text = format!("{BENCH_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    print!("{text}");
    println!("# speedup {:.3}", rows[1].steps_per_sec / rows[0].steps_per_sec);
    if let Some(p) = &a.out {
        fs::write(p, text)?;
    }
    Ok(())
}
