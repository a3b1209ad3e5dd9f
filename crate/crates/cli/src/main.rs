//! `wslab`: word-sensitivity estimates, constructions, GLM training and
//! attacks, and the seeded sweeps built on them.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use wslab::attack::{optimize_delta, AttackConfig, AttackContext, AttackObjective};
use wslab::config::Config;
use wslab::construct::{b64, construct_perturbation, ConstructConfig};
use wslab::data::{self, csv, emb, LabeledDataset, TokenMatrix};
use wslab::featmaps::{prm, Activation, FeatureMap, MapKind, MapSpec};
use wslab::glm::{self, FeatureMatrix, GlmModel};
use wslab::sensitivity::{estimate_ws, estimate_ws_multi, IndexMode, PgaConfig};
use wslab::sweep::{self, GeneralizationPlan, SensitivityPlan};
use wslab::{Result, WsError};

#[derive(Parser)]
#[command(name = "wslab", version, about = "Word sensitivity of random-feature and attention maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower-bound the word sensitivity of one context by projected gradient ascent.
    WsEstimate(WsEstimateArgs),
    /// Build the explicit attention-collapsing perturbation.
    WsConstruct(WsConstructArgs),
    /// Fit the minimum-norm interpolator on a labeled dataset.
    GlmTrain(GlmTrainArgs),
    /// One exact least-squares step on a single sample.
    GlmFinetune(GlmUpdateArgs),
    /// Refit on the training set plus one sample.
    GlmRetrain(GlmRetrainArgs),
    /// Search for a perturbation that flips an updated model.
    Attack(AttackArgs),
    /// Word-sensitivity sweep from a config file.
    SweepSensitivity(SweepArgs),
    /// Fine-tune/retrain generalization sweep from a config file.
    SweepGeneralization(SweepArgs),
    /// Print the header and a summary of an EMB1, PRM1 or GLM1 file.
    FmtInspect(InspectArgs),
}

#[derive(Args, Clone)]
struct MapArgs {
    /// Map kind: rf, drf, raf, relu-raf, qkv.
    #[arg(long, default_value = "rf")]
    map: String,
    /// Width of RF/DRF layers.
    #[arg(long, default_value_t = 512)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long)]
    d_inner: Option<usize>,
    #[arg(long, default_value_t = 0)]
    map_seed: u64,
    /// Load the map from a PRM1 file instead of sampling it.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Save the map as PRM1.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SampleArgs {
    /// CSV sample (label in `<file>.label`).
    #[arg(long, conflicts_with = "emb")]
    input: Option<PathBuf>,
    /// EMB1 file to take the sample from.
    #[arg(long)]
    emb: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Context length when the sample is synthetic or truncated.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Args, Clone)]
struct PgaArgs {
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Row to perturb (0-based).
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Master seed; also read from WSLAB_SEED.
    #[arg(long, env = "WSLAB_SEED", default_value_t = 0)]
    seed: u64,
}

impl PgaArgs {
    fn config(&self, iterations: usize, restarts: usize) -> PgaConfig {
        PgaConfig {
            step: self.step,
            iterations: self.iterations.unwrap_or(iterations),
            restarts: self.restarts.unwrap_or(restarts),
            init_scale: self.init_scale,
            index_mode: IndexMode::Fixed(self.index),
            seed: self.seed,
            extra_inits: Vec::new(),
        }
    }
}

#[derive(Args)]
struct WsEstimateArgs {
    #[command(flatten)]
    map: MapArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[command(flatten)]
    pga: PgaArgs,
    /// Best over every row instead of `--index`.
    #[arg(long)]
    sweep_all: bool,
    /// Perturb rows 0..m jointly.
    #[arg(long, default_value_t = 1)]
    m: usize,
}

#[derive(Args)]
struct WsConstructArgs {
    #[command(flatten)]
    map: MapArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    c0: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, env = "WSLAB_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Labeled EMB1 training set; synthetic when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic training samples.
    #[arg(long = "count", default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    train_seed: u64,
}

#[derive(Args)]
struct GlmTrainArgs {
    #[command(flatten)]
    map: MapArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Output GLM1 file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GlmUpdateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    sample: SampleArgs,
    /// Label of the sample; defaults to its sidecar or EMB1 label.
    #[arg(long, allow_hyphen_values = true)]
    label: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GlmRetrainArgs {
    #[command(flatten)]
    update: GlmUpdateArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Copy, Clone, ValueEnum)]
enum UpdateKind {
    Finetune,
    Retrain,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, allow_hyphen_values = true)]
    label: Option<i64>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "finetune")]
    update: UpdateKind,
    /// err, ft_align or rt_align.
    #[arg(long, default_value = "err")]
    objective: String,
    #[arg(long, default_value_t = 0.0)]
    penalty: f64,
    #[command(flatten)]
    pga: PgaArgs,
    /// Write the perturbed sample as CSV.
    #[arg(long)]
    delta_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    #[arg(long, env = "WSLAB_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write long-format plot data.
    #[arg(long)]
    plot_data: bool,
    /// Add wall time to records (makes output non-reproducible).
    #[arg(long)]
    record_timing: bool,
    /// Override any config key, as `section.key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
    /// Samples to summarize for EMB1 files.
    #[arg(long, default_value_t = 3)]
    rows: usize,
}

fn config_error(msg: impl Into<String>) -> WsError {
    WsError::InvalidConfig(msg.into())
}

fn exit_code(e: &WsError) -> u8 {
    match e {
        WsError::Config { .. }
        | WsError::InvalidConfig(_)
        | WsError::IndexOutOfRange { .. }
        | WsError::DuplicateIndex(_)
        | WsError::BudgetExceeded { .. } => 2,
        WsError::Io(_) | WsError::DimMismatch(_) | WsError::ZeroRow(_) => 3,
        e if e.is_format_error() => 3,
        _ => 4,
    }
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn load_map(args: &MapArgs, n: Option<usize>, d: Option<usize>) -> Result<FeatureMap> {
    let map = match &args.params {
        Some(path) => prm::read(path)?,
        None => {
            let kind = MapKind::parse(&args.map)?;
            let (n, d) = (n.unwrap_or(16), d.unwrap_or(32));
            let mut spec = MapSpec::new(kind, n, d)
                .with_k(args.k)
                .with_depth(args.depth)
                .with_activation(Activation::parse(&args.activation)?);
            if let Some(di) = args.d_inner {
                spec = spec.with_d_inner(di);
            }
            FeatureMap::sample(&spec, args.map_seed)?
        }
    };
    if let Some(path) = &args.save_params {
        prm::write(path, &map)?;
    }
    Ok(map)
}

/// Reads the sample and its label (if any); falls back to a synthetic context
/// of the shape the map expects.
fn load_sample(args: &SampleArgs, shape: (Option<usize>, usize)) -> Result<(TokenMatrix, Option<i8>)> {
    if let Some(path) = &args.input {
        return csv::read_sample(path);
    }
    if let Some(path) = &args.emb {
        let ds = emb::read(path, &emb::ReadOptions::default())?;
        let x = ds
            .samples()
            .get(args.sample)
            .ok_or(WsError::IndexOutOfRange { index: args.sample, n: ds.len() })?;
        let (n, d) = (args.n.or(shape.0).unwrap_or(x.n()), args.d.unwrap_or(shape.1));
        let x = data::normalize_rows(&x.truncate(n, d)?)?;
        return Ok((x, ds.labels().map(|l| l[args.sample])));
    }
    let n = args.n.or(shape.0).unwrap_or(16);
    let d = args.d.unwrap_or(shape.1);
    Ok((data::synth_context(n, d, args.data_seed), None))
}

fn resolve_label(flag: Option<i64>, stored: Option<i8>) -> Result<f64> {
    let v = flag.or(stored.map(i64::from)).ok_or_else(|| config_error("the sample has no label; pass --label"))?;
    if v != 1 && v != -1 {
        return Err(WsError::BadLabel(v));
    }
    Ok(v as f64)
}

fn load_training(args: &DataArgs, n: usize, d: usize) -> Result<LabeledDataset> {
    match &args.data {
        Some(path) => {
            let ds = emb::read(path, &emb::ReadOptions { truncate: Some((n, d)), normalize: true })?;
            if ds.labels().is_none() {
                return Err(config_error(format!("{} has no labels", path.display())));
            }
            Ok(ds)
        }
        None => Ok(data::synth_dataset(args.count, n, d, args.train_seed)),
    }
}

fn check_model(model: &GlmModel, map: &FeatureMap) -> Result<()> {
    if model.map_fingerprint != prm::fingerprint(map) {
        return Err(WsError::DimMismatch("model was trained on a different feature map".into()));
    }
    Ok(())
}

fn ws_estimate(a: WsEstimateArgs) -> Result<()> {
    let (x, _) = match &a.map.params {
        Some(p) => load_sample(&a.sample, prm::read(p)?.context_shape())?,
        None => load_sample(&a.sample, (a.sample.n, a.sample.d.unwrap_or(32)))?,
    };
    let map = load_map(&a.map, Some(x.n()), Some(x.d()))?;
    let mut cfg = a.pga.config(200, 10);
    if a.sweep_all {
        cfg.index_mode = IndexMode::SweepAll;
    }
    let est = if a.m == 1 { estimate_ws(&map, &x, &cfg)? } else { estimate_ws_multi(&map, &x, a.m, &cfg)? };
    let mut v = serde_json::to_value(est.record(&map, &x)).expect("record serializes");
    v["delta"] = json!(est.perturbation.iter().map(|(i, d)| json!({"index": i, "delta": b64(d)})).collect::<Vec<_>>());
    print(&v);
    Ok(())
}

fn ws_construct(a: WsConstructArgs) -> Result<()> {
    let (x, _) = match &a.map.params {
        Some(p) => load_sample(&a.sample, prm::read(p)?.context_shape())?,
        None => load_sample(&a.sample, (a.sample.n, a.sample.d.unwrap_or(32)))?,
    };
    let map = load_map(&a.map, Some(x.n()), Some(x.d()))?;
    if x.n() > x.d() {
        log::warn!("n = {} exceeds d = {}; the construction needs d large relative to n", x.n(), x.d());
    }
    let cfg = ConstructConfig { sphere_samples: a.samples, tau: a.tau, target_fraction: 1.0, c0: a.c0, epsilon: a.epsilon, seed: a.seed };
    print(&construct_perturbation(&map, &x, a.index, &cfg)?.to_json());
    Ok(())
}

fn glm_train(a: GlmTrainArgs) -> Result<()> {
    let (n, d) = match &a.data.data {
        Some(path) => {
            let h = emb::read_header(&mut BufReader::new(File::open(path)?))?;
            (a.n.unwrap_or(h.n as usize), a.d.unwrap_or(h.d as usize))
        }
        None => (a.n.unwrap_or(16), a.d.unwrap_or(32)),
    };
    let map = load_map(&a.map, Some(n), Some(d))?;
    let train = load_training(&a.data, n, d)?;
    let phi = FeatureMatrix::build(&map, train.samples())?;
    let labels = train.labels_f64().expect("checked above");
    let model = glm::fit(&phi, &labels, &DVector::zeros(phi.dim()), map.kind())?;
    glm::write_model(&a.out, &model)?;
    let diag = glm::kernel_diagnostics(&phi, Some(&labels))?;
    print(&json!({
        "map": map.kind().name(),
        "N": phi.samples(),
        "p": phi.dim(),
        "fingerprint": format!("{:016x}", model.map_fingerprint),
        "lambda_min": diag.lambda_min,
        "lambda_max": diag.lambda_max,
        "condition": diag.condition,
        "interpolation_residual": diag.interpolation_residual,
    }));
    Ok(())
}

fn update_inputs(a: &GlmUpdateArgs) -> Result<(FeatureMap, GlmModel, TokenMatrix, f64)> {
    let map = prm::read(&a.params)?;
    let model = glm::read_model(&a.model)?;
    check_model(&model, &map)?;
    let (x, stored) = load_sample(&a.sample, map.context_shape())?;
    Ok((map, model, x, resolve_label(a.label, stored)?))
}

fn summary(model: &GlmModel, phi_x: &DVector<f64>, y: f64) -> Result<Value> {
    Ok(json!({"p": model.dim(), "y": y, "prediction": model.predict(phi_x)?, "theta_norm": model.theta.norm()}))
}

fn glm_finetune(a: GlmUpdateArgs) -> Result<()> {
    let (map, model, x, y) = update_inputs(&a)?;
    let phi_x = map.features(&x)?;
    let tuned = glm::finetune(&model, &phi_x, y)?;
    glm::write_model(&a.out, &tuned)?;
    print(&summary(&tuned, &phi_x, y)?);
    Ok(())
}

fn glm_retrain(a: GlmRetrainArgs) -> Result<()> {
    let (map, model, x, y) = update_inputs(&a.update)?;
    let train = load_training(&a.data, x.n(), x.d())?;
    let phi = FeatureMatrix::build(&map, train.samples())?;
    let phi_x = map.features(&x)?;
    let labels = train.labels_f64().expect("checked above");
    let tuned = glm::retrain(&phi, &labels, &phi_x, y, &model.theta0, map.kind())?;
    glm::write_model(&a.update.out, &tuned)?;
    print(&summary(&tuned, &phi_x, y)?);
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let map = prm::read(&a.params)?;
    let base = glm::read_model(&a.model)?;
    check_model(&base, &map)?;
    let (x, stored) = load_sample(&a.sample, map.context_shape())?;
    let y = resolve_label(a.label, stored)?;
    let train = load_training(&a.data, x.n(), x.d())?;
    let phi = FeatureMatrix::build(&map, train.samples())?;
    let phi_x = map.features(&x)?;
    let tuned = match a.update {
        UpdateKind::Finetune => glm::finetune(&base, &phi_x, y)?,
        UpdateKind::Retrain => glm::retrain(&phi, &train.labels_f64().expect("checked above"), &phi_x, y, &base.theta0, map.kind())?,
    };
    let ctx = AttackContext::new(&map, &x, y, &base)?.with_tuned(&tuned).with_training(&phi)?;
    let cfg = AttackConfig {
        objective: AttackObjective::parse(&a.objective)?,
        penalty: a.penalty,
        pga: a.pga.config(300, 8),
        index: a.pga.index,
    };
    let res = optimize_delta(&ctx, &cfg)?;
    let e = glm::evaluate_pair(&base, &tuned, &phi_x, &res.phi_xd, y, -y)?;
    let coef = glm::finetune_coefficient(&phi_x, &res.phi_xd)?;
    let alignment = ctx.alignment.as_ref().expect("built above").alignment(&res.phi_xd);
    let slack = match a.update {
        UpdateKind::Finetune => glm::finetune_chain_slack(coef, y, e.f_x),
        UpdateKind::Retrain => glm::retrain_chain_slack(alignment, y, e.f_x, e.tuned_f_x),
    };
    if let Some(path) = &a.delta_out {
        let p = data::Perturbation::single(res.index, res.delta.clone());
        csv::write_sample(path, &data::apply_perturbation(&x, &p)?, Some(-y as i8))?;
    }
    print(&json!({
        "objective": cfg.objective.name(),
        "penalty": cfg.penalty,
        "index": res.index,
        "loss": res.loss,
        "evaluation": e,
        "reference": (2.0 - e.gamma.min(2.0)).powi(2),
        "chain_bound": glm::chain_bound(e.gamma, slack),
        "finetune_coefficient": coef,
        "alignment": alignment,
        "delta": b64(&res.delta),
    }));
    Ok(())
}

fn sweep_config(a: &SweepArgs) -> Result<Config> {
    let mut cfg = Config::load(&a.config).map_err(|e| match e {
        WsError::Io(io) => config_error(format!("cannot read {}: {io}", a.config.display())),
        e => e,
    })?;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_error(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(seed) = a.seed {
        cfg.set("experiment.seed", seed.to_string());
    }
    if let Some(out) = &a.out {
        cfg.set("output.dir", out.display().to_string());
    }
    if let Some(jobs) = a.jobs {
        cfg.set("output.jobs", jobs.to_string());
    }
    if a.plot_data {
        cfg.set("output.plot_data", "true");
    }
    if a.record_timing {
        cfg.set("output.record_timing", "true");
    }
    Ok(cfg)
}

fn sweep_sensitivity(a: SweepArgs) -> Result<()> {
    let cfg = sweep_config(&a)?;
    let plan = SensitivityPlan::from_config(&cfg)?;
    let out = sweep::sweep_sensitivity(&plan, &cfg.canonical())?;
    eprintln!("{} records written to {}", out.records.len(), plan.output.dir.display());
    Ok(())
}

fn sweep_generalization(a: SweepArgs) -> Result<()> {
    let cfg = sweep_config(&a)?;
    let plan = GeneralizationPlan::from_config(&cfg)?;
    let out = sweep::sweep_generalization(&plan, &cfg.canonical())?;
    eprintln!("{} records written to {}", out.records.len(), plan.output.dir.display());
    Ok(())
}

fn inspect_emb(path: &Path, rows: usize) -> Result<Value> {
    let ds = emb::read(path, &emb::ReadOptions::default())?;
    let header = emb::read_header(&mut BufReader::new(File::open(path)?))?;
    let samples: Vec<Value> = ds
        .samples()
        .iter()
        .take(rows)
        .enumerate()
        .map(|(j, x)| {
            let norms: Vec<f64> = (0..x.n()).map(|i| x.row(i).norm()).collect();
            json!({
                "sample": j,
                "label": ds.labels().map(|l| l[j]),
                "min_row_norm": norms.iter().copied().fold(f64::INFINITY, f64::min),
                "max_row_norm": norms.iter().copied().fold(0.0, f64::max),
                "normalized": x.is_normalized(),
            })
        })
        .collect();
    let positives = ds.labels().map(|l| l.iter().filter(|&&v| v == 1).count());
    Ok(json!({
        "format": "EMB1",
        "version": header.version,
        "count": header.count,
        "n": header.n,
        "d": header.d,
        "labels": header.has_labels(),
        "positive_labels": positives,
        "samples": samples,
    }))
}

fn fmt_inspect(a: InspectArgs) -> Result<()> {
    let mut magic = [0u8; 4];
    File::open(&a.file)?.read_exact(&mut magic).map_err(|_| WsError::ShortRead)?;
    let v = match &magic {
        b"EMB1" => inspect_emb(&a.file, a.rows)?,
        b"PRM1" => {
            let map = prm::read(&a.file)?;
            let (n, d) = map.context_shape();
            json!({
                "format": "PRM1",
                "map": map.kind().name(),
                "n": n,
                "d": d,
                "k": map.width(),
                "L": map.depth(),
                "activation": map.activation().map(|a| a.name()),
                "seed": map.seed(),
                "fingerprint": format!("{:016x}", prm::fingerprint(&map)),
            })
        }
        b"GLM1" => {
            let m = glm::read_model(&a.file)?;
            json!({
                "format": "GLM1",
                "map": m.kind.name(),
                "p": m.dim(),
                "fingerprint": format!("{:016x}", m.map_fingerprint),
                "theta_norm": m.theta.norm(),
                "theta0_norm": m.theta0.norm(),
            })
        }
        _ => return Err(WsError::BadMagic(magic)),
    };
    print(&v);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::WsEstimate(a) => ws_estimate(a),
        Command::WsConstruct(a) => ws_construct(a),
        Command::GlmTrain(a) => glm_train(a),
        Command::GlmFinetune(a) => glm_finetune(a),
        Command::GlmRetrain(a) => glm_retrain(a),
        Command::Attack(a) => attack(a),
        Command::SweepSensitivity(a) => sweep_sensitivity(a),
        Command::SweepGeneralization(a) => sweep_generalization(a),
        Command::FmtInspect(a) => fmt_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
