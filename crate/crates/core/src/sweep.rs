//! Seeded experiment sweeps: word sensitivity over a grid of maps and
//! context lengths, and fine-tune/retrain generalization under attack.
//!
//! Every random stream is derived from `(master seed, experiment, trial,
//! purpose)`, trials are collected in order, and wall time is left out unless
//! asked for, so a rerun writes the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{optimize_delta, AttackConfig, AttackContext, AttackObjective};
use crate::config::Config;
use crate::construct::{construct_perturbation, ConstructConfig};
use crate::data::{self, emb, LabeledDataset, Perturbation, TokenMatrix};
use crate::error::{Result, WsError};
use crate::featmaps::{Activation, FeatureMap, MapKind, MapSpec};
use crate::glm::{self, FeatureMatrix};
use crate::rng::{self, derive_seed, tag};
use crate::sensitivity::{estimate_ws, estimate_ws_multi, ws_ratio, IndexMode, PgaConfig};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const PLOT_FILE: &str = "plot.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Emb(PathBuf),
}

impl DataSource {
    fn parse(s: &str) -> Self {
        if s.eq_ignore_ascii_case("synthetic") {
            Self::Synthetic
        } else {
            Self::Emb(PathBuf::from(s))
        }
    }

    fn describe(&self) -> String {
        match self {
            Self::Synthetic => "synthetic".into(),
            Self::Emb(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub plot_data: bool,
    pub record_timing: bool,
    pub jobs: usize,
}

impl OutputOptions {
    fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            dir: PathBuf::from(cfg.get_str("output.dir").unwrap_or("out")),
            plot_data: cfg.get_bool("output.plot_data", false)?,
            record_timing: cfg.get_bool("output.record_timing", false)?,
            jobs: cfg.get_or("output.jobs", 1usize)?.max(1),
        })
    }
}

fn parse_kinds(cfg: &Config, default: Vec<MapKind>) -> Result<Vec<MapKind>> {
    match cfg.get_list::<String>("map.kinds")? {
        None => Ok(default),
        Some(names) => names
            .iter()
            .map(|s| MapKind::parse(s).map_err(|e| WsError::Config { line: cfg.line_of("map.kinds"), msg: e.to_string() }))
            .collect(),
    }
}

fn parse_activation(cfg: &Config) -> Result<Activation> {
    let name = cfg.get_str("map.activation").unwrap_or("relu");
    Activation::parse(name).map_err(|e| WsError::Config { line: cfg.line_of("map.activation"), msg: e.to_string() })
}

fn parse_pga(cfg: &Config, section: &str, base: PgaConfig) -> Result<PgaConfig> {
    let key = |k: &str| format!("{section}.{k}");
    let index_mode = match cfg.get_str(&key("index")) {
        None => base.index_mode,
        Some(s) if s.eq_ignore_ascii_case("all") => IndexMode::SweepAll,
        Some(s) => IndexMode::Fixed(
            s.parse()
                .map_err(|_| WsError::Config { line: cfg.line_of(&key("index")), msg: format!("bad index {s:?}") })?,
        ),
    };
    let pga = PgaConfig {
        step: cfg.get_or(&key("step"), base.step)?,
        iterations: cfg.get_or(&key("iterations"), base.iterations)?,
        restarts: cfg.get_or(&key("restarts"), base.restarts)?,
        init_scale: cfg.get_or(&key("init_scale"), base.init_scale)?,
        index_mode,
        seed: 0,
        extra_inits: Vec::new(),
    };
    pga.validate().map_err(|e| WsError::Config { line: cfg.line_of(&key("step")), msg: e.to_string() })?;
    Ok(pga)
}

fn positive(cfg: &Config, key: &str, values: &[usize]) -> Result<()> {
    if values.contains(&0) {
        return Err(WsError::Config { line: cfg.line_of(key), msg: format!("{key} must be positive") });
    }
    Ok(())
}

/// Loads the source once; samples are cut to each grid point's `(n, d)`.
fn load_source(source: &DataSource) -> Result<Option<LabeledDataset>> {
    match source {
        DataSource::Synthetic => Ok(None),
        DataSource::Emb(path) => Ok(Some(emb::read(path, &emb::ReadOptions::default())?)),
    }
}

fn cut(x: &TokenMatrix, n: usize, d: usize) -> Result<TokenMatrix> {
    data::normalize_rows(&x.truncate(n, d)?)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| WsError::InvalidConfig(format!("cannot start worker pool: {e}")))
}

fn write_outputs<R: Serialize>(opts: &OutputOptions, canonical: &str, records: &[R], aggregate: &str, plot: &str) -> Result<()> {
    fs::create_dir_all(&opts.dir)?;
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r).map_err(|e| WsError::InvalidConfig(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(opts.dir.join(RECORDS_FILE), lines)?;
    fs::write(opts.dir.join(AGGREGATE_FILE), aggregate)?;
    fs::write(opts.dir.join(CONFIG_FILE), canonical)?;
    if opts.plot_data {
        fs::write(opts.dir.join(PLOT_FILE), plot)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sensitivity sweeps

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPlan {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    pub source: DataSource,
    pub kinds: Vec<MapKind>,
    pub ns: Vec<usize>,
    pub ds: Vec<usize>,
    pub ks: Vec<usize>,
    pub depths: Vec<usize>,
    pub d_inner: Option<usize>,
    pub activation: Activation,
    pub pga: PgaConfig,
    /// Rows perturbed jointly; 1 is the single-word case.
    pub ms: Vec<usize>,
    /// Run the explicit construction on attention maps.
    pub construct: Option<ConstructConfig>,
    pub output: OutputOptions,
}

impl SensitivityPlan {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let ns = cfg.get_list_or("map.n", vec![8, 16, 32, 64])?;
        let ds = cfg.get_list_or("map.d", vec![64])?;
        let ks = cfg.get_list_or("map.k", vec![512])?;
        let depths = cfg.get_list_or("map.depth", vec![1])?;
        let ms = cfg.get_list_or("pga.m", vec![1])?;
        for (key, v) in [("map.n", &ns), ("map.d", &ds), ("map.k", &ks), ("map.depth", &depths), ("pga.m", &ms)] {
            positive(cfg, key, v)?;
        }
        let construct = if cfg.get_bool("construct.enabled", true)? {
            let base = ConstructConfig::default();
            Some(ConstructConfig {
                sphere_samples: cfg.get_or("construct.samples", base.sphere_samples)?,
                tau: cfg.get_or("construct.tau", base.tau)?,
                target_fraction: cfg.get_or("construct.target_fraction", base.target_fraction)?,
                c0: cfg.get_or("construct.c0", base.c0)?,
                epsilon: cfg.get_or("construct.epsilon", base.epsilon)?,
                seed: 0,
            })
        } else {
            None
        };
        let plan = Self {
            name: cfg.get_str("experiment.name").unwrap_or("sensitivity").to_string(),
            seed: cfg.get_or("experiment.seed", 0u64)?,
            trials: cfg.get_or("experiment.trials", 10usize)?,
            source: DataSource::parse(cfg.get_str("data.source").unwrap_or("synthetic")),
            kinds: parse_kinds(cfg, vec![MapKind::Rf])?,
            ns,
            ds,
            ks,
            depths,
            d_inner: cfg.get("map.d_inner")?,
            activation: parse_activation(cfg)?,
            pga: parse_pga(cfg, "pga", PgaConfig::default())?,
            ms,
            construct,
            output: OutputOptions::from_config(cfg)?,
        };
        cfg.reject_unused()?;
        Ok(plan)
    }

    fn grid(&self) -> Vec<SensPoint> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &d in &self.ds {
                for &n in &self.ns {
                    let ks: &[usize] = if matches!(kind, MapKind::Rf | MapKind::Drf) { &self.ks } else { &[0] };
                    let depths: &[usize] = if kind == MapKind::Drf { &self.depths } else { &[1] };
                    for &k in ks {
                        for &depth in depths {
                            for &m in self.ms.iter().filter(|&&m| m <= n) {
                                out.push(SensPoint { kind, n, d, k, depth, m });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SensPoint {
    kind: MapKind,
    n: usize,
    d: usize,
    k: usize,
    depth: usize,
    m: usize,
}

/// One trial of a sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRecord {
    pub experiment: String,
    pub map: &'static str,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub m: usize,
    pub activation: &'static str,
    pub seed: u64,
    pub trial: usize,
    pub map_seed: u64,
    pub data_seed: u64,
    pub source: String,
    pub step: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub init_scale: f64,
    pub index: usize,
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub iterations_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub construct_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concentration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aligned_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

fn draw_context(plan_name: &str, source: Option<&LabeledDataset>, n: usize, d: usize, data_seed: u64) -> Result<TokenMatrix> {
    match source {
        None => Ok(data::synth_context(n, d, data_seed)),
        Some(ds) => {
            let mut g = rng::rng_from(data_seed);
            let j = rand::Rng::random_range(&mut g, 0..ds.len());
            log::debug!("{plan_name}: using sample {j}");
            cut(&ds.samples()[j], n, d)
        }
    }
}

fn sensitivity_trial(plan: &SensitivityPlan, source: Option<&LabeledDataset>, p: SensPoint, trial: usize) -> Result<SensitivityRecord> {
    let start = Instant::now();
    let exp = tag(&plan.name);
    let map_seed = derive_seed(plan.seed, &[exp, trial as u64, tag("map"), tag(p.kind.name()), p.n as u64, p.d as u64, p.k as u64, p.depth as u64]);
    let data_seed = derive_seed(plan.seed, &[exp, trial as u64, tag("data"), p.n as u64, p.d as u64]);
    let x = draw_context(&plan.name, source, p.n, p.d, data_seed)?;
    let mut spec = MapSpec::new(p.kind, p.n, p.d).with_k(p.k).with_depth(p.depth).with_activation(plan.activation.clone());
    if let Some(di) = plan.d_inner {
        spec = spec.with_d_inner(di);
    }
    let map = FeatureMap::sample(&spec, map_seed)?;
    let pga = PgaConfig { seed: derive_seed(plan.seed, &[exp, trial as u64, tag("pga")]), ..plan.pga.clone() };
    let est = if p.m == 1 { estimate_ws(&map, &x, &pga)? } else { estimate_ws_multi(&map, &x, p.m, &pga)? };
    let (mut construct_ratio, mut concentration, mut aligned_count) = (None, None, None);
    if let (Some(cc), true) = (&plan.construct, p.kind.is_attention() && p.m == 1) {
        let cc = ConstructConfig { seed: derive_seed(plan.seed, &[exp, trial as u64, tag("construct")]), ..cc.clone() };
        match construct_perturbation(&map, &x, est.index(), &cc) {
            Ok(rep) => {
                construct_ratio = Some(rep.ratio);
                concentration = Some(rep.fractions[rep.chosen]);
                aligned_count = Some(rep.aligned_count);
            }
            Err(e @ (WsError::ZeroLift | WsError::RankZero)) => log::warn!("construction skipped: {e}"),
            Err(e) => return Err(e),
        }
    }
    if !est.ratio.is_finite() {
        return Err(WsError::NonFinite("sensitivity ratio".into()));
    }
    Ok(SensitivityRecord {
        experiment: plan.name.clone(),
        map: p.kind.name(),
        n: p.n,
        d: p.d,
        k: p.k,
        l: p.depth,
        m: p.m,
        activation: plan.activation.name(),
        seed: plan.seed,
        trial,
        map_seed,
        data_seed,
        source: plan.source.describe(),
        step: pga.step,
        iterations: pga.iterations,
        restarts: pga.restarts,
        init_scale: pga.init_scale,
        index: est.index(),
        ratio: est.ratio,
        numerator: est.numerator,
        denominator: est.denominator,
        iterations_used: est.iterations_used,
        construct_ratio,
        concentration,
        aligned_count,
        wall_time_s: plan.output.record_timing.then(|| start.elapsed().as_secs_f64()),
    })
}

#[derive(Debug, Clone)]
pub struct SensitivityOutput {
    pub records: Vec<SensitivityRecord>,
    pub aggregate_csv: String,
    pub plot_csv: String,
}

/// Runs every trial of the grid; records are ordered by grid point, then trial.
pub fn run_sensitivity(plan: &SensitivityPlan) -> Result<SensitivityOutput> {
    if plan.trials == 0 {
        return Err(WsError::InvalidConfig("trials must be positive".into()));
    }
    let source = load_source(&plan.source)?;
    let jobs: Vec<(SensPoint, usize)> =
        plan.grid().into_iter().flat_map(|p| (0..plan.trials).map(move |t| (p, t))).collect();
    let records = pool(plan.output.jobs)?.install(|| {
        jobs.par_iter().map(|&(p, t)| sensitivity_trial(plan, source.as_ref(), p, t)).collect::<Result<Vec<_>>>()
    })?;
    let aggregate_csv = sensitivity_aggregate(&records);
    let plot_csv = sensitivity_plot(&records);
    Ok(SensitivityOutput { records, aggregate_csv, plot_csv })
}

pub fn sweep_sensitivity(plan: &SensitivityPlan, canonical: &str) -> Result<SensitivityOutput> {
    let out = run_sensitivity(plan)?;
    write_outputs(&plan.output, canonical, &out.records, &out.aggregate_csv, &out.plot_csv)?;
    Ok(out)
}

type SensKey = (&'static str, usize, usize, usize, usize, usize);

fn sens_groups(records: &[SensitivityRecord]) -> Vec<(SensKey, Vec<&SensitivityRecord>)> {
    let mut order: Vec<SensKey> = Vec::new();
    let mut groups: BTreeMap<SensKey, Vec<&SensitivityRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.map, r.d, r.k, r.l, r.m, r.n);
        groups.entry(key).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        groups.get_mut(&key).expect("inserted").push(r);
    }
    order.into_iter().map(|k| (k, groups.remove(&k).expect("present"))).collect()
}

fn opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Mean and sample standard deviation per grid point.
pub fn sensitivity_aggregate(records: &[SensitivityRecord]) -> String {
    let mut s = String::from("experiment,map,n,d,k,L,m,trials,mean_ratio,std_ratio,mean_construct_ratio,mean_concentration\n");
    for ((map, d, k, l, m, n), rs) in sens_groups(records) {
        let (mean, std) = mean_std(&rs.iter().map(|r| r.ratio).collect::<Vec<_>>());
        let cr: Vec<f64> = rs.iter().filter_map(|r| r.construct_ratio).collect();
        let cc: Vec<f64> = rs.iter().filter_map(|r| r.concentration).collect();
        let _ = writeln!(
            s,
            "{},{map},{n},{d},{k},{l},{m},{},{mean},{std},{},{}",
            rs[0].experiment,
            rs.len(),
            opt(mean_std(&cr).0),
            opt(mean_std(&cc).0)
        );
    }
    s
}

fn sensitivity_plot(records: &[SensitivityRecord]) -> String {
    let mut s = String::from("figure,series,x,y,trial\n");
    for r in records {
        let _ = writeln!(s, "ws_vs_n,map={} d={} k={} L={} m={},{},{},{}", r.map, r.d, r.k, r.l, r.m, r.n, r.ratio, r.trial);
    }
    s
}

// ---------------------------------------------------------------------------
// Generalization sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Update {
    Finetune,
    Retrain,
}

impl Update {
    pub fn name(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationPlan {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    pub source: DataSource,
    pub kinds: Vec<MapKind>,
    pub big_ns: Vec<usize>,
    pub ns: Vec<usize>,
    pub ds: Vec<usize>,
    pub k: usize,
    pub depth: usize,
    pub d_inner: Option<usize>,
    pub activation: Activation,
    pub objectives: Vec<AttackObjective>,
    pub penalties: Vec<f64>,
    /// Pair ft_align with retraining and rt_align with fine-tuning instead.
    pub cross: bool,
    pub attack: AttackConfig,
    pub output: OutputOptions,
}

impl GeneralizationPlan {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let big_ns = cfg.get_list_or("glm.N", vec![64])?;
        let ns = cfg.get_list_or("map.n", vec![16])?;
        let ds = cfg.get_list_or("map.d", vec![32])?;
        for (key, v) in [("glm.N", &big_ns), ("map.n", &ns), ("map.d", &ds)] {
            positive(cfg, key, v)?;
        }
        let objectives = match cfg.get_list::<String>("attack.objectives")? {
            None => AttackObjective::ALL.to_vec(),
            Some(v) => v
                .iter()
                .map(|s| AttackObjective::parse(s).map_err(|e| WsError::Config { line: cfg.line_of("attack.objectives"), msg: e.to_string() }))
                .collect::<Result<_>>()?,
        };
        let penalties: Vec<f64> = cfg.get_list_or("attack.penalties", vec![0.0])?;
        if penalties.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(WsError::Config { line: cfg.line_of("attack.penalties"), msg: "penalties must be >= 0".into() });
        }
        let defaults = AttackConfig::default();
        let index = cfg.get_or("attack.index", 0usize)?;
        let pga = parse_pga(cfg, "attack", PgaConfig { index_mode: IndexMode::Fixed(index), ..defaults.pga })?;
        let plan = Self {
            name: cfg.get_str("experiment.name").unwrap_or("generalization").to_string(),
            seed: cfg.get_or("experiment.seed", 0u64)?,
            trials: cfg.get_or("experiment.trials", 10usize)?,
            source: DataSource::parse(cfg.get_str("data.source").unwrap_or("synthetic")),
            kinds: parse_kinds(cfg, vec![MapKind::Rf])?,
            big_ns,
            ns,
            ds,
            k: cfg.get_or("map.k", 1024usize)?,
            depth: cfg.get_or("map.depth", 1usize)?,
            d_inner: cfg.get("map.d_inner")?,
            activation: parse_activation(cfg)?,
            objectives,
            penalties,
            cross: cfg.get_bool("attack.cross", false)?,
            attack: AttackConfig { objective: AttackObjective::Err, penalty: 0.0, pga, index },
            output: OutputOptions::from_config(cfg)?,
        };
        cfg.reject_unused()?;
        Ok(plan)
    }

    /// `(update, objective)` pairs attacked in each trial.
    pub fn pairings(&self) -> Vec<(Update, AttackObjective)> {
        let mut out = Vec::new();
        for &obj in &self.objectives {
            match (obj, self.cross) {
                (AttackObjective::Err, _) => {
                    out.push((Update::Finetune, obj));
                    out.push((Update::Retrain, obj));
                }
                (AttackObjective::FtAlign, false) | (AttackObjective::RtAlign, true) => out.push((Update::Finetune, obj)),
                (AttackObjective::FtAlign, true) | (AttackObjective::RtAlign, false) => out.push((Update::Retrain, obj)),
            }
        }
        out
    }

    fn grid(&self) -> Vec<GenPoint> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &d in &self.ds {
                for &n in &self.ns {
                    for &big_n in &self.big_ns {
                        out.push(GenPoint { kind, n, d, big_n });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GenPoint {
    kind: MapKind,
    n: usize,
    d: usize,
    big_n: usize,
}

/// One attacked pair of a generalization sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationRecord {
    pub experiment: String,
    pub map: &'static str,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub activation: &'static str,
    pub seed: u64,
    pub trial: usize,
    pub map_seed: u64,
    pub data_seed: u64,
    pub source: String,
    pub update: Update,
    pub objective: AttackObjective,
    pub penalty: f64,
    pub step: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub init_scale: f64,
    pub index: usize,
    pub y: f64,
    pub y_delta: f64,
    pub f_x: f64,
    pub f_xd: f64,
    pub tuned_f_x: f64,
    pub tuned_f_xd: f64,
    /// Prediction gap of the pre-update model, clamped to `[0, 2]`.
    pub gamma: f64,
    pub gamma_raw: f64,
    pub err: f64,
    /// `(2 - gamma)^2`.
    pub reference: f64,
    /// Bound from the measured chain of inequalities.
    pub chain_bound: f64,
    pub slack: f64,
    pub finetune_coefficient: f64,
    pub alignment: f64,
    pub ratio: f64,
    pub lambda_min: f64,
    pub condition: f64,
    pub attack_loss: f64,
    /// `|f(X', theta_r) - f(X, theta_r)|` of the retrained model.
    pub retrained_gap: f64,
    pub sqrt_n_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Training set and held-out pair of one trial.
fn draw_dataset(source: Option<&LabeledDataset>, big_n: usize, n: usize, d: usize, seed: u64) -> Result<(LabeledDataset, TokenMatrix, f64)> {
    match source {
        None => {
            let train = data::synth_dataset(big_n, n, d, seed);
            let mut g = rng::derived_rng(seed, &[tag("held-out")]);
            let x = data::synth_context_with(&mut g, n, d);
            Ok((train, x, rng::rademacher(&mut g)))
        }
        Some(ds) => {
            let labels = ds.labels().ok_or_else(|| WsError::InvalidConfig("generalization sweeps need a labeled EMB1 file".into()))?;
            if ds.len() < big_n + 1 {
                return Err(WsError::InvalidConfig(format!("need {} samples, file has {}", big_n + 1, ds.len())));
            }
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng::rng_from(seed));
            let samples = idx[..big_n].iter().map(|&j| cut(&ds.samples()[j], n, d)).collect::<Result<Vec<_>>>()?;
            let train_labels = idx[..big_n].iter().map(|&j| labels[j]).collect();
            let held = idx[big_n];
            Ok((LabeledDataset::new(samples, Some(train_labels))?, cut(&ds.samples()[held], n, d)?, labels[held] as f64))
        }
    }
}

fn generalization_trial(plan: &GeneralizationPlan, source: Option<&LabeledDataset>, p: GenPoint, trial: usize) -> Result<Vec<GeneralizationRecord>> {
    let start = Instant::now();
    let exp = tag(&plan.name);
    let t = trial as u64;
    let map_seed = derive_seed(plan.seed, &[exp, t, tag("map"), tag(p.kind.name()), p.n as u64, p.d as u64]);
    let data_seed = derive_seed(plan.seed, &[exp, t, tag("data"), p.big_n as u64, p.n as u64, p.d as u64]);
    let (train, x, y) = draw_dataset(source, p.big_n, p.n, p.d, data_seed)?;
    let mut spec = MapSpec::new(p.kind, p.n, p.d).with_k(plan.k).with_depth(plan.depth).with_activation(plan.activation.clone());
    if let Some(di) = plan.d_inner {
        spec = spec.with_d_inner(di);
    }
    let map = FeatureMap::sample(&spec, map_seed)?;
    let phi = FeatureMatrix::build(&map, train.samples())?;
    let labels = train.labels_f64().expect("training labels");
    let theta0 = DVector::zeros(phi.dim());
    let base = glm::fit(&phi, &labels, &theta0, p.kind)?;
    let phi_x = map.features(&x)?;
    let ft = glm::finetune(&base, &phi_x, y)?;
    let rt = glm::retrain(&phi, &labels, &phi_x, y, &theta0, p.kind)?;
    let diag = glm::kernel_diagnostics(&phi.augmented(&phi_x)?, None)?;
    let ctx = AttackContext::new(&map, &x, y, &base)?.with_training(&phi)?;
    let sqrt_n_ratio = (p.big_n as f64 / p.n as f64).sqrt();

    let mut out = Vec::new();
    for (update, objective) in plan.pairings() {
        let tuned = match update {
            Update::Finetune => &ft,
            Update::Retrain => &rt,
        };
        let ctx = ctx.clone().with_tuned(tuned);
        for &penalty in &plan.penalties {
            let pga = PgaConfig {
                seed: derive_seed(plan.seed, &[exp, t, tag("attack"), tag(update.name()), tag(objective.name()), penalty.to_bits()]),
                ..plan.attack.pga.clone()
            };
            let cfg = AttackConfig { objective, penalty, pga, index: plan.attack.index };
            let res = optimize_delta(&ctx, &cfg)?;
            let e = glm::evaluate_pair(&base, tuned, &phi_x, &res.phi_xd, y, -y)?;
            let coef = glm::finetune_coefficient(&phi_x, &res.phi_xd)?;
            let alignment = ctx.alignment.as_ref().expect("built above").alignment(&res.phi_xd);
            let slack = match update {
                Update::Finetune => glm::finetune_chain_slack(coef, y, e.f_x),
                Update::Retrain => glm::retrain_chain_slack(alignment, y, e.f_x, e.tuned_f_x),
            };
            let ratio = ws_ratio(&map, &x, &Perturbation::single(res.index, res.delta.clone()))?;
            let retrained_gap = (rt.predict(&res.phi_xd)? - rt.predict(&phi_x)?).abs();
            if !(e.err.is_finite() && e.gamma.is_finite()) {
                return Err(WsError::NonFinite("generalization measurement".into()));
            }
            let gamma = e.gamma.clamp(0.0, 2.0);
            out.push(GeneralizationRecord {
                experiment: plan.name.clone(),
                map: p.kind.name(),
                n: p.n,
                d: p.d,
                k: if matches!(p.kind, MapKind::Rf | MapKind::Drf) { plan.k } else { 0 },
                l: if p.kind == MapKind::Drf { plan.depth } else { 1 },
                big_n: p.big_n,
                activation: plan.activation.name(),
                seed: plan.seed,
                trial,
                map_seed,
                data_seed,
                source: plan.source.describe(),
                update,
                objective,
                penalty,
                step: cfg.pga.step,
                iterations: cfg.pga.iterations,
                restarts: cfg.pga.restarts,
                init_scale: cfg.pga.init_scale,
                index: res.index,
                y,
                y_delta: -y,
                f_x: e.f_x,
                f_xd: e.f_xd,
                tuned_f_x: e.tuned_f_x,
                tuned_f_xd: e.tuned_f_xd,
                gamma,
                gamma_raw: e.gamma,
                err: e.err,
                reference: (2.0 - gamma).powi(2),
                chain_bound: glm::chain_bound(e.gamma, slack),
                slack,
                finetune_coefficient: coef,
                alignment,
                ratio,
                lambda_min: diag.lambda_min,
                condition: diag.condition,
                attack_loss: res.loss,
                retrained_gap,
                sqrt_n_ratio,
                wall_time_s: None,
            });
        }
    }
    if plan.output.record_timing {
        let secs = start.elapsed().as_secs_f64();
        for r in &mut out {
            r.wall_time_s = Some(secs);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GeneralizationOutput {
    pub records: Vec<GeneralizationRecord>,
    pub aggregate_csv: String,
    pub plot_csv: String,
}

pub fn run_generalization(plan: &GeneralizationPlan) -> Result<GeneralizationOutput> {
    if plan.trials == 0 {
        return Err(WsError::InvalidConfig("trials must be positive".into()));
    }
    let source = load_source(&plan.source)?;
    let jobs: Vec<(GenPoint, usize)> =
        plan.grid().into_iter().flat_map(|p| (0..plan.trials).map(move |t| (p, t))).collect();
    let per_trial = pool(plan.output.jobs)?.install(|| {
        jobs.par_iter()
            .map(|&(p, t)| generalization_trial(plan, source.as_ref(), p, t))
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<_> = per_trial.into_iter().flatten().collect();
    let aggregate_csv = generalization_aggregate(&records);
    let plot_csv = generalization_plot(&records);
    Ok(GeneralizationOutput { records, aggregate_csv, plot_csv })
}

pub fn sweep_generalization(plan: &GeneralizationPlan, canonical: &str) -> Result<GeneralizationOutput> {
    let out = run_generalization(plan)?;
    write_outputs(&plan.output, canonical, &out.records, &out.aggregate_csv, &out.plot_csv)?;
    Ok(out)
}

type GenKey = (&'static str, usize, usize, usize, &'static str, &'static str, u64);

/// Per group: gamma/err statistics, the worst gap to `(2 - gamma)^2`, and the
/// robustness diagnostic, i.e. the retrained model's gap relative to `sqrt(N / n)`.
pub fn generalization_aggregate(records: &[GeneralizationRecord]) -> String {
    let mut order: Vec<GenKey> = Vec::new();
    let mut groups: BTreeMap<GenKey, Vec<&GeneralizationRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.map, r.big_n, r.n, r.d, r.update.name(), r.objective.name(), r.penalty.to_bits());
        groups.entry(key).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        groups.get_mut(&key).expect("inserted").push(r);
    }
    let mut s = String::from(
        "experiment,map,N,n,d,update,objective,penalty,trials,mean_gamma,std_gamma,mean_err,std_err,min_gap,chain_violations,mean_retrained_gap,sqrt_N_over_n,robustness_ratio\n",
    );
    for key in order {
        let rs = &groups[&key];
        let (map, big_n, n, d, update, objective, pbits) = key;
        let col = |f: fn(&GeneralizationRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
        let (mg, sg) = mean_std(&col(|r| r.gamma));
        let (me, se) = mean_std(&col(|r| r.err));
        let min_gap = col(|r| r.err - r.reference).into_iter().fold(f64::INFINITY, f64::min);
        let violations = rs.iter().filter(|r| r.err < r.chain_bound - 1e-6).count();
        let (mrg, _) = mean_std(&col(|r| r.retrained_gap));
        let root = rs[0].sqrt_n_ratio;
        let _ = writeln!(
            s,
            "{},{map},{big_n},{n},{d},{update},{objective},{},{},{mg},{sg},{me},{se},{min_gap},{violations},{mrg},{root},{}",
            rs[0].experiment,
            f64::from_bits(pbits),
            rs.len(),
            mrg / root
        );
    }
    s
}

fn generalization_plot(records: &[GeneralizationRecord]) -> String {
    let mut s = String::from("figure,series,x,y,trial\n");
    for r in records {
        let _ = writeln!(
            s,
            "err_vs_gamma,map={} N={} n={} {} {} p={},{},{},{}",
            r.map,
            r.big_n,
            r.n,
            r.update.name(),
            r.objective.name(),
            r.penalty,
            r.gamma,
            r.err,
            r.trial
        );
    }
    for j in 0..=40 {
        let g = j as f64 * 0.05;
        let _ = writeln!(s, "err_vs_gamma,reference,{g},{},", (2.0 - g).powi(2));
    }
    s
}
