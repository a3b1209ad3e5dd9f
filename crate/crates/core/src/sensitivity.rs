//! Word sensitivity: the relative change of a feature map when one row (or a
//! few rows) of the context moves by at most `sqrt(d)`, and a projected
//! gradient ascent estimator of its supremum.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{apply_perturbation, Perturbation, TokenMatrix};
use crate::error::{Result, WsError};
use crate::featmaps::{FeatureMap, Forward, RowProbe};
use crate::optim::{projected_ascent, AscentConfig, Objective};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Fixed(usize),
    /// Best over every row.
    SweepAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgaConfig {
    /// Initial step as a fraction of the budget `sqrt(d)`.
    pub step: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Norm of random initializations, as a fraction of `sqrt(d)`.
    pub init_scale: f64,
    pub index_mode: IndexMode,
    pub seed: u64,
    /// Extra starting points tried after the random restarts.
    pub extra_inits: Vec<Vec<DVector<f64>>>,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            iterations: 200,
            restarts: 10,
            init_scale: 1.0,
            index_mode: IndexMode::Fixed(0),
            seed: 0,
            extra_inits: Vec::new(),
        }
    }
}

impl PgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(WsError::InvalidConfig(format!("step must be positive, got {}", self.step)));
        }
        if self.restarts == 0 && self.extra_inits.is_empty() {
            return Err(WsError::InvalidConfig("at least one restart is required".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale <= 1.0) {
            return Err(WsError::InvalidConfig(format!("init scale must lie in (0, 1], got {}", self.init_scale)));
        }
        Ok(())
    }

    pub(crate) fn ascent(&self, d: usize) -> AscentConfig {
        AscentConfig { step: self.step, iterations: self.iterations, max_halvings: 20, radius: (d as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEstimate {
    /// `(row, delta)` for every perturbed row.
    pub perturbation: Vec<(usize, DVector<f64>)>,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    /// Objective `||phi(X') - phi(X)||^2` of the winning restart.
    pub trace: Vec<f64>,
    pub iterations_used: usize,
    pub restart: usize,
}

impl SensitivityEstimate {
    pub fn index(&self) -> usize {
        self.perturbation[0].0
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.perturbation[0].1
    }

    pub fn record(&self, map: &FeatureMap, x: &TokenMatrix) -> WsRecord {
        WsRecord {
            map: map.kind().name(),
            n: x.n(),
            d: x.d(),
            k: map.width(),
            l: map.depth(),
            seed: map.seed(),
            index: self.index(),
            m: self.perturbation.len(),
            ratio: self.ratio,
            numerator: self.numerator,
            denominator: self.denominator,
            iterations_used: self.iterations_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WsRecord {
    pub map: &'static str,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    pub index: usize,
    pub m: usize,
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub iterations_used: usize,
}

/// `||phi(X + P) - phi(X)|| / ||phi(X)||` for a budget-respecting `P`.
pub fn ws_ratio(map: &FeatureMap, x: &TokenMatrix, p: &Perturbation) -> Result<f64> {
    let base = map.features(x)?;
    let denom = base.norm();
    if denom == 0.0 {
        return Err(WsError::ZeroFeatureNorm);
    }
    let moved = map.features(&apply_perturbation(x, p)?)?;
    Ok((moved - base).norm() / denom)
}

/// `||phi(X') - phi(X)||^2` through a row probe.
pub(crate) struct DiffObjective<'p, 'm> {
    pub probe: &'p RowProbe<'m>,
    pub base: DVector<f64>,
}

impl Objective for DiffObjective<'_, '_> {
    type State = Forward;

    fn evaluate(&self, point: &[DVector<f64>]) -> Result<(f64, Forward)> {
        let fwd = self.probe.forward(point)?;
        Ok(((&fwd.features - &self.base).norm_squared(), fwd))
    }

    fn gradient(&self, _: &[DVector<f64>], fwd: &Forward) -> Result<Vec<DVector<f64>>> {
        self.probe.backward(fwd, &((&fwd.features - &self.base) * 2.0))
    }
}

/// Starting point of restart `r`: restart 1 points along a random context row,
/// every other restart along a uniformly random direction.
pub(crate) fn restart_init(x: &TokenMatrix, m: usize, cfg: &PgaConfig, stream: &[u64], r: usize) -> Vec<DVector<f64>> {
    let d = x.d();
    let radius = cfg.init_scale * (d as f64).sqrt();
    let mut path = stream.to_vec();
    path.push(r as u64);
    let mut g = rng::derived_rng(cfg.seed, &path);
    (0..m)
        .map(|_| {
            if r == 1 {
                let j = rand::Rng::random_range(&mut g, 0..x.n());
                let row = x.row(j);
                row.clone() * (radius / row.norm())
            } else {
                rng::unit_vector(&mut g, d) * radius
            }
        })
        .collect()
}

/// Runs every restart and returns the best `(restart, result)`; the lowest
/// restart index wins ties.
pub(crate) fn best_of_restarts<O: Objective + Sync>(
    obj: &O,
    inits: Vec<Vec<DVector<f64>>>,
    cfg: &AscentConfig,
) -> Result<(usize, crate::optim::AscentResult)> {
    let results: Vec<_> = inits
        .into_par_iter()
        .map(|init| projected_ascent(obj, init, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (r, res) in results.iter().enumerate() {
        if res.value > results[best].value {
            best = r;
        }
    }
    Ok((best, results.into_iter().nth(best).expect("at least one restart")))
}

fn estimate_rows(map: &FeatureMap, x: &TokenMatrix, rows: &[usize], cfg: &PgaConfig) -> Result<SensitivityEstimate> {
    let probe = RowProbe::new(map, x, rows)?;
    let base = probe.base_features();
    let denominator = base.norm();
    if denominator == 0.0 {
        return Err(WsError::ZeroFeatureNorm);
    }
    let obj = DiffObjective { probe: &probe, base };
    let stream = [tag("ws-restart"), rows[0] as u64, rows.len() as u64];
    let mut inits: Vec<_> = (0..cfg.restarts).map(|r| restart_init(x, rows.len(), cfg, &stream, r)).collect();
    for extra in &cfg.extra_inits {
        if extra.len() != rows.len() {
            return Err(WsError::DimMismatch(format!(
                "extra initialization has {} blocks, expected {}",
                extra.len(),
                rows.len()
            )));
        }
        inits.push(extra.clone());
    }
    let (restart, res) = best_of_restarts(&obj, inits, &cfg.ascent(x.d()))?;
    let numerator = res.value.sqrt();
    Ok(SensitivityEstimate {
        perturbation: rows.iter().copied().zip(res.point).collect(),
        numerator,
        denominator,
        ratio: numerator / denominator,
        trace: res.trace,
        iterations_used: res.iterations_used,
        restart,
    })
}

/// Lower bound on the word sensitivity by projected gradient ascent.
pub fn estimate_ws(map: &FeatureMap, x: &TokenMatrix, cfg: &PgaConfig) -> Result<SensitivityEstimate> {
    cfg.validate()?;
    match cfg.index_mode {
        IndexMode::Fixed(i) => estimate_rows(map, x, &[i], cfg),
        IndexMode::SweepAll => {
            let mut best: Option<SensitivityEstimate> = None;
            for i in 0..x.n() {
                let est = estimate_rows(map, x, &[i], cfg)?;
                if best.as_ref().is_none_or(|b| est.ratio > b.ratio) {
                    best = Some(est);
                }
            }
            Ok(best.expect("n >= 1"))
        }
    }
}

/// Joint perturbation of rows `0..m`, each within its own budget.
pub fn estimate_ws_multi(map: &FeatureMap, x: &TokenMatrix, m: usize, cfg: &PgaConfig) -> Result<SensitivityEstimate> {
    cfg.validate()?;
    if m == 0 || m > x.n() {
        return Err(WsError::InvalidConfig(format!("m must lie in [1, {}], got {m}", x.n())));
    }
    let rows: Vec<usize> = (0..m).collect();
    estimate_rows(map, x, &rows, cfg)
}
