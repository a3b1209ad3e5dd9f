//! Searching for a perturbation that makes an updated GLM predict the flipped
//! label on `X^i(Delta)`.
//!
//! Every loss here is a quadratic in a linear functional of the perturbed
//! features, `(w^T phi' - c)^2`, optionally plus `p (theta*^T phi' - f(X))^2`,
//! so one objective covers all of them.

use nalgebra::DVector;
use serde::Serialize;

use crate::data::TokenMatrix;
use crate::error::{Result, WsError};
use crate::featmaps::{FeatureMap, Forward, RowProbe};
use crate::glm::{AlignmentBasis, FeatureMatrix, GlmModel};
use crate::optim::{Negated, Objective};
use crate::rng::tag;
use crate::sensitivity::{best_of_restarts, restart_init, PgaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Test error of the updated model on the perturbed sample.
    Err,
    /// Push the fine-tune coefficient towards -1.
    FtAlign,
    /// Push the feature alignment towards -1.
    RtAlign,
}

impl AttackObjective {
    pub const ALL: [Self; 3] = [Self::Err, Self::FtAlign, Self::RtAlign];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "err" => Ok(Self::Err),
            "ft_align" | "ft" => Ok(Self::FtAlign),
            "rt_align" | "rt" => Ok(Self::RtAlign),
            other => Err(WsError::InvalidConfig(format!("unknown attack objective {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Err => "err",
            Self::FtAlign => "ft_align",
            Self::RtAlign => "rt_align",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub objective: AttackObjective,
    /// Weight of the `gamma^2` penalty; 0 gives the plain objective.
    pub penalty: f64,
    pub pga: PgaConfig,
    pub index: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            objective: AttackObjective::Err,
            penalty: 0.0,
            pga: PgaConfig { iterations: 300, restarts: 8, ..PgaConfig::default() },
            index: 0,
        }
    }
}

/// Penalty weights swept for the penalized objectives.
pub const PENALTY_GRID: [f64; 3] = [1.0, 0.1, 0.01];

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(WsError::InvalidConfig(format!("penalty must be >= 0, got {}", self.penalty)));
        }
        self.pga.validate()
    }
}

/// Everything the objectives read: the held-out pair, the models and the
/// training features.
#[derive(Debug, Clone)]
pub struct AttackContext<'a> {
    pub map: &'a FeatureMap,
    pub x: &'a TokenMatrix,
    pub y: f64,
    pub y_delta: f64,
    pub base: &'a GlmModel,
    pub tuned: Option<&'a GlmModel>,
    pub phi_x: DVector<f64>,
    pub alignment: Option<AlignmentBasis>,
}

impl<'a> AttackContext<'a> {
    /// Context for the pair `(X, y)` with target label `-y`.
    pub fn new(map: &'a FeatureMap, x: &'a TokenMatrix, y: f64, base: &'a GlmModel) -> Result<Self> {
        let phi_x = map.features(x)?;
        if phi_x.len() != base.dim() {
            return Err(WsError::DimMismatch(format!("features have length {}, model {}", phi_x.len(), base.dim())));
        }
        Ok(Self { map, x, y, y_delta: -y, base, tuned: None, phi_x, alignment: None })
    }

    pub fn with_tuned(mut self, tuned: &'a GlmModel) -> Self {
        self.tuned = Some(tuned);
        self
    }

    /// Builds the retrain direction from the training features.
    pub fn with_training(mut self, phi: &FeatureMatrix) -> Result<Self> {
        self.alignment = Some(AlignmentBasis::new(&phi.projector(), &self.phi_x)?);
        Ok(self)
    }

    /// `(w, c)` with loss `(w^T phi' - c)^2`.
    fn functional(&self, objective: AttackObjective) -> Result<(DVector<f64>, f64)> {
        match objective {
            AttackObjective::Err => {
                let tuned = self
                    .tuned
                    .ok_or_else(|| WsError::InvalidConfig("err objective needs an updated model".into()))?;
                Ok((tuned.theta.clone(), self.y_delta))
            }
            AttackObjective::FtAlign => {
                let nsq = self.phi_x.norm_squared();
                if nsq == 0.0 {
                    return Err(WsError::ZeroFeatureNorm);
                }
                Ok((&self.phi_x / nsq, -1.0))
            }
            AttackObjective::RtAlign => {
                let basis = self
                    .alignment
                    .as_ref()
                    .ok_or_else(|| WsError::InvalidConfig("rt_align objective needs the training features".into()))?;
                Ok((&basis.q / basis.q_norm_sq, -1.0))
            }
        }
    }
}

struct AttackLoss<'p, 'm> {
    probe: &'p RowProbe<'m>,
    w: DVector<f64>,
    c: f64,
    penalty: f64,
    theta: DVector<f64>,
    f_x: f64,
}

impl AttackLoss<'_, '_> {
    fn parts(&self, phi: &DVector<f64>) -> (f64, f64) {
        (phi.dot(&self.w) - self.c, phi.dot(&self.theta) - self.f_x)
    }
}

impl Objective for AttackLoss<'_, '_> {
    type State = Forward;

    fn evaluate(&self, point: &[DVector<f64>]) -> Result<(f64, Forward)> {
        let fwd = self.probe.forward(point)?;
        let (a, g) = self.parts(&fwd.features);
        let value = a * a + self.penalty * (g * g);
        if !value.is_finite() {
            return Err(WsError::NonFinite("attack loss".into()));
        }
        Ok((value, fwd))
    }

    fn gradient(&self, _: &[DVector<f64>], fwd: &Forward) -> Result<Vec<DVector<f64>>> {
        let (a, g) = self.parts(&fwd.features);
        let mut cot = &self.w * (2.0 * a);
        if self.penalty != 0.0 {
            cot.axpy(2.0 * self.penalty * g, &self.theta, 1.0);
        }
        self.probe.backward(fwd, &cot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub index: usize,
    pub delta: DVector<f64>,
    /// Features of the perturbed sample.
    pub phi_xd: DVector<f64>,
    pub loss: f64,
    /// Best loss after each iteration of the winning restart.
    pub trace: Vec<f64>,
    pub restart: usize,
    pub iterations_used: usize,
}

/// Minimizes the selected loss over `||Delta|| <= sqrt(d)` on row `cfg.index`.
pub fn optimize_delta(ctx: &AttackContext<'_>, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let (w, c) = ctx.functional(cfg.objective)?;
    let probe = RowProbe::new(ctx.map, ctx.x, &[cfg.index])?;
    let loss = AttackLoss {
        probe: &probe,
        w,
        c,
        penalty: cfg.penalty,
        theta: ctx.base.theta.clone(),
        f_x: ctx.phi_x.dot(&ctx.base.theta),
    };
    let stream = [tag("attack"), cfg.index as u64, tag(cfg.objective.name())];
    let mut inits: Vec<_> = (0..cfg.pga.restarts).map(|r| restart_init(ctx.x, 1, &cfg.pga, &stream, r)).collect();
    inits.extend(cfg.pga.extra_inits.iter().cloned());
    let neg = Negated(&loss);
    let (restart, res) = best_of_restarts(&neg, inits, &cfg.pga.ascent(ctx.x.d()))?;
    let delta = res.point.into_iter().next().expect("one block");
    let phi_xd = probe.forward(std::slice::from_ref(&delta))?.features;
    Ok(AttackResult {
        index: cfg.index,
        delta,
        phi_xd,
        loss: -res.value,
        trace: res.trace.into_iter().map(|v| -v).collect(),
        restart,
        iterations_used: res.iterations_used,
    })
}
