//! Projected first-order ascent over a product of Euclidean balls.
//!
//! The iterate is a list of blocks (one per perturbed row), each constrained
//! to the ball of a common radius. Steps move along the normalized gradient
//! and are halved until the objective strictly increases, so the objective
//! trace is non-decreasing by construction.

use nalgebra::DVector;

use crate::data::project_to_ball;
use crate::error::{Result, WsError};

/// A differentiable objective that can be evaluated first and differentiated
/// afterwards, so rejected line-search candidates skip the backward pass.
pub trait Objective {
    type State;

    fn evaluate(&self, point: &[DVector<f64>]) -> Result<(f64, Self::State)>;

    fn gradient(&self, point: &[DVector<f64>], state: &Self::State) -> Result<Vec<DVector<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    /// Initial (and maximal) step, as a fraction of the ball radius.
    pub step: f64,
    pub iterations: usize,
    pub max_halvings: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    pub point: Vec<DVector<f64>>,
    pub value: f64,
    /// Objective after initialization and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations_used: usize,
}

fn project_all(point: &mut [DVector<f64>], radius: f64) {
    for block in point.iter_mut() {
        project_to_ball(block, radius);
    }
}

fn sq_norm(blocks: &[DVector<f64>]) -> f64 {
    blocks.iter().map(|b| b.norm_squared()).sum()
}

/// Maximizes `obj` from `init` (projected first).
pub fn projected_ascent<O: Objective>(obj: &O, init: Vec<DVector<f64>>, cfg: &AscentConfig) -> Result<AscentResult> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(WsError::InvalidConfig(format!("step must be positive, got {}", cfg.step)));
    }
    let mut point = init;
    project_all(&mut point, cfg.radius);
    let (mut value, mut state) = obj.evaluate(&point)?;
    if !value.is_finite() {
        return Err(WsError::NonFinite("objective at initialization".into()));
    }
    let mut trace = vec![value];
    let scale = cfg.radius * (point.len() as f64).sqrt();
    let mut eta = cfg.step;
    let mut used = 0;

    for _ in 0..cfg.iterations {
        let grad = obj.gradient(&point, &state)?;
        let gnorm = sq_norm(&grad).sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            break;
        }
        let mut trial_eta = eta;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut cand: Vec<DVector<f64>> = point
                .iter()
                .zip(&grad)
                .map(|(p, g)| p + g * (trial_eta * scale / gnorm))
                .collect();
            project_all(&mut cand, cfg.radius);
            let moved: f64 = cand.iter().zip(&point).map(|(a, b)| (a - b).norm_squared()).sum();
            if moved == 0.0 {
                break;
            }
            let (v, s) = obj.evaluate(&cand)?;
            if v.is_finite() && v > value {
                accepted = Some((cand, v, s));
                break;
            }
            trial_eta *= 0.5;
        }
        let Some((cand, v, s)) = accepted else { break };
        point = cand;
        value = v;
        state = s;
        trace.push(value);
        used += 1;
        eta = (2.0 * trial_eta).min(cfg.step);
    }
    Ok(AscentResult { point, value, trace, iterations_used: used })
}

/// Turns a maximizer into a minimizer.
pub struct Negated<'a, O>(pub &'a O);

impl<O: Objective> Objective for Negated<'_, O> {
    type State = O::State;

    fn evaluate(&self, point: &[DVector<f64>]) -> Result<(f64, Self::State)> {
        let (v, s) = self.0.evaluate(point)?;
        Ok((-v, s))
    }

    fn gradient(&self, point: &[DVector<f64>], state: &Self::State) -> Result<Vec<DVector<f64>>> {
        Ok(self.0.gradient(point, state)?.into_iter().map(|g| -g).collect())
    }
}
