#![allow(dead_code)]

use nalgebra::DVector;
use wslab::data::TokenMatrix;
use wslab::featmaps::{grad_wrt_delta, DeltaObjective, FeatureMap, RowProbe};

/// Kink margin below which a finite-difference check is skipped.
pub const KINK_MARGIN: f64 = 1e-3;

/// Relative error between the analytic directional derivative along `u` and
/// a 5-point central difference; `None` near a kink.
pub fn directional_check(
    map: &FeatureMap,
    x: &TokenMatrix,
    i: usize,
    delta: &DVector<f64>,
    u: &DVector<f64>,
    objective: &DeltaObjective,
) -> Option<f64> {
    let probe = RowProbe::new(map, x, &[i]).unwrap();
    if probe.forward(std::slice::from_ref(delta)).unwrap().kink_distance < KINK_MARGIN {
        return None;
    }
    let g = grad_wrt_delta(map, x, i, delta, objective).unwrap();
    let h = 1e-5;
    let f = |t: f64| grad_wrt_delta(map, x, i, &(delta + u * t), objective).unwrap().value;
    let fd = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
    let an = g.gradient.dot(u);
    Some((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8))
}
