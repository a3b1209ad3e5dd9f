//! He variance: the `beta` with `E_{rho ~ N(0, beta)}[phi(rho)^2] = 1`.

use super::Activation;
use crate::error::{Result, WsError};
use crate::linalg::gauss_hermite;

const QUADRATURE_ORDER: usize = 161;
const TOLERANCE: f64 = 1e-8;

/// Gaussian second moment `E[phi(sqrt(beta) g)^2]`, `g ~ N(0, 1)`.
pub fn second_moment(activation: &Activation, beta: f64) -> f64 {
    let (nodes, weights) = gauss_hermite(QUADRATURE_ORDER);
    second_moment_with(activation, beta, &nodes, &weights)
}

fn second_moment_with(activation: &Activation, beta: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let scale = (2.0 * beta).sqrt();
    let sum: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(t, w)| w * activation.apply(scale * t).powi(2))
        .sum();
    sum / std::f64::consts::PI.sqrt()
}

pub fn he_beta(activation: &Activation) -> Result<f64> {
    if activation.sup_abs() <= 1.0 {
        return Err(WsError::NoSolution(format!(
            "|{}| never exceeds 1, so its Gaussian second moment stays below 1",
            activation.name()
        )));
    }
    let (nodes, weights) = gauss_hermite(QUADRATURE_ORDER);
    let excess = |beta: f64| second_moment_with(activation, beta, &nodes, &weights) - 1.0;

    let mut lo = 1.0;
    while excess(lo) > 0.0 {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(WsError::NoSolution("second moment exceeds 1 for every variance".into()));
        }
    }
    let mut hi = 1.0;
    while excess(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(WsError::NoSolution("second moment stays below 1".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = if excess(lo).abs() <= excess(hi).abs() { lo } else { hi };
    let residual = excess(beta).abs();
    if residual > TOLERANCE {
        return Err(WsError::NoSolution(format!("bracketing stalled with residual {residual:e}")));
    }
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmaps::PiecewiseLinear;

    #[test]
    fn relu_needs_beta_two() {
        // E[ReLU(sqrt(beta) g)^2] = beta / 2 in closed form.
        let beta = he_beta(&Activation::Relu).unwrap();
        assert!((beta - 2.0).abs() < 1e-8, "{beta}");
        assert!((second_moment(&Activation::Relu, beta) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn identity_needs_beta_one() {
        let beta = he_beta(&Activation::Identity).unwrap();
        assert!((beta - 1.0).abs() < 1e-8);
    }

    #[test]
    fn tanh_has_no_solution() {
        assert!(matches!(he_beta(&Activation::Tanh), Err(WsError::NoSolution(_))));
    }

    #[test]
    fn leaky_table_matches_closed_form() {
        // Leaky ReLU with slope a: E = beta (1 + a^2) / 2.
        let a = 0.25;
        let t = PiecewiseLinear::new(vec![(-1.0, -a), (0.0, 0.0), (1.0, 1.0)]).unwrap();
        let beta = he_beta(&Activation::Table(t)).unwrap();
        assert!((beta - 2.0 / (1.0 + a * a)).abs() < 1e-8, "{beta}");
    }
}
