use serde::{Deserialize, Serialize};

use crate::error::{Result, WsError};

/// Piecewise-linear activation through the given knots, extended linearly
/// beyond the first and last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(WsError::InvalidConfig("activation table needs at least two knots".into()));
        }
        if knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(WsError::NonFinite("activation table knot".into()));
        }
        if knots.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(WsError::InvalidConfig("activation table knots must be strictly increasing".into()));
        }
        let (xs, ys) = knots.into_iter().unzip();
        Ok(Self { xs, ys })
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    fn slope(&self, seg: usize) -> f64 {
        (self.ys[seg + 1] - self.ys[seg]) / (self.xs[seg + 1] - self.xs[seg])
    }

    /// Segment used for evaluation at `x`; knots belong to the segment on their left.
    fn segment(&self, x: f64) -> usize {
        let last = self.xs.len() - 2;
        match self.xs.partition_point(|&k| k < x) {
            0 | 1 => 0,
            p => (p - 1).min(last),
        }
    }

    fn apply(&self, x: f64) -> f64 {
        let s = self.segment(x);
        self.ys[s] + self.slope(s) * (x - self.xs[s])
    }

    fn derivative(&self, x: f64) -> f64 {
        self.slope(self.segment(x))
    }

    fn lipschitz(&self) -> f64 {
        (0..self.xs.len() - 1).map(|s| self.slope(s).abs()).fold(0.0, f64::max)
    }

    fn sup_abs(&self) -> f64 {
        let last = self.xs.len() - 2;
        if self.slope(0) != 0.0 || self.slope(last) != 0.0 {
            f64::INFINITY
        } else {
            self.ys.iter().map(|y| y.abs()).fold(0.0, f64::max)
        }
    }
}

/// Componentwise nonlinearity of the random-feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
    Tanh,
    Table(PiecewiseLinear),
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "identity" | "linear" => Ok(Self::Identity),
            "tanh" => Ok(Self::Tanh),
            other => Err(WsError::InvalidConfig(format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Identity => "identity",
            Self::Tanh => "tanh",
            Self::Table(_) => "table",
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Identity => x,
            Self::Tanh => x.tanh(),
            Self::Table(t) => t.apply(x),
        }
    }

    /// Derivative, with the left one-sided value at kinks (0 for ReLU at 0).
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
            Self::Tanh => 1.0 - x.tanh().powi(2),
            Self::Table(t) => t.derivative(x),
        }
    }

    /// Lipschitz constant `M`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Self::Relu | Self::Identity | Self::Tanh => 1.0,
            Self::Table(t) => t.lipschitz(),
        }
    }

    /// Points where the derivative jumps.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Self::Relu => vec![0.0],
            Self::Identity | Self::Tanh => Vec::new(),
            Self::Table(t) => t.xs.clone(),
        }
    }

    #[inline]
    pub fn at_kink(&self, x: f64) -> bool {
        match self {
            Self::Relu => x == 0.0,
            Self::Identity | Self::Tanh => false,
            Self::Table(t) => t.xs.contains(&x),
        }
    }

    /// Distance from `x` to the nearest kink (infinite for smooth activations).
    pub fn kink_distance(&self, x: f64) -> f64 {
        self.kinks().iter().map(|k| (x - k).abs()).fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn sup_abs(&self) -> f64 {
        match self {
            Self::Relu | Self::Identity => f64::INFINITY,
            Self::Tanh => 1.0,
            Self::Table(t) => t.sup_abs(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_interpolates_and_extrapolates() {
        let t = PiecewiseLinear::new(vec![(-1.0, 0.0), (0.0, 0.0), (1.0, 2.0)]).unwrap();
        let a = Activation::Table(t);
        assert_eq!(a.apply(0.5), 1.0);
        assert_eq!(a.apply(2.0), 4.0);
        assert_eq!(a.apply(-3.0), 0.0);
        assert_eq!(a.derivative(0.0), 0.0);
        assert_eq!(a.derivative(0.1), 2.0);
        assert_eq!(a.lipschitz(), 2.0);
    }

    #[test]
    fn relu_subgradient_is_zero_at_kink() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert!(Activation::Relu.at_kink(0.0));
        assert!(!Activation::Tanh.at_kink(0.0));
    }

    #[test]
    fn unsorted_table_is_rejected() {
        assert!(PiecewiseLinear::new(vec![(1.0, 0.0), (0.0, 1.0)]).is_err());
    }
}
