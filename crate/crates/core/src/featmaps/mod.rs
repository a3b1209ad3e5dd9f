//! Random feature maps: RF, deep RF, random attention features (softmax and
//! ReLU-renormalized) and the full query/key/value attention layer.

mod activation;
pub mod attention;
mod he;
pub mod prm;
mod probe;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use activation::{Activation, PiecewiseLinear};
pub use attention::{attention_features, raf_scores, ScoreNorm};
pub use he::{he_beta, second_moment};
pub use probe::{grad_wrt_delta, DeltaGradient, DeltaObjective, Forward, RowProbe};

use crate::data::TokenMatrix;
use crate::error::{Result, WsError};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Rf,
    Drf,
    Raf,
    ReluRaf,
    Qkv,
}

impl MapKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "rf" => Ok(Self::Rf),
            "drf" => Ok(Self::Drf),
            "raf" => Ok(Self::Raf),
            "relu_raf" => Ok(Self::ReluRaf),
            "qkv" => Ok(Self::Qkv),
            other => Err(WsError::InvalidConfig(format!("unknown map kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rf => "rf",
            Self::Drf => "drf",
            Self::Raf => "raf",
            Self::ReluRaf => "relu_raf",
            Self::Qkv => "qkv",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Self::Raf | Self::ReluRaf | Self::Qkv)
    }

    pub const ALL: [MapKind; 5] = [Self::Rf, Self::Drf, Self::Raf, Self::ReluRaf, Self::Qkv];
}

/// Dimensions and hyperparameters needed to sample a map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub kind: MapKind,
    /// Context length; fixes the input dimension `n * d` of RF and DRF.
    pub n: usize,
    pub d: usize,
    /// Neurons per layer (RF, DRF).
    pub k: usize,
    /// DRF depth.
    pub depth: usize,
    /// Inner query/key dimension of the QKV layer; defaults to `d`.
    pub d_inner: Option<usize>,
    pub activation: Activation,
}

impl MapSpec {
    pub fn new(kind: MapKind, n: usize, d: usize) -> Self {
        Self { kind, n, d, k: 0, depth: 1, d_inner: None, activation: Activation::Relu }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_d_inner(mut self, d_inner: usize) -> Self {
        self.d_inner = Some(d_inner);
        self
    }
}

/// `phi(V flat(X))` with `V` of shape `k x (n d)` and entries of variance `1 / (n d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfParams {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub v: DMatrix<f64>,
    pub activation: Activation,
    pub seed: u64,
}

impl RfParams {
    pub fn sample(k: usize, n: usize, d: usize, activation: Activation, seed: u64) -> Result<Self> {
        check_positive(&[("k", k), ("n", n), ("d", d)])?;
        let input_dim = n * d;
        let mut r = rng::derived_rng(seed, &[tag("rf")]);
        let v = rng::gaussian_matrix(&mut r, k, input_dim, (1.0 / input_dim as f64).sqrt());
        Ok(Self { k, n, d, v, activation, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.n * self.d
    }

    /// The `k x d` slice of `V` multiplying row `i` of the context.
    pub fn row_block(&self, i: usize) -> DMatrix<f64> {
        self.v.columns(i * self.d, self.d).into_owned()
    }
}

/// `L` random layers; first layer variance `beta / (n d)`, deeper ones `beta / k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrfParams {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub layers: Vec<DMatrix<f64>>,
    pub activation: Activation,
    pub seed: u64,
}

impl DrfParams {
    /// Samples with `beta` from the He condition of the activation.
    pub fn sample(depth: usize, k: usize, n: usize, d: usize, activation: Activation, seed: u64) -> Result<Self> {
        let beta = he_beta(&activation)?;
        Self::sample_with_beta(depth, k, n, d, beta, activation, seed)
    }

    pub fn sample_with_beta(
        depth: usize,
        k: usize,
        n: usize,
        d: usize,
        beta: f64,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        check_positive(&[("depth", depth), ("k", k), ("n", n), ("d", d)])?;
        if !(beta.is_finite() && beta > 0.0) {
            return Err(WsError::InvalidConfig(format!("beta must be positive, got {beta}")));
        }
        let input_dim = n * d;
        let layers = (0..depth)
            .map(|l| {
                let mut r = rng::derived_rng(seed, &[tag("drf"), l as u64]);
                let (cols, var) = if l == 0 {
                    (input_dim, beta / input_dim as f64)
                } else {
                    (k, beta / k as f64)
                };
                rng::gaussian_matrix(&mut r, k, cols, var.sqrt())
            })
            .collect();
        Ok(Self { k, n, d, beta, layers, activation, seed })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.n * self.d
    }
}

/// Raw query/key/value weights, each `d' x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights {
    pub d_inner: usize,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
}

/// Attention weights. For RAF the score matrix is `W` (`d x d`, variance
/// `1/d`) with scale `1/sqrt(d)`; for QKV it is `W_Q^T W_K` with scale
/// `1/sqrt(d')` and values `X W_V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d: usize,
    pub score: DMatrix<f64>,
    pub qkv: Option<QkvWeights>,
    pub seed: u64,
}

impl AttentionParams {
    pub fn sample_raf(d: usize, seed: u64) -> Result<Self> {
        check_positive(&[("d", d)])?;
        let mut r = rng::derived_rng(seed, &[tag("raf")]);
        let w = rng::gaussian_matrix(&mut r, d, d, (1.0 / d as f64).sqrt());
        Ok(Self { d, score: w, qkv: None, seed })
    }

    pub fn sample_qkv(d: usize, d_inner: usize, seed: u64) -> Result<Self> {
        check_positive(&[("d", d), ("d_inner", d_inner)])?;
        let qk_std = (1.0 / ((d * d_inner) as f64).sqrt()).sqrt();
        let mut r = rng::derived_rng(seed, &[tag("qkv")]);
        let wq = rng::gaussian_matrix(&mut r, d_inner, d, qk_std);
        let wk = rng::gaussian_matrix(&mut r, d_inner, d, qk_std);
        let wv = rng::gaussian_matrix(&mut r, d_inner, d, (1.0 / d as f64).sqrt());
        Ok(Self::from_qkv(QkvWeights { d_inner, wq, wk, wv }, seed))
    }

    pub fn from_raf_weight(w: DMatrix<f64>, seed: u64) -> Result<Self> {
        if w.nrows() != w.ncols() || w.nrows() == 0 {
            return Err(WsError::DimMismatch(format!("W must be square, got {}x{}", w.nrows(), w.ncols())));
        }
        Ok(Self { d: w.nrows(), score: w, qkv: None, seed })
    }

    pub fn from_qkv(qkv: QkvWeights, seed: u64) -> Self {
        let score = qkv.wq.tr_mul(&qkv.wk);
        Self { d: score.nrows(), score, qkv: Some(qkv), seed }
    }

    /// `W` for RAF, `W_Q^T W_K` for QKV.
    pub fn score_matrix(&self) -> &DMatrix<f64> {
        &self.score
    }

    pub fn score_scale(&self) -> f64 {
        match &self.qkv {
            Some(q) => 1.0 / (q.d_inner as f64).sqrt(),
            None => 1.0 / (self.d as f64).sqrt(),
        }
    }

    pub fn value_weight(&self) -> Option<&DMatrix<f64>> {
        self.qkv.as_ref().map(|q| &q.wv)
    }

    pub fn value_dim(&self) -> usize {
        self.qkv.as_ref().map_or(self.d, |q| q.d_inner)
    }
}

/// A sampled feature map together with the attention variant it uses.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Rf(RfParams),
    Drf(DrfParams),
    Attention { params: AttentionParams, norm: ScoreNorm },
}

impl FeatureMap {
    /// Samples the map described by `spec`, deterministically in `seed`.
    pub fn sample(spec: &MapSpec, seed: u64) -> Result<Self> {
        Ok(match spec.kind {
            MapKind::Rf => Self::Rf(RfParams::sample(spec.k, spec.n, spec.d, spec.activation.clone(), seed)?),
            MapKind::Drf => Self::Drf(DrfParams::sample(
                spec.depth,
                spec.k,
                spec.n,
                spec.d,
                spec.activation.clone(),
                seed,
            )?),
            MapKind::Raf => Self::Attention { params: AttentionParams::sample_raf(spec.d, seed)?, norm: ScoreNorm::Softmax },
            MapKind::ReluRaf => Self::Attention { params: AttentionParams::sample_raf(spec.d, seed)?, norm: ScoreNorm::Relu },
            MapKind::Qkv => Self::Attention {
                params: AttentionParams::sample_qkv(spec.d, spec.d_inner.unwrap_or(spec.d), seed)?,
                norm: ScoreNorm::Softmax,
            },
        })
    }

    pub fn kind(&self) -> MapKind {
        match self {
            Self::Rf(_) => MapKind::Rf,
            Self::Drf(_) => MapKind::Drf,
            Self::Attention { params, norm } => match (params.qkv.is_some(), norm) {
                (true, _) => MapKind::Qkv,
                (false, ScoreNorm::Softmax) => MapKind::Raf,
                (false, ScoreNorm::Relu) => MapKind::ReluRaf,
            },
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Rf(p) => p.seed,
            Self::Drf(p) => p.seed,
            Self::Attention { params, .. } => params.seed,
        }
    }

    /// Neurons per layer (0 for attention maps).
    pub fn width(&self) -> usize {
        match self {
            Self::Rf(p) => p.k,
            Self::Drf(p) => p.k,
            Self::Attention { .. } => 0,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Self::Rf(_) | Self::Attention { .. } => 1,
            Self::Drf(p) => p.depth(),
        }
    }

    pub fn activation(&self) -> Option<&Activation> {
        match self {
            Self::Rf(p) => Some(&p.activation),
            Self::Drf(p) => Some(&p.activation),
            Self::Attention { .. } => None,
        }
    }

    /// `(n, d)` the map accepts; `n` is free for attention maps.
    pub fn context_shape(&self) -> (Option<usize>, usize) {
        match self {
            Self::Rf(p) => (Some(p.n), p.d),
            Self::Drf(p) => (Some(p.n), p.d),
            Self::Attention { params, .. } => (None, params.d),
        }
    }

    pub fn check_input(&self, x: &TokenMatrix) -> Result<()> {
        let expected = match self {
            Self::Rf(p) => Some((p.n, p.d)),
            Self::Drf(p) => Some((p.n, p.d)),
            Self::Attention { params, .. } => {
                if x.d() != params.d {
                    return Err(WsError::DimMismatch(format!(
                        "attention map expects d = {}, got {}",
                        params.d,
                        x.d()
                    )));
                }
                None
            }
        };
        match expected {
            Some((n, d)) if (n, d) != (x.n(), x.d()) => Err(WsError::DimMismatch(format!(
                "map expects a {n}x{d} context, got {}x{}",
                x.n(),
                x.d()
            ))),
            _ => Ok(()),
        }
    }

    /// Feature dimension for a context of length `n`.
    pub fn output_dim(&self, n: usize) -> usize {
        match self {
            Self::Rf(p) => p.k,
            Self::Drf(p) => p.k,
            Self::Attention { params, .. } => n * params.value_dim(),
        }
    }

    /// Flattened features; attention outputs are flattened row-major.
    pub fn features(&self, x: &TokenMatrix) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(match self {
            Self::Rf(p) => rf_features_unchecked(p, x),
            Self::Drf(p) => drf_features_unchecked(p, x),
            Self::Attention { params, norm } => {
                let out = attention::attention_output(params, x, *norm);
                DVector::from_iterator(out.len(), out.transpose().iter().copied())
            }
        })
    }
}

fn check_positive(dims: &[(&str, usize)]) -> Result<()> {
    match dims.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(WsError::DimMismatch(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

pub fn rf_features(params: &RfParams, x: &TokenMatrix) -> Result<DVector<f64>> {
    if (x.n(), x.d()) != (params.n, params.d) {
        return Err(WsError::DimMismatch(format!(
            "RF expects {}x{}, got {}x{}",
            params.n,
            params.d,
            x.n(),
            x.d()
        )));
    }
    Ok(rf_features_unchecked(params, x))
}

fn rf_features_unchecked(params: &RfParams, x: &TokenMatrix) -> DVector<f64> {
    let act = &params.activation;
    (&params.v * x.flat()).map(|z| act.apply(z))
}

pub fn drf_features(params: &DrfParams, x: &TokenMatrix) -> Result<DVector<f64>> {
    if (x.n(), x.d()) != (params.n, params.d) {
        return Err(WsError::DimMismatch(format!(
            "DRF expects {}x{}, got {}x{}",
            params.n,
            params.d,
            x.n(),
            x.d()
        )));
    }
    Ok(drf_features_unchecked(params, x))
}

fn drf_features_unchecked(params: &DrfParams, x: &TokenMatrix) -> DVector<f64> {
    let act = &params.activation;
    let mut h = x.flat();
    for layer in &params.layers {
        h = (layer * h).map(|z| act.apply(z));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_context;

    #[test]
    fn sampling_is_deterministic() {
        let spec = MapSpec::new(MapKind::Drf, 3, 4).with_k(8).with_depth(3);
        assert_eq!(FeatureMap::sample(&spec, 5).unwrap(), FeatureMap::sample(&spec, 5).unwrap());
        assert_ne!(FeatureMap::sample(&spec, 5).unwrap(), FeatureMap::sample(&spec, 6).unwrap());
        let q = MapSpec::new(MapKind::Qkv, 3, 4);
        assert_eq!(FeatureMap::sample(&q, 1).unwrap(), FeatureMap::sample(&q, 1).unwrap());
    }

    #[test]
    fn rf_entry_variance_is_one_over_input_dim() {
        // Monte-Carlo: 200k entries, standard error of the variance ~ 0.3%.
        let p = RfParams::sample(2000, 10, 10, Activation::Relu, 3).unwrap();
        let nent = p.v.len() as f64;
        let mean = p.v.sum() / nent;
        let var = p.v.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nent - 1.0);
        assert!((var * 100.0 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn raf_weight_frobenius_norm_concentrates() {
        // ||W||_F^2 ~ chi^2 with d^2 degrees of freedom, scaled by 1/d.
        let p = AttentionParams::sample_raf(64, 9).unwrap();
        let fro2 = p.score.norm_squared();
        assert!((fro2 / 64.0 - 1.0).abs() < 0.2, "{fro2}");
    }

    #[test]
    fn identity_rf_with_identity_weights_is_flattening() {
        let x = synth_context(3, 2, 4);
        let p = RfParams { k: 6, n: 3, d: 2, v: DMatrix::identity(6, 6), activation: Activation::Identity, seed: 0 };
        assert_eq!(rf_features(&p, &x).unwrap(), x.flat());
    }

    #[test]
    fn relu_rf_with_negative_preactivations_is_zero() {
        let x = TokenMatrix::from_row_major(1, 2, &[1.0, 1.0]).unwrap();
        let p = RfParams { k: 3, n: 1, d: 2, v: DMatrix::from_element(3, 2, -1.0), activation: Activation::Relu, seed: 0 };
        assert_eq!(rf_features(&p, &x).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn single_layer_identity_drf_is_linear() {
        let x = synth_context(2, 3, 1);
        let p = DrfParams::sample_with_beta(1, 5, 2, 3, 1.0, Activation::Identity, 2).unwrap();
        let expected = &p.layers[0] * x.flat();
        assert!((drf_features(&p, &x).unwrap() - expected).norm() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = RfParams::sample(4, 2, 3, Activation::Relu, 1).unwrap();
        let x = synth_context(3, 3, 1);
        assert!(matches!(rf_features(&p, &x), Err(WsError::DimMismatch(_))));
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Raf, 2, 5), 1).unwrap();
        assert!(map.features(&x).is_err());
    }
}
