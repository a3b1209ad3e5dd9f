//! Dense (non-incremental) attention evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::AttentionParams;
use crate::data::TokenMatrix;
use crate::error::{Result, WsError};

/// How raw scores become attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    /// Row-wise softmax.
    Softmax,
    /// Entrywise ReLU then division by the row sum; a row with no positive
    /// entry falls back to uniform weights.
    Relu,
}

/// Normalizes one row of raw scores in place. Returns the normalizer (the
/// softmax partition function after max subtraction, or the ReLU mass; zero
/// signals the uniform fallback).
pub(crate) fn normalize_scores(row: &mut [f64], norm: ScoreNorm) -> f64 {
    let n = row.len() as f64;
    match norm {
        ScoreNorm::Softmax => {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
            z
        }
        ScoreNorm::Relu => {
            let z: f64 = row.iter().map(|s| s.max(0.0)).sum();
            if z > 0.0 {
                row.iter_mut().for_each(|s| *s = s.max(0.0) / z);
            } else {
                row.iter_mut().for_each(|s| *s = 1.0 / n);
            }
            z
        }
    }
}

/// Raw scores `c X M X^T` with the map's score matrix and scale.
pub fn raw_scores(params: &AttentionParams, x: &TokenMatrix) -> DMatrix<f64> {
    let xv = x.values();
    (xv * &params.score) * xv.transpose() * params.score_scale()
}

/// Raw scores `S` and the normalized attention matrix `s`.
pub fn raf_scores(params: &AttentionParams, x: &TokenMatrix, norm: ScoreNorm) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dim(params, x)?;
    let s_raw = raw_scores(params, x);
    let mut s = s_raw.transpose();
    // Columns of the transpose are rows of S, and are contiguous.
    for mut col in s.column_iter_mut() {
        normalize_scores(col.as_mut_slice(), norm);
    }
    Ok((s_raw, s.transpose()))
}

/// Value vectors, one per row: `X` itself or `X W_V^T`.
pub fn values(params: &AttentionParams, x: &TokenMatrix) -> DMatrix<f64> {
    match params.value_weight() {
        Some(wv) => x.values() * wv.transpose(),
        None => x.values().clone(),
    }
}

/// `s(X) V(X)` as an `n x d_v` matrix.
pub fn attention_features(params: &AttentionParams, x: &TokenMatrix, norm: ScoreNorm) -> Result<DMatrix<f64>> {
    check_dim(params, x)?;
    Ok(attention_output(params, x, norm))
}

pub(crate) fn attention_output(params: &AttentionParams, x: &TokenMatrix, norm: ScoreNorm) -> DMatrix<f64> {
    let (_, s) = raf_scores(params, x, norm).expect("dimension checked by caller");
    s * values(params, x)
}

fn check_dim(params: &AttentionParams, x: &TokenMatrix) -> Result<()> {
    if x.d() != params.d {
        return Err(WsError::DimMismatch(format!("attention expects d = {}, got {}", params.d, x.d())));
    }
    Ok(())
}

/// Row-major flattening of a matrix.
pub(crate) fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}
