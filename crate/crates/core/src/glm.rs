//! Linear models on frozen features: minimum-norm interpolation, one-sample
//! fine-tuning, retraining on an augmented set, and the quantities that tie
//! their predictions on a pair `(X, X^i(Delta))` together.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::emb::{read_array, short};
use crate::data::TokenMatrix;
use crate::error::{Result, WsError};
use crate::featmaps::prm::{fingerprint, kind_from_tag, kind_tag};
use crate::featmaps::{FeatureMap, MapKind};
use crate::linalg::{symmetric_extremes, RowSpaceProjector, ThinSvd};

/// Relative floor under which the retrain direction is treated as absent.
const DEGENERATE_TOL: f64 = 1e-10;

/// Feature embeddings of a dataset, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub phi: DMatrix<f64>,
    /// Fingerprint of the map that produced the rows.
    pub fingerprint: u64,
}

impl FeatureMatrix {
    pub fn build(map: &FeatureMap, samples: &[TokenMatrix]) -> Result<Self> {
        let rows = samples.par_iter().map(|x| map.features(x)).collect::<Result<Vec<_>>>()?;
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(WsError::DimMismatch("samples produce features of different length".into()));
        }
        let phi = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Ok(Self { phi, fingerprint: fingerprint(map) })
    }

    pub fn from_rows(phi: DMatrix<f64>, fingerprint: u64) -> Self {
        Self { phi, fingerprint }
    }

    pub fn samples(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// The matrix with one more row appended.
    pub fn augmented(&self, row: &DVector<f64>) -> Result<Self> {
        if row.len() != self.dim() {
            return Err(WsError::DimMismatch(format!("row has length {}, features {}", row.len(), self.dim())));
        }
        let mut phi = self.phi.clone().insert_row(self.samples(), 0.0);
        phi.set_row(self.samples(), &row.transpose());
        Ok(Self { phi, fingerprint: self.fingerprint })
    }

    /// Projector onto the row span with the fit cutoff.
    pub fn projector(&self) -> RowSpaceProjector {
        RowSpaceProjector::new(&self.phi, rcond(self.samples(), self.dim()))
    }
}

/// Pseudoinverse cutoff relative to the largest singular value.
pub fn rcond(samples: usize, dim: usize) -> f64 {
    1e-12 * samples.max(dim) as f64
}

/// `f(., theta) = phi(.)^T theta`, with the initialization it was trained from.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmModel {
    pub kind: MapKind,
    pub map_fingerprint: u64,
    pub theta: DVector<f64>,
    pub theta0: DVector<f64>,
}

impl GlmModel {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn predict(&self, features: &DVector<f64>) -> Result<f64> {
        if features.len() != self.dim() {
            return Err(WsError::DimMismatch(format!("features have length {}, model {}", features.len(), self.dim())));
        }
        Ok(features.dot(&self.theta))
    }

    pub fn predict_x(&self, map: &FeatureMap, x: &TokenMatrix) -> Result<f64> {
        self.predict(&map.features(x)?)
    }
}

/// `theta0 + Phi^+ (Y - Phi theta0)` with an SVD pseudoinverse.
pub fn fit(phi: &FeatureMatrix, y: &DVector<f64>, theta0: &DVector<f64>, kind: MapKind) -> Result<GlmModel> {
    let (n, p) = phi.phi.shape();
    if y.len() != n || theta0.len() != p {
        return Err(WsError::DimMismatch(format!(
            "Phi is {n}x{p}, labels {}, theta0 {}",
            y.len(),
            theta0.len()
        )));
    }
    let mut theta = theta0.clone();
    if n > 0 {
        let resid = y - &phi.phi * theta0;
        let svd = ThinSvd::new(&phi.phi);
        let cutoff = rcond(n, p) * svd.max_singular();
        let coeffs = svd.u.tr_mul(&resid);
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > cutoff {
                theta.axpy(coeffs[k] / s, &svd.v_t.row(k).transpose(), 1.0);
            }
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(WsError::NonFinite("fitted parameters".into()));
    }
    Ok(GlmModel { kind, map_fingerprint: phi.fingerprint, theta, theta0: theta0.clone() })
}

/// One exact least-squares step on `(X, y)`.
pub fn finetune(model: &GlmModel, phi_x: &DVector<f64>, y: f64) -> Result<GlmModel> {
    let nsq = phi_x.norm_squared();
    if nsq == 0.0 {
        return Err(WsError::ZeroFeatureNorm);
    }
    let resid = y - model.predict(phi_x)?;
    let mut out = model.clone();
    out.theta.axpy(resid / nsq, phi_x, 1.0);
    Ok(out)
}

/// Refit on the training set augmented with `(X, y)`, from the same `theta0`.
pub fn retrain(phi: &FeatureMatrix, labels: &DVector<f64>, phi_x: &DVector<f64>, y: f64, theta0: &DVector<f64>, kind: MapKind) -> Result<GlmModel> {
    let aug = phi.augmented(phi_x)?;
    let mut ys = labels.clone().insert_row(labels.len(), 0.0);
    ys[labels.len()] = y;
    fit(&aug, &ys, theta0, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEvaluation {
    pub f_x: f64,
    pub f_xd: f64,
    pub tuned_f_x: f64,
    pub tuned_f_xd: f64,
    pub gamma: f64,
    pub err: f64,
    pub y: f64,
    pub y_delta: f64,
}

/// `gamma` on the pre-update model, `err` on the updated one.
pub fn evaluate_pair(
    base: &GlmModel,
    tuned: &GlmModel,
    phi_x: &DVector<f64>,
    phi_xd: &DVector<f64>,
    y: f64,
    y_delta: f64,
) -> Result<PairEvaluation> {
    let f_x = base.predict(phi_x)?;
    let f_xd = base.predict(phi_xd)?;
    let tuned_f_x = tuned.predict(phi_x)?;
    let tuned_f_xd = tuned.predict(phi_xd)?;
    Ok(PairEvaluation {
        f_x,
        f_xd,
        tuned_f_x,
        tuned_f_xd,
        gamma: (f_xd - f_x).abs(),
        err: (tuned_f_xd - y_delta).powi(2),
        y,
        y_delta,
    })
}

/// Component of `phi(X)` outside the training span, which is the direction a
/// retrain on `X` moves the parameters along.
#[derive(Debug, Clone)]
pub struct AlignmentBasis {
    pub q: DVector<f64>,
    pub q_norm_sq: f64,
}

impl AlignmentBasis {
    pub fn new(projector: &RowSpaceProjector, phi_x: &DVector<f64>) -> Result<Self> {
        let q = projector.project_complement(phi_x);
        let qn = q.norm();
        if qn <= DEGENERATE_TOL * phi_x.norm() || qn == 0.0 {
            return Err(WsError::DegenerateProjection);
        }
        Ok(Self { q_norm_sq: qn * qn, q })
    }

    /// `phi(X')^T q / ||q||^2`.
    pub fn alignment(&self, phi_xd: &DVector<f64>) -> f64 {
        phi_xd.dot(&self.q) / self.q_norm_sq
    }
}

/// Feature alignment between `X` and `X'` relative to the training span.
pub fn feature_alignment(phi: &FeatureMatrix, phi_x: &DVector<f64>, phi_xd: &DVector<f64>) -> Result<f64> {
    if phi_x.len() != phi.dim() || phi_xd.len() != phi.dim() {
        return Err(WsError::DimMismatch("feature length differs from the feature matrix".into()));
    }
    Ok(AlignmentBasis::new(&phi.projector(), phi_x)?.alignment(phi_xd))
}

/// `phi(X')^T phi(X) / ||phi(X)||^2`, the coefficient of a fine-tune step.
pub fn finetune_coefficient(phi_x: &DVector<f64>, phi_xd: &DVector<f64>) -> Result<f64> {
    let nsq = phi_x.norm_squared();
    if nsq == 0.0 {
        return Err(WsError::ZeroFeatureNorm);
    }
    Ok(phi_xd.dot(phi_x) / nsq)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelDiagnostics {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub condition: f64,
    /// `||Phi theta - Y|| / ||Y||` after fitting `Y` from zero.
    pub interpolation_residual: Option<f64>,
}

/// Spectrum of `K = Phi Phi^T` and, given labels, the refit residual.
pub fn kernel_diagnostics(phi: &FeatureMatrix, labels: Option<&DVector<f64>>) -> Result<KernelDiagnostics> {
    if phi.samples() == 0 {
        return Err(WsError::DimMismatch("kernel of an empty feature matrix".into()));
    }
    let k = &phi.phi * phi.phi.transpose();
    let (lambda_min, lambda_max) = symmetric_extremes(&k);
    let condition = if lambda_min > 0.0 { lambda_max / lambda_min } else { f64::INFINITY };
    let interpolation_residual = match labels {
        Some(y) => {
            let model = fit(phi, y, &DVector::zeros(phi.dim()), MapKind::Rf)?;
            let yn = y.norm();
            let r = (&phi.phi * &model.theta - y).norm();
            Some(if yn > 0.0 { r / yn } else { r })
        }
        None => None,
    };
    Ok(KernelDiagnostics { lambda_min, lambda_max, condition, interpolation_residual })
}

/// Slack `c_meas` for which `err >= max(0, 2 - gamma - c_meas)^2` holds exactly
/// after a fine-tune step: `|coef - 1| |y - f(X)|`.
pub fn finetune_chain_slack(coef: f64, y: f64, f_x: f64) -> f64 {
    (coef - 1.0).abs() * (y - f_x).abs()
}

/// Same for retraining: `|F - 1| |y - f(X)| + |F| |f_r(X) - y|`.
pub fn retrain_chain_slack(alignment: f64, y: f64, f_x: f64, retrained_f_x: f64) -> f64 {
    (alignment - 1.0).abs() * (y - f_x).abs() + alignment.abs() * (retrained_f_x - y).abs()
}

/// Lower bound `max(0, 2 - gamma - slack)^2` on the error of a flipped pair.
pub fn chain_bound(gamma: f64, slack: f64) -> f64 {
    (2.0 - gamma - slack).max(0.0).powi(2)
}

pub const GLM_MAGIC: [u8; 4] = *b"GLM1";
pub const GLM_VERSION: u32 = 1;

/// GLM1: magic, u32 version, u8 kind tag, u64 p, u64 map fingerprint, theta, theta0 (f64 LE).
pub fn write_model_to(w: &mut impl Write, model: &GlmModel) -> Result<()> {
    w.write_all(&GLM_MAGIC)?;
    w.write_all(&GLM_VERSION.to_le_bytes())?;
    w.write_all(&[kind_tag(model.kind)])?;
    w.write_all(&(model.dim() as u64).to_le_bytes())?;
    w.write_all(&model.map_fingerprint.to_le_bytes())?;
    for v in model.theta.iter().chain(model.theta0.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model_from(r: &mut impl Read) -> Result<GlmModel> {
    let magic = read_array::<4>(r)?;
    if magic != GLM_MAGIC {
        return Err(WsError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != GLM_VERSION {
        return Err(WsError::VersionUnsupported(version));
    }
    let kind = kind_from_tag(read_array::<1>(r)?[0])?;
    let p = u64::from_le_bytes(read_array(r)?) as usize;
    let map_fingerprint = u64::from_le_bytes(read_array(r)?);
    let mut buf = vec![0u8; p.checked_mul(16).ok_or(WsError::ShortRead)?];
    r.read_exact(&mut buf).map_err(short)?;
    let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(GlmModel {
        kind,
        map_fingerprint,
        theta: DVector::from_column_slice(&vals[..p]),
        theta0: DVector::from_column_slice(&vals[p..]),
    })
}

pub fn write_model(path: impl AsRef<Path>, model: &GlmModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model_to(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<GlmModel> {
    read_model_from(&mut BufReader::new(File::open(path)?))
}
