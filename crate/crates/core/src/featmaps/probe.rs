//! Incremental evaluation of a feature map when only a few rows of the
//! context move, together with reverse-mode gradients for those rows.
//!
//! Building a probe costs one full evaluation; afterwards each forward pass
//! costs O(k d m) for the dense maps and O(n d m + m d^2) for attention, where
//! `m` is the number of perturbed rows.

use nalgebra::{DMatrix, DVector};

use super::attention::{self, normalize_scores, ScoreNorm};
use super::{Activation, AttentionParams, FeatureMap};
use crate::data::TokenMatrix;
use crate::error::{Result, WsError};

/// Evaluates `phi(X')` where `X'` equals `X` except on a fixed set of rows,
/// which are `x_r + delta_r`.
pub struct RowProbe<'a> {
    map: &'a FeatureMap,
    rows: Vec<usize>,
    d: usize,
    inner: Inner,
}

enum Inner {
    Dense(DenseProbe),
    Attention(Box<AttnProbe>),
}

struct DenseProbe {
    /// First-layer preactivation at zero perturbation.
    base: DVector<f64>,
    /// `k x d` slices of the first layer hitting each perturbed row.
    blocks: Vec<DMatrix<f64>>,
}

struct AttnProbe {
    norm: ScoreNorm,
    scale: f64,
    n: usize,
    x: DMatrix<f64>,
    values: DMatrix<f64>,
    /// Unperturbed row indices, ascending.
    rest: Vec<usize>,
    /// Rows `x_j^T M` for `j` in `rest`.
    p_rest: DMatrix<f64>,
    /// Per unperturbed row: max logit over unperturbed columns (softmax only).
    shift: Vec<f64>,
    /// Per unperturbed row: partial normalizer over unperturbed columns.
    mass: Vec<f64>,
    /// Per unperturbed row: partial weighted value sum over unperturbed columns.
    acc: DMatrix<f64>,
    /// Sum of unperturbed value rows (ReLU fallback).
    value_sum_rest: DVector<f64>,
}

/// Result of a forward pass; keeps what the backward pass needs.
pub struct Forward {
    /// Flattened features (row-major for attention outputs).
    pub features: DVector<f64>,
    /// Smallest distance from a Δ-dependent preactivation (or ReLU score) to
    /// a kink of the nonlinearity; infinite for smooth maps.
    pub kink_distance: f64,
    cache: Cache,
}

impl Forward {
    pub fn at_kink(&self) -> bool {
        self.kink_distance == 0.0
    }
}

enum Cache {
    Dense { preacts: Vec<DVector<f64>> },
    Attention(Box<AttnCache>),
}

struct AttnCache {
    x_pert: DMatrix<f64>,
    v_pert: DMatrix<f64>,
    /// `M^T x'_r` for each perturbed row.
    p_r: Vec<DVector<f64>>,
    /// Logits of unperturbed rows against perturbed columns.
    t: DMatrix<f64>,
    /// Attention weights of unperturbed rows on perturbed columns.
    s_r: DMatrix<f64>,
    /// Normalizer per unperturbed row (0 marks the ReLU fallback).
    z_rest: Vec<f64>,
    /// Full raw score and weight rows of the perturbed rows.
    raw_r: Vec<DVector<f64>>,
    s_full: Vec<DVector<f64>>,
    z_r: Vec<f64>,
    out: DMatrix<f64>,
}

impl<'a> RowProbe<'a> {
    pub fn new(map: &'a FeatureMap, x: &TokenMatrix, rows: &[usize]) -> Result<Self> {
        map.check_input(x)?;
        let n = x.n();
        let d = x.d();
        let mut seen = vec![false; n];
        for &r in rows {
            if r >= n {
                return Err(WsError::IndexOutOfRange { index: r, n });
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(WsError::DuplicateIndex(r));
            }
        }
        let inner = match map {
            FeatureMap::Rf(p) => Inner::Dense(DenseProbe::new(&p.v, x, rows)),
            FeatureMap::Drf(p) => Inner::Dense(DenseProbe::new(&p.layers[0], x, rows)),
            FeatureMap::Attention { params, norm } => Inner::Attention(Box::new(AttnProbe::new(params, *norm, x, &seen))),
        };
        Ok(Self { map, rows: rows.to_vec(), d, inner })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn map(&self) -> &FeatureMap {
        self.map
    }

    /// `phi(X)` (zero perturbation).
    pub fn base_features(&self) -> DVector<f64> {
        let zeros = vec![DVector::zeros(self.d); self.rows.len()];
        self.forward(&zeros).expect("zero perturbation has the right shape").features
    }

    /// Features of the context with `deltas[a]` added to row `rows()[a]`.
    pub fn forward(&self, deltas: &[DVector<f64>]) -> Result<Forward> {
        if deltas.len() != self.rows.len() || deltas.iter().any(|v| v.len() != self.d) {
            return Err(WsError::DimMismatch(format!(
                "probe expects {} perturbations of length {}",
                self.rows.len(),
                self.d
            )));
        }
        Ok(match &self.inner {
            Inner::Dense(p) => {
                let (act, deep) = dense_parts(self.map);
                p.forward(act, deep, deltas)
            }
            Inner::Attention(p) => {
                let FeatureMap::Attention { params, .. } = self.map else { unreachable!() };
                p.forward(params, &self.rows, deltas)
            }
        })
    }

    /// Gradient of `<cotangent, features>` with respect to each perturbation.
    pub fn backward(&self, fwd: &Forward, cotangent: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if cotangent.len() != fwd.features.len() {
            return Err(WsError::DimMismatch(format!(
                "cotangent has length {}, features {}",
                cotangent.len(),
                fwd.features.len()
            )));
        }
        Ok(match (&self.inner, &fwd.cache) {
            (Inner::Dense(p), Cache::Dense { preacts }) => {
                let (act, deep) = dense_parts(self.map);
                p.backward(act, deep, preacts, cotangent)
            }
            (Inner::Attention(p), Cache::Attention(c)) => {
                let FeatureMap::Attention { params, .. } = self.map else { unreachable!() };
                p.backward(params, &self.rows, c, cotangent)
            }
            _ => return Err(WsError::DimMismatch("forward pass belongs to another probe".into())),
        })
    }
}

fn dense_parts(map: &FeatureMap) -> (&Activation, &[DMatrix<f64>]) {
    match map {
        FeatureMap::Rf(p) => (&p.activation, &[]),
        FeatureMap::Drf(p) => (&p.activation, &p.layers[1..]),
        FeatureMap::Attention { .. } => unreachable!("dense probe on attention map"),
    }
}

impl DenseProbe {
    fn new(first: &DMatrix<f64>, x: &TokenMatrix, rows: &[usize]) -> Self {
        let d = x.d();
        let base = first * x.flat();
        let blocks = rows.iter().map(|&r| first.columns(r * d, d).into_owned()).collect();
        Self { base, blocks }
    }

    fn forward(&self, act: &Activation, deep: &[DMatrix<f64>], deltas: &[DVector<f64>]) -> Forward {
        let mut z = self.base.clone();
        for (block, delta) in self.blocks.iter().zip(deltas) {
            z.gemv(1.0, block, delta, 1.0);
        }
        let mut kink = f64::INFINITY;
        let mut preacts = Vec::with_capacity(deep.len() + 1);
        let mut h = z.map(|v| act.apply(v));
        kink = kink.min(z.iter().map(|&v| act.kink_distance(v)).fold(f64::INFINITY, f64::min));
        preacts.push(z);
        for layer in deep {
            let z = layer * &h;
            kink = kink.min(z.iter().map(|&v| act.kink_distance(v)).fold(f64::INFINITY, f64::min));
            h = z.map(|v| act.apply(v));
            preacts.push(z);
        }
        Forward { features: h, kink_distance: kink, cache: Cache::Dense { preacts } }
    }

    fn backward(
        &self,
        act: &Activation,
        deep: &[DMatrix<f64>],
        preacts: &[DVector<f64>],
        cot: &DVector<f64>,
    ) -> Vec<DVector<f64>> {
        let mut u = cot.clone();
        for l in (0..preacts.len()).rev() {
            let g = u.zip_map(&preacts[l], |c, z| c * act.derivative(z));
            if l == 0 {
                return self.blocks.iter().map(|b| b.tr_mul(&g)).collect();
            }
            u = deep[l - 1].tr_mul(&g);
        }
        unreachable!("at least one layer")
    }
}

impl AttnProbe {
    fn new(params: &AttentionParams, norm: ScoreNorm, x: &TokenMatrix, perturbed: &[bool]) -> Self {
        let n = x.n();
        let xv = x.values().clone();
        let values = attention::values(params, x);
        let dv = values.ncols();
        let scale = params.score_scale();
        let rest: Vec<usize> = (0..n).filter(|&j| !perturbed[j]).collect();
        let p_all = &xv * &params.score;
        let p_rest = DMatrix::from_fn(rest.len(), x.d(), |q, c| p_all[(rest[q], c)]);
        let s0 = (&p_rest * xv.transpose()) * scale;

        let mut shift = vec![0.0; rest.len()];
        let mut mass = vec![0.0; rest.len()];
        let mut acc = DMatrix::zeros(rest.len(), dv);
        for q in 0..rest.len() {
            let m = match norm {
                ScoreNorm::Softmax => rest.iter().map(|&l| s0[(q, l)]).fold(f64::NEG_INFINITY, f64::max),
                ScoreNorm::Relu => 0.0,
            };
            shift[q] = m;
            for &l in &rest {
                let w = match norm {
                    ScoreNorm::Softmax => (s0[(q, l)] - m).exp(),
                    ScoreNorm::Relu => s0[(q, l)].max(0.0),
                };
                if w != 0.0 {
                    mass[q] += w;
                    let mut row = acc.row_mut(q);
                    row += values.row(l) * w;
                }
            }
        }
        let mut value_sum_rest = DVector::zeros(dv);
        for &l in &rest {
            value_sum_rest += values.row(l).transpose();
        }
        Self { norm, scale, n, x: xv, values, rest, p_rest, shift, mass, acc, value_sum_rest }
    }

    fn forward(&self, params: &AttentionParams, rows: &[usize], deltas: &[DVector<f64>]) -> Forward {
        let n = self.n;
        let m = rows.len();
        let dv = self.values.ncols();
        let mut x_pert = self.x.clone();
        let mut v_pert = self.values.clone();
        let mut p_r = Vec::with_capacity(m);
        let mut x_r = DMatrix::zeros(m, self.x.ncols());
        let mut v_r = DMatrix::zeros(m, dv);
        for (a, (&r, delta)) in rows.iter().zip(deltas).enumerate() {
            let xr = self.x.row(r).transpose() + delta;
            let vr = match params.value_weight() {
                Some(wv) => wv * &xr,
                None => xr.clone(),
            };
            p_r.push(params.score.tr_mul(&xr));
            x_pert.set_row(r, &xr.transpose());
            v_pert.set_row(r, &vr.transpose());
            x_r.set_row(a, &xr.transpose());
            v_r.set_row(a, &vr.transpose());
        }

        let mut out = DMatrix::zeros(n, dv);
        let mut kink = f64::INFINITY;

        // Unperturbed rows: merge the cached partial sums with the new columns.
        let t = (&self.p_rest * x_r.transpose()) * self.scale;
        let mut s_r = DMatrix::zeros(self.rest.len(), m);
        let mut z_rest = vec![0.0; self.rest.len()];
        for (q, &j) in self.rest.iter().enumerate() {
            let mut row = self.acc.row(q).transpose();
            match self.norm {
                ScoreNorm::Softmax => {
                    let top = (0..m).map(|l| t[(q, l)]).fold(self.shift[q], f64::max);
                    let alpha = (self.shift[q] - top).exp();
                    row *= alpha;
                    let mut z = alpha * self.mass[q];
                    for l in 0..m {
                        let w = (t[(q, l)] - top).exp();
                        s_r[(q, l)] = w;
                        z += w;
                        row.axpy(w, &v_r.row(l).transpose(), 1.0);
                    }
                    row /= z;
                    for l in 0..m {
                        s_r[(q, l)] /= z;
                    }
                    z_rest[q] = z;
                }
                ScoreNorm::Relu => {
                    let mut z = self.mass[q];
                    for l in 0..m {
                        let w = t[(q, l)].max(0.0);
                        kink = kink.min(t[(q, l)].abs());
                        s_r[(q, l)] = w;
                        z += w;
                        row.axpy(w, &v_r.row(l).transpose(), 1.0);
                    }
                    if z > 0.0 {
                        row /= z;
                        for l in 0..m {
                            s_r[(q, l)] /= z;
                        }
                    } else {
                        row = (&self.value_sum_rest + v_r.row_sum().transpose()) / n as f64;
                        s_r.row_mut(q).fill(1.0 / n as f64);
                    }
                    z_rest[q] = z;
                }
            }
            out.set_row(j, &row.transpose());
        }

        // Perturbed rows: every logit moves, so evaluate them in full.
        let mut raw_r = Vec::with_capacity(m);
        let mut s_full = Vec::with_capacity(m);
        let mut z_r = Vec::with_capacity(m);
        for (a, &r) in rows.iter().enumerate() {
            let raw = (&x_pert * &p_r[a]) * self.scale;
            if self.norm == ScoreNorm::Relu {
                kink = kink.min(raw.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
            }
            let mut s = raw.clone();
            let z = normalize_scores(s.as_mut_slice(), self.norm);
            out.set_row(r, &v_pert.tr_mul(&s).transpose());
            raw_r.push(raw);
            s_full.push(s);
            z_r.push(z);
        }

        Forward {
            features: attention::flatten_rows(&out),
            kink_distance: kink,
            cache: Cache::Attention(Box::new(AttnCache { x_pert, v_pert, p_r, t, s_r, z_rest, raw_r, s_full, z_r, out })),
        }
    }

    fn backward(&self, params: &AttentionParams, rows: &[usize], c: &AttnCache, cot: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = rows.len();
        let d = self.x.ncols();
        let dv = self.values.ncols();
        let cot_row = |j: usize| DVector::from_column_slice(&cot.as_slice()[j * dv..(j + 1) * dv]);
        let v_r = DMatrix::from_fn(m, dv, |a, col| c.v_pert[(rows[a], col)]);

        let mut dx = DMatrix::<f64>::zeros(m, d);
        let mut dval = DMatrix::<f64>::zeros(m, dv);

        // Unperturbed rows depend on the perturbed rows through logits t and values.
        if !self.rest.is_empty() {
            let cot_rest = DMatrix::from_fn(self.rest.len(), dv, |q, col| cot[self.rest[q] * dv + col]);
            let cv = &cot_rest * v_r.transpose();
            let mut g = DMatrix::zeros(self.rest.len(), m);
            for (q, &j) in self.rest.iter().enumerate() {
                let co = cot_rest.row(q).dot(&c.out.row(j));
                for l in 0..m {
                    g[(q, l)] = match self.norm {
                        ScoreNorm::Softmax => c.s_r[(q, l)] * (cv[(q, l)] - co),
                        ScoreNorm::Relu if c.z_rest[q] > 0.0 && c.t[(q, l)] > 0.0 => (cv[(q, l)] - co) / c.z_rest[q],
                        ScoreNorm::Relu => 0.0,
                    };
                }
            }
            dx += (g.transpose() * &self.p_rest) * self.scale;
            dval += c.s_r.transpose() * &cot_rest;
        }

        // Perturbed rows: full softmax / renormalization Jacobian.
        for (a, &j) in rows.iter().enumerate() {
            let cj = cot_row(j);
            let s = &c.s_full[a];
            let ds = &c.v_pert * &cj;
            let mu = s.dot(&ds);
            let dscore = match self.norm {
                ScoreNorm::Softmax => s.zip_map(&ds, |sl, dl| sl * (dl - mu)),
                ScoreNorm::Relu if c.z_r[a] > 0.0 => {
                    let z = c.z_r[a];
                    c.raw_r[a].zip_map(&ds, |raw, dl| if raw > 0.0 { (dl - mu) / z } else { 0.0 })
                }
                ScoreNorm::Relu => DVector::zeros(s.len()),
            };
            for (b, &l) in rows.iter().enumerate() {
                let mut rv = dval.row_mut(b);
                rv += cj.transpose() * s[l];
                let mut rx = dx.row_mut(b);
                rx += c.p_r[a].transpose() * (self.scale * dscore[l]);
            }
            let dp = c.x_pert.tr_mul(&dscore) * self.scale;
            let mut rx = dx.row_mut(a);
            rx += (&params.score * dp).transpose();
        }

        match params.value_weight() {
            Some(wv) => dx += dval * wv,
            None => dx += dval,
        }
        (0..m).map(|a| dx.row(a).transpose()).collect()
    }
}

/// Scalar objectives of the perturbed features.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaObjective {
    /// `||phi(X^i(Δ)) - phi(X)||^2`.
    DiffNormSq,
    /// `phi(X^i(Δ))^T v`.
    InnerProduct(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaGradient {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Set when a preactivation sits exactly on a kink; the gradient then
    /// uses the zero subgradient.
    pub non_differentiable: bool,
}

/// Value and analytic gradient of an objective with respect to the
/// perturbation of row `i`.
pub fn grad_wrt_delta(
    map: &FeatureMap,
    x: &TokenMatrix,
    i: usize,
    delta: &DVector<f64>,
    objective: &DeltaObjective,
) -> Result<DeltaGradient> {
    let probe = RowProbe::new(map, x, &[i])?;
    let fwd = probe.forward(std::slice::from_ref(delta))?;
    let (value, cot) = match objective {
        DeltaObjective::DiffNormSq => {
            let diff = &fwd.features - probe.base_features();
            (diff.norm_squared(), diff * 2.0)
        }
        DeltaObjective::InnerProduct(v) => {
            if v.len() != fwd.features.len() {
                return Err(WsError::DimMismatch(format!(
                    "direction has length {}, features {}",
                    v.len(),
                    fwd.features.len()
                )));
            }
            (fwd.features.dot(v), v.clone())
        }
    };
    let gradient = probe.backward(&fwd, &cot)?.remove(0);
    Ok(DeltaGradient { value, gradient, non_differentiable: fwd.at_kink() })
}
