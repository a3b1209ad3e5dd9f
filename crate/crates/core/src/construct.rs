//! Explicit high-sensitivity perturbations for attention maps: a direction
//! aligned with many tokens, split into two far-apart halves that agree on the
//! row space, lifted through the score matrix so that attention collapses onto
//! the perturbed token.

use base64::Engine;
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::json;

use crate::data::{apply_perturbation, BudgetMode, Perturbation, TokenMatrix};
use crate::error::{Result, WsError};
use crate::featmaps::{raf_scores, AttentionParams, FeatureMap, ScoreNorm};
use crate::linalg::{operator_norm, RowSpaceProjector, ThinSvd};
use crate::rng::{self, tag};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructConfig {
    /// Number of random candidates for the aligned direction.
    pub sphere_samples: usize,
    /// Alignment threshold as a fraction of `d^2 / n` for `(x_j^T delta)^2`.
    pub tau: f64,
    /// Stop the search once this fraction of rows is aligned.
    pub target_fraction: f64,
    /// Cap on the lift constant; the budget cap `sqrt(d) / ||W^T delta||` always applies.
    pub c0: f64,
    /// Radius around `e_i` for counting a collapsed attention row.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        Self { sphere_samples: 512, tau: 0.01, target_fraction: 1.0, c0: 1.0, epsilon: 0.1, seed: 0 }
    }
}

impl ConstructConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(WsError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(WsError::InvalidConfig(format!("target fraction must lie in (0, 1], got {}", self.target_fraction)));
        }
        if !(self.c0 > 0.0) {
            return Err(WsError::InvalidConfig(format!("c0 must be positive, got {}", self.c0)));
        }
        if self.sphere_samples == 0 {
            return Err(WsError::InvalidConfig("need at least one sphere sample".into()));
        }
        Ok(())
    }
}

/// Rows whose inner product with `delta` reaches `sqrt(tau) d / sqrt(n)`.
/// Only positive alignment counts: it is what pushes the logits up.
pub fn aligned_count(x: &TokenMatrix, delta: &DVector<f64>, tau: f64) -> usize {
    let (n, d) = (x.n() as f64, x.d() as f64);
    let threshold = tau.sqrt() * d / n.sqrt();
    (x.values() * delta).iter().filter(|&&a| a >= threshold).count()
}

/// Randomized search for a direction `delta` in the row span with
/// `||delta|| <= sqrt(d)` that is aligned with many rows. Returns the best
/// candidate (or its negation) and its aligned count.
pub fn find_delta_star(x: &TokenMatrix, cfg: &ConstructConfig) -> Result<(DVector<f64>, usize)> {
    cfg.validate()?;
    let (n, d) = (x.n(), x.d());
    let svd = ThinSvd::new(&x.values().transpose());
    let r = svd.rank_above(RANK_TOL * svd.max_singular());
    if r == 0 {
        return Err(WsError::RankZero);
    }
    let u_r = svd.u.columns(0, r);
    let scale = (d as f64 / n as f64).sqrt();
    let mut g = rng::derived_rng(cfg.seed, &[tag("delta-star")]);
    let candidates: Vec<DVector<f64>> = (0..cfg.sphere_samples)
        .map(|_| (&u_r * rng::unit_vector(&mut g, r)) * (scale * (r as f64).sqrt()))
        .collect();
    let target = (cfg.target_fraction * n as f64).ceil() as usize;

    let scored: Vec<(usize, bool)> = candidates
        .par_iter()
        .map(|c| {
            let pos = aligned_count(x, c, cfg.tau);
            let neg = aligned_count(x, &-c, cfg.tau);
            if neg > pos { (neg, true) } else { (pos, false) }
        })
        .collect();
    let mut best = 0;
    for (idx, s) in scored.iter().enumerate() {
        if s.0 > scored[best].0 {
            best = idx;
        }
        if scored[best].0 >= target {
            break;
        }
    }
    let (count, flip) = scored[best];
    let delta = if flip { -&candidates[best] } else { candidates[best].clone() };
    Ok((delta, count))
}

/// `delta / 2 +- v / 2` with `v` orthogonal to every row and `||v|| = sqrt(d)`.
pub fn split_delta(x: &TokenMatrix, delta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = x.d();
    let proj = RowSpaceProjector::new(x.values(), RANK_TOL);
    if proj.rank() >= d {
        return Err(WsError::FullRowRank);
    }
    // Complement of the standard basis vector that sticks out most.
    let mut best: Option<DVector<f64>> = None;
    for k in 0..d {
        let e = DVector::from_fn(d, |r, _| if r == k { 1.0 } else { 0.0 });
        let res = proj.project_complement(&e);
        if best.as_ref().is_none_or(|b| res.norm_squared() > b.norm_squared()) {
            best = Some(res);
        }
    }
    let res = best.expect("d >= 1");
    let norm = res.norm();
    if norm < 1e-8 {
        return Err(WsError::FullRowRank);
    }
    let v = res * ((d as f64).sqrt() / norm);
    Ok((delta / 2.0 + &v / 2.0, delta / 2.0 - v / 2.0))
}

/// `Delta = C W^T delta` with `C = min(c0, sqrt(d) / ||W^T delta||)`; `W` is the
/// score matrix (`W_Q^T W_K` for the query/key form).
pub fn lift_delta(params: &AttentionParams, delta: &DVector<f64>, c0: f64) -> Result<DVector<f64>> {
    let lifted = params.score_matrix().tr_mul(delta);
    let norm = lifted.norm();
    if norm < 1e-12 {
        return Err(WsError::ZeroLift);
    }
    let c = c0.min((params.d as f64).sqrt() / norm);
    Ok(lifted * c)
}

fn attention_parts(map: &FeatureMap) -> Result<(&AttentionParams, ScoreNorm)> {
    match map {
        FeatureMap::Attention { params, norm } => Ok((params, *norm)),
        _ => Err(WsError::InvalidConfig(format!("{} is not an attention map", map.kind().name()))),
    }
}

fn perturbed(x: &TokenMatrix, i: usize, delta: &DVector<f64>) -> Result<TokenMatrix> {
    apply_perturbation(x, &Perturbation::new(vec![(i, delta.clone())], BudgetMode::Strict))
}

/// Per-row distance `||s(X^i(Delta))_j - e_i||`.
pub fn collapse_distances(map: &FeatureMap, x: &TokenMatrix, i: usize, delta: &DVector<f64>) -> Result<Vec<f64>> {
    let (params, norm) = attention_parts(map)?;
    let xp = perturbed(x, i, delta)?;
    let (_, s) = raf_scores(params, &xp, norm)?;
    Ok(s
        .row_iter()
        .map(|row| {
            let mut sq = 0.0;
            for (l, &v) in row.iter().enumerate() {
                let e = if l == i { 1.0 } else { 0.0 };
                sq += (v - e) * (v - e);
            }
            sq.sqrt()
        })
        .collect())
}

/// Fraction of rows whose attention lies within `epsilon` of `e_i`.
pub fn attention_concentration(map: &FeatureMap, x: &TokenMatrix, i: usize, delta: &DVector<f64>, epsilon: f64) -> Result<f64> {
    let dist = collapse_distances(map, x, i, delta)?;
    Ok(dist.iter().filter(|&&v| v <= epsilon).count() as f64 / x.n() as f64)
}

/// Per row `j`: raw score on column `i` minus the largest other raw score.
pub fn logit_gaps(map: &FeatureMap, x: &TokenMatrix, i: usize, delta: &DVector<f64>) -> Result<Vec<f64>> {
    let (params, norm) = attention_parts(map)?;
    let xp = perturbed(x, i, delta)?;
    let (raw, _) = raf_scores(params, &xp, norm)?;
    Ok(raw
        .row_iter()
        .map(|row| {
            let other = row.iter().enumerate().filter(|(l, _)| *l != i).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            row[i] - other
        })
        .collect())
}

/// Remark-style perturbation: `scale sqrt(d)` times the top right singular
/// vector of the score matrix, signed so that the mean of `X W Delta` is
/// non-negative.
pub fn top_singular_perturbation(params: &AttentionParams, x: &TokenMatrix, scale: f64) -> Result<DVector<f64>> {
    if x.d() != params.d {
        return Err(WsError::DimMismatch(format!("expected d = {}, got {}", params.d, x.d())));
    }
    let svd = ThinSvd::new(params.score_matrix());
    let v = svd.v_t.row(0).transpose();
    let delta = v * (scale * (params.d as f64).sqrt());
    let mean = (x.values() * (params.score_matrix() * &delta)).mean();
    Ok(if mean < 0.0 { -delta } else { delta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructReport {
    pub index: usize,
    pub rank: usize,
    pub delta_star: DVector<f64>,
    pub aligned_count: usize,
    /// `(delta_1, delta_2)`, or `delta*` alone when the rows span everything.
    pub halves: Vec<DVector<f64>>,
    pub lifted: Vec<DVector<f64>>,
    /// `||phi(X^i(Delta_k)) - phi(X)||` for each lifted vector.
    pub changes: Vec<f64>,
    pub fractions: Vec<f64>,
    pub chosen: usize,
    pub feature_change: f64,
    pub ratio: f64,
    /// False when the split was unavailable (full row rank).
    pub split: bool,
    /// Smallest slack of the two-candidate dichotomy over rows collapsed for
    /// both candidates; `None` if no such row or if values are re-weighted.
    pub dichotomy_margin: Option<f64>,
}

impl ConstructReport {
    pub fn chosen_delta(&self) -> &DVector<f64> {
        &self.lifted[self.chosen]
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "index": self.index,
            "rank": self.rank,
            "delta_star": b64(&self.delta_star),
            "aligned_count": self.aligned_count,
            "halves": self.halves.iter().map(b64).collect::<Vec<_>>(),
            "lifted": self.lifted.iter().map(b64).collect::<Vec<_>>(),
            "changes": self.changes,
            "fractions": self.fractions,
            "chosen": self.chosen,
            "chosen_delta": b64(self.chosen_delta()),
            "feature_change": self.feature_change,
            "ratio": self.ratio,
            "split": self.split,
            "dichotomy_margin": self.dichotomy_margin,
        })
    }
}

/// Base64 of the little-endian f64 bytes.
pub fn b64(v: &DVector<f64>) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<DVector<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| WsError::InvalidConfig(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(WsError::ShortRead);
    }
    Ok(DVector::from_iterator(
        bytes.len() / 8,
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
    ))
}

/// Runs the whole pipeline for row `i` and keeps the lifted candidate with the
/// larger feature change.
pub fn construct_perturbation(map: &FeatureMap, x: &TokenMatrix, i: usize, cfg: &ConstructConfig) -> Result<ConstructReport> {
    let (params, _) = attention_parts(map)?;
    if i >= x.n() {
        return Err(WsError::IndexOutOfRange { index: i, n: x.n() });
    }
    if x.n() > x.d() {
        log::warn!("context length {} exceeds embedding dimension {}; the construction targets n << d", x.n(), x.d());
    }
    let (delta_star, count) = find_delta_star(x, cfg)?;
    let rank = {
        let svd = ThinSvd::new(x.values());
        svd.rank_above(RANK_TOL * svd.max_singular())
    };
    let (halves, split) = match split_delta(x, &delta_star) {
        Ok((a, b)) => (vec![a, b], true),
        Err(WsError::FullRowRank) => {
            log::warn!("rows span R^d; using delta* alone, the two-candidate argument is unavailable");
            (vec![delta_star.clone()], false)
        }
        Err(e) => return Err(e),
    };
    let lifted = halves.iter().map(|h| lift_delta(params, h, cfg.c0)).collect::<Result<Vec<_>>>()?;

    let base = map.features(x)?;
    let denom = base.norm();
    if denom == 0.0 {
        return Err(WsError::ZeroFeatureNorm);
    }
    let mut changes = Vec::new();
    let mut fractions = Vec::new();
    let mut dists = Vec::new();
    let mut outputs = Vec::new();
    for delta in &lifted {
        let xp = perturbed(x, i, delta)?;
        let feat = map.features(&xp)?;
        changes.push((&feat - &base).norm());
        let dist = collapse_distances(map, x, i, delta)?;
        fractions.push(dist.iter().filter(|&&v| v <= cfg.epsilon).count() as f64 / x.n() as f64);
        dists.push(dist);
        outputs.push((feat, operator_norm(xp.values(), 100, 1)));
    }
    let chosen = if changes.len() == 2 && changes[1] > changes[0] { 1 } else { 0 };

    let dichotomy_margin = if split && params.value_weight().is_none() {
        let dv = params.d;
        let row = |f: &DVector<f64>, j: usize| f.rows(j * dv, dv).into_owned();
        let gap = (&lifted[0] - &lifted[1]).norm();
        (0..x.n())
            .filter(|&j| dists[0][j] <= cfg.epsilon && dists[1][j] <= cfg.epsilon)
            .map(|j| {
                let lhs = (0..2).map(|k| (row(&outputs[k].0, j) - row(&base, j)).norm()).fold(0.0, f64::max);
                let slack = dists[0][j] * outputs[0].1 + dists[1][j] * outputs[1].1;
                lhs - (gap - slack) / 2.0
            })
            .reduce(f64::min)
    } else {
        None
    };

    Ok(ConstructReport {
        index: i,
        rank,
        delta_star,
        aligned_count: count,
        halves,
        feature_change: changes[chosen],
        ratio: changes[chosen] / denom,
        lifted,
        changes,
        fractions,
        chosen,
        split,
        dichotomy_margin,
    })
}

/// `X` with every row a copy of one normalized direction.
#[cfg(test)]
fn rank_one(n: usize, d: usize, seed: u64) -> TokenMatrix {
    let x = crate::data::synth_context(1, d, seed);
    TokenMatrix::new(nalgebra::DMatrix::from_fn(n, d, |_, c| x.values()[(0, c)])).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use crate::data::synth_context;
    use crate::featmaps::{MapKind, MapSpec};

    #[test]
    fn rank_one_context_aligns_every_row() {
        let (n, d) = (6, 10);
        let x = rank_one(n, d, 3);
        let (delta, count) = find_delta_star(&x, &ConstructConfig { sphere_samples: 4, ..Default::default() }).unwrap();
        assert_eq!(count, n);
        let expected = x.row(0) * ((d as f64 / n as f64).sqrt() / (d as f64).sqrt());
        assert!((&delta - &expected).norm() < 1e-9);
        for j in 0..n {
            let a = x.row(j).dot(&delta);
            assert!((a * a - (d * d) as f64 / n as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn delta_star_respects_budget_and_energy_identity() {
        for (n, d) in [(4, 16), (16, 16), (20, 8)] {
            let x = synth_context(n, d, 2);
            let (delta, _) = find_delta_star(&x, &ConstructConfig { sphere_samples: 16, ..Default::default() }).unwrap();
            assert!(delta.norm() <= (d as f64).sqrt() + 1e-9);
            let energy: f64 = (0..n).map(|j| x.row(j).dot(&delta).powi(2)).sum();
            assert!((energy - (x.values() * &delta).norm_squared()).abs() < 1e-9 * (1.0 + energy));
        }
    }

    #[test]
    fn orthogonal_rows_reach_a_third_aligned() {
        let d = 32;
        let x = TokenMatrix::new(DMatrix::identity(d, d) * (d as f64).sqrt()).unwrap();
        let (_, count) = find_delta_star(&x, &ConstructConfig { sphere_samples: 512, tau: 0.01, ..Default::default() }).unwrap();
        assert!(count as f64 >= 0.3 * d as f64, "{count}");
    }

    #[test]
    fn zero_context_has_rank_zero() {
        let x = TokenMatrix::new(DMatrix::zeros(3, 4)).unwrap();
        assert!(matches!(find_delta_star(&x, &ConstructConfig::default()), Err(WsError::RankZero)));
    }

    #[test]
    fn split_preserves_row_products_and_separates_by_sqrt_d() {
        let (n, d) = (5, 12);
        let x = synth_context(n, d, 8);
        let (delta, _) = find_delta_star(&x, &ConstructConfig { sphere_samples: 8, ..Default::default() }).unwrap();
        let (a, b) = split_delta(&x, &delta).unwrap();
        assert!(((&a - &b).norm() - (d as f64).sqrt()).abs() < 1e-9);
        for j in 0..n {
            let xj = x.row(j);
            assert!((xj.dot(&a) - xj.dot(&delta) / 2.0).abs() < 1e-9);
            assert!((xj.dot(&a) - xj.dot(&b)).abs() < 1e-9);
        }
        assert!(a.norm() <= (d as f64).sqrt() && b.norm() <= (d as f64).sqrt());
    }

    #[test]
    fn split_fails_on_full_row_rank() {
        let x = synth_context(6, 6, 1);
        assert!(matches!(split_delta(&x, &DVector::zeros(6)), Err(WsError::FullRowRank)));
    }

    #[test]
    fn lift_with_identity_is_a_rescale() {
        let d = 5;
        let params = AttentionParams::from_raf_weight(DMatrix::identity(d, d), 0).unwrap();
        let delta = DVector::from_vec(vec![1.0, 0.0, -2.0, 0.5, 0.0]);
        let lifted = lift_delta(&params, &delta, 1e9).unwrap();
        assert!((lifted - &delta * ((d as f64).sqrt() / delta.norm())).norm() < 1e-12);
        assert!(matches!(lift_delta(&params, &DVector::zeros(d), 1.0), Err(WsError::ZeroLift)));
    }

    #[test]
    fn lift_stays_in_budget_and_is_near_isometric() {
        let d = 512;
        let params = AttentionParams::sample_raf(d, 4).unwrap();
        let mut g = rng::rng_from(5);
        for _ in 0..5 {
            let delta = rng::unit_vector(&mut g, d) * (d as f64).sqrt();
            let ratio = params.score.tr_mul(&delta).norm() / delta.norm();
            assert!((0.8..=1.2).contains(&ratio), "{ratio}");
            assert!(lift_delta(&params, &delta, 10.0).unwrap().norm() <= (d as f64).sqrt() + 1e-9);
        }
    }

    #[test]
    fn concentration_baselines() {
        let x = synth_context(1, 4, 1);
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Raf, 1, 4), 2).unwrap();
        assert_eq!(attention_concentration(&map, &x, 0, &DVector::from_element(4, 0.5), 0.1).unwrap(), 1.0);

        let x = synth_context(32, 64, 3);
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Raf, 32, 64), 3).unwrap();
        assert!(attention_concentration(&map, &x, 0, &DVector::zeros(64), 0.1).unwrap() <= 0.05);
    }

    #[test]
    fn large_logit_gap_implies_collapse() {
        let (n, d) = (8, 64);
        let x = synth_context(n, d, 5);
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Raf, n, d), 6).unwrap();
        let FeatureMap::Attention { params, .. } = &map else { unreachable!() };
        let eps = 0.1;
        let delta = top_singular_perturbation(params, &x, 1.0).unwrap();
        let gaps = logit_gaps(&map, &x, 2, &delta).unwrap();
        let dist = collapse_distances(&map, &x, 2, &delta).unwrap();
        let bound = (2f64.sqrt() * n as f64 / eps).ln();
        for (g, dj) in gaps.iter().zip(&dist) {
            if *g >= bound {
                assert!(*dj <= eps);
            }
        }
    }

    #[test]
    fn top_singular_direction_of_spd_matrix() {
        let d = 4;
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 2.0, 0.5]));
        let params = AttentionParams::from_raf_weight(w, 0).unwrap();
        let x = synth_context(3, d, 1);
        let delta = top_singular_perturbation(&params, &x, 0.5).unwrap();
        assert!((delta.norm() - 0.5 * 2.0).abs() < 1e-12);
        assert!((delta[1].abs() - 1.0).abs() < 1e-12);
        assert!((x.values() * (params.score_matrix() * &delta)).mean() >= 0.0);
    }

    #[test]
    fn report_picks_larger_change_and_stays_feasible() {
        let (n, d) = (8, 48);
        let x = synth_context(n, d, 9);
        for kind in [MapKind::Raf, MapKind::ReluRaf, MapKind::Qkv] {
            let map = FeatureMap::sample(&MapSpec::new(kind, n, d), 10).unwrap();
            let cfg = ConstructConfig { sphere_samples: 64, c0: 1e6, ..Default::default() };
            let rep = construct_perturbation(&map, &x, 0, &cfg).unwrap();
            assert!(rep.split);
            assert_eq!(rep.feature_change, rep.changes.iter().copied().fold(0.0, f64::max));
            for v in rep.lifted.iter().chain(rep.halves.iter()).chain([&rep.delta_star]) {
                assert!(v.norm() <= (d as f64).sqrt() + 1e-9);
            }
            if let Some(m) = rep.dichotomy_margin {
                assert!(m >= -1e-9, "{m}");
            }
            let js = rep.to_json();
            assert_eq!(b64_decode(js["chosen_delta"].as_str().unwrap()).unwrap(), *rep.chosen_delta());
        }
    }

    #[test]
    fn full_rank_context_falls_back_to_single_candidate() {
        let x = synth_context(6, 6, 2);
        let map = FeatureMap::sample(&MapSpec::new(MapKind::Raf, 6, 6), 1).unwrap();
        let rep = construct_perturbation(&map, &x, 1, &ConstructConfig { sphere_samples: 8, ..Default::default() }).unwrap();
        assert!(!rep.split);
        assert_eq!(rep.lifted.len(), 1);
        assert_eq!(rep.dichotomy_margin, None);
    }
}
