//! Token matrices, perturbations and labelled datasets.

pub mod csv;
pub mod emb;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WsError};
use crate::rng::{self, WsRng};

const ZERO_ROW_THRESHOLD: f64 = 1e-300;
const NORM_REL_TOL: f64 = 1e-9;
const BUDGET_SLACK: f64 = 1e-12;

/// A context of `n` token embeddings of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    values: DMatrix<f64>,
    normalized: bool,
}

impl TokenMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(WsError::DimMismatch("token matrix must be at least 1x1".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(WsError::NonFinite(format!("token matrix entry {pos}")));
        }
        let normalized = rows_have_norm(&values, (values.ncols() as f64).sqrt());
        Ok(Self { values, normalized })
    }

    /// Builds from row-major values.
    pub fn from_row_major(n: usize, d: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * d {
            return Err(WsError::DimMismatch(format!(
                "expected {} values for {n}x{d}, got {}",
                n * d,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, d, data))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    /// Flattened dimension `n * d`.
    pub fn flat_dim(&self) -> usize {
        self.n() * self.d()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    /// Row-major flattening: row 0 first, then row 1, ...
    pub fn flat(&self) -> DVector<f64> {
        DVector::from_iterator(self.flat_dim(), self.row_major_iter())
    }

    pub fn row_major_iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n()).flat_map(move |i| (0..self.d()).map(move |j| self.values[(i, j)]))
    }

    /// Leading `n' x d'` block.
    pub fn truncate(&self, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 || n > self.n() || d > self.d() {
            return Err(WsError::TruncationTooLarge { req_n: n, req_d: d, n: self.n(), d: self.d() });
        }
        Self::new(self.values.view((0, 0), (n, d)).into_owned())
    }
}

fn rows_have_norm(values: &DMatrix<f64>, target: f64) -> bool {
    values
        .row_iter()
        .all(|r| (r.norm() - target).abs() <= NORM_REL_TOL * target)
}

/// Rescales every row to Euclidean norm `sqrt(d)`.
pub fn normalize_rows(x: &TokenMatrix) -> Result<TokenMatrix> {
    let target = (x.d() as f64).sqrt();
    let mut values = x.values.clone();
    for (i, mut row) in values.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm < ZERO_ROW_THRESHOLD {
            return Err(WsError::ZeroRow(i));
        }
        if x.normalized && (norm - target).abs() <= NORM_REL_TOL * target {
            continue;
        }
        row *= target / norm;
    }
    Ok(TokenMatrix { values, normalized: true })
}

/// Rows are independent standard Gaussians rescaled to norm `sqrt(d)`.
pub fn synth_context(n: usize, d: usize, seed: u64) -> TokenMatrix {
    let mut rng = rng::rng_from(seed);
    synth_context_with(&mut rng, n, d)
}

pub fn synth_context_with(rng: &mut WsRng, n: usize, d: usize) -> TokenMatrix {
    assert!(n >= 1 && d >= 1, "context must be at least 1x1");
    let target = (d as f64).sqrt();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let dir = rng::unit_vector(rng, d);
        data.extend(dir.iter().map(|v| v * target));
    }
    TokenMatrix { values: DMatrix::from_row_slice(n, d, &data), normalized: true }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetMode {
    /// Over-budget rows are an error.
    #[default]
    Strict,
    /// Over-budget rows are rescaled onto the sphere of radius `sqrt(d)`.
    Clip,
    /// No budget at all; for algebraic checks outside the feasible set.
    Unchecked,
}

/// Additive changes to a set of distinct rows of a context.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub entries: Vec<(usize, DVector<f64>)>,
    pub mode: BudgetMode,
}

impl Perturbation {
    pub fn new(entries: Vec<(usize, DVector<f64>)>, mode: BudgetMode) -> Self {
        Self { entries, mode }
    }

    pub fn single(index: usize, delta: DVector<f64>) -> Self {
        Self::new(vec![(index, delta)], BudgetMode::Strict)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    /// Checks shape, distinct indices and (in strict mode) the norm budget.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        let budget = (d as f64).sqrt();
        let mut seen = vec![false; n];
        for (index, delta) in &self.entries {
            let index = *index;
            if index >= n {
                return Err(WsError::IndexOutOfRange { index, n });
            }
            if seen[index] {
                return Err(WsError::DuplicateIndex(index));
            }
            seen[index] = true;
            if delta.len() != d {
                return Err(WsError::DimMismatch(format!(
                    "perturbation of row {index} has length {}, expected {d}",
                    delta.len()
                )));
            }
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(WsError::NonFinite(format!("perturbation of row {index}")));
            }
            let norm = delta.norm();
            if self.mode == BudgetMode::Strict && norm > budget + BUDGET_SLACK {
                return Err(WsError::BudgetExceeded { index, norm, budget });
            }
        }
        Ok(())
    }
}

/// Rescales `delta` onto the ball of the given radius when it lies outside.
pub fn project_to_ball(delta: &mut DVector<f64>, radius: f64) {
    let norm = delta.norm();
    if norm > radius {
        *delta *= radius / norm;
    }
}

/// Returns `X` with row `i_j` replaced by `x_{i_j} + delta_j` for every entry.
pub fn apply_perturbation(x: &TokenMatrix, p: &Perturbation) -> Result<TokenMatrix> {
    p.validate(x.n(), x.d())?;
    let radius = (x.d() as f64).sqrt();
    let mut values = x.values.clone();
    for (index, delta) in &p.entries {
        let mut delta = delta.clone();
        if p.mode == BudgetMode::Clip {
            project_to_ball(&mut delta, radius);
        }
        let mut row = values.row_mut(*index);
        row += delta.transpose();
    }
    Ok(TokenMatrix { values, normalized: false })
}

/// Samples with binary labels and a common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<TokenMatrix>,
    labels: Option<Vec<i8>>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<TokenMatrix>, labels: Option<Vec<i8>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let (n, d) = (first.n(), first.d());
            if let Some(bad) = samples.iter().position(|s| s.n() != n || s.d() != d) {
                return Err(WsError::DimMismatch(format!("sample {bad} differs in shape from sample 0")));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != samples.len() {
                return Err(WsError::DimMismatch(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    samples.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
                return Err(WsError::BadLabel(bad as i64));
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TokenMatrix] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[i8]> {
        self.labels.as_deref()
    }

    pub fn labels_f64(&self) -> Option<DVector<f64>> {
        self.labels
            .as_ref()
            .map(|l| DVector::from_iterator(l.len(), l.iter().map(|&v| v as f64)))
    }

    /// `(n, d)` of the samples, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.n(), s.d()))
    }

    pub fn into_parts(self) -> (Vec<TokenMatrix>, Option<Vec<i8>>) {
        (self.samples, self.labels)
    }
}

/// Synthetic dataset: Gaussian-on-sphere samples with fair random labels.
pub fn synth_dataset(count: usize, n: usize, d: usize, seed: u64) -> LabeledDataset {
    let mut rng = rng::rng_from(seed);
    let samples: Vec<_> = (0..count).map(|_| synth_context_with(&mut rng, n, d)).collect();
    let labels: Vec<i8> = (0..count).map(|_| rng::rademacher(&mut rng) as i8).collect();
    LabeledDataset { samples, labels: Some(labels) }
}
