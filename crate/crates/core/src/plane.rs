//! Recovery of the supporting plane from an incomplete moment matrix.
//!
//! The pipeline runs six steps in order:
//!
//! 1. pick the largest fully observed block of the matrix and count its singular
//!    values above the sampling noise level (`K_0`);
//! 2. impute every unobserved block from `K_0` donor columns by least squares;
//! 3. scale each column so that every variable block sums to one;
//! 4. map the block-sum slice isometrically onto `R^{|L|-J}`;
//! 5. fit the best affine plane to the mapped columns (center plus leading
//!    principal directions), choosing `K` from the spectrum;
//! 6. map the affine basis back onto the slice, giving `K` block-stochastic vectors
//!    that span the estimated plane.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, LlsError, PlaneStep, Result};
use crate::freq::MomentMatrix;
use crate::schema::Schema;

/// Tolerance used when a basis is read from disk.
const LOAD_BLOCK_SUM_TOL: f64 = 1e-8;

/// `K` vectors in `R^{|L|}` spanning a supporting plane, each block-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    schema: Schema,
    vectors: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    levels: Vec<usize>,
    k: usize,
    lambda: Vec<Vec<f64>>,
}

impl Basis {
    /// Checks shapes only; see [`Basis::max_block_sum_error`] for the slice invariant.
    pub fn new(schema: Schema, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(LlsError::Precondition("basis needs at least one vector".into()));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != schema.total_cells()) {
            return Err(LlsError::Precondition(format!(
                "basis vector has length {}, expected |L| = {}",
                v.len(),
                schema.total_cells()
            )));
        }
        Ok(Basis { schema, vectors })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// `λ^k_{jl}` with `k` 0-based, `row` the flat cell row.
    pub fn coeff(&self, k: usize, row: usize) -> f64 {
        self.vectors[k][row]
    }

    /// `|L| × K` matrix with the basis vectors as columns.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.schema.total_cells(), self.k(), |r, k| self.vectors[k][r])
    }

    /// Largest `|Σ_l λ^k_{jl} - 1|` over all `k, j`.
    pub fn max_block_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for v in &self.vectors {
            for j in 0..self.schema.num_vars() {
                let s: f64 = v[self.schema.block(j)].iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    pub fn to_json(&self) -> String {
        let file = BasisFile {
            levels: self.schema.levels().to_vec(),
            k: self.k(),
            lambda: self.vectors.clone(),
        };
        serde_json::to_string_pretty(&file).expect("basis serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: BasisFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let schema = Schema::new(file.levels).map_err(|e| e.to_string())?;
        if file.k != file.lambda.len() {
            return Err(format!("k = {} but {} vectors given", file.k, file.lambda.len()));
        }
        let basis = Basis::new(schema, file.lambda).map_err(|e| e.to_string())?;
        let err = basis.max_block_sum_error();
        if err > LOAD_BLOCK_SUM_TOL {
            return Err(format!("basis blocks do not sum to 1 (max error {:e})", err));
        }
        Ok(basis)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    /// Reads a basis file; a model file also works since it carries the same keys.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Basis::from_json(&text).map_err(|msg| LlsError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })
    }
}

/// Tuning knobs for [`estimate_plane`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneConfig {
    /// Scales the sampling-noise threshold on singular values of the observed minor.
    pub rank_threshold_factor: f64,
    /// Singular values at or below `rank_rel_tol · σ_1` never count toward `K_0`.
    pub rank_rel_tol: f64,
    /// Scales the eigenvalue threshold `n_c · ε²` used to choose `K`.
    pub eig_threshold_factor: f64,
    /// Eigenvalues at or below `eig_rel_tol · γ_1` are treated as zero.
    pub eig_rel_tol: f64,
    /// Fix the dimension instead of choosing it from the spectrum.
    pub k_override: Option<usize>,
    /// Weight columns by inverse sampling variance in the affine fit.
    pub weight_columns: bool,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        PlaneConfig {
            rank_threshold_factor: 1.0,
            rank_rel_tol: 1e-10,
            eig_threshold_factor: 1.0,
            eig_rel_tol: 1e-12,
            k_override: None,
            weight_columns: false,
        }
    }
}

/// Diagnostics collected along the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlaneFitReport {
    pub k0: usize,
    pub k: usize,
    pub minor_variables: Vec<usize>,
    pub minor_shape: (usize, usize),
    pub singular_values: Vec<f64>,
    pub rank_threshold: f64,
    pub noise_scale: f64,
    pub eig_threshold: f64,
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub residual: f64,
    pub columns_in: usize,
    pub columns_discarded_completion: usize,
    pub columns_discarded_normalization: usize,
    pub blocks_imputed: usize,
    pub cells_imputed: usize,
    pub points: usize,
}

impl PlaneFitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }
}

/// Fully observed submatrix: rows of the variables outside `support_vars`, columns
/// whose label pattern only fixes variables inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedMinor {
    pub support_vars: Vec<usize>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl ObservedMinor {
    pub fn extract(&self, m: &MomentMatrix) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.cols.len(), |r, c| {
            m.values()[(self.rows[r], self.cols[c])]
        })
    }
}

/// Greedy search for a large fully observed block.
///
/// Grows a variable set `S` one variable at a time, each time adding the variable
/// that maximizes `rows(outside S) × columns(support ⊆ S)`, ties to the lowest
/// index. The best block seen along the way is returned.
pub fn find_observed_minor(m: &MomentMatrix) -> Result<ObservedMinor> {
    let schema = m.schema();
    let j_count = schema.num_vars();
    let supports: Vec<Vec<usize>> = m
        .columns()
        .iter()
        .map(|p| p.support().map(|(j, _)| j).collect())
        .collect();
    let mut by_var: Vec<Vec<usize>> = vec![Vec::new(); j_count];
    for (c, s) in supports.iter().enumerate() {
        for &j in s {
            by_var[j].push(c);
        }
    }

    let mut in_s = vec![false; j_count];
    let mut rows_out: usize = schema.total_cells();
    let mut cols_in: usize = supports.iter().filter(|s| s.is_empty()).count();
    let mut best = (rows_out * cols_in, in_s.clone());

    for _ in 0..j_count {
        let mut pick: Option<(usize, usize, usize)> = None;
        for v in 0..j_count {
            if in_s[v] {
                continue;
            }
            let gained = by_var[v]
                .iter()
                .filter(|&&c| supports[c].iter().all(|&u| u == v || in_s[u]))
                .count();
            let rows = rows_out - schema.level_count(v);
            let cols = cols_in + gained;
            let area = rows * cols;
            if pick.is_none_or(|(a, _, _)| area > a) {
                pick = Some((area, v, gained));
            }
        }
        let Some((area, v, gained)) = pick else { break };
        in_s[v] = true;
        rows_out -= schema.level_count(v);
        cols_in += gained;
        if area > best.0 {
            best = (area, in_s.clone());
        }
    }

    let in_s = best.1;
    let rows: Vec<usize> = schema
        .cells()
        .filter(|c| !in_s[c.variable])
        .map(|c| c.flat_row)
        .collect();
    let cols: Vec<usize> = (0..m.num_cols())
        .filter(|&c| supports[c].iter().all(|&u| in_s[u]))
        .collect();
    if rows.len() < 2 || cols.len() < 2 {
        return Err(LlsError::Degenerate(format!(
            "largest fully observed block is {}x{}, need at least 2x2",
            rows.len(),
            cols.len()
        )));
    }
    Ok(ObservedMinor {
        support_vars: (0..j_count).filter(|&j| in_s[j]).collect(),
        rows,
        cols,
    })
}

/// Outcome of the singular-value count on the observed minor.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEstimate {
    pub k0: usize,
    pub singular_values: Vec<f64>,
    /// Noise level `τ` before the relative floor is applied.
    pub noise_threshold: f64,
    /// Threshold actually used: `max(τ, rank_rel_tol · σ_1)`.
    pub threshold: f64,
}

pub(crate) fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Mean over columns of `sqrt(Σ_r f_r (1 - f_r) / n)`, the binomial noise norm.
fn column_noise_norm(minor: &DMatrix<f64>, n: usize) -> f64 {
    if minor.ncols() == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let total: f64 = minor
        .column_iter()
        .map(|c| (c.iter().map(|&f| f * (1.0 - f)).sum::<f64>().max(0.0) / nf).sqrt())
        .sum();
    total / minor.ncols() as f64
}

/// Counts singular values of `minor` above the sampling noise level.
///
/// With `n = None` (exact moments) only the relative floor applies.
pub fn estimate_rank(
    minor: &DMatrix<f64>,
    n: Option<usize>,
    config: &PlaneConfig,
) -> Result<RankEstimate> {
    if minor.iter().any(|v| !v.is_finite()) {
        return Err(LlsError::Precondition("minor contains unobserved entries".into()));
    }
    let singular_values = sorted_singular_values(minor);
    let noise_threshold = n.map_or(0.0, |n| config.rank_threshold_factor * column_noise_norm(minor, n));
    let sigma1 = singular_values.first().copied().unwrap_or(0.0);
    let threshold = noise_threshold.max(config.rank_rel_tol * sigma1);
    let k0 = singular_values.iter().filter(|&&s| s > threshold).count();
    let limit = minor.nrows().min(minor.ncols()) / 2;
    let est = RankEstimate {
        k0,
        singular_values,
        noise_threshold,
        threshold,
    };
    if k0 == 0 {
        return Err(LlsError::NotApplicable(
            "no singular value of the observed minor exceeds the noise level".into(),
        ));
    }
    if k0 > limit {
        return Err(LlsError::NotApplicable(format!(
            "too many large singular values: {} above threshold {:e} in a {}x{} minor (at most {} allowed)",
            k0,
            threshold,
            minor.nrows(),
            minor.ncols(),
            limit
        )));
    }
    Ok(est)
}

/// Moment matrix with every retained column fully imputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    /// `|L| × cols.len()`, columns aligned with `cols`.
    pub values: DMatrix<f64>,
    /// Indices of the retained columns in the source matrix.
    pub cols: Vec<usize>,
    /// Source columns discarded for lack of values or donors.
    pub dropped: Vec<usize>,
    pub blocks_imputed: usize,
    pub cells_imputed: usize,
}

/// Donors are accepted only if they raise the rank of the donor set by one on the
/// shared rows, measured relative to the largest singular value.
const DONOR_INDEPENDENCE_TOL: f64 = 1e-9;

/// Fills every unobserved block of `m` from `k0` donor columns.
///
/// For a column `c` missing variable `j`, donors must be observed on `j` and share at
/// least `k0` observed rows with `c` and each other. Candidates are tried by lowest
/// pattern order, then most rows shared with `c`, then column order, skipping any that
/// would make the donor set linearly dependent. The coefficients of `c` on the donors
/// are fitted by SVD least squares over the shared rows and the block is filled with
/// the same combination of donor values.
pub fn complete_matrix(m: &MomentMatrix, k0: usize) -> Result<Completion> {
    if k0 == 0 {
        return Err(LlsError::Precondition("K_0 must be at least 1".into()));
    }
    let schema = m.schema();
    let n_cols = m.num_cols();
    let max_order = m.columns().iter().map(|p| p.order()).max().unwrap_or(0);
    let mut by_order: Vec<Vec<usize>> = vec![Vec::new(); max_order + 1];
    for (c, p) in m.columns().iter().enumerate() {
        by_order[p.order()].push(c);
    }

    let filled: Vec<Option<(Vec<f64>, usize, usize)>> = (0..n_cols)
        .into_par_iter()
        .map(|c| complete_column(m, c, k0, &by_order))
        .collect();

    let mut cols = Vec::new();
    let mut dropped = Vec::new();
    let mut data = Vec::new();
    let mut blocks_imputed = 0;
    let mut cells_imputed = 0;
    for (c, f) in filled.into_iter().enumerate() {
        match f {
            Some((col, blocks, cells)) => {
                data.extend(col);
                cols.push(c);
                blocks_imputed += blocks;
                cells_imputed += cells;
            }
            None => {
                log::warn!("completion: discarding column {}", m.columns()[c]);
                dropped.push(c);
            }
        }
    }
    if dropped.len() * 2 > n_cols {
        return Err(LlsError::NotApplicable(format!(
            "completion discarded {} of {} columns",
            dropped.len(),
            n_cols
        )));
    }
    Ok(Completion {
        values: DMatrix::from_vec(schema.total_cells(), cols.len(), data),
        cols,
        dropped,
        blocks_imputed,
        cells_imputed,
    })
}

fn complete_column(
    m: &MomentMatrix,
    c: usize,
    k0: usize,
    by_order: &[Vec<usize>],
) -> Option<(Vec<f64>, usize, usize)> {
    let schema = m.schema();
    let pattern = &m.columns()[c];
    let mut col: Vec<f64> = m.values().column(c).iter().copied().collect();
    let observed_rows: usize = (0..schema.num_vars())
        .filter(|&j| pattern.is_free(j))
        .map(|j| schema.level_count(j))
        .sum();
    if observed_rows < k0 {
        return None;
    }
    let mut blocks = 0;
    let mut cells = 0;
    for (j, _) in pattern.support() {
        let donors = select_donors(m, c, j, k0, by_order)?;
        let shared = shared_rows(m, c, &donors);
        let a = DMatrix::from_fn(shared.len(), donors.len(), |r, d| m.values()[(shared[r], donors[d])]);
        let b = DVector::from_iterator(shared.len(), shared.iter().map(|&r| m.values()[(r, c)]));
        let alpha = a
            .svd(true, true)
            .solve(&b, f64::EPSILON)
            .ok()?;
        for r in schema.block(j) {
            col[r] = donors
                .iter()
                .zip(alpha.iter())
                .map(|(&d, &w)| w * m.values()[(r, d)])
                .sum();
            cells += 1;
        }
        blocks += 1;
    }
    Some((col, blocks, cells))
}

/// Rows observed in column `c` and in every donor.
fn shared_rows(m: &MomentMatrix, c: usize, donors: &[usize]) -> Vec<usize> {
    let schema = m.schema();
    let cols = m.columns();
    schema
        .cells()
        .filter(|cell| {
            cols[c].is_free(cell.variable) && donors.iter().all(|&d| cols[d].is_free(cell.variable))
        })
        .map(|cell| cell.flat_row)
        .collect()
}

fn select_donors(
    m: &MomentMatrix,
    c: usize,
    j: usize,
    k0: usize,
    by_order: &[Vec<usize>],
) -> Option<Vec<usize>> {
    let schema = m.schema();
    let cols = m.columns();
    let target = &cols[c];
    let observed: usize = (0..schema.num_vars())
        .filter(|&v| target.is_free(v))
        .map(|v| schema.level_count(v))
        .sum();
    let shared_count = |d: usize| -> usize {
        let lost: usize = cols[d]
            .support()
            .filter(|&(v, _)| target.is_free(v))
            .map(|(v, _)| schema.level_count(v))
            .sum();
        observed - lost
    };

    let mut donors: Vec<usize> = Vec::with_capacity(k0);
    for group in by_order {
        let mut candidates: Vec<(usize, usize)> = group
            .iter()
            .filter(|&&d| d != c && cols[d].is_free(j))
            .map(|&d| (shared_count(d), d))
            .filter(|&(s, _)| s >= k0)
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, d) in candidates {
            donors.push(d);
            if donors_independent(m, c, &donors, k0) {
                if donors.len() == k0 {
                    return Some(donors);
                }
            } else {
                donors.pop();
            }
        }
    }
    None
}

fn donors_independent(m: &MomentMatrix, c: usize, donors: &[usize], k0: usize) -> bool {
    let shared = shared_rows(m, c, donors);
    if shared.len() < k0 {
        return false;
    }
    let a = DMatrix::from_fn(shared.len(), donors.len(), |r, d| m.values()[(shared[r], donors[d])]);
    let sv = sorted_singular_values(&a);
    let (first, last) = (sv[0], sv[sv.len() - 1]);
    first > 0.0 && last > DONOR_INDEPENDENCE_TOL * first
}

/// Completed columns scaled onto the block-sum slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: DMatrix<f64>,
    /// Source-matrix indices of the retained columns.
    pub cols: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Imputed blocks whose sum (after division by the column mass) falls below this are
/// treated as failed imputations.
const MIN_IMPUTED_BLOCK_SUM: f64 = 1e-6;

/// Divides each column by its mass `s`, then rescales every imputed block by its own
/// sum so that all blocks sum to one.
pub fn normalize_columns(m: &MomentMatrix, completion: &Completion) -> Result<Normalized> {
    let schema = m.schema();
    let mut cols = Vec::new();
    let mut dropped = Vec::new();
    let mut data = Vec::new();
    for (pos, &c) in completion.cols.iter().enumerate() {
        let s = m.column_mass()[c];
        if s <= 0.0 {
            return Err(LlsError::Precondition(format!(
                "column {} has non-positive mass {}",
                m.columns()[c],
                s
            )));
        }
        let mut col: Vec<f64> = completion.values.column(pos).iter().map(|v| v / s).collect();
        let pattern = &m.columns()[c];
        let mut ok = true;
        for (j, _) in pattern.support() {
            let block = schema.block(j);
            let sum: f64 = col[block.clone()].iter().sum();
            if sum.abs() < MIN_IMPUTED_BLOCK_SUM || !sum.is_finite() {
                ok = false;
                break;
            }
            for v in &mut col[block] {
                *v /= sum;
            }
        }
        if ok {
            data.extend(col);
            cols.push(c);
        } else {
            log::warn!("normalization: discarding column {} (degenerate imputed block)", pattern);
            dropped.push(c);
        }
    }
    Ok(Normalized {
        values: DMatrix::from_vec(schema.total_cells(), cols.len(), data),
        cols,
        dropped,
    })
}

/// `(√L - 1) / (L - 1)`, the first-column coefficient of a block of the slice map.
pub fn block_coefficient(levels: usize) -> f64 {
    let l = levels as f64;
    (l.sqrt() - 1.0) / (l - 1.0)
}

/// Applies the block-diagonal slice map: each block `c` of `L` entries becomes the
/// `L - 1` values `c_{i+1} - a·c_1`.
pub fn reduce_vector(schema: &Schema, v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(schema.reduced_dim());
    for j in 0..schema.num_vars() {
        let block = &v[schema.block(j)];
        let a = block_coefficient(block.len());
        out.extend(block[1..].iter().map(|&x| x - a * block[0]));
    }
    out
}

/// Inverse of [`reduce_vector`] onto the slice where every block sums to one.
pub fn lift_vector(schema: &Schema, y: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(schema.total_cells());
    let mut pos = 0;
    for j in 0..schema.num_vars() {
        let l = schema.level_count(j);
        let a = block_coefficient(l);
        let img = &y[pos..pos + l - 1];
        pos += l - 1;
        let first = (1.0 - img.iter().sum::<f64>()) / (l as f64).sqrt();
        let rest: Vec<f64> = img.iter().map(|&t| t + a * first).collect();
        // block sum is exactly one by construction
        out.push(1.0 - rest.iter().sum::<f64>());
        out.extend(rest);
    }
    out
}

/// Columns mapped into `R^m`, `m = |L| - J`, with their center of gravity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedPoints {
    pub m: usize,
    /// `m × n_c`, one point per column.
    pub points: DMatrix<f64>,
    pub center: DVector<f64>,
    /// `points - center`, column by column.
    pub centered: DMatrix<f64>,
    /// Optional per-point weights (mean one); `None` means unweighted.
    pub weights: Option<Vec<f64>>,
}

impl ReducedPoints {
    pub fn new(points: DMatrix<f64>, weights: Option<Vec<f64>>) -> Self {
        let m = points.nrows();
        let n_c = points.ncols();
        let center = match &weights {
            None => points.column_mean(),
            Some(w) => {
                let total: f64 = w.iter().sum();
                let mut acc = DVector::zeros(m);
                for (i, col) in points.column_iter().enumerate() {
                    acc.axpy(w[i] / total, &col, 1.0);
                }
                acc
            }
        };
        let mut centered = points.clone();
        for i in 0..n_c {
            let mut col = centered.column_mut(i);
            col -= &center;
        }
        ReducedPoints {
            m,
            points,
            center,
            centered,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// Scatter matrix `X_rs = Σ_i w_i x^i_r x^i_s`.
    pub fn scatter(&self) -> DMatrix<f64> {
        let x = self.weighted_centered();
        &x * x.transpose()
    }

    fn weighted_centered(&self) -> DMatrix<f64> {
        match &self.weights {
            None => self.centered.clone(),
            Some(w) => {
                let mut x = self.centered.clone();
                for (i, mut col) in x.column_iter_mut().enumerate() {
                    col *= w[i].sqrt();
                }
                x
            }
        }
    }
}

/// Maps every normalized column through the slice map.
pub fn reduce_dimension(schema: &Schema, normalized: &DMatrix<f64>) -> ReducedPoints {
    let m = schema.reduced_dim();
    let mut points = DMatrix::zeros(m, normalized.ncols());
    for (i, col) in normalized.column_iter().enumerate() {
        let v: Vec<f64> = col.iter().copied().collect();
        points.set_column(i, &DVector::from_vec(reduce_vector(schema, &v)));
    }
    ReducedPoints::new(points, None)
}

/// Best-fitting affine plane through a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub center: DVector<f64>,
    /// The `K - 1` leading principal directions.
    pub directions: Vec<DVector<f64>>,
    /// Eigenvalues `γ_1 ≥ ... ≥ γ_m` of the scatter matrix.
    pub eigenvalues: Vec<f64>,
    pub k: usize,
    pub trace: f64,
    /// `trace(X) - Σ_{k<K} γ_k`, the sum of squared distances to the plane.
    pub residual: f64,
    pub threshold: f64,
}

/// Fits the affine plane minimizing squared distances.
///
/// The spectrum of the scatter matrix is taken from an SVD of the centered points,
/// which resolves eigenvalues near zero far better than a direct eigensolve. `K` is
/// the smallest integer with `γ_K, ..., γ_m` below `threshold` (after the relative
/// floor `rel_tol · γ_1`), unless `k_override` fixes it.
pub fn fit_affine_plane(
    points: &ReducedPoints,
    threshold: f64,
    rel_tol: f64,
    k_override: Option<usize>,
) -> Result<AffineFit> {
    if points.len() < 2 {
        return Err(LlsError::Precondition(format!(
            "need at least 2 points for an affine fit, got {}",
            points.len()
        )));
    }
    let m = points.m;
    let x = points.weighted_centered();
    let trace: f64 = x.iter().map(|v| v * v).sum();

    let svd = x.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let mut eigenvalues: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    eigenvalues.resize(m, 0.0);
    let mut vectors: Vec<DVector<f64>> = order.iter().map(|&i| u.column(i).into_owned()).collect();
    complete_orthonormal(&mut vectors, m);
    for v in &mut vectors {
        fix_sign(v);
    }

    // roundoff from centering scales with the raw energy of the points
    let energy: f64 = match &points.weights {
        None => points.points.iter().map(|v| v * v).sum(),
        Some(w) => points
            .points
            .column_iter()
            .zip(w)
            .map(|(c, wi)| wi * c.norm_squared())
            .sum(),
    };
    let gamma1 = eigenvalues.first().copied().unwrap_or(0.0);
    let effective = threshold.max(rel_tol * gamma1.max(energy));
    let k = match k_override {
        Some(k) => {
            if k == 0 {
                return Err(LlsError::Precondition("K must be at least 1".into()));
            }
            k
        }
        None => {
            let above = eigenvalues.iter().filter(|&&g| g >= effective && g > 0.0).count();
            if above == 0 {
                log::warn!("all scatter eigenvalues below threshold; fitting a single-point model (K = 1)");
            }
            above + 1
        }
    };
    if k - 1 > m {
        return Err(LlsError::Precondition(format!(
            "K - 1 = {} exceeds the reduced dimension {}",
            k - 1,
            m
        )));
    }
    let captured: f64 = eigenvalues[..k - 1].iter().sum();
    Ok(AffineFit {
        center: points.center.clone(),
        directions: vectors[..k - 1].to_vec(),
        residual: trace - captured,
        eigenvalues,
        k,
        trace,
        threshold: effective,
    })
}

/// Extends `vectors` to an orthonormal basis of `R^m` using coordinate axes.
fn complete_orthonormal(vectors: &mut Vec<DVector<f64>>, m: usize) {
    let mut axis = 0;
    while vectors.len() < m && axis < m {
        let mut e = DVector::zeros(m);
        e[axis] = 1.0;
        for v in vectors.iter() {
            let d = v.dot(&e);
            e.axpy(-d, v, 1.0);
        }
        let norm = e.norm();
        if norm > 1e-8 {
            vectors.push(e / norm);
        }
        axis += 1;
    }
}

/// Sign convention: the first coordinate that is not negligible is positive.
fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-10 * scale) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Maps `y^0, y^0 + z^1, ..., y^0 + z^{K-1}` back onto the slice.
pub fn lift_basis(schema: &Schema, center: &DVector<f64>, directions: &[DVector<f64>]) -> Basis {
    let mut vectors = Vec::with_capacity(directions.len() + 1);
    vectors.push(lift_vector(schema, center.as_slice()));
    for z in directions {
        let p = center + z;
        vectors.push(lift_vector(schema, p.as_slice()));
    }
    Basis {
        schema: schema.clone(),
        vectors,
    }
}

/// Per-column sampling noise of the normalized columns, `ε_c`.
fn normalized_noise(m: &MomentMatrix, cols: &[usize], n: usize) -> Vec<f64> {
    let nf = n as f64;
    cols.iter()
        .map(|&c| {
            let s = m.column_mass()[c];
            let var: f64 = (0..m.num_rows())
                .filter_map(|r| m.value(r, c))
                .map(|f| f * (1.0 - f))
                .sum();
            (var.max(0.0) / nf).sqrt() / s
        })
        .collect()
}

/// Runs all six steps on a moment matrix.
pub fn estimate_plane(m: &MomentMatrix, config: &PlaneConfig) -> Result<(Basis, PlaneFitReport)> {
    let schema = m.schema();
    let n = m.sample_size();

    let minor = find_observed_minor(m).map_err(|e| e.at(PlaneStep::Minor))?;
    let minor_values = minor.extract(m);
    let rank = match estimate_rank(&minor_values, n, config) {
        Ok(r) => r,
        Err(e) if config.k_override.is_some() => {
            log::warn!("rank estimate failed ({}); continuing with fixed K", e);
            let singular_values = sorted_singular_values(&minor_values);
            RankEstimate {
                k0: 0,
                singular_values,
                noise_threshold: f64::NAN,
                threshold: f64::NAN,
            }
        }
        Err(e) => return Err(e.at(PlaneStep::Rank)),
    };
    let k_complete = config.k_override.unwrap_or(rank.k0);

    let completion = complete_matrix(m, k_complete).map_err(|e| e.at(PlaneStep::Completion))?;
    let normalized = normalize_columns(m, &completion).map_err(|e| e.at(PlaneStep::Normalization))?;
    if normalized.cols.len() < 2 {
        return Err(LlsError::Degenerate(format!(
            "only {} usable column(s) after normalization",
            normalized.cols.len()
        ))
        .at(PlaneStep::Normalization));
    }

    let mut points = reduce_dimension(schema, &normalized.values);
    let noise = n.map(|n| normalized_noise(m, &normalized.cols, n));
    let noise_scale = noise
        .as_ref()
        .map_or(0.0, |e| e.iter().sum::<f64>() / e.len() as f64);
    if config.weight_columns {
        if let Some(eps) = &noise {
            if eps.iter().all(|&e| e > 0.0) {
                let raw: Vec<f64> = eps.iter().map(|e| 1.0 / (e * e)).collect();
                let mean = raw.iter().sum::<f64>() / raw.len() as f64;
                points = ReducedPoints::new(points.points, Some(raw.iter().map(|w| w / mean).collect()));
            }
        }
    }
    let eig_threshold = config.eig_threshold_factor * points.len() as f64 * noise_scale * noise_scale;
    let fit = fit_affine_plane(&points, eig_threshold, config.eig_rel_tol, config.k_override)
        .map_err(|e| e.at(PlaneStep::Fit))?;
    let basis = lift_basis(schema, &fit.center, &fit.directions);

    let report = PlaneFitReport {
        k0: rank.k0,
        k: fit.k,
        minor_variables: minor.support_vars.clone(),
        minor_shape: (minor.rows.len(), minor.cols.len()),
        singular_values: rank.singular_values,
        rank_threshold: rank.threshold,
        noise_scale,
        eig_threshold: fit.threshold,
        eigenvalues: fit.eigenvalues,
        trace: fit.trace,
        residual: fit.residual,
        columns_in: m.num_cols(),
        columns_discarded_completion: completion.dropped.len(),
        columns_discarded_normalization: normalized.dropped.len(),
        blocks_imputed: completion.blocks_imputed,
        cells_imputed: completion.cells_imputed,
        points: points.len(),
    };
    Ok((basis, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freq::Dataset;
    use approx::assert_abs_diff_eq;

    #[test]
    fn binary_block_map() {
        let schema = Schema::uniform(2, 2).unwrap();
        let y = reduce_vector(&schema, &[0.3, 0.7, 0.5, 0.5]);
        assert_abs_diff_eq!(y[0], 0.7 + 0.3 * (1.0 - 2f64.sqrt()), epsilon = 1e-15);
        assert_abs_diff_eq!(y[0], 0.575_735_9, epsilon = 1e-7);
        assert_abs_diff_eq!(block_coefficient(2), 2f64.sqrt() - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(block_coefficient(3), (3f64.sqrt() - 1.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(block_coefficient(3), 0.366_03, epsilon = 1e-5);
    }

    #[test]
    fn binary_block_inverse() {
        let schema = Schema::uniform(2, 2).unwrap();
        let back = lift_vector(&schema, &[1.0, 1.0 - 2f64.sqrt() * 0.25]);
        assert_abs_diff_eq!(back[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(back[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(back[2], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(back[3], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn isometry_on_unit_vectors() {
        let schema = Schema::uniform(3, 2).unwrap();
        let u = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let v = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let du: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let a = reduce_vector(&schema, &u);
        let b = reduce_vector(&schema, &v);
        let img: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let orig: f64 = du.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(img, orig, epsilon = 1e-14);
        // per block both are √2
        assert_abs_diff_eq!(orig, (3.0f64 * 2.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn affine_fit_square() {
        let pts = DMatrix::from_column_slice(2, 4, &[0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let rp = ReducedPoints::new(pts, None);
        assert_abs_diff_eq!(rp.center[0], 1.0);
        assert_abs_diff_eq!(rp.center[1], 1.0);
        let fit = fit_affine_plane(&rp, 0.0, 1e-12, Some(3)).unwrap();
        assert_abs_diff_eq!(fit.eigenvalues[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.eigenvalues[1], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.residual, 0.0, epsilon = 1e-12);
        let scatter = rp.scatter();
        assert_abs_diff_eq!(scatter[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scatter[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn affine_fit_identical_points() {
        let pts = DMatrix::from_fn(3, 5, |r, _| r as f64 * 0.1);
        let fit = fit_affine_plane(&ReducedPoints::new(pts, None), 0.0, 1e-12, None).unwrap();
        assert_eq!(fit.k, 1);
        assert!(fit.directions.is_empty());
        assert!(fit.eigenvalues.iter().all(|&g| g < 1e-28));
        assert_abs_diff_eq!(fit.center[2], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn affine_fit_rejects_oversized_k() {
        let pts = DMatrix::from_column_slice(2, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let rp = ReducedPoints::new(pts, None);
        assert!(fit_affine_plane(&rp, 0.0, 1e-12, Some(4)).is_err());
        assert!(fit_affine_plane(&ReducedPoints::new(DMatrix::zeros(2, 1), None), 0.0, 1e-12, None).is_err());
    }

    #[test]
    fn direction_signs_are_fixed() {
        let pts = DMatrix::from_column_slice(2, 3, &[0.0, 0.0, -1.0, -1.0, 1.0, 1.0]);
        let fit = fit_affine_plane(&ReducedPoints::new(pts, None), 0.0, 1e-12, None).unwrap();
        assert_eq!(fit.k, 2);
        assert!(fit.directions[0][0] > 0.0);
    }

    #[test]
    fn rank_of_equal_columns_is_one() {
        let minor = DMatrix::from_fn(4, 5, |r, _| 0.1 + 0.05 * r as f64);
        let est = estimate_rank(&minor, Some(1000), &PlaneConfig::default()).unwrap();
        assert_eq!(est.k0, 1);
        assert!(est.noise_threshold > 0.0);
    }

    #[test]
    fn rank_rejects_nan_and_zero() {
        let mut minor = DMatrix::from_element(3, 3, 0.2);
        minor[(1, 1)] = f64::NAN;
        assert!(matches!(
            estimate_rank(&minor, None, &PlaneConfig::default()),
            Err(LlsError::Precondition(_))
        ));
        assert!(matches!(
            estimate_rank(&DMatrix::zeros(3, 3), None, &PlaneConfig::default()),
            Err(LlsError::NotApplicable(_))
        ));
    }

    fn tiny_matrix(levels: Vec<usize>, order: usize) -> MomentMatrix {
        let schema = Schema::new(levels).unwrap();
        let rows: Vec<Vec<u32>> = (0..60u32)
            .map(|i| {
                (0..schema.num_vars())
                    .map(|j| 1 + ((i * (j as u32 + 3) + i / 7) % schema.level_count(j) as u32))
                    .collect()
            })
            .collect();
        MomentMatrix::from_dataset(&Dataset::new(schema, rows).unwrap(), order).unwrap()
    }

    #[test]
    fn minor_for_three_binary_variables() {
        let m = tiny_matrix(vec![2, 2, 2], 2);
        let minor = find_observed_minor(&m).unwrap();
        assert_eq!(minor.support_vars, vec![0, 1]);
        assert_eq!(minor.rows, vec![4, 5]);
        assert_eq!(minor.cols.len(), 9);
        for &r in &minor.rows {
            for &c in &minor.cols {
                assert!(m.is_observed(r, c));
            }
        }
    }

    #[test]
    fn minor_for_two_variables() {
        let m = tiny_matrix(vec![2, 2], 1);
        let minor = find_observed_minor(&m).unwrap();
        assert_eq!(minor.support_vars, vec![0]);
        assert_eq!(minor.rows, vec![2, 3]);
        let labels: Vec<String> = minor.cols.iter().map(|&c| m.columns()[c].to_string()).collect();
        assert_eq!(labels, ["0,0", "1,0", "2,0"]);
    }

    #[test]
    fn minor_with_only_the_empty_column() {
        let m = tiny_matrix(vec![2, 2, 2], 0);
        // the best block is all rows by the empty column, too thin for a rank estimate
        let err = find_observed_minor(&m).unwrap_err();
        assert!(err.to_string().contains("6x1"));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn normalized_observed_blocks_sum_to_one() {
        let m = tiny_matrix(vec![2, 3, 2], 1);
        let completion = complete_matrix(&m, 1).unwrap();
        let norm = normalize_columns(&m, &completion).unwrap();
        for (pos, _) in norm.cols.iter().enumerate() {
            for j in 0..3 {
                let s: f64 = norm.values.column(pos).rows_range(m.schema().block(j)).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_imputed_block_drops_column() {
        let m = tiny_matrix(vec![2, 2, 2], 1);
        let mut completion = complete_matrix(&m, 1).unwrap();
        let c = m.column_index(&crate::schema::ResponsePattern::from_entries(vec![1, 0, 0])).unwrap();
        let pos = completion.cols.iter().position(|&x| x == c).unwrap();
        let s = m.column_mass()[c];
        completion.values[(0, pos)] = 0.5e-9 * s;
        completion.values[(1, pos)] = 0.5e-9 * s;
        let norm = normalize_columns(&m, &completion).unwrap();
        assert_eq!(norm.dropped, vec![c]);
    }

    #[test]
    fn basis_json_roundtrip() {
        let schema = Schema::uniform(2, 2).unwrap();
        let b = Basis::new(schema, vec![vec![0.2, 0.8, 0.5, 0.5], vec![0.9, 0.1, 0.3, 0.7]]).unwrap();
        assert_eq!(Basis::from_json(&b.to_json()).unwrap(), b);
        let bad = r#"{"levels":[2,2],"k":1,"lambda":[[0.2,0.2,0.5,0.5]]}"#;
        assert!(Basis::from_json(bad).is_err());
        let mismatched = r#"{"levels":[2,2],"k":2,"lambda":[[0.2,0.8,0.5,0.5]]}"#;
        assert!(Basis::from_json(mismatched).is_err());
    }
}
