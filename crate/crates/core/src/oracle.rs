//! Synthetic models with finite-support mixing measures.
//!
//! Every integral of the model reduces to a finite sum over support points, so
//! moments, conditional moments and the true completion of the moment matrix are
//! computed exactly. Random generation uses `ChaCha8Rng::seed_from_u64(seed)`;
//! Dirichlet draws are normalized `Gamma(α, 1)` samples.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, LlsError, Result};
use crate::freq::{Dataset, MomentMatrix, MomentSource};
use crate::plane::Basis;
use crate::schema::{MomentIndex, ResponsePattern, Schema};

/// Bounds on the outcome probabilities of generated models.
pub const BETA_MIN: f64 = 0.02;
pub const BETA_MAX: f64 = 0.98;
const MAX_TRIES: usize = 10_000;
const BASIS_DIRICHLET_ALPHA: f64 = 2.0;
const SUPPORT_DIRICHLET_ALPHA: f64 = 1.0;

/// One atom of the mixing measure: coordinates `g` in the basis and weight `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub g: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    basis: Basis,
    support: Vec<SupportPoint>,
    /// `β^{(s)} = Σ_k g_k λ^k` for each support point.
    beta: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    levels: Vec<usize>,
    k: usize,
    lambda: Vec<Vec<f64>>,
    support: Vec<SupportPoint>,
}

impl SyntheticModel {
    /// Validates coordinates and weights; outcome probabilities may lie anywhere in
    /// `[0, 1]` so deterministic classes can be expressed.
    pub fn new(basis: Basis, support: Vec<SupportPoint>) -> Result<Self> {
        const TOL: f64 = 1e-9;
        let k = basis.k();
        if support.is_empty() {
            return Err(LlsError::Precondition("model needs at least one support point".into()));
        }
        if basis.max_block_sum_error() > TOL {
            return Err(LlsError::Precondition("basis blocks must sum to 1".into()));
        }
        let mut total_w = 0.0;
        for (s, p) in support.iter().enumerate() {
            if p.g.len() != k {
                return Err(LlsError::Precondition(format!(
                    "support point {} has {} coordinates, basis has {}",
                    s,
                    p.g.len(),
                    k
                )));
            }
            if (p.g.iter().sum::<f64>() - 1.0).abs() > TOL {
                return Err(LlsError::Precondition(format!(
                    "coordinates of support point {} do not sum to 1",
                    s
                )));
            }
            if p.w.is_nan() || p.w <= 0.0 {
                return Err(LlsError::Precondition(format!("support point {} has weight {}", s, p.w)));
            }
            total_w += p.w;
        }
        if (total_w - 1.0).abs() > TOL {
            return Err(LlsError::Precondition(format!("weights sum to {}, not 1", total_w)));
        }
        let beta: Vec<Vec<f64>> = support.iter().map(|p| combine(&basis, &p.g)).collect();
        if let Some(b) = beta.iter().flatten().find(|&&b| !(-TOL..=1.0 + TOL).contains(&b)) {
            return Err(LlsError::Precondition(format!(
                "outcome probability {} outside [0, 1]",
                b
            )));
        }
        Ok(SyntheticModel {
            basis,
            support,
            beta,
        })
    }

    /// Draws a random model with `k` basis vectors and `support_size` atoms.
    ///
    /// Basis blocks are Dirichlet(2) draws. The first `k` support points are the
    /// vertices of the coordinate simplex (so the atoms always span it, and the basis
    /// vectors are themselves outcome laws); the remaining ones are Dirichlet(1) draws.
    /// Weights are proportional to `0.5 + U[0,1)`. Draws are rejected until every
    /// outcome probability lies in `[0.02, 0.98]` and the basis has full rank.
    pub fn generate(schema: &Schema, k: usize, support_size: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(LlsError::Generation("K must be at least 1".into()));
        }
        if support_size < k {
            return Err(LlsError::Generation(format!(
                "support size {} is smaller than K = {}",
                support_size, k
            )));
        }
        if k > schema.reduced_dim() {
            return Err(LlsError::Generation(format!(
                "K = {} exceeds |L| - J = {}",
                k,
                schema.reduced_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis_gamma = Gamma::new(BASIS_DIRICHLET_ALPHA, 1.0).expect("valid gamma");
        let support_gamma = Gamma::new(SUPPORT_DIRICHLET_ALPHA, 1.0).expect("valid gamma");

        for _ in 0..MAX_TRIES {
            let vectors: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let mut v = Vec::with_capacity(schema.total_cells());
                    for j in 0..schema.num_vars() {
                        v.extend(dirichlet(&mut rng, &basis_gamma, schema.level_count(j)));
                    }
                    v
                })
                .collect();
            let mut coords: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    let mut g = vec![0.0; k];
                    g[i] = 1.0;
                    g
                })
                .collect();
            for _ in k..support_size {
                coords.push(dirichlet(&mut rng, &support_gamma, k));
            }
            let raw_w: Vec<f64> = (0..support_size).map(|_| 0.5 + rng.random::<f64>()).collect();
            let total: f64 = raw_w.iter().sum();

            let basis = Basis::new(schema.clone(), vectors)?;
            let beta_ok = coords.iter().all(|g| {
                combine(&basis, g)
                    .iter()
                    .all(|&b| (BETA_MIN..=BETA_MAX).contains(&b))
            });
            if !beta_ok || !full_column_rank(&basis.to_matrix()) {
                continue;
            }
            let support = coords
                .into_iter()
                .zip(raw_w)
                .map(|(g, w)| SupportPoint { g, w: w / total })
                .collect();
            return SyntheticModel::new(basis, support);
        }
        Err(LlsError::Generation(format!(
            "no admissible model after {} draws; try a smaller K",
            MAX_TRIES
        )))
    }

    pub fn schema(&self) -> &Schema {
        self.basis.schema()
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn k(&self) -> usize {
        self.basis.k()
    }

    pub fn support(&self) -> &[SupportPoint] {
        &self.support
    }

    /// Outcome probabilities `β^{(s)}` of each atom.
    pub fn betas(&self) -> &[Vec<f64>] {
        &self.beta
    }

    /// `Π_{j: ℓ_j ≠ 0} β^{(s)}_{j ℓ_j}` for atom `s`.
    fn pattern_product(&self, s: usize, pattern: &ResponsePattern) -> f64 {
        let schema = self.schema();
        pattern
            .support()
            .map(|(j, l)| self.beta[s][schema.flatten(j, l as usize).expect("valid pattern")])
            .product()
    }

    /// `M_ℓ = Σ_s w_s Π_{j: ℓ_j ≠ 0} β^{(s)}_{j ℓ_j}`.
    pub fn exact_moment(&self, pattern: &ResponsePattern) -> f64 {
        self.support
            .iter()
            .enumerate()
            .map(|(s, p)| p.w * self.pattern_product(s, pattern))
            .sum()
    }

    /// `h^v_ℓ = M_ℓ · E(G^v | X = ℓ)`.
    pub fn exact_h(&self, v: &MomentIndex, pattern: &ResponsePattern) -> f64 {
        self.support
            .iter()
            .enumerate()
            .map(|(s, p)| p.w * v.monomial(&p.g) * self.pattern_product(s, pattern))
            .sum()
    }

    /// `E(G^v | X = ℓ)` by finite summation.
    pub fn exact_conditional_moment(&self, v: &MomentIndex, pattern: &ResponsePattern) -> Result<f64> {
        let m = self.exact_moment(pattern);
        if m <= 0.0 {
            return Err(LlsError::Precondition(format!(
                "conditional moment undefined: pattern {} has zero probability",
                pattern
            )));
        }
        Ok(self.exact_h(v, pattern) / m)
    }

    /// Exact moment matrix together with its true completion.
    pub fn exact_moment_matrix(&self, max_col_order: usize) -> Result<ExactMomentMatrix> {
        let matrix = MomentMatrix::from_source(self, max_col_order)?;
        let rows = self.schema().total_cells();
        let completion = DMatrix::from_fn(rows, matrix.num_cols(), |r, c| {
            let pattern = &matrix.columns()[c];
            self.support
                .iter()
                .enumerate()
                .map(|(s, p)| p.w * self.pattern_product(s, pattern) * self.beta[s][r])
                .sum()
        });
        Ok(ExactMomentMatrix { matrix, completion })
    }

    /// Draws `n` rows: an atom by weight, then each variable independently from it.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(LlsError::Precondition("sample size must be at least 1".into()));
        }
        let schema = self.schema();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight_cdf = cumulative(self.support.iter().map(|p| p.w));
        let level_cdfs: Vec<Vec<Vec<f64>>> = self
            .beta
            .iter()
            .map(|b| {
                (0..schema.num_vars())
                    .map(|j| cumulative(b[schema.block(j)].iter().copied()))
                    .collect()
            })
            .collect();
        let mut cells = Vec::with_capacity(n * schema.num_vars());
        for _ in 0..n {
            let s = pick(&weight_cdf, rng.random::<f64>());
            for cdf in &level_cdfs[s] {
                cells.push(pick(cdf, rng.random::<f64>()) as u32 + 1);
            }
        }
        Ok(Dataset::from_cells(schema.clone(), cells))
    }

    /// The same mixing measure written in another basis of the same plane.
    ///
    /// Coordinates are found by least squares; the error is the largest residual
    /// `|Λ' g' - β|`, which is zero (up to roundoff) when the spans agree.
    pub fn reexpress(&self, basis: &Basis) -> Result<(SyntheticModel, f64)> {
        if basis.schema() != self.schema() {
            return Err(LlsError::Precondition("basis schema does not match model".into()));
        }
        let a = basis.to_matrix();
        let svd = a.clone().svd(true, true);
        let mut worst: f64 = 0.0;
        let mut support = Vec::with_capacity(self.support.len());
        for (s, p) in self.support.iter().enumerate() {
            let b = nalgebra::DVector::from_vec(self.beta[s].clone());
            let g = svd
                .solve(&b, 1e-14)
                .map_err(|e| LlsError::Numerical(e.to_string()))?;
            worst = worst.max((&a * &g - &b).amax());
            support.push(SupportPoint {
                g: g.iter().copied().collect(),
                w: p.w,
            });
        }
        let model = SyntheticModel {
            basis: basis.clone(),
            beta: self.beta.clone(),
            support,
        };
        Ok((model, worst))
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            levels: self.schema().levels().to_vec(),
            k: self.k(),
            lambda: self.basis.vectors().to_vec(),
            support: self.support.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(json_err(path))?;
        if file.k != file.lambda.len() {
            return Err(LlsError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("k = {} but {} vectors given", file.k, file.lambda.len()),
            });
        }
        let schema = Schema::new(file.levels)?;
        SyntheticModel::new(Basis::new(schema, file.lambda)?, file.support)
    }
}

impl MomentSource for SyntheticModel {
    fn schema(&self) -> &Schema {
        self.basis.schema()
    }

    fn moment(&self, pattern: &ResponsePattern) -> f64 {
        self.exact_moment(pattern)
    }

    fn sample_size(&self) -> Option<usize> {
        None
    }
}

/// Exact moment matrix plus the true values of its unobservable cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMomentMatrix {
    pub matrix: MomentMatrix,
    /// `|L| × n_cols`; every cell `Σ_s w_s Π_ℓ β^{(s)} · β^{(s)}_{jl}`.
    pub completion: DMatrix<f64>,
}

fn combine(basis: &Basis, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis.schema().total_cells()];
    for (k, &gk) in g.iter().enumerate() {
        for (o, &l) in out.iter_mut().zip(&basis.vectors()[k]) {
            *o += gk * l;
        }
    }
    out
}

fn dirichlet(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, len: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn full_column_rank(a: &DMatrix<f64>) -> bool {
    let sv = crate::plane::sorted_singular_values(a);
    sv.last().copied().unwrap_or(0.0) > 1e-6 * sv[0]
}

fn cumulative(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn pick(cdf: &[f64], u: f64) -> usize {
    let total = cdf[cdf.len() - 1];
    let target = u * total;
    cdf.iter().position(|&c| target < c).unwrap_or(cdf.len() - 1)
}

/// Principal angles between the spans of two bases, ascending, in `[0, π/2]`.
///
/// Angles come from the singular values of `Q_Aᵀ Q_B` (cosines) for large angles and
/// of `(I - Q_A Q_Aᵀ) Q_B` (sines) for small ones. When the dimensions differ, the
/// `min(K_A, K_B)` angles of the smaller span are returned.
pub fn principal_angles(a: &Basis, b: &Basis) -> Result<Vec<f64>> {
    if a.schema() != b.schema() {
        return Err(LlsError::Precondition("bases have different schemas".into()));
    }
    let (big, small) = if a.k() >= b.k() { (a, b) } else { (b, a) };
    let qa = orthonormal_columns(&big.to_matrix())?;
    let qb = orthonormal_columns(&small.to_matrix())?;
    let cross = qa.transpose() * &qb;
    let mut cosines: Vec<f64> = crate::plane::sorted_singular_values(&cross);
    let residual = &qb - &qa * &cross;
    let mut sines: Vec<f64> = crate::plane::sorted_singular_values(&residual);
    sines.reverse();
    cosines.truncate(qb.ncols());
    sines.truncate(qb.ncols());
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            if c * c < 0.5 {
                c.clamp(-1.0, 1.0).acos()
            } else {
                s.clamp(0.0, 1.0).asin()
            }
        })
        .collect())
}

fn orthonormal_columns(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.column_iter().any(|c| c.norm() == 0.0) {
        return Err(LlsError::Precondition("basis contains a zero vector".into()));
    }
    Ok(a.clone().qr().q())
}
