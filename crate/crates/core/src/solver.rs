//! Linear system relating frequencies, the basis and the unknowns
//! `h^v_ℓ = M_ℓ · E(G^v | X = ℓ)`, and its least-squares solution.
//!
//! The pattern family holds every sub-pattern of the targets (depth 0) plus their
//! refinements up to depth `R`. A pattern at depth `d` and order `o` carries unknowns
//! of order at most `min(R - d, J - o)`, lowered further until every unknown is pinned
//! down by relations to its refinements (see [`PatternFamily`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LlsError, Result};
use crate::freq::{FrequencyTable, MomentSource};
use crate::plane::{sorted_singular_values, Basis};
use crate::schema::{
    enumerate_moment_indices, enumerate_moment_indices_upto, multinomial_coeff, MomentIndex,
    ResponsePattern, Schema,
};

pub const DEFAULT_MOMENT_ORDER: usize = 2;
pub const DEFAULT_ANCHOR_WEIGHT: f64 = 10.0;
/// Assembly refuses systems with more unknowns than this.
pub const MAX_UNKNOWNS: usize = 4_000_000;
const FREE_RANK_TOL: f64 = 1e-9;
const ILL_CONDITIONED: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Largest moment order `R`.
    pub moment_order: usize,
    /// Weight on anchor and normalization rows.
    pub anchor_weight: f64,
    pub tolerance: f64,
    pub max_iterations: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            moment_order: DEFAULT_MOMENT_ORDER,
            anchor_weight: DEFAULT_ANCHOR_WEIGHT,
            tolerance: 1e-14,
            max_iterations: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.moment_order == 0 {
            return Err(LlsError::Precondition("moment order R must be at least 1".into()));
        }
        if !self.anchor_weight.is_finite() || self.anchor_weight <= 0.0 {
            return Err(LlsError::Precondition("anchor weight must be positive".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(LlsError::Precondition("solver tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquationKind {
    Relation,
    Anchor,
    Normalization,
}

/// Patterns of the system with their depth and the largest moment order they carry.
///
/// `cap(ℓ) = min(R - depth, J - order, 1 + min cap(ℓ + l·1_j))` over all refinements,
/// and `0` when the basis restricted to the free variables of `ℓ` has rank below `K`.
/// With these caps every unknown appears in a relation block of full column rank, so
/// on consistent input the solution is unique.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternFamily {
    patterns: Vec<ResponsePattern>,
    depth: Vec<usize>,
    cap: Vec<usize>,
    index: HashMap<ResponsePattern, usize>,
}

impl PatternFamily {
    pub fn patterns(&self) -> &[ResponsePattern] {
        &self.patterns
    }

    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn cap(&self, i: usize) -> usize {
        self.cap[i]
    }

    pub fn index_of(&self, p: &ResponsePattern) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

/// Sub-patterns of the targets and their refinements up to depth `r`, in canonical
/// order. These are the patterns whose frequencies the system needs.
pub fn system_patterns(
    schema: &Schema,
    targets: &[ResponsePattern],
    r: usize,
) -> Result<Vec<ResponsePattern>> {
    Ok(pattern_depths(schema, targets, r)?.into_keys().collect())
}

fn pattern_depths(
    schema: &Schema,
    targets: &[ResponsePattern],
    r: usize,
) -> Result<BTreeMap<ResponsePattern, usize>> {
    let mut depths = BTreeMap::new();
    depths.insert(schema.empty_pattern(), 0);
    for t in targets {
        schema.check_pattern(t)?;
        for s in t.subpatterns() {
            depths.insert(s, 0);
        }
    }
    let mut frontier: Vec<ResponsePattern> = depths.keys().cloned().collect();
    for d in 0..r {
        let mut next = Vec::new();
        for p in &frontier {
            for j in (0..schema.num_vars()).filter(|&j| p.is_free(j)) {
                for l in 1..=schema.level_count(j) {
                    let q = p.with_entry(j, l as u32);
                    if !depths.contains_key(&q) {
                        depths.insert(q.clone(), d + 1);
                        next.push(q);
                    }
                }
            }
            if depths.len() > MAX_UNKNOWNS {
                return Err(LlsError::Precondition(format!(
                    "pattern family exceeds {} patterns; use fewer targets or a smaller R",
                    MAX_UNKNOWNS
                )));
            }
        }
        frontier = next;
    }
    Ok(depths)
}

fn build_family(basis: &Basis, targets: &[ResponsePattern], r: usize) -> Result<PatternFamily> {
    let schema = basis.schema();
    let j_count = schema.num_vars();
    let depths = pattern_depths(schema, targets, r)?;
    let (patterns, depth): (Vec<_>, Vec<_>) = depths.into_iter().unzip();
    let index: HashMap<ResponsePattern, usize> =
        patterns.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();

    let mut rank_cache: HashMap<Vec<bool>, bool> = HashMap::new();
    let mut cap = vec![0usize; patterns.len()];
    // refinements have higher order, so they come later in canonical order
    for i in (0..patterns.len()).rev() {
        let p = &patterns[i];
        let free: Vec<bool> = (0..j_count).map(|j| p.is_free(j)).collect();
        let base = (r - depth[i]).min(j_count - p.order());
        if base == 0 {
            continue;
        }
        let full_rank = *rank_cache
            .entry(free.clone())
            .or_insert_with(|| free_rows_full_rank(basis, &free));
        if !full_rank {
            continue;
        }
        let mut child_min = usize::MAX;
        for j in (0..j_count).filter(|&j| free[j]) {
            for l in 1..=schema.level_count(j) {
                let child = index[&p.with_entry(j, l as u32)];
                child_min = child_min.min(cap[child]);
            }
        }
        cap[i] = base.min(child_min.saturating_add(1));
    }
    Ok(PatternFamily {
        patterns,
        depth,
        cap,
        index,
    })
}

fn free_rows_full_rank(basis: &Basis, free: &[bool]) -> bool {
    let schema = basis.schema();
    let rows: Vec<usize> = (0..schema.num_vars())
        .filter(|&j| free[j])
        .flat_map(|j| schema.block(j))
        .collect();
    let k = basis.k();
    if rows.len() < k {
        return false;
    }
    let m = DMatrix::from_fn(rows.len(), k, |r, c| basis.coeff(c, rows[r]));
    let sv = sorted_singular_values(&m);
    sv[0] > 0.0 && sv[k - 1] > FREE_RANK_TOL * sv[0]
}

/// Sparse weighted system in compressed row form.
#[derive(Debug, Clone, PartialEq)]
pub struct MainSystem {
    schema: Schema,
    k: usize,
    family: PatternFamily,
    moment_indices: Vec<MomentIndex>,
    /// First unknown of each pattern; its unknowns follow in `moment_indices` order.
    offsets: Vec<usize>,
    num_unknowns: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    rhs: Vec<f64>,
    kinds: Vec<EquationKind>,
    frequencies: Vec<f64>,
    targets: Vec<ResponsePattern>,
    anchor_weight: f64,
    tolerance: f64,
    max_iterations: Option<usize>,
}

impl MainSystem {
    pub fn family(&self) -> &PatternFamily {
        &self.family
    }

    pub fn num_unknowns(&self) -> usize {
        self.num_unknowns
    }

    pub fn num_equations(&self) -> usize {
        self.rhs.len()
    }

    pub fn nonzeros(&self) -> usize {
        self.values.len()
    }

    pub fn count(&self, kind: EquationKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    pub fn kinds(&self) -> &[EquationKind] {
        &self.kinds
    }

    /// `(unknown, coefficient)` pairs of equation `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Pattern and moment index of unknown `u`.
    pub fn unknown(&self, u: usize) -> (&ResponsePattern, &MomentIndex) {
        let p = self.offsets.partition_point(|&o| o <= u) - 1;
        (&self.family.patterns[p], &self.moment_indices[u - self.offsets[p]])
    }

    /// `b - A x` for the weighted system.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.rhs.clone();
        self.mul_sub(x, &mut r);
        r
    }

    fn mul_sub(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o -= self.row(i).map(|(c, v)| v * x[c]).sum::<f64>();
        }
    }

    fn push_row(&mut self, entries: &[(usize, f64)], rhs: f64, kind: EquationKind) {
        for &(c, v) in entries {
            self.col_idx.push(c);
            self.values.push(v);
        }
        self.row_ptr.push(self.col_idx.len());
        self.rhs.push(rhs);
        self.kinds.push(kind);
    }
}

/// Builds the weighted system for `targets`.
///
/// `freq` must hold every pattern returned by [`system_patterns`]; targets with zero
/// frequency are rejected since their conditional moments are undefined.
pub fn assemble_system(
    basis: &Basis,
    freq: &FrequencyTable,
    targets: &[ResponsePattern],
    config: &SolverConfig,
) -> Result<MainSystem> {
    config.validate()?;
    let schema = basis.schema();
    if freq.schema() != schema {
        return Err(LlsError::Precondition(
            "frequency table and basis use different schemas".into(),
        ));
    }
    for t in targets {
        schema.check_pattern(t)?;
        match freq.get(t) {
            Some(f) if f > 0.0 => {}
            Some(_) => {
                return Err(LlsError::Data(format!(
                    "target {} has zero frequency; its conditional moments are undefined",
                    t
                )))
            }
            None => {
                return Err(LlsError::Precondition(format!(
                    "frequency table lacks target {}",
                    t
                )))
            }
        }
    }
    let r = config.moment_order;
    let k = basis.k();
    let family = build_family(basis, targets, r)?;
    let moment_indices = enumerate_moment_indices_upto(k, r);
    let upto: Vec<usize> = (0..=r)
        .scan(0, |acc, o| {
            *acc += enumerate_moment_indices(k, o).len();
            Some(*acc)
        })
        .collect();
    let v_pos: HashMap<MomentIndex, usize> =
        moment_indices.iter().cloned().enumerate().map(|(i, v)| (v, i)).collect();

    let mut offsets = Vec::with_capacity(family.len());
    let mut total = 0usize;
    for i in 0..family.len() {
        offsets.push(total);
        total += upto[family.cap[i]];
    }
    if total > MAX_UNKNOWNS {
        return Err(LlsError::Precondition(format!(
            "system has {} unknowns, limit is {}",
            total, MAX_UNKNOWNS
        )));
    }
    let frequencies = family
        .patterns
        .iter()
        .map(|p| {
            freq.get(p).ok_or_else(|| {
                LlsError::Precondition(format!("frequency table lacks pattern {}", p))
            })
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut sys = MainSystem {
        schema: schema.clone(),
        k,
        family,
        moment_indices,
        offsets,
        num_unknowns: total,
        row_ptr: vec![0],
        col_idx: Vec::new(),
        values: Vec::new(),
        rhs: Vec::new(),
        kinds: Vec::new(),
        frequencies,
        targets: targets.to_vec(),
        anchor_weight: config.anchor_weight,
        tolerance: config.tolerance,
        max_iterations: config.max_iterations,
    };

    // Σ_k λ^k_{jl} h^{v+1_k}_ℓ - h^v_{ℓ+l·1_j} = 0
    let mut entries = Vec::with_capacity(k + 1);
    for i in 0..sys.family.len() {
        let cap = sys.family.cap[i];
        if cap == 0 {
            continue;
        }
        let p = sys.family.patterns[i].clone();
        for j in (0..schema.num_vars()).filter(|&j| p.is_free(j)) {
            for l in 1..=schema.level_count(j) {
                let row = schema.flatten(j, l)?;
                let child = sys.family.index[&p.with_entry(j, l as u32)];
                for vi in 0..upto[cap - 1] {
                    entries.clear();
                    let v = &sys.moment_indices[vi];
                    for kk in 0..k {
                        let up = v_pos[&v.bumped(kk)];
                        entries.push((sys.offsets[i] + up, basis.coeff(kk, row)));
                    }
                    entries.push((sys.offsets[child] + vi, -1.0));
                    sys.push_row(&entries, 0.0, EquationKind::Relation);
                }
            }
        }
    }

    let w = config.anchor_weight;
    for i in 0..sys.family.len() {
        let f = sys.frequencies[i];
        sys.push_row(&[(sys.offsets[i], w)], w * f, EquationKind::Anchor);
    }

    let root = sys.family.index[&schema.empty_pattern()];
    for order in 0..=sys.family.cap[root] {
        entries.clear();
        for v in enumerate_moment_indices(k, order) {
            let c = multinomial_coeff(&v)? as f64;
            entries.push((sys.offsets[root] + v_pos[&v], w * c));
        }
        sys.push_row(&entries, w, EquationKind::Normalization);
    }
    Ok(sys)
}

/// One solved unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub pattern: ResponsePattern,
    pub index: MomentIndex,
    pub h: f64,
    /// `h / f_ℓ`, present when `f_ℓ > 0`.
    pub conditional: Option<f64>,
}

/// Equation counts and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SolveReport {
    pub k: usize,
    pub moment_order: usize,
    pub anchor_weight: f64,
    pub patterns: usize,
    pub unknowns: usize,
    pub relations: usize,
    pub anchors: usize,
    pub normalizations: usize,
    pub nonzeros: usize,
    pub residual_norm: f64,
    /// Largest relation residual in terms of conditional moments, when computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relation_residual: Option<f64>,
    pub iterations: usize,
    pub stop_reason: String,
    pub condition_estimate: f64,
    pub flags: Vec<String>,
    pub targets: Vec<String>,
    pub skipped_targets: Vec<String>,
}

/// Solved `h^v_ℓ` and conditional moments `E(G^v | X = ℓ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMomentTable {
    schema: Schema,
    k: usize,
    rows: Vec<MomentRow>,
    lookup: HashMap<(ResponsePattern, MomentIndex), usize>,
    pub report: Option<SolveReport>,
}

impl ConditionalMomentTable {
    pub fn new(schema: Schema, k: usize, rows: Vec<MomentRow>) -> Self {
        let lookup = rows
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.pattern.clone(), r.index.clone()), i))
            .collect();
        ConditionalMomentTable {
            schema,
            k,
            rows,
            lookup,
            report: None,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[MomentRow] {
        &self.rows
    }

    pub fn get(&self, pattern: &ResponsePattern, v: &MomentIndex) -> Option<&MomentRow> {
        self.lookup
            .get(&(pattern.clone(), v.clone()))
            .map(|&i| &self.rows[i])
    }

    pub fn conditional(&self, pattern: &ResponsePattern, v: &MomentIndex) -> Option<f64> {
        self.get(pattern, v).and_then(|r| r.conditional)
    }

    pub fn residual_norm(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.residual_norm)
    }

    /// `pattern,momentIndex,h,conditionalMoment`, one line per row with `f_ℓ > 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pattern,momentIndex,h,conditionalMoment\n");
        for r in &self.rows {
            if let Some(c) = r.conditional {
                writeln!(out, "\"{}\",\"{}\",{:e},{:e}", r.pattern, r.index, r.h, c)
                    .expect("write to string");
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn load_csv(path: &Path, schema: &Schema) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let parse_err = |line: usize, msg: String| LlsError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "pattern,momentIndex,h,conditionalMoment" => {}
            _ => return Err(parse_err(1, "expected header pattern,momentIndex,h,conditionalMoment".into())),
        }
        let mut rows = Vec::new();
        let mut k = None;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields = split_quoted(line).map_err(|m| parse_err(i + 1, m))?;
            if fields.len() != 4 {
                return Err(parse_err(i + 1, format!("expected 4 fields, found {}", fields.len())));
            }
            let pattern = ResponsePattern::parse(schema, &fields[0])
                .map_err(|e| parse_err(i + 1, e.to_string()))?;
            let index: MomentIndex = fields[1].parse().map_err(|e: LlsError| parse_err(i + 1, e.to_string()))?;
            if *k.get_or_insert(index.dim()) != index.dim() {
                return Err(parse_err(i + 1, "moment indices of different dimension".into()));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(i + 1, format!("bad number {:?}: {}", s, e)))
            };
            rows.push(MomentRow {
                pattern,
                index,
                h: num(&fields[2])?,
                conditional: Some(num(&fields[3])?),
            });
        }
        Ok(ConditionalMomentTable::new(schema.clone(), k.unwrap_or(0), rows))
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes")
    }
}

fn split_quoted(line: &str) -> std::result::Result<Vec<String>, String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    if quoted {
        return Err("unterminated quote".into());
    }
    fields.push(cur);
    Ok(fields)
}

/// Least-squares solution by LSQR on the column-scaled system, started from zero, so a
/// rank-deficient system yields the minimum-norm solution of the scaled problem.
pub fn solve_system(sys: &MainSystem) -> Result<ConditionalMomentTable> {
    if sys.num_equations() == 0 || sys.num_unknowns == 0 {
        return Err(LlsError::Precondition("empty system".into()));
    }
    let n = sys.num_unknowns;
    let mut scale = vec![0.0f64; n];
    for (&c, &v) in sys.col_idx.iter().zip(&sys.values) {
        scale[c] += v * v;
    }
    for s in &mut scale {
        *s = if *s > 0.0 { 1.0 / s.sqrt() } else { 1.0 };
    }
    let max_iter = sys.max_iterations.unwrap_or(20 * n + 200);
    let out = lsqr(sys, &scale, sys.tolerance, max_iter);
    let x: Vec<f64> = out.y.iter().zip(&scale).map(|(y, s)| y * s).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LlsError::Numerical("solver produced non-finite values".into()));
    }
    let residual = sys.residual(&x);
    let residual_norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();

    let mut flags = Vec::new();
    if out.condition > ILL_CONDITIONED {
        log::warn!(
            "system looks rank deficient (condition estimate {:.3e}); returning the minimum-norm solution",
            out.condition
        );
        flags.push("rank-deficient".to_string());
    }
    if out.stop == StopReason::IterationLimit {
        log::warn!("solver stopped at the iteration limit ({})", max_iter);
        flags.push("iteration-limit".to_string());
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..sys.family.len() {
        let f = sys.frequencies[i];
        let count = if i + 1 < sys.offsets.len() {
            sys.offsets[i + 1] - sys.offsets[i]
        } else {
            n - sys.offsets[i]
        };
        for vi in 0..count {
            let h = x[sys.offsets[i] + vi];
            rows.push(MomentRow {
                pattern: sys.family.patterns[i].clone(),
                index: sys.moment_indices[vi].clone(),
                h,
                conditional: (f > 0.0).then(|| h / f),
            });
        }
    }
    let mut table = ConditionalMomentTable::new(sys.schema.clone(), sys.k, rows);
    table.report = Some(SolveReport {
        k: sys.k,
        moment_order: sys.moment_indices.last().map_or(0, |v| v.order()),
        anchor_weight: sys.anchor_weight,
        patterns: sys.family.len(),
        unknowns: n,
        relations: sys.count(EquationKind::Relation),
        anchors: sys.count(EquationKind::Anchor),
        normalizations: sys.count(EquationKind::Normalization),
        nonzeros: sys.nonzeros(),
        residual_norm,
        relation_residual: None,
        iterations: out.iterations,
        stop_reason: out.stop.to_string(),
        condition_estimate: out.condition,
        flags,
        targets: sys.targets.iter().map(|t| t.to_string()).collect(),
        skipped_targets: Vec::new(),
    });
    Ok(table)
}

/// Tabulates the needed frequencies from `source`, then assembles and solves.
pub fn conditional_moments<S: MomentSource + ?Sized>(
    basis: &Basis,
    source: &S,
    targets: &[ResponsePattern],
    config: &SolverConfig,
) -> Result<(ConditionalMomentTable, FrequencyTable)> {
    config.validate()?;
    let patterns = system_patterns(basis.schema(), targets, config.moment_order)?;
    let freq = FrequencyTable::tabulate(source, &patterns);
    let sys = assemble_system(basis, &freq, targets, config)?;
    Ok((solve_system(&sys)?, freq))
}

/// Largest `|Σ_k λ^k_{jl} f_ℓ E(G^{v+1_k}|ℓ) - f_{ℓ+l·1_j} E(G^v|ℓ+l·1_j)|` over every
/// tuple the table and the frequencies cover; 0 when none is covered.
pub fn moment_residual(basis: &Basis, freq: &FrequencyTable, table: &ConditionalMomentTable) -> f64 {
    let schema = basis.schema();
    let k = basis.k();
    let mut worst: f64 = 0.0;
    let mut by_pattern: BTreeMap<&ResponsePattern, Vec<&MomentIndex>> = BTreeMap::new();
    for r in table.rows() {
        by_pattern.entry(&r.pattern).or_default().push(&r.index);
    }
    for (p, indices) in by_pattern {
        let f = match freq.get(p) {
            Some(f) if f > 0.0 => f,
            _ => continue,
        };
        for v in indices {
            let ups: Option<Vec<f64>> = (0..k)
                .map(|kk| table.conditional(p, &v.bumped(kk)))
                .collect();
            let Some(ups) = ups else { continue };
            for j in (0..schema.num_vars()).filter(|&j| p.is_free(j)) {
                for l in 1..=schema.level_count(j) {
                    let child = p.with_entry(j, l as u32);
                    let rhs = match freq.get(&child) {
                        Some(fc) if fc > 0.0 => match table.conditional(&child, v) {
                            Some(c) => fc * c,
                            None => continue,
                        },
                        Some(_) => 0.0,
                        None => continue,
                    };
                    let row = schema.flatten(j, l).expect("valid cell");
                    let lhs: f64 = (0..k).map(|kk| basis.coeff(kk, row) * f * ups[kk]).sum();
                    worst = worst.max((lhs - rhs).abs());
                }
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StopReason {
    ZeroRhs,
    Consistent,
    LeastSquares,
    IterationLimit,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::ZeroRhs => "zero right-hand side",
            StopReason::Consistent => "residual below tolerance",
            StopReason::LeastSquares => "normal-equation residual below tolerance",
            StopReason::IterationLimit => "iteration limit",
        })
    }
}

struct LsqrOutput {
    y: Vec<f64>,
    iterations: usize,
    stop: StopReason,
    condition: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scale_in_place(v: &mut [f64], s: f64) {
    v.iter_mut().for_each(|x| *x *= s);
}

/// Paige-Saunders LSQR on `A D`, where `D = diag(scale)`.
fn lsqr(sys: &MainSystem, scale: &[f64], tol: f64, max_iter: usize) -> LsqrOutput {
    let m = sys.num_equations();
    let n = sys.num_unknowns;
    // u <- A D v - alpha u
    let a_mul = |v: &[f64], alpha: f64, u: &mut [f64]| {
        for (i, ui) in u.iter_mut().enumerate() {
            let s: f64 = sys.row(i).map(|(c, a)| a * scale[c] * v[c]).sum();
            *ui = s - alpha * *ui;
        }
    };
    // v <- D Aᵀ u - beta v
    let at_mul = |u: &[f64], beta: f64, v: &mut [f64]| {
        scale_in_place(v, -beta);
        for (i, &ui) in u.iter().enumerate() {
            for (c, a) in sys.row(i) {
                v[c] += a * scale[c] * ui;
            }
        }
    };

    let mut y = vec![0.0; n];
    let mut u = sys.rhs.clone();
    let bnorm = norm(&u);
    if bnorm == 0.0 {
        return LsqrOutput {
            y,
            iterations: 0,
            stop: StopReason::ZeroRhs,
            condition: 0.0,
        };
    }
    let mut beta = bnorm;
    scale_in_place(&mut u, 1.0 / beta);
    let mut v = vec![0.0; n];
    at_mul(&u, 0.0, &mut v);
    let mut alpha = norm(&v);
    if alpha > 0.0 {
        scale_in_place(&mut v, 1.0 / alpha);
    }
    let mut w = v.clone();
    let mut phibar = beta;
    let mut rhobar = alpha;
    let mut anorm2: f64 = 0.0;
    let mut ddnorm = 0.0;
    let mut stop = StopReason::IterationLimit;
    let mut iterations = 0;
    let _ = m;

    if alpha * beta == 0.0 {
        return LsqrOutput {
            y,
            iterations: 0,
            stop: StopReason::LeastSquares,
            condition: 0.0,
        };
    }

    while iterations < max_iter {
        iterations += 1;
        a_mul(&v, alpha, &mut u);
        beta = norm(&u);
        if beta > 0.0 {
            scale_in_place(&mut u, 1.0 / beta);
        }
        anorm2 += alpha * alpha + beta * beta;
        at_mul(&u, beta, &mut v);
        alpha = norm(&v);
        if alpha > 0.0 {
            scale_in_place(&mut v, 1.0 / alpha);
        }

        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        let mut wnorm2 = 0.0;
        for i in 0..n {
            y[i] += t1 * w[i];
            let wi = w[i] / rho;
            wnorm2 += wi * wi;
            w[i] = v[i] + t2 * w[i];
        }
        ddnorm += wnorm2;

        let anorm = anorm2.sqrt();
        let rnorm = phibar;
        let arnorm = phibar * alpha * c.abs();
        let ynorm = norm(&y);
        if rnorm <= tol * bnorm + tol * anorm * ynorm {
            stop = StopReason::Consistent;
            break;
        }
        if arnorm <= tol * anorm * rnorm {
            stop = StopReason::LeastSquares;
            break;
        }
        if alpha == 0.0 {
            stop = StopReason::LeastSquares;
            break;
        }
    }
    LsqrOutput {
        y,
        iterations,
        stop,
        condition: anorm2.sqrt() * ddnorm.sqrt(),
    }
}
