//! Measurement design and the combinatorial indexing shared by every other module.
//!
//! Variables are addressed 0-based (`j in 0..J`). Levels are 1-based because a
//! zero entry in a [`ResponsePattern`] means "marginalized out".

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, LlsError, Result};

/// Number of variables `J` and the outcome count `L_j` of each.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct Schema {
    levels: Vec<usize>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    levels: Vec<usize>,
}

impl TryFrom<SchemaFile> for Schema {
    type Error = LlsError;

    fn try_from(file: SchemaFile) -> Result<Self> {
        Schema::new(file.levels)
    }
}

impl From<Schema> for SchemaFile {
    fn from(schema: Schema) -> Self {
        SchemaFile {
            levels: schema.levels,
        }
    }
}

impl Schema {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(LlsError::Schema(format!(
                "need at least 2 variables, got {}",
                levels.len()
            )));
        }
        if let Some((j, &l)) = levels.iter().enumerate().find(|(_, &l)| l < 2) {
            return Err(LlsError::Schema(format!(
                "variable {} has {} level(s); every variable needs at least 2",
                j + 1,
                l
            )));
        }
        if levels.iter().any(|&l| l > u32::MAX as usize) {
            return Err(LlsError::Schema("level count exceeds u32 range".into()));
        }
        let mut offsets = Vec::with_capacity(levels.len());
        let mut acc = 0;
        for &l in &levels {
            offsets.push(acc);
            acc += l;
        }
        Ok(Schema { levels, offsets })
    }

    /// Uniform schema with `j` variables of `l` levels each.
    pub fn uniform(j: usize, l: usize) -> Result<Self> {
        Schema::new(vec![l; j])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }

    pub fn num_vars(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn level_count(&self, j: usize) -> usize {
        self.levels[j]
    }

    /// `|L| = L_1 + ... + L_J`.
    pub fn total_cells(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0) + self.levels.last().copied().unwrap_or(0)
    }

    /// Dimension of the block-sum slice after removing one coordinate per variable.
    pub fn reduced_dim(&self) -> usize {
        self.total_cells() - self.num_vars()
    }

    /// Rows `offset(j) .. offset(j) + L_j` belong to variable `j`.
    pub fn block(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j] + self.levels[j]
    }

    /// Flat row of cell `(j, l)`; `j` is 0-based, `l` is 1-based.
    pub fn flatten(&self, j: usize, l: usize) -> Result<usize> {
        if j >= self.num_vars() {
            return Err(LlsError::Index(format!(
                "variable {} out of range 0..{}",
                j,
                self.num_vars()
            )));
        }
        if l == 0 || l > self.levels[j] {
            return Err(LlsError::Index(format!(
                "level {} out of range 1..={} for variable {}",
                l, self.levels[j], j
            )));
        }
        Ok(self.offsets[j] + l - 1)
    }

    pub fn unflatten(&self, row: usize) -> Result<CellIndex> {
        if row >= self.total_cells() {
            return Err(LlsError::Index(format!(
                "row {} out of range 0..{}",
                row,
                self.total_cells()
            )));
        }
        // offsets are sorted; find the last block starting at or before `row`
        let j = self.offsets.partition_point(|&o| o <= row) - 1;
        Ok(CellIndex {
            variable: j,
            level: row - self.offsets[j] + 1,
            flat_row: row,
        })
    }

    /// All cells in flat-row order.
    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.num_vars()).flat_map(move |j| {
            (1..=self.levels[j]).map(move |l| CellIndex {
                variable: j,
                level: l,
                flat_row: self.offsets[j] + l - 1,
            })
        })
    }

    /// Label `"j:l"` (both 1-based) used in exported matrices.
    pub fn row_label(&self, row: usize) -> String {
        let cell = self.unflatten(row).expect("row in range");
        format!("{}:{}", cell.variable + 1, cell.level)
    }

    pub fn empty_pattern(&self) -> ResponsePattern {
        ResponsePattern {
            entries: vec![0; self.num_vars()],
        }
    }

    pub fn check_pattern(&self, p: &ResponsePattern) -> Result<()> {
        if p.entries.len() != self.num_vars() {
            return Err(LlsError::Index(format!(
                "pattern {} has {} entries, schema has {} variables",
                p,
                p.entries.len(),
                self.num_vars()
            )));
        }
        for (j, (&e, &l)) in p.entries.iter().zip(&self.levels).enumerate() {
            if e as usize > l {
                return Err(LlsError::Index(format!(
                    "pattern {}: entry {} for variable {} exceeds {} levels",
                    p,
                    e,
                    j + 1,
                    l
                )));
            }
        }
        Ok(())
    }
}

/// A `(variable, level)` cell and its flat row position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub variable: usize,
    pub level: usize,
    pub flat_row: usize,
}

/// Partially specified outcome vector; `0` marks a marginalized variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResponsePattern {
    entries: Vec<u32>,
}

impl ResponsePattern {
    pub fn new(schema: &Schema, entries: Vec<u32>) -> Result<Self> {
        let p = ResponsePattern { entries };
        schema.check_pattern(&p)?;
        Ok(p)
    }

    /// Builds a pattern without checking it against a schema.
    pub fn from_entries(entries: Vec<u32>) -> Self {
        ResponsePattern { entries }
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, j: usize) -> u32 {
        self.entries[j]
    }

    /// Number of specified (nonzero) entries.
    pub fn order(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count()
    }

    pub fn is_free(&self, j: usize) -> bool {
        self.entries[j] == 0
    }

    /// Specified `(variable, level)` pairs in variable order.
    pub fn support(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &e)| e != 0)
            .map(|(j, &e)| (j, e))
    }

    /// The refinement `ℓ + l·1_j`; variable `j` must currently be free.
    pub fn add_level(&self, schema: &Schema, j: usize, l: usize) -> Result<Self> {
        schema.flatten(j, l)?;
        if self.entries.len() != schema.num_vars() {
            return Err(LlsError::Index(format!(
                "pattern {} does not match schema",
                self
            )));
        }
        if self.entries[j] != 0 {
            return Err(LlsError::Precondition(format!(
                "variable {} is already fixed to {} in {}",
                j + 1,
                self.entries[j],
                self
            )));
        }
        Ok(self.with_entry(j, l as u32))
    }

    /// Copy with entry `j` replaced; no validation.
    pub fn with_entry(&self, j: usize, value: u32) -> Self {
        let mut entries = self.entries.clone();
        entries[j] = value;
        ResponsePattern { entries }
    }

    /// True when every specified entry of `self` agrees with `other`.
    pub fn is_subpattern_of(&self, other: &ResponsePattern) -> bool {
        self.entries
            .iter()
            .zip(&other.entries)
            .all(|(&a, &b)| a == 0 || a == b)
    }

    /// Every pattern obtained by zeroing a subset of the specified entries, including
    /// `self` and the empty pattern.
    pub fn subpatterns(&self) -> Vec<ResponsePattern> {
        let support: Vec<usize> = self.support().map(|(j, _)| j).collect();
        let mut out = Vec::with_capacity(1 << support.len());
        for mask in 0u64..(1u64 << support.len()) {
            let mut entries = vec![0; self.entries.len()];
            for (bit, &j) in support.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    entries[j] = self.entries[j];
                }
            }
            out.push(ResponsePattern { entries });
        }
        out
    }

    /// Parse the comma-separated form `"1,0,2"` and validate it.
    pub fn parse(schema: &Schema, s: &str) -> Result<Self> {
        let p: ResponsePattern = s.parse()?;
        schema.check_pattern(&p)?;
        Ok(p)
    }
}

impl FromStr for ResponsePattern {
    type Err = LlsError;

    fn from_str(s: &str) -> Result<Self> {
        let entries = s
            .trim()
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| LlsError::Data(format!("bad pattern entry {:?}: {}", t, e)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ResponsePattern { entries })
    }
}

impl fmt::Display for ResponsePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", e)?;
        }
        Ok(())
    }
}

/// Canonical order: by [`order`](ResponsePattern::order), then lexicographically by
/// the list of specified `(variable, level)` pairs. For three binary variables this
/// gives `000, 100, 200, 010, 020, 001, 002, 110, ...`.
impl Ord for ResponsePattern {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order()
            .cmp(&other.order())
            .then_with(|| self.support().cmp(other.support()))
            .then_with(|| self.entries.len().cmp(&other.entries.len()))
    }
}

impl PartialOrd for ResponsePattern {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All patterns with order `<= max_order`, in canonical order.
pub fn enumerate_patterns(schema: &Schema, max_order: usize) -> Vec<ResponsePattern> {
    let max_order = max_order.min(schema.num_vars());
    let mut out = Vec::new();
    let mut current = schema.empty_pattern();
    for order in 0..=max_order {
        extend_patterns(schema, order, 0, &mut current, &mut out);
    }
    out
}

fn extend_patterns(
    schema: &Schema,
    remaining: usize,
    first_var: usize,
    current: &mut ResponsePattern,
    out: &mut Vec<ResponsePattern>,
) {
    if remaining == 0 {
        out.push(current.clone());
        return;
    }
    let j_max = schema.num_vars() - remaining;
    for j in first_var..=j_max {
        for l in 1..=schema.level_count(j) {
            current.entries[j] = l as u32;
            extend_patterns(schema, remaining - 1, j + 1, current, out);
        }
        current.entries[j] = 0;
    }
}

/// Exponent vector `v = (v_1, ..., v_K)` of a mixed moment of the latent coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MomentIndex {
    powers: Vec<u32>,
}

impl MomentIndex {
    pub fn new(powers: Vec<u32>) -> Self {
        MomentIndex { powers }
    }

    pub fn zero(k: usize) -> Self {
        MomentIndex { powers: vec![0; k] }
    }

    /// The unit index `1_k` in dimension `dim`.
    pub fn unit(dim: usize, k: usize) -> Self {
        let mut powers = vec![0; dim];
        powers[k] = 1;
        MomentIndex { powers }
    }

    pub fn powers(&self) -> &[u32] {
        &self.powers
    }

    pub fn dim(&self) -> usize {
        self.powers.len()
    }

    pub fn order(&self) -> usize {
        self.powers.iter().map(|&p| p as usize).sum()
    }

    /// `v + 1_k`.
    pub fn bumped(&self, k: usize) -> Self {
        let mut powers = self.powers.clone();
        powers[k] += 1;
        MomentIndex { powers }
    }

    /// `Π_k g_k^{v_k}`.
    pub fn monomial(&self, g: &[f64]) -> f64 {
        self.powers
            .iter()
            .zip(g)
            .map(|(&p, &x)| x.powi(p as i32))
            .product()
    }
}

impl fmt::Display for MomentIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.powers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", e)?;
        }
        Ok(())
    }
}

impl FromStr for MomentIndex {
    type Err = LlsError;

    fn from_str(s: &str) -> Result<Self> {
        let powers = s
            .trim()
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| LlsError::Data(format!("bad moment index {:?}: {}", t, e)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MomentIndex { powers })
    }
}

/// All `v` of dimension `k` with `Σ v = order`; the first coordinate varies slowest
/// and descends, so `k = 2, order = 1` gives `[(1,0), (0,1)]`.
pub fn enumerate_moment_indices(k: usize, order: usize) -> Vec<MomentIndex> {
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    let mut powers = vec![0u32; k];
    fill_indices(&mut powers, 0, order, &mut out);
    out
}

fn fill_indices(powers: &mut [u32], pos: usize, remaining: usize, out: &mut Vec<MomentIndex>) {
    if pos == powers.len() - 1 {
        powers[pos] = remaining as u32;
        out.push(MomentIndex::new(powers.to_vec()));
        return;
    }
    for p in (0..=remaining).rev() {
        powers[pos] = p as u32;
        fill_indices(powers, pos + 1, remaining - p, out);
    }
    powers[pos] = 0;
}

/// All indices with order `<= max_order`, grouped by ascending order.
pub fn enumerate_moment_indices_upto(k: usize, max_order: usize) -> Vec<MomentIndex> {
    (0..=max_order)
        .flat_map(|o| enumerate_moment_indices(k, o))
        .collect()
}

/// Exact `(Σ v)! / Π v_k!`, built as a product of binomial coefficients.
pub fn multinomial_coeff(v: &MomentIndex) -> Result<u64> {
    let mut total: u64 = 0;
    let mut acc: u128 = 1;
    for &p in v.powers() {
        let p = p as u64;
        total = total
            .checked_add(p)
            .ok_or_else(|| LlsError::Overflow(format!("order of {} overflows", v)))?;
        // acc *= C(total, p)
        let mut binom: u128 = 1;
        for i in 0..p {
            binom = binom
                .checked_mul((total - i) as u128)
                .ok_or_else(|| LlsError::Overflow(format!("multinomial of {}", v)))?
                / (i as u128 + 1);
        }
        acc = acc
            .checked_mul(binom)
            .ok_or_else(|| LlsError::Overflow(format!("multinomial of {}", v)))?;
    }
    u64::try_from(acc).map_err(|_| LlsError::Overflow(format!("multinomial of {} exceeds u64", v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(levels: &[usize]) -> Schema {
        Schema::new(levels.to_vec()).unwrap()
    }

    fn p(e: &[u32]) -> ResponsePattern {
        ResponsePattern::from_entries(e.to_vec())
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(s(&[2, 2, 2]).flatten(0, 1).unwrap(), 0);
        assert_eq!(s(&[2, 2, 2]).flatten(2, 2).unwrap(), 5);
        assert_eq!(s(&[3, 4]).flatten(1, 1).unwrap(), 3);
        assert!(matches!(s(&[3, 4]).flatten(2, 1), Err(LlsError::Index(_))));
        assert!(matches!(s(&[3, 4]).flatten(0, 4), Err(LlsError::Index(_))));
        assert!(matches!(s(&[3, 4]).flatten(0, 0), Err(LlsError::Index(_))));
    }

    #[test]
    fn schema_validation() {
        assert!(Schema::new(vec![2]).is_err());
        assert!(Schema::new(vec![2, 1]).is_err());
        let sc = s(&[3, 4, 2]);
        assert_eq!(sc.total_cells(), 9);
        assert_eq!(sc.reduced_dim(), 6);
        let parsed: Schema = serde_json::from_str(r#"{"levels":[2,3]}"#).unwrap();
        assert_eq!(parsed, s(&[2, 3]));
        assert!(serde_json::from_str::<Schema>(r#"{"levels":[2,1]}"#).is_err());
    }

    #[test]
    fn add_level_examples() {
        let sc = s(&[2, 2, 2]);
        assert_eq!(p(&[0, 0, 0]).add_level(&sc, 1, 1).unwrap(), p(&[0, 1, 0]));
        assert_eq!(p(&[1, 0, 0]).add_level(&sc, 2, 2).unwrap(), p(&[1, 0, 2]));
        assert!(matches!(
            p(&[1, 0, 0]).add_level(&sc, 0, 2),
            Err(LlsError::Precondition(_))
        ));
    }

    #[test]
    fn pattern_counts() {
        let sc = s(&[2, 2, 2]);
        assert_eq!(enumerate_patterns(&sc, 0), vec![p(&[0, 0, 0])]);
        assert_eq!(enumerate_patterns(&sc, 1).len(), 7);
        assert_eq!(enumerate_patterns(&sc, 2).len(), 19);
    }

    #[test]
    fn canonical_order_matches_moment_matrix_layout() {
        let sc = s(&[2, 2, 2]);
        let got: Vec<String> = enumerate_patterns(&sc, 2)
            .iter()
            .take(8)
            .map(|x| x.to_string())
            .collect();
        assert_eq!(
            got,
            ["0,0,0", "1,0,0", "2,0,0", "0,1,0", "0,2,0", "0,0,1", "0,0,2", "1,1,0"]
        );
    }

    #[test]
    fn moment_index_examples() {
        assert_eq!(
            enumerate_moment_indices(2, 1),
            vec![MomentIndex::new(vec![1, 0]), MomentIndex::new(vec![0, 1])]
        );
        assert_eq!(
            enumerate_moment_indices(3, 0),
            vec![MomentIndex::new(vec![0, 0, 0])]
        );
        assert_eq!(enumerate_moment_indices(2, 3).len(), 4);
    }

    #[test]
    fn multinomial_examples() {
        assert_eq!(multinomial_coeff(&MomentIndex::new(vec![0, 0])).unwrap(), 1);
        assert_eq!(multinomial_coeff(&MomentIndex::new(vec![2, 1])).unwrap(), 3);
        assert_eq!(multinomial_coeff(&MomentIndex::new(vec![2, 2, 1])).unwrap(), 30);
        assert!(matches!(
            multinomial_coeff(&MomentIndex::new(vec![40, 40, 40])),
            Err(LlsError::Overflow(_))
        ));
    }

    #[test]
    fn pattern_parse_roundtrip() {
        let sc = s(&[2, 3]);
        let x = ResponsePattern::parse(&sc, "1,3").unwrap();
        assert_eq!(x.to_string(), "1,3");
        assert!(ResponsePattern::parse(&sc, "3,0").is_err());
        assert!(ResponsePattern::parse(&sc, "1,0,0").is_err());
        assert!(ResponsePattern::parse(&sc, "a,0").is_err());
    }

    #[test]
    fn subpatterns_cover_powerset() {
        let subs = p(&[1, 0, 2]).subpatterns();
        assert_eq!(subs.len(), 4);
        assert!(subs.contains(&p(&[0, 0, 0])));
        assert!(subs.contains(&p(&[1, 0, 2])));
        assert!(subs.iter().all(|q| q.is_subpattern_of(&p(&[1, 0, 2]))));
    }
}
