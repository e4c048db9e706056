//! Dataset ingestion, response-pattern frequencies and the incomplete moment matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{io_err, LlsError, Result};
use crate::schema::{enumerate_patterns, ResponsePattern, Schema};

/// Anything that can report the (estimated or exact) moment `M_ℓ` of a pattern.
pub trait MomentSource: Sync {
    fn schema(&self) -> &Schema;

    fn moment(&self, pattern: &ResponsePattern) -> f64;

    /// Sample size behind the moments; `None` for exact moments.
    fn sample_size(&self) -> Option<usize>;

    /// Moments of many patterns at once, in the given order.
    fn moments(&self, patterns: &[ResponsePattern]) -> Vec<f64> {
        patterns.par_iter().map(|p| self.moment(p)).collect()
    }
}

/// Complete-case categorical observations, one row per individual.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: Schema,
    /// Row-major `n × J` table of 1-based levels.
    cells: Vec<u32>,
    n: usize,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Vec<u32>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(LlsError::Data("no observations".into()));
        }
        let j_count = schema.num_vars();
        let mut cells = Vec::with_capacity(rows.len() * j_count);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != j_count {
                return Err(LlsError::Data(format!(
                    "row {} has {} values, expected {}",
                    i + 1,
                    row.len(),
                    j_count
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if v == 0 || v as usize > schema.level_count(j) {
                    return Err(LlsError::Data(format!(
                        "row {}: level {} out of range 1..={} for variable {}",
                        i + 1,
                        v,
                        schema.level_count(j),
                        j + 1
                    )));
                }
            }
            cells.extend_from_slice(row);
        }
        Ok(Dataset {
            schema,
            n: rows.len(),
            cells,
        })
    }

    /// Build from a row-major cell buffer that is already known to be valid.
    pub(crate) fn from_cells(schema: Schema, cells: Vec<u32>) -> Self {
        let n = cells.len() / schema.num_vars();
        Dataset { schema, cells, n }
    }

    /// Reads the CSV format: a header line, then one row of integer levels per line.
    pub fn load(path: &Path, schema: &Schema) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let reader = BufReader::new(file);
        let j_count = schema.num_vars();
        let parse_err = |line: usize, msg: String| LlsError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let mut cells = Vec::new();
        let mut saw_header = false;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(io_err(path))?;
            let line = line.trim_end_matches('\r');
            if !saw_header {
                let names = line.split(',').count();
                if names != j_count {
                    return Err(parse_err(
                        line_no,
                        format!("header has {} columns, schema has {} variables", names, j_count),
                    ));
                }
                saw_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut count = 0;
            for (j, tok) in line.split(',').enumerate() {
                count += 1;
                if j >= j_count {
                    continue;
                }
                let v: u32 = tok.trim().parse().map_err(|_| {
                    parse_err(line_no, format!("column {}: {:?} is not a level", j + 1, tok))
                })?;
                if v == 0 || v as usize > schema.level_count(j) {
                    return Err(parse_err(
                        line_no,
                        format!(
                            "column {}: level {} out of range 1..={}",
                            j + 1,
                            v,
                            schema.level_count(j)
                        ),
                    ));
                }
                cells.push(v);
            }
            if count != j_count {
                return Err(parse_err(
                    line_no,
                    format!("expected {} columns, found {}", j_count, count),
                ));
            }
        }
        if !saw_header {
            return Err(parse_err(1, "missing header line".into()));
        }
        if cells.is_empty() {
            return Err(LlsError::Data(format!("{}: no observations", path.display())));
        }
        Ok(Dataset::from_cells(schema.clone(), cells))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut out = std::io::BufWriter::new(file);
        let header: Vec<String> = (1..=self.schema.num_vars()).map(|j| format!("x{}", j)).collect();
        let mut buf = header.join(",");
        buf.push('\n');
        for row in self.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    buf.push(',');
                }
                write!(buf, "{}", v).expect("write to string");
            }
            buf.push('\n');
        }
        out.write_all(buf.as_bytes()).map_err(io_err(path))?;
        out.flush().map_err(io_err(path))
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.cells.chunks_exact(self.schema.num_vars())
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let j = self.schema.num_vars();
        &self.cells[i * j..(i + 1) * j]
    }

    /// Number of rows agreeing with `pattern` on every specified entry.
    pub fn count(&self, pattern: &ResponsePattern) -> u64 {
        let support: Vec<(usize, u32)> = pattern.support().collect();
        if support.is_empty() {
            return self.n as u64;
        }
        self.rows()
            .filter(|row| support.iter().all(|&(j, l)| row[j] == l))
            .count() as u64
    }

    pub fn frequency(&self, pattern: &ResponsePattern) -> f64 {
        self.count(pattern) as f64 / self.n as f64
    }

    /// Distinct full response patterns in canonical order.
    pub fn distinct_patterns(&self) -> Vec<ResponsePattern> {
        let mut seen: Vec<ResponsePattern> = self
            .rows()
            .map(|r| ResponsePattern::from_entries(r.to_vec()))
            .collect();
        seen.sort();
        seen.dedup();
        seen
    }

    /// Number of distinct levels actually observed for each variable.
    pub fn observed_level_counts(&self) -> Vec<usize> {
        let mut seen: Vec<Vec<bool>> = self
            .schema
            .levels()
            .iter()
            .map(|&l| vec![false; l + 1])
            .collect();
        for row in self.rows() {
            for (j, &v) in row.iter().enumerate() {
                seen[j][v as usize] = true;
            }
        }
        seen.iter().map(|s| s.iter().filter(|&&b| b).count()).collect()
    }

    fn indicator_bitsets(&self) -> Vec<Vec<u64>> {
        let words = self.n.div_ceil(64);
        let mut sets = vec![vec![0u64; words]; self.schema.total_cells()];
        for (i, row) in self.rows().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let r = self.schema.flatten(j, v as usize).expect("validated level");
                sets[r][i / 64] |= 1 << (i % 64);
            }
        }
        sets
    }
}

impl MomentSource for Dataset {
    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn moment(&self, pattern: &ResponsePattern) -> f64 {
        self.frequency(pattern)
    }

    fn moments(&self, patterns: &[ResponsePattern]) -> Vec<f64> {
        if patterns.len() < 64 {
            return patterns.iter().map(|p| self.frequency(p)).collect();
        }
        let sets = self.indicator_bitsets();
        let nf = self.n as f64;
        patterns
            .par_iter()
            .map(|p| {
                let rows: Vec<&Vec<u64>> = p
                    .support()
                    .map(|(j, l)| &sets[self.schema.flatten(j, l as usize).expect("valid pattern")])
                    .collect();
                let Some((first, rest)) = rows.split_first() else {
                    return 1.0;
                };
                let count: u64 = (0..first.len())
                    .map(|w| rest.iter().fold(first[w], |acc, s| acc & s[w]).count_ones() as u64)
                    .sum();
                count as f64 / nf
            })
            .collect()
    }

    fn sample_size(&self) -> Option<usize> {
        Some(self.n)
    }
}

/// Frequencies `f_ℓ` tabulated for a chosen family of patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    schema: Schema,
    entries: BTreeMap<ResponsePattern, f64>,
    n: Option<usize>,
}

impl FrequencyTable {
    pub fn tabulate<'a, S, I>(source: &S, patterns: I) -> Self
    where
        S: MomentSource + ?Sized,
        I: IntoIterator<Item = &'a ResponsePattern>,
    {
        let mut wanted: Vec<ResponsePattern> = patterns.into_iter().cloned().collect();
        wanted.sort();
        wanted.dedup();
        let values = source.moments(&wanted);
        let mut entries: BTreeMap<ResponsePattern, f64> = wanted.into_iter().zip(values).collect();
        entries.insert(source.schema().empty_pattern(), 1.0);
        FrequencyTable {
            schema: source.schema().clone(),
            entries,
            n: source.sample_size(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn get(&self, pattern: &ResponsePattern) -> Option<f64> {
        self.entries.get(pattern).copied()
    }

    pub fn sample_size(&self) -> Option<usize> {
        self.n
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ResponsePattern, f64)> {
        self.entries.iter().map(|(p, &f)| (p, f))
    }
}

/// Incomplete matrix of moments: rows are cells `(j, l)`, columns are patterns `ℓ`,
/// and entry `((j,l), ℓ)` holds `M_{ℓ + l·1_j}` whenever variable `j` is free in `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    schema: Schema,
    columns: Vec<ResponsePattern>,
    values: DMatrix<f64>,
    column_mass: Vec<f64>,
    n: Option<usize>,
    max_col_order: usize,
    dropped: Vec<ResponsePattern>,
}

impl MomentMatrix {
    /// Default bound on column pattern order, so entries are moments of order <= 3.
    pub const DEFAULT_MAX_COL_ORDER: usize = 2;

    fn check_order(schema: &Schema, max_col_order: usize) -> Result<()> {
        if max_col_order + 1 > schema.num_vars() {
            return Err(LlsError::Precondition(format!(
                "max column order {} must be at most J-1 = {}",
                max_col_order,
                schema.num_vars() - 1
            )));
        }
        Ok(())
    }

    /// Counts every entry from the data with row bitsets; exact integer counts are
    /// converted to frequencies once.
    pub fn from_dataset(data: &Dataset, max_col_order: usize) -> Result<Self> {
        let schema = data.schema();
        Self::check_order(schema, max_col_order)?;
        let patterns = enumerate_patterns(schema, max_col_order);
        let sets = data.indicator_bitsets();
        let words = data.n().div_ceil(64);
        let n = data.n();
        let tail_mask = if n.is_multiple_of(64) { u64::MAX } else { (1u64 << (n % 64)) - 1 };

        let counts: Vec<(u64, Vec<u64>)> = patterns
            .par_iter()
            .map(|pattern| {
                let mut base = vec![u64::MAX; words];
                if let Some(last) = base.last_mut() {
                    *last = tail_mask;
                }
                for (j, l) in pattern.support() {
                    let r = schema.flatten(j, l as usize).expect("valid pattern");
                    for (b, s) in base.iter_mut().zip(&sets[r]) {
                        *b &= s;
                    }
                }
                let mass: u64 = base.iter().map(|w| w.count_ones() as u64).sum();
                let mut col = vec![0u64; schema.total_cells()];
                for j in 0..schema.num_vars() {
                    if !pattern.is_free(j) {
                        continue;
                    }
                    let block = schema.block(j);
                    let mut acc = 0u64;
                    for r in block.start..block.end - 1 {
                        let c: u64 = base
                            .iter()
                            .zip(&sets[r])
                            .map(|(a, b)| (a & b).count_ones() as u64)
                            .sum();
                        col[r] = c;
                        acc += c;
                    }
                    // complete data: the last level takes the remainder
                    col[block.end - 1] = mass - acc;
                }
                (mass, col)
            })
            .collect();

        let nf = n as f64;
        Ok(Self::assemble(
            schema,
            max_col_order,
            patterns,
            Some(n),
            |idx, _| {
                let (mass, col) = &counts[idx];
                (*mass as f64 / nf, col.iter().map(|&c| c as f64 / nf).collect())
            },
        ))
    }

    /// Builds the matrix from any moment source, one entry at a time.
    pub fn from_source<S: MomentSource + ?Sized>(source: &S, max_col_order: usize) -> Result<Self> {
        let schema = source.schema();
        Self::check_order(schema, max_col_order)?;
        let patterns = enumerate_patterns(schema, max_col_order);
        let cols: Vec<(f64, Vec<f64>)> = patterns
            .par_iter()
            .map(|pattern| {
                let mass = source.moment(pattern);
                let mut col = vec![f64::NAN; schema.total_cells()];
                for cell in schema.cells() {
                    if pattern.is_free(cell.variable) {
                        col[cell.flat_row] = source.moment(&pattern.with_entry(cell.variable, cell.level as u32));
                    }
                }
                (mass, col)
            })
            .collect();
        Ok(Self::assemble(
            schema,
            max_col_order,
            patterns,
            source.sample_size(),
            |idx, _| cols[idx].clone(),
        ))
    }

    fn assemble(
        schema: &Schema,
        max_col_order: usize,
        patterns: Vec<ResponsePattern>,
        n: Option<usize>,
        column: impl Fn(usize, &ResponsePattern) -> (f64, Vec<f64>),
    ) -> Self {
        let rows = schema.total_cells();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let mut mass = Vec::new();
        let mut data = Vec::new();
        for (idx, pattern) in patterns.into_iter().enumerate() {
            let (s, col) = column(idx, &pattern);
            if s <= 0.0 {
                log::warn!("dropping column {}: pattern has zero frequency", pattern);
                dropped.push(pattern);
                continue;
            }
            for cell in schema.cells() {
                let v = if pattern.is_free(cell.variable) {
                    col[cell.flat_row]
                } else {
                    f64::NAN
                };
                data.push(v);
            }
            mass.push(s);
            kept.push(pattern);
        }
        let values = DMatrix::from_vec(rows, kept.len(), data);
        MomentMatrix {
            schema: schema.clone(),
            columns: kept,
            values,
            column_mass: mass,
            n,
            max_col_order,
            dropped,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[ResponsePattern] {
        &self.columns
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Raw values; unobserved cells hold NaN.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.is_observed(row, col).then(|| self.values[(row, col)])
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        let cell = self.schema.unflatten(row).expect("row in range");
        self.columns[col].is_free(cell.variable)
    }

    /// `s = f_ℓ` for the label of each column.
    pub fn column_mass(&self) -> &[f64] {
        &self.column_mass
    }

    pub fn sample_size(&self) -> Option<usize> {
        self.n
    }

    pub fn max_col_order(&self) -> usize {
        self.max_col_order
    }

    /// Columns removed at assembly because their label pattern never occurs.
    pub fn dropped_columns(&self) -> &[ResponsePattern] {
        &self.dropped
    }

    pub fn column_index(&self, pattern: &ResponsePattern) -> Option<usize> {
        self.columns.binary_search(pattern).ok()
    }

    /// CSV rendering with `"j:l"` row labels and `?` for unobserved cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell");
        for c in &self.columns {
            write!(out, ",\"{}\"", c).expect("write to string");
        }
        out.push('\n');
        for r in 0..self.num_rows() {
            out.push_str(&self.schema.row_label(r));
            for c in 0..self.num_cols() {
                match self.value(r, c) {
                    Some(v) => write!(out, ",{:e}", v).expect("write to string"),
                    None => out.push_str(",?"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pat(e: &[u32]) -> ResponsePattern {
        ResponsePattern::from_entries(e.to_vec())
    }

    fn four_rows() -> Dataset {
        let schema = Schema::new(vec![2, 2]).unwrap();
        Dataset::new(schema, vec![vec![1, 1], vec![1, 2], vec![2, 1], vec![1, 1]]).unwrap()
    }

    #[test]
    fn frequency_examples() {
        let d = four_rows();
        assert_eq!(d.frequency(&pat(&[1, 0])), 0.75);
        assert_eq!(d.frequency(&pat(&[1, 1])), 0.5);
        assert_eq!(d.frequency(&pat(&[0, 0])), 1.0);
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let schema = Schema::new(vec![2, 2]).unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "x1,x2\n1,2\n2,1\n").unwrap();
        assert_eq!(Dataset::load(&good, &schema).unwrap().n(), 2);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "x1,x2\n1,2\n3,1\n").unwrap();
        match Dataset::load(&bad, &schema) {
            Err(LlsError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {:?}", other),
        }

        let width = dir.path().join("width.csv");
        std::fs::write(&width, "x1,x2\n1,2,1\n").unwrap();
        assert!(matches!(
            Dataset::load(&width, &schema),
            Err(LlsError::Parse { line: 2, .. })
        ));

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "x1,x2\n").unwrap();
        let err = Dataset::load(&empty, &schema).unwrap_err();
        assert!(err.to_string().contains("no observations"));
    }

    #[test]
    fn csv_roundtrip() {
        let d = four_rows();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.write_csv(&path).unwrap();
        assert_eq!(Dataset::load(&path, d.schema()).unwrap(), d);
    }

    #[test]
    fn figure_layout_for_three_binary_variables() {
        let schema = Schema::uniform(3, 2).unwrap();
        let rows: Vec<Vec<u32>> = (0..8u32)
            .map(|i| vec![1 + (i & 1), 1 + ((i >> 1) & 1), 1 + ((i >> 2) & 1)])
            .chain([vec![1, 1, 2], vec![2, 2, 1]])
            .collect();
        let d = Dataset::new(schema.clone(), rows).unwrap();
        let m = MomentMatrix::from_dataset(&d, 2).unwrap();
        let c100 = m.column_index(&pat(&[1, 0, 0])).unwrap();
        assert!(!m.is_observed(0, c100));
        assert!(!m.is_observed(1, c100));
        let row21 = schema.flatten(1, 1).unwrap();
        assert_eq!(m.value(row21, c100), Some(d.frequency(&pat(&[1, 1, 0]))));

        let c000 = m.column_index(&pat(&[0, 0, 0])).unwrap();
        assert_eq!(c000, 0);
        for cell in schema.cells() {
            let mut e = vec![0; 3];
            e[cell.variable] = cell.level as u32;
            assert_eq!(m.value(cell.flat_row, c000), Some(d.frequency(&pat(&e))));
        }
        assert_eq!(m.column_mass()[c000], 1.0);
    }

    #[test]
    fn bitset_path_matches_direct_counting() {
        let schema = Schema::new(vec![3, 2, 2, 4]).unwrap();
        let rows: Vec<Vec<u32>> = (0..131u32)
            .map(|i| vec![1 + i % 3, 1 + (i / 3) % 2, 1 + (i * 7 / 5) % 2, 1 + (i * 13) % 4])
            .collect();
        let d = Dataset::new(schema.clone(), rows).unwrap();
        let fast = MomentMatrix::from_dataset(&d, 2).unwrap();
        let slow = MomentMatrix::from_source(&d, 2).unwrap();
        assert_eq!(fast.columns(), slow.columns());
        for c in 0..fast.num_cols() {
            for r in 0..fast.num_rows() {
                assert_eq!(fast.value(r, c), slow.value(r, c));
            }
        }
    }

    #[test]
    fn batched_frequencies_match_single_counts() {
        let schema = Schema::new(vec![3, 2, 2, 4]).unwrap();
        let rows: Vec<Vec<u32>> = (0..200u32)
            .map(|i| vec![1 + i % 3, 1 + (i / 3) % 2, 1 + (i * 7 / 5) % 2, 1 + (i * 13) % 4])
            .collect();
        let d = Dataset::new(schema.clone(), rows).unwrap();
        let patterns = enumerate_patterns(&schema, 4);
        assert!(patterns.len() >= 64);
        let batch = d.moments(&patterns);
        for (p, f) in patterns.iter().zip(batch) {
            assert_eq!(f, d.frequency(p), "{}", p);
        }
    }

    #[test]
    fn zero_mass_columns_are_dropped() {
        let schema = Schema::new(vec![2, 2, 2]).unwrap();
        let d = Dataset::new(schema, vec![vec![1, 1, 1], vec![1, 2, 2]]).unwrap();
        let m = MomentMatrix::from_dataset(&d, 1).unwrap();
        assert_eq!(m.dropped_columns(), &[pat(&[2, 0, 0])]);
        assert!(m.column_mass().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn max_col_order_bound() {
        let d = four_rows();
        assert!(MomentMatrix::from_dataset(&d, 1).is_ok());
        assert!(matches!(
            MomentMatrix::from_dataset(&d, 2),
            Err(LlsError::Precondition(_))
        ));
    }

    #[test]
    fn csv_export_marks_unobserved() {
        let m = MomentMatrix::from_dataset(&four_rows(), 1).unwrap();
        let csv = m.to_csv();
        let first = csv.lines().next().unwrap();
        assert_eq!(first, "cell,\"0,0\",\"1,0\",\"2,0\",\"0,1\",\"0,2\"");
        let row11 = csv.lines().nth(1).unwrap();
        assert!(row11.starts_with("1:1,"));
        assert_eq!(row11.split(',').filter(|t| *t == "?").count(), 2);
    }
}
