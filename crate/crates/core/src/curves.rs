//! Hierarchical curve samples on a shared time grid.
//!
//! A [`CurveSet`] holds curves indexed by subject, occasion and curve id,
//! all evaluated on one [`Grid`]. Files use a wide CSV layout with one row
//! per curve:
//!
//! ```text
//! subject_id,occasion_id,curve_id,v0,v1,...,v{L-1}
//! ```
//!
//! The grid defaults to `L` uniform points on `[0, 1]`; a sidecar CSV with a
//! single `t` column overrides it.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Occasion and curve id given to records produced by [`subject_mean_curves`].
pub const POOLED_TOKEN: &str = "mean";

const CLAMP_TOL: f64 = 1e-9;

/// Evaluation points and quadrature weights on a domain `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
    domain: (f64, f64),
}

impl Grid {
    /// `len` equally spaced points covering `[0, 1]` with weights `1/len`.
    pub fn uniform(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {len}")));
        }
        let step = 1.0 / (len - 1) as f64;
        let mut points: Vec<f64> = (0..len).map(|l| l as f64 * step).collect();
        points[len - 1] = 1.0;
        Grid::new(points, vec![1.0 / len as f64; len], (0.0, 1.0))
    }

    /// Grid over `[points[0], points[L-1]]` with equal weights summing to
    /// the domain length.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        let lo = points[0];
        let hi = points[points.len() - 1];
        let w = (hi - lo) / points.len() as f64;
        let n = points.len();
        Grid::new(points, vec![w; n], (lo, hi))
    }

    pub fn new(points: Vec<f64>, weights: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if weights.len() != points.len() {
            return Err(Error::InvalidGrid(format!(
                "{} weights for {} points",
                weights.len(),
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid point".into()));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "points not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidGrid("weights must be positive and finite".into()));
        }
        let (lo, hi) = domain;
        if !(lo < hi) || points[0] < lo - CLAMP_TOL || points[points.len() - 1] > hi + CLAMP_TOL {
            return Err(Error::InvalidGrid(format!(
                "points do not lie inside the domain [{lo}, {hi}]"
            )));
        }
        Ok(Grid {
            points,
            weights,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// Index of the grid point nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let idx = self.points.partition_point(|&p| p < t);
        if idx == 0 {
            0
        } else if idx == self.points.len() || (t - self.points[idx - 1]) <= (self.points[idx] - t) {
            idx - 1
        } else {
            idx
        }
    }

    /// Largest spacing between consecutive points.
    pub fn max_step(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// True when both grids have identical points (bitwise).
    pub fn same_points(&self, other: &Grid) -> bool {
        self.points == other.points
    }
}

/// One curve of a [`CurveSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub subject_id: String,
    pub occasion_id: String,
    pub curve_id: String,
    pub values: Vec<f64>,
}

impl CurveRecord {
    pub fn new(
        subject_id: impl Into<String>,
        occasion_id: impl Into<String>,
        curve_id: impl Into<String>,
        values: Vec<f64>,
    ) -> Self {
        CurveRecord {
            subject_id: subject_id.into(),
            occasion_id: occasion_id.into(),
            curve_id: curve_id.into(),
            values,
        }
    }
}

/// Curves of several subjects, possibly over several occasions, on a shared
/// grid. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    grid: Grid,
    records: Vec<CurveRecord>,
}

impl CurveSet {
    pub fn new(grid: Grid, records: Vec<CurveRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("a curve set needs at least one record".into()));
        }
        let len = grid.len();
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.values.len() != len {
                return Err(Error::Dimension(format!(
                    "record {i} has {} values, grid has {len}",
                    r.values.len()
                )));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    row: i + 1,
                    message: "non-finite value".into(),
                });
            }
            if !seen.insert((&r.subject_id, &r.occasion_id, &r.curve_id)) {
                return Err(Error::DuplicateKey {
                    subject_id: r.subject_id.clone(),
                    occasion_id: r.occasion_id.clone(),
                    curve_id: r.curve_id.clone(),
                });
            }
        }
        Ok(CurveSet { grid, records })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn records(&self) -> &[CurveRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CurveRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subject ids in order of first appearance.
    pub fn subject_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| r.subject_id.as_str())
            .collect()
    }

    /// Record indices grouped by subject, subjects in order of first
    /// appearance.
    pub fn group_by_subject(&self) -> Vec<(String, Vec<usize>)> {
        group_indices(&self.records, |r| r.subject_id.clone())
    }

    /// Record indices grouped by `(subject, occasion)`, in order of first
    /// appearance.
    pub fn group_by_unit(&self) -> Vec<((String, String), Vec<usize>)> {
        group_indices(&self.records, |r| (r.subject_id.clone(), r.occasion_id.clone()))
    }

    /// New curve set with the same grid keeping records for which `keep`
    /// returns true.
    pub fn filter(&self, mut keep: impl FnMut(&CurveRecord) -> bool) -> Result<CurveSet> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        CurveSet::new(self.grid.clone(), records)
    }

    /// Concatenate two curve sets on the same grid.
    pub fn concat(&self, other: &CurveSet) -> Result<CurveSet> {
        if !self.grid.same_points(&other.grid) {
            return Err(Error::Dimension("curve sets are on different grids".into()));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        CurveSet::new(self.grid.clone(), records)
    }
}

fn group_indices<K: Eq + std::hash::Hash + Clone>(
    records: &[CurveRecord],
    key: impl Fn(&CurveRecord) -> K,
) -> Vec<(K, Vec<usize>)> {
    let mut order: Vec<(K, Vec<usize>)> = Vec::new();
    let mut pos: HashMap<K, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let k = key(r);
        match pos.get(&k) {
            Some(&p) => order[p].1.push(i),
            None => {
                pos.insert(k.clone(), order.len());
                order.push((k, vec![i]));
            }
        }
    }
    order
}

/// Reader options for curve CSV files.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            has_header: true,
        }
    }
}

/// Read a wide curve CSV. Without `grid`, the grid is uniform on `[0, 1]`
/// with one point per value column.
pub fn load_curves(path: impl AsRef<Path>, options: &CsvOptions, grid: Option<Grid>) -> Result<CurveSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_curves(file, options, grid)
}

/// [`load_curves`] over any reader.
pub fn read_curves(reader: impl std::io::Read, options: &CsvOptions, grid: Option<Grid>) -> Result<CurveSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut expected: Option<usize> = None;
    let mut records = Vec::new();
    let mut first = true;
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::Format {
            row: line,
            message: e.to_string(),
        })?;
        if first && options.has_header {
            first = false;
            if row.len() < 4 {
                return Err(Error::Format {
                    row: line,
                    message: format!("header has {} columns, need id columns plus values", row.len()),
                });
            }
            expected = Some(row.len());
            continue;
        }
        first = false;
        let width = *expected.get_or_insert(row.len());
        if row.len() != width || width < 4 {
            return Err(Error::Format {
                row: line,
                message: format!("expected {width} columns, found {}", row.len()),
            });
        }
        let mut values = Vec::with_capacity(width - 3);
        for (c, cell) in row.iter().enumerate().skip(3) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: line,
                column: c + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: c + 1,
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
        records.push(CurveRecord::new(&row[0], &row[1], &row[2], values));
    }
    let width = expected.ok_or_else(|| Error::InsufficientData("empty curve file".into()))?;
    let grid = match grid {
        Some(g) => {
            if g.len() != width - 3 {
                return Err(Error::Dimension(format!(
                    "grid has {} points but the file has {} value columns",
                    g.len(),
                    width - 3
                )));
            }
            g
        }
        None => Grid::uniform(width - 3)?,
    };
    CurveSet::new(grid, records)
}

/// Write a curve set as wide CSV. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn save_curves(cs: &CurveSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_curves(cs, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// [`save_curves`] into any writer.
pub fn write_curves(cs: &CurveSet, w: &mut impl Write) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string(), "occasion_id".into(), "curve_id".into()];
    header.extend((0..cs.grid().len()).map(|l| format!("v{l}")));
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in cs.records() {
        row.clear();
        row.push(r.subject_id.clone());
        row.push(r.occasion_id.clone());
        row.push(r.curve_id.clone());
        row.extend(r.values.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()
}

/// Read a grid sidecar file: header `t` and one point per row.
pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut points = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Format {
            row: i + 2,
            message: e.to_string(),
        })?;
        let cell = row.get(0).unwrap_or("");
        points.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
            row: i + 2,
            column: 1,
            value: cell.to_string(),
        })?);
    }
    Grid::from_points(points)
}

pub fn save_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("t\n");
    for t in grid.points() {
        text.push_str(&t.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One record per subject holding the pointwise mean of all of that
/// subject's curves, pooled over occasions.
pub fn subject_mean_curves(cs: &CurveSet) -> CurveSet {
    let len = cs.grid().len();
    let records = cs
        .group_by_subject()
        .into_iter()
        .map(|(subject, idx)| {
            let mut mean = vec![0.0; len];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(&cs.records()[i].values) {
                    *m += v;
                }
            }
            let n = idx.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            CurveRecord::new(subject, POOLED_TOKEN, POOLED_TOKEN, mean)
        })
        .collect();
    CurveSet {
        grid: cs.grid().clone(),
        records,
    }
}

/// One record per `(subject, occasion)` holding the pointwise mean of that
/// unit's curves.
pub fn unit_mean_curves(cs: &CurveSet) -> CurveSet {
    let len = cs.grid().len();
    let records = cs
        .group_by_unit()
        .into_iter()
        .map(|((subject, occasion), idx)| {
            let mut mean = vec![0.0; len];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(&cs.records()[i].values) {
                    *m += v;
                }
            }
            let n = idx.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            CurveRecord::new(subject, occasion, POOLED_TOKEN, mean)
        })
        .collect();
    CurveSet {
        grid: cs.grid().clone(),
        records,
    }
}

/// Linear interpolation of `values` (on `source`) at the points of `target`.
/// Target points within `1e-9` outside the source span are clamped to the
/// nearest end value.
pub fn resample_to_grid(values: &[f64], source: &Grid, target: &Grid) -> Result<Vec<f64>> {
    if values.len() != source.len() {
        return Err(Error::Dimension(format!(
            "{} values for a source grid of {} points",
            values.len(),
            source.len()
        )));
    }
    target
        .points()
        .iter()
        .map(|&t| interpolate(values, source.points(), t))
        .collect()
}

/// Linear interpolation at a single point `t` with the same clamping rule as
/// [`resample_to_grid`].
pub fn interpolate(values: &[f64], points: &[f64], t: f64) -> Result<f64> {
    let n = points.len();
    let (lo, hi) = (points[0], points[n - 1]);
    if t < lo - CLAMP_TOL || t > hi + CLAMP_TOL || t.is_nan() {
        return Err(Error::Domain { point: t, lo, hi });
    }
    if t <= lo {
        return Ok(values[0]);
    }
    if t >= hi {
        return Ok(values[n - 1]);
    }
    let j = points.partition_point(|&p| p <= t);
    // points[j-1] <= t < points[j]
    let (t0, t1) = (points[j - 1], points[j]);
    if t == t0 {
        return Ok(values[j - 1]);
    }
    let frac = (t - t0) / (t1 - t0);
    Ok(values[j - 1] + frac * (values[j] - values[j - 1]))
}
