//! Cycle-level quality control, functional outlier detection and landmark
//! registration.
//!
//! The pipeline for a recording is: resample cycles to a common length,
//! drop cycles that correlate poorly with the recording's mean template,
//! drop functional outliers flagged by a modified-band-depth boxplot, smooth,
//! then warp each curve so that its landmarks (P, R and T peaks for ECG
//! cycles) land on fixed target times.

use crate::curves::{interpolate, CurveRecord, CurveSet, Grid};
use crate::error::{Error, Result};

pub const DEFAULT_R_MIN: f64 = 0.9;
pub const DEFAULT_MIN_GOOD: usize = 10;
pub const DEFAULT_OUTLIER_FACTOR: f64 = 1.5;

/// Landmark names and target times used for registered ECG cycles.
pub const ECG_LANDMARKS: [(&str, f64); 3] = [("P", 0.104), ("R", 0.25), ("T", 0.508)];

#[derive(Debug, Clone, PartialEq)]
pub struct CycleQc {
    pub curve_id: String,
    /// `None` when the cycle or the template has zero variance.
    pub correlation: Option<f64>,
    pub passed: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcReport {
    pub per_cycle: Vec<CycleQc>,
    pub recording_good: bool,
    pub template: Vec<f64>,
}

impl QcReport {
    pub fn n_passed(&self) -> usize {
        self.per_cycle.iter().filter(|c| c.passed).count()
    }
}

/// Named landmark times, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    names: Vec<String>,
    times: Vec<f64>,
}

impl LandmarkSet {
    pub fn new(names: Vec<String>, times: Vec<f64>) -> Result<Self> {
        if names.len() != times.len() {
            return Err(Error::InvalidLandmarks(format!(
                "{} names for {} times",
                names.len(),
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidLandmarks(format!(
                "times must be finite and strictly increasing: {times:?}"
            )));
        }
        Ok(LandmarkSet { names, times })
    }

    /// P, R and T at 0.104, 0.25 and 0.508.
    pub fn ecg() -> Self {
        LandmarkSet {
            names: ECG_LANDMARKS.iter().map(|(n, _)| n.to_string()).collect(),
            times: ECG_LANDMARKS.iter().map(|(_, t)| *t).collect(),
        }
    }

    /// Parse `P=0.104,R=0.25,T=0.508`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut times = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, t) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("landmark {part:?} is not NAME=TIME")))?;
            names.push(name.trim().to_string());
            times.push(
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("landmark time {t:?} is not a number")))?,
            );
        }
        LandmarkSet::new(names, times)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn check_inside(&self, grid: &Grid) -> Result<()> {
        let (lo, hi) = grid.domain();
        if self.times.iter().any(|&t| t <= lo || t >= hi) {
            return Err(Error::InvalidLandmarks(format!(
                "landmarks {:?} must lie strictly inside ({lo}, {hi})",
                self.times
            )));
        }
        Ok(())
    }
}

/// Template-matching quality control of the cycles of one recording.
///
/// The template is the pointwise mean of all cycles. A cycle passes when its
/// Pearson correlation with the template is at least `r_min`; the recording
/// is good when at least `min_good` cycles pass.
pub fn template_qc(cycles: &CurveSet, r_min: f64, min_good: usize) -> Result<QcReport> {
    if cycles.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "template matching needs at least 2 cycles, got {}",
            cycles.len()
        )));
    }
    let len = cycles.grid().len();
    let mut template = vec![0.0; len];
    for r in cycles.records() {
        for (t, v) in template.iter_mut().zip(&r.values) {
            *t += v;
        }
    }
    let n = cycles.len() as f64;
    template.iter_mut().for_each(|t| *t /= n);

    let per_cycle: Vec<CycleQc> = cycles
        .records()
        .iter()
        .map(|r| {
            let correlation = pearson_or_none(&r.values, &template);
            CycleQc {
                curve_id: r.curve_id.clone(),
                correlation,
                passed: correlation.is_some_and(|c| c >= r_min),
                degenerate: correlation.is_none(),
            }
        })
        .collect();
    let good = per_cycle.iter().filter(|c| c.passed).count();
    Ok(QcReport {
        per_cycle,
        recording_good: good >= min_good,
        template,
    })
}

fn pearson_or_none(x: &[f64], y: &[f64]) -> Option<f64> {
    let is_flat = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if is_flat(x) || is_flat(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Modified band depth with bands formed by pairs of curves.
///
/// The depth of a curve is the average, over all unordered pairs of distinct
/// curves in the sample (pairs containing the curve itself included), of the
/// fraction of grid points at which the curve lies inside the pair's band.
/// Touching the band boundary counts as inside.
pub fn mbd_depths(cs: &CurveSet) -> Result<Vec<(String, f64)>> {
    let values: Vec<&[f64]> = cs.records().iter().map(|r| r.values.as_slice()).collect();
    let depths = mbd(&values)?;
    Ok(cs
        .records()
        .iter()
        .zip(depths)
        .map(|(r, d)| (r.curve_id.clone(), d))
        .collect())
}

/// MBD on raw curve values; see [`mbd_depths`].
///
/// At each grid point, a pair fails to contain a curve only when both members
/// lie strictly below it or both strictly above it, so the count of
/// containing pairs is `C(n,2) − C(below,2) − C(above,2)`.
pub fn mbd(curves: &[&[f64]]) -> Result<Vec<f64>> {
    let n = curves.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "band depth needs at least 2 curves, got {n}"
        )));
    }
    let len = curves[0].len();
    let pairs = (n * (n - 1) / 2) as f64;
    let choose2 = |k: usize| (k * k.saturating_sub(1) / 2) as f64;
    let mut depth = vec![0.0; n];
    let mut column: Vec<f64> = vec![0.0; n];
    for l in 0..len {
        for (c, curve) in column.iter_mut().zip(curves) {
            *c = curve[l];
        }
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        for (i, &v) in column.iter().enumerate() {
            let below = sorted.partition_point(|&s| s < v);
            let above = n - sorted.partition_point(|&s| s <= v);
            depth[i] += pairs - choose2(below) - choose2(above);
        }
    }
    let total = pairs * len as f64;
    Ok(depth.into_iter().map(|d| d / total).collect())
}

/// Functional boxplot outlier flags.
///
/// The central region is the pointwise envelope of the deepest half of the
/// curves (by MBD, ties broken by input order). Fences extend the envelope by
/// `factor` times its height at each grid point; a curve leaving the fences
/// anywhere is flagged.
pub fn boxplot_outliers(cs: &CurveSet, factor: f64) -> Result<Vec<String>> {
    let flags = boxplot_flags(cs, factor)?;
    Ok(cs
        .records()
        .iter()
        .zip(flags)
        .filter(|(_, f)| *f)
        .map(|(r, _)| r.curve_id.clone())
        .collect())
}

/// Per-record outlier flags in record order; see [`boxplot_outliers`].
pub fn boxplot_flags(cs: &CurveSet, factor: f64) -> Result<Vec<bool>> {
    let n = cs.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "functional boxplot needs at least 4 curves, got {n}"
        )));
    }
    let values: Vec<&[f64]> = cs.records().iter().map(|r| r.values.as_slice()).collect();
    let depth = mbd(&values)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
    let central = &order[..n.div_ceil(2)];

    let len = cs.grid().len();
    let mut lower = vec![f64::INFINITY; len];
    let mut upper = vec![f64::NEG_INFINITY; len];
    for &i in central {
        for (l, v) in values[i].iter().enumerate() {
            lower[l] = lower[l].min(*v);
            upper[l] = upper[l].max(*v);
        }
    }
    let (lo_fence, hi_fence): (Vec<f64>, Vec<f64>) = lower
        .iter()
        .zip(&upper)
        .map(|(lo, hi)| {
            let h = hi - lo;
            (lo - factor * h, hi + factor * h)
        })
        .unzip();
    Ok(values
        .iter()
        .map(|v| {
            v.iter()
                .zip(lo_fence.iter().zip(&hi_fence))
                .any(|(x, (lo, hi))| x < lo || x > hi)
        })
        .collect())
}

/// Locate one peak per search window.
///
/// Within each `(lo, hi)` window, the landmark is the grid time of the
/// largest value among points strictly inside the window, and it must be a
/// strict interior maximum: larger than the values at the first and last grid
/// points inside the window.
pub fn locate_landmarks(values: &[f64], grid: &Grid, windows: &[(f64, f64)], names: &[String]) -> Result<LandmarkSet> {
    if values.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} values on a grid of {} points",
            values.len(),
            grid.len()
        )));
    }
    if names.len() != windows.len() {
        return Err(Error::Config(format!(
            "{} landmark names for {} windows",
            names.len(),
            windows.len()
        )));
    }
    for (i, &(lo, hi)) in windows.iter().enumerate() {
        if !(lo < hi) {
            return Err(Error::Config(format!("window [{lo}, {hi}] is empty")));
        }
        if i > 0 && windows[i - 1].1 > lo {
            return Err(Error::Config("landmark windows must be ordered and disjoint".into()));
        }
    }
    let pts = grid.points();
    let mut times = Vec::with_capacity(windows.len());
    for &(lo, hi) in windows {
        let first = pts.partition_point(|&t| t <= lo);
        let last = pts.partition_point(|&t| t < hi);
        if last < first + 3 {
            return Err(Error::LandmarkNotFound {
                lo,
                hi,
                reason: "fewer than 3 grid points inside the window".into(),
            });
        }
        let inside = &values[first..last];
        let (arg, &peak) = inside
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
        if arg == 0 || arg == inside.len() - 1 || peak <= inside[0] || peak <= inside[inside.len() - 1] {
            return Err(Error::LandmarkNotFound {
                lo,
                hi,
                reason: "no strict interior maximum".into(),
            });
        }
        times.push(pts[first + arg]);
    }
    LandmarkSet::new(names.to_vec(), times)
}

/// Symmetric search windows of half-width `half_width` around each target,
/// clipped so neighbouring windows do not overlap.
pub fn windows_around(targets: &LandmarkSet, half_width: f64, grid: &Grid) -> Vec<(f64, f64)> {
    let (lo, hi) = grid.domain();
    let t = targets.times();
    (0..t.len())
        .map(|k| {
            let mut a = (t[k] - half_width).max(lo);
            let mut b = (t[k] + half_width).min(hi);
            if k > 0 {
                a = a.max(0.5 * (t[k - 1] + t[k]));
            }
            if k + 1 < t.len() {
                b = b.min(0.5 * (t[k] + t[k + 1]));
            }
            (a, b)
        })
        .collect()
}

/// Monotone warp of a curve that moves its `source` landmarks onto the
/// `target` times.
///
/// The warp `h` is the Fritsch–Carlson monotone cubic through
/// `(lo, lo), (target_k, source_k), (hi, hi)`, and the registered curve is
/// `values ∘ h` evaluated by linear interpolation. Returns the registered
/// values and `h` at the grid points.
pub fn landmark_register(
    values: &[f64],
    grid: &Grid,
    source: &LandmarkSet,
    target: &LandmarkSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} values on a grid of {} points",
            values.len(),
            grid.len()
        )));
    }
    if source.len() != target.len() {
        return Err(Error::InvalidLandmarks(format!(
            "{} source landmarks but {} targets",
            source.len(),
            target.len()
        )));
    }
    source.check_inside(grid)?;
    target.check_inside(grid)?;
    let (lo, hi) = grid.domain();
    let mut xs = vec![lo];
    xs.extend_from_slice(target.times());
    xs.push(hi);
    let mut ys = vec![lo];
    ys.extend_from_slice(source.times());
    ys.push(hi);
    let warp_fn = MonotoneCubic::new(xs, ys)?;

    let warp: Vec<f64> = grid.points().iter().map(|&t| warp_fn.eval(t)).collect();
    let registered = warp
        .iter()
        .map(|&h| interpolate(values, grid.points(), h.clamp(lo, hi)))
        .collect::<Result<Vec<_>>>()?;
    Ok((registered, warp))
}

/// Piecewise cubic Hermite interpolant with Fritsch–Carlson slopes through
/// strictly increasing data.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::InvalidLandmarks("need at least two anchor points".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) || ys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidLandmarks(format!(
                "anchor sequence is not strictly increasing: x={xs:?}, y={ys:?}"
            )));
        }
        let secants: Vec<f64> = (0..n - 1)
            .map(|k| (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]))
            .collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for k in 1..n - 1 {
            slopes[k] = 0.5 * (secants[k - 1] + secants[k]);
        }
        for k in 0..n - 1 {
            let a = slopes[k] / secants[k];
            let b = slopes[k + 1] / secants[k];
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                slopes[k] = tau * a * secants[k];
                slopes[k + 1] = tau * b * secants[k];
            }
        }
        Ok(MonotoneCubic { xs, ys, slopes })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let k = self.xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let s = (x - self.xs[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.ys[k] + h10 * h * self.slopes[k] + h01 * self.ys[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

/// Per-curve outcome of [`preprocess_recordings`].
#[derive(Debug, Clone, PartialEq)]
pub struct CurveStatus {
    pub subject_id: String,
    pub occasion_id: String,
    pub curve_id: String,
    pub correlation: Option<f64>,
    pub qc_passed: bool,
    pub recording_good: bool,
    pub outlier: bool,
    pub landmarks_found: bool,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub r_min: f64,
    pub min_good: usize,
    pub outlier_factor: f64,
    pub landmarks: LandmarkSet,
    /// Half-width of the peak search window around each target landmark.
    pub window_half_width: f64,
    pub n_basis: usize,
    pub degree: usize,
    /// Smoothing penalty; 0 disables the penalty but still projects onto
    /// the spline basis.
    pub lambda: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            r_min: DEFAULT_R_MIN,
            min_good: DEFAULT_MIN_GOOD,
            outlier_factor: DEFAULT_OUTLIER_FACTOR,
            landmarks: LandmarkSet::ecg(),
            window_half_width: 0.05,
            n_basis: crate::basis::DEFAULT_N_BASIS,
            degree: crate::basis::DEFAULT_DEGREE,
            lambda: 0.0,
        }
    }
}

/// Run the full cleaning pipeline on cycles grouped into recordings by
/// `(subject_id, occasion_id)`: template QC, boxplot outlier removal,
/// B-spline smoothing, landmark location and registration. Returns the
/// per-curve status table and the registered curves that survived.
pub fn preprocess_recordings(cs: &CurveSet, opts: &PreprocessOptions) -> Result<(Vec<CurveStatus>, Option<CurveSet>)> {
    let grid = cs.grid();
    let basis = crate::basis::build_basis(grid, opts.n_basis, opts.degree)?;
    let windows = windows_around(&opts.landmarks, opts.window_half_width, grid);
    let mut status = Vec::with_capacity(cs.len());
    let mut kept = Vec::new();

    for (_, idx) in cs.group_by_unit() {
        let recs: Vec<CurveRecord> = idx.iter().map(|&i| cs.records()[i].clone()).collect();
        let mut rows: Vec<CurveStatus> = recs
            .iter()
            .map(|r| CurveStatus {
                subject_id: r.subject_id.clone(),
                occasion_id: r.occasion_id.clone(),
                curve_id: r.curve_id.clone(),
                correlation: None,
                qc_passed: false,
                recording_good: false,
                outlier: false,
                landmarks_found: false,
                kept: false,
            })
            .collect();

        if recs.len() >= 2 {
            let rec_set = CurveSet::new(grid.clone(), recs.clone())?;
            let qc = template_qc(&rec_set, opts.r_min, opts.min_good)?;
            for (row, c) in rows.iter_mut().zip(&qc.per_cycle) {
                row.correlation = c.correlation;
                row.qc_passed = c.passed;
                row.recording_good = qc.recording_good;
            }
            if qc.recording_good {
                let passed: Vec<usize> = (0..recs.len()).filter(|&k| rows[k].qc_passed).collect();
                let survivors: Vec<usize> = if passed.len() >= 4 {
                    let sub = CurveSet::new(grid.clone(), passed.iter().map(|&k| recs[k].clone()).collect())?;
                    let flags = boxplot_flags(&sub, opts.outlier_factor)?;
                    for (&k, &f) in passed.iter().zip(&flags) {
                        rows[k].outlier = f;
                    }
                    passed.into_iter().filter(|&k| !rows[k].outlier).collect()
                } else {
                    passed
                };
                for k in survivors {
                    let (_, smooth) = crate::basis::penalized_smooth(&recs[k].values, &basis, opts.lambda)?;
                    let found = locate_landmarks(&smooth, grid, &windows, opts.landmarks.names());
                    if let Ok(source) = found {
                        rows[k].landmarks_found = true;
                        let (registered, _) = landmark_register(&smooth, grid, &source, &opts.landmarks)?;
                        rows[k].kept = true;
                        kept.push(CurveRecord {
                            values: registered,
                            ..recs[k].clone()
                        });
                    }
                }
            }
        }
        status.extend(rows);
    }
    let cleaned = if kept.is_empty() {
        None
    } else {
        Some(CurveSet::new(grid.clone(), kept)?)
    };
    Ok((status, cleaned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::CurveRecord;

    fn set(curves: Vec<Vec<f64>>) -> CurveSet {
        let len = curves[0].len();
        CurveSet::new(
            Grid::uniform(len).unwrap(),
            curves
                .into_iter()
                .enumerate()
                .map(|(i, v)| CurveRecord::new("s", "o", format!("c{i}"), v))
                .collect(),
        )
        .unwrap()
    }

    fn bump(grid: &Grid, c: f64, w: f64, a: f64) -> Vec<f64> {
        grid.points()
            .iter()
            .map(|t| a * (-0.5 * ((t - c) / w).powi(2)).exp())
            .collect()
    }

    #[test]
    fn identical_cycles_pass_qc() {
        let g = Grid::uniform(64).unwrap();
        let b = bump(&g, 0.4, 0.1, 2.0);
        let qc = template_qc(&set(vec![b; 12]), DEFAULT_R_MIN, DEFAULT_MIN_GOOD).unwrap();
        assert!(qc.per_cycle.iter().all(|c| (c.correlation.unwrap() - 1.0).abs() < 1e-12 && c.passed));
        assert!(qc.recording_good);
    }

    #[test]
    fn flipped_cycles_fail_and_sink_the_recording() {
        let g = Grid::uniform(64).unwrap();
        let b = bump(&g, 0.4, 0.1, 2.0);
        let flipped: Vec<f64> = b.iter().map(|v| -v).collect();
        let mut cycles = vec![b.clone(); 9];
        cycles.extend(vec![flipped; 3]);
        let qc = template_qc(&set(cycles), 0.9, 10).unwrap();
        // template is 0.5 * b: direct cycles correlate +1, flipped ones -1
        assert_eq!(qc.n_passed(), 9);
        for c in &qc.per_cycle[9..] {
            assert!((c.correlation.unwrap() + 1.0).abs() < 1e-12);
            assert!(!c.passed);
        }
        assert!(!qc.recording_good);
    }

    #[test]
    fn constant_cycle_is_degenerate() {
        let g = Grid::uniform(16).unwrap();
        let mut cycles = vec![bump(&g, 0.5, 0.1, 1.0); 3];
        cycles.push(vec![0.3; 16]);
        let qc = template_qc(&set(cycles), 0.9, 1).unwrap();
        assert!(qc.per_cycle[3].degenerate && !qc.per_cycle[3].passed);
        assert!(template_qc(&set(vec![vec![1.0, 2.0]]), 0.9, 1).is_err());
    }

    #[test]
    fn qc_invariant_under_positive_rescaling() {
        let g = Grid::uniform(32).unwrap();
        let cycles: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                bump(&g, 0.3 + 0.04 * k as f64, 0.08, 1.0 + 0.1 * k as f64)
            })
            .collect();
        let scaled: Vec<Vec<f64>> = cycles.iter().map(|c| c.iter().map(|v| 3.5 * v - 2.0).collect()).collect();
        let a = template_qc(&set(cycles), 0.95, 3).unwrap();
        let b = template_qc(&set(scaled), 0.95, 3).unwrap();
        let pa: Vec<bool> = a.per_cycle.iter().map(|c| c.passed).collect();
        let pb: Vec<bool> = b.per_cycle.iter().map(|c| c.passed).collect();
        assert_eq!(pa, pb);
        assert_eq!(a.recording_good, b.recording_good);
    }

    /// Brute-force MBD by enumerating every pair at every point.
    fn mbd_brute(curves: &[Vec<f64>]) -> Vec<f64> {
        let n = curves.len();
        let len = curves[0].len();
        let mut out = vec![0.0; n];
        for (f, d) in out.iter_mut().enumerate() {
            let mut count = 0.0;
            let mut pairs = 0.0;
            for g in 0..n {
                for h in g + 1..n {
                    pairs += 1.0;
                    let inside = (0..len)
                        .filter(|&l| {
                            let lo = curves[g][l].min(curves[h][l]);
                            let hi = curves[g][l].max(curves[h][l]);
                            lo <= curves[f][l] && curves[f][l] <= hi
                        })
                        .count();
                    count += inside as f64 / len as f64;
                }
            }
            *d = count / pairs;
        }
        out
    }

    #[test]
    fn mbd_of_three_constants() {
        let d = mbd_depths(&set(vec![vec![0.0; 5], vec![1.0; 5], vec![2.0; 5]])).unwrap();
        let v: Vec<f64> = d.iter().map(|x| x.1).collect();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mbd_identical_curves_have_depth_one() {
        let d = mbd_depths(&set(vec![vec![0.5, 1.0, -2.0]; 6])).unwrap();
        assert!(d.iter().all(|x| x.1 == 1.0));
    }

    #[test]
    fn mbd_matches_enumeration_with_ties_and_top_curve() {
        let curves = vec![
            vec![0.0, 1.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0, 3.0],
            vec![-1.0, 0.5, 2.0, 0.0],
            vec![5.0, 6.0, 7.0, 8.0],
        ];
        let fast = mbd_depths(&set(curves.clone())).unwrap();
        let slow = mbd_brute(&curves);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a.1 - b).abs() < 1e-14);
        }
        let min = slow.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(slow[3], min);
        assert!(fast.iter().all(|x| (0.0..=1.0).contains(&x.1)));
    }

    #[test]
    fn mbd_needs_two_curves() {
        assert!(matches!(
            mbd_depths(&set(vec![vec![1.0, 2.0]])),
            Err(Error::InsufficientData(_))
        ));
    }

    fn outlier_fixture() -> Vec<Vec<f64>> {
        let g = Grid::uniform(50).unwrap();
        let base = bump(&g, 0.5, 0.15, 1.0);
        let mut curves: Vec<Vec<f64>> = (0..9)
            .map(|k| base.iter().map(|v| v + 0.05 * (k as f64 - 4.0)).collect())
            .collect();
        // central envelope height is 0.2 (offsets -0.1..0.1); shift by 10x that
        curves.push(base.iter().map(|v| v + 2.0).collect());
        curves
    }

    #[test]
    fn shifted_curve_is_the_only_outlier() {
        let flagged = boxplot_outliers(&set(outlier_fixture()), 1.5).unwrap();
        assert_eq!(flagged, vec!["c9".to_string()]);
    }

    #[test]
    fn boxplot_is_translation_invariant_and_quiet_on_identical_curves() {
        let shifted: Vec<Vec<f64>> = outlier_fixture()
            .into_iter()
            .map(|c| c.into_iter().map(|v| v + 17.25).collect())
            .collect();
        assert_eq!(boxplot_outliers(&set(shifted), 1.5).unwrap(), vec!["c9".to_string()]);
        assert!(boxplot_outliers(&set(vec![vec![1.0, 2.0, 3.0]; 5]), 1.5).unwrap().is_empty());
        assert!(boxplot_outliers(&set(vec![vec![1.0, 2.0]; 3]), 1.5).is_err());
    }

    fn ecg_like(grid: &Grid, centers: [f64; 3]) -> Vec<f64> {
        let p = bump(grid, centers[0], 0.02, 100.0);
        let r = bump(grid, centers[1], 0.015, 800.0);
        let t = bump(grid, centers[2], 0.04, 200.0);
        p.iter().zip(&r).zip(&t).map(|((a, b), c)| a + b + c).collect()
    }

    #[test]
    fn finds_three_peaks() {
        let g = Grid::uniform(501).unwrap();
        let y = ecg_like(&g, [0.104, 0.25, 0.508]);
        let windows = windows_around(&LandmarkSet::ecg(), 0.05, &g);
        let found = locate_landmarks(&y, &g, &windows, LandmarkSet::ecg().names()).unwrap();
        for (t, e) in found.times().iter().zip([0.104, 0.25, 0.508]) {
            assert!((t - e).abs() <= g.max_step() + 1e-12);
        }
    }

    #[test]
    fn flat_and_monotone_curves_have_no_landmark() {
        let g = Grid::uniform(101).unwrap();
        let names = vec!["X".to_string()];
        assert!(matches!(
            locate_landmarks(&[2.0; 101], &g, &[(0.2, 0.4)], &names),
            Err(Error::LandmarkNotFound { .. })
        ));
        let ramp: Vec<f64> = g.points().to_vec();
        assert!(matches!(
            locate_landmarks(&ramp, &g, &[(0.2, 0.4)], &names),
            Err(Error::LandmarkNotFound { .. })
        ));
    }

    #[test]
    fn identity_registration() {
        let g = Grid::uniform(201).unwrap();
        let y = ecg_like(&g, [0.104, 0.25, 0.508]);
        let lm = LandmarkSet::ecg();
        let (reg, warp) = landmark_register(&y, &g, &lm, &lm).unwrap();
        for (h, t) in warp.iter().zip(g.points()) {
            assert!((h - t).abs() < 1e-12);
        }
        for (a, b) in reg.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn shifted_bump_is_moved_onto_target() {
        let g = Grid::uniform(401).unwrap();
        let y = bump(&g, 0.30, 0.03, 1.0);
        let source = LandmarkSet::new(vec!["R".into()], vec![0.30]).unwrap();
        let target = LandmarkSet::new(vec!["R".into()], vec![0.25]).unwrap();
        let (reg, warp) = landmark_register(&y, &g, &source, &target).unwrap();
        let arg = reg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((g.points()[arg] - 0.25).abs() <= g.max_step() + 1e-12);
        assert_eq!(warp[0], 0.0);
        assert_eq!(*warp.last().unwrap(), 1.0);
        assert!(warp.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn warps_are_strictly_increasing_for_strong_distortion() {
        let g = Grid::uniform(301).unwrap();
        let y = vec![0.0; 301];
        let source = LandmarkSet::new(vec!["a".into(), "b".into(), "c".into()], vec![0.05, 0.5, 0.55]).unwrap();
        let target = LandmarkSet::new(vec!["a".into(), "b".into(), "c".into()], vec![0.4, 0.45, 0.95]).unwrap();
        let (_, warp) = landmark_register(&y, &g, &source, &target).unwrap();
        assert!(warp.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(warp[0], 0.0);
        assert_eq!(warp[300], 1.0);
    }

    #[test]
    fn bad_landmarks_are_rejected() {
        assert!(LandmarkSet::new(vec!["a".into(), "b".into()], vec![0.5, 0.4]).is_err());
        let g = Grid::uniform(11).unwrap();
        let s = LandmarkSet::new(vec!["a".into()], vec![0.5]).unwrap();
        let t2 = LandmarkSet::new(vec!["a".into(), "b".into()], vec![0.2, 0.6]).unwrap();
        assert!(matches!(
            landmark_register(&[0.0; 11], &g, &s, &t2),
            Err(Error::InvalidLandmarks(_))
        ));
        let edge = LandmarkSet::new(vec!["a".into()], vec![1.0]).unwrap();
        assert!(landmark_register(&[0.0; 11], &g, &s, &edge).is_err());
    }

    #[test]
    fn parse_landmarks() {
        let lm = LandmarkSet::parse("P=0.104,R=0.25,T=0.508").unwrap();
        assert_eq!(lm, LandmarkSet::ecg());
        assert!(LandmarkSet::parse("P0.1").is_err());
    }

    #[test]
    fn pipeline_drops_flipped_and_outlying_cycles() {
        let g = Grid::uniform(256).unwrap();
        let mut records = Vec::new();
        for k in 0..14 {
            let shift = 0.001 * ((k % 5) as f64 - 2.0);
            let scale = 1.0 + 0.03 * ((k % 3) as f64 - 1.0);
            let mut y: Vec<f64> = ecg_like(&g, [0.104 + shift, 0.25 + shift, 0.508 + shift])
                .into_iter()
                .map(|v| v * scale)
                .collect();
            if k == 13 {
                y.iter_mut().for_each(|v| *v = -*v);
            }
            records.push(CurveRecord::new("s1", "d1", format!("c{k}"), y));
        }
        // a recording with too few cycles
        for k in 0..3 {
            records.push(CurveRecord::new("s2", "d1", format!("c{k}"), ecg_like(&g, [0.104, 0.25, 0.508])));
        }
        let cs = CurveSet::new(g, records).unwrap();
        let (status, cleaned) = preprocess_recordings(&cs, &PreprocessOptions::default()).unwrap();
        let cleaned = cleaned.unwrap();
        assert!(!status[13].qc_passed);
        assert!(status[14..].iter().all(|s| !s.recording_good && !s.kept));
        assert!(cleaned.records().iter().all(|r| r.subject_id == "s1"));
        assert!(cleaned.len() <= 13 && cleaned.len() >= 10, "kept {} {:?}", cleaned.len(), status);
    }
}
