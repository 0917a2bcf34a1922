//! Two-level functional principal component analysis.
//!
//! Curves are modelled as `y_ij(t) = μ(t) + b_i(t) + w_ij(t) + ε_ij(t)`,
//! with a subject-level (between) process `b_i` and a curve-level (within)
//! process `w_ij`. Both covariance operators are estimated by the method of
//! moments and expanded in their eigenfunctions.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::weighted_dot;
use crate::curves::{CurveSet, Grid};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_PVE1: f64 = 0.95;
pub const DEFAULT_PVE2: f64 = 0.90;

const SYMMETRY_TOL: f64 = 1e-8;
const ORTHONORMAL_TOL: f64 = 1e-8;
const PVE_TOL: f64 = 1e-12;

/// Total, between-subject and within-subject covariance surfaces on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    pub total: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

/// How many components to keep at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentRule {
    /// Smallest K whose cumulative eigenvalue fraction reaches the value.
    Pve(f64),
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub level1: ComponentRule,
    pub level2: ComponentRule,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            level1: ComponentRule::Pve(DEFAULT_PVE1),
            level2: ComponentRule::Pve(DEFAULT_PVE2),
        }
    }
}

impl FitOptions {
    pub fn fixed(k1: usize, k2: usize) -> Self {
        FitOptions {
            level1: ComponentRule::Fixed(k1),
            level2: ComponentRule::Fixed(k2),
        }
    }
}

/// Retained eigenvalues (descending) and eigenfunctions of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
}

impl Level {
    pub fn empty() -> Self {
        Level {
            eigenvalues: Vec::new(),
            eigenfunctions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// `fit_mfpca`, `fit_fpca` or `synthetic`.
    pub source: String,
    pub rule1: Option<ComponentRule>,
    pub rule2: Option<ComponentRule>,
    /// Fraction of the level's total variance captured by the kept components.
    pub pve1: f64,
    pub pve2: f64,
    pub n_subjects: usize,
    pub n_curves: usize,
}

/// A fitted (or synthetic) reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct MfpcaModel {
    pub grid: Grid,
    pub mean: Vec<f64>,
    pub level1: Level,
    pub level2: Level,
    /// Pointwise residual variance.
    pub sigma_e: f64,
    pub metadata: ModelMetadata,
}

impl MfpcaModel {
    pub fn k1(&self) -> usize {
        self.level1.len()
    }

    pub fn k2(&self) -> usize {
        self.level2.len()
    }

    /// Check every structural invariant. Used on load and by constructors of
    /// synthetic models; failures are reported as [`Error::CorruptModel`].
    pub fn validate(&self) -> Result<()> {
        let len = self.grid.len();
        let corrupt = |m: String| Err(Error::CorruptModel(m));
        if self.mean.len() != len {
            return corrupt(format!("mean has {} values for {len} grid points", self.mean.len()));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return corrupt("mean has non-finite values".into());
        }
        if !(self.sigma_e.is_finite() && self.sigma_e >= 0.0) {
            return corrupt(format!("sigma_e = {} is not a nonnegative number", self.sigma_e));
        }
        for (name, level) in [("level1", &self.level1), ("level2", &self.level2)] {
            if level.eigenvalues.len() != level.eigenfunctions.len() {
                return corrupt(format!(
                    "{name}: {} eigenvalues but {} eigenfunctions",
                    level.eigenvalues.len(),
                    level.eigenfunctions.len()
                ));
            }
            if level.eigenvalues.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return corrupt(format!("{name}: eigenvalues must be finite and nonnegative"));
            }
            if level.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
                return corrupt(format!("{name}: eigenvalues are not in descending order"));
            }
            for (k, phi) in level.eigenfunctions.iter().enumerate() {
                if phi.len() != len {
                    return corrupt(format!(
                        "{name}: eigenfunction {k} has {} values for {len} grid points",
                        phi.len()
                    ));
                }
                if phi.iter().any(|v| !v.is_finite()) {
                    return corrupt(format!("{name}: eigenfunction {k} has non-finite values"));
                }
                if !sign_convention_holds(phi) {
                    return corrupt(format!(
                        "{name}: eigenfunction {k} violates the sign convention"
                    ));
                }
            }
            let dev = orthonormality_error(&level.eigenfunctions, &self.grid);
            if dev > ORTHONORMAL_TOL {
                return corrupt(format!(
                    "{name}: eigenfunctions are not orthonormal (max deviation {dev:e})"
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            grid: GridFile {
                points: self.grid.points().to_vec(),
                weights: self.grid.weights().to_vec(),
                domain: [self.grid.domain().0, self.grid.domain().1],
            },
            mean: self.mean.clone(),
            level1: self.level1.clone(),
            level2: self.level2.clone(),
            sigma_e: self.sigma_e,
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::CorruptModel(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CorruptModel(format!("not valid JSON: {e}")))?;
        match value.get("version") {
            Some(v) if v.as_u64() == Some(MODEL_FORMAT_VERSION as u64) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.to_string(),
                    expected: MODEL_FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::Version {
                    found: "none".into(),
                    expected: MODEL_FORMAT_VERSION,
                })
            }
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
        let grid = Grid::new(file.grid.points, file.grid.weights, (file.grid.domain[0], file.grid.domain[1]))
            .map_err(|e| Error::CorruptModel(e.to_string()))?;
        let model = MfpcaModel {
            grid,
            mean: file.mean,
            level1: file.level1,
            level2: file.level2,
            sigma_e: file.sigma_e,
            metadata: file.metadata,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    grid: GridFile,
    mean: Vec<f64>,
    level1: Level,
    level2: Level,
    sigma_e: f64,
    metadata: ModelMetadata,
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    points: Vec<f64>,
    weights: Vec<f64>,
    domain: [f64; 2],
}

/// Largest deviation of the Gram matrix of `functions` from the identity.
pub fn orthonormality_error(functions: &[Vec<f64>], grid: &Grid) -> f64 {
    let w = grid.weights();
    let mut worst: f64 = 0.0;
    for (a, fa) in functions.iter().enumerate() {
        for (b, fb) in functions.iter().enumerate().skip(a) {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((weighted_dot(fa, fb, w) - target).abs());
        }
    }
    worst
}

fn largest_entry(phi: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in phi.iter().enumerate() {
        if v.abs() > phi[best].abs() {
            best = i;
        }
    }
    best
}

fn sign_convention_holds(phi: &[f64]) -> bool {
    phi.is_empty() || phi[largest_entry(phi)] >= 0.0
}

/// Flip `phi` so that its entry of largest magnitude (earliest on ties) is
/// positive.
pub fn apply_sign_convention(phi: &mut [f64]) {
    if phi.is_empty() {
        return;
    }
    if phi[largest_entry(phi)] < 0.0 {
        phi.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Pointwise grand mean of all curves.
pub fn grand_mean(cs: &CurveSet) -> Vec<f64> {
    let mut mean = vec![0.0; cs.grid().len()];
    for r in cs.records() {
        for (m, v) in mean.iter_mut().zip(&r.values) {
            *m += v;
        }
    }
    let n = cs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn centered_matrix(cs: &CurveSet, mean: &[f64]) -> DMatrix<f64> {
    let len = mean.len();
    DMatrix::from_fn(cs.len(), len, |i, l| cs.records()[i].values[l] - mean[l])
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Method-of-moments covariance estimates.
///
/// `K_T` averages `(y − μ)(y − μ)ᵀ` over all curves. `K_B` averages the cross
/// products of distinct curves of the same subject, pooling occasions, using
/// `Σ_{j≠k} d_j d_kᵀ = s sᵀ − Σ_j d_j d_jᵀ` with `s` the subject's sum of
/// centered curves. `K_W = K_T − K_B`.
pub fn estimate_covariances(cs: &CurveSet, mean: &[f64]) -> Result<CovariancePair> {
    if mean.len() != cs.grid().len() {
        return Err(Error::Dimension(format!(
            "mean has {} values for {} grid points",
            mean.len(),
            cs.grid().len()
        )));
    }
    let groups = cs.group_by_subject();
    let pairs: usize = groups.iter().map(|(_, idx)| idx.len() * (idx.len() - 1)).sum();
    if pairs == 0 {
        return Err(Error::WithinUnidentifiable);
    }
    let d = centered_matrix(cs, mean);
    let len = mean.len();
    let mut sums = DMatrix::zeros(groups.len(), len);
    for (g, (_, idx)) in groups.iter().enumerate() {
        for &i in idx {
            let mut row = sums.row_mut(g);
            row += d.row(i);
        }
    }
    let dtd = d.transpose() * &d;
    let sts = sums.transpose() * &sums;
    let total = symmetrize(&(&dtd / cs.len() as f64));
    let between = symmetrize(&((sts - &dtd) / pairs as f64));
    let within = &total - &between;
    Ok(CovariancePair { total, between, within })
}

/// Eigen-decomposition of the integral operator with kernel `k` under the
/// grid quadrature. Returns all `L` eigenvalues, clipped at zero and sorted
/// in descending order, and the matching eigenfunctions, orthonormal under
/// the grid inner product and oriented by the sign convention.
pub fn eigendecompose_operator(k: &DMatrix<f64>, grid: &Grid) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let len = grid.len();
    if k.nrows() != len || k.ncols() != len {
        return Err(Error::Dimension(format!(
            "{}x{} kernel on a grid of {len} points",
            k.nrows(),
            k.ncols()
        )));
    }
    let asym = (k - k.transpose()).amax();
    if !(asym <= SYMMETRY_TOL) {
        return Err(Error::NotSymmetric(asym));
    }
    let root_w: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let m = DMatrix::from_fn(len, len, |a, b| root_w[a] * 0.5 * (k[(a, b)] + k[(b, a)]) * root_w[b]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let functions = order
        .iter()
        .map(|&i| {
            let mut phi: Vec<f64> = (0..len).map(|l| eig.eigenvectors[(l, i)] / root_w[l]).collect();
            apply_sign_convention(&mut phi);
            phi
        })
        .collect();
    Ok((values, functions))
}

/// Number of components kept under `rule` for a descending spectrum.
///
/// With a PVE rule and zero total variance no component is kept.
pub fn select_components(eigenvalues: &[f64], rule: ComponentRule) -> Result<usize> {
    match rule {
        ComponentRule::Fixed(k) => {
            if k > eigenvalues.len() {
                return Err(Error::Config(format!(
                    "asked for {k} components but only {} are available",
                    eigenvalues.len()
                )));
            }
            Ok(k)
        }
        ComponentRule::Pve(pve) => {
            if !(pve > 0.0 && pve <= 1.0) {
                return Err(Error::Config(format!("pve = {pve} must lie in (0, 1]")));
            }
            let total: f64 = eigenvalues.iter().sum();
            if total <= 0.0 {
                return Ok(0);
            }
            let mut cum = 0.0;
            for (k, v) in eigenvalues.iter().enumerate() {
                cum += v;
                if cum / total >= pve - PVE_TOL {
                    return Ok(k + 1);
                }
            }
            Ok(eigenvalues.len())
        }
    }
}

fn explained(eigenvalues: &[f64], k: usize) -> f64 {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        0.0
    } else {
        eigenvalues[..k].iter().sum::<f64>() / total
    }
}

fn level_from_kernel(k: &DMatrix<f64>, grid: &Grid, rule: ComponentRule) -> Result<(Level, f64)> {
    if let ComponentRule::Pve(p) = rule {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("pve = {p} must lie in (0, 1]")));
        }
    }
    let (values, functions) = eigendecompose_operator(k, grid)?;
    let keep = select_components(&values, rule)?;
    let pve = explained(&values, keep);
    Ok((
        Level {
            eigenvalues: values[..keep].to_vec(),
            eigenfunctions: functions.into_iter().take(keep).collect(),
        },
        pve,
    ))
}

fn project_onto(centered: &[f64], level: &Level, w: &[f64]) -> Vec<f64> {
    level.eigenfunctions.iter().map(|phi| weighted_dot(centered, phi, w)).collect()
}

fn subtract_expansion(target: &mut [f64], scores: &[f64], level: &Level) {
    for (s, phi) in scores.iter().zip(&level.eigenfunctions) {
        for (t, p) in target.iter_mut().zip(phi) {
            *t -= s * p;
        }
    }
}

/// Fit the two-level model.
///
/// `sigma_e` is the mean squared residual, over curves and grid points, after
/// removing from each centered curve its subject-average level-1 projection
/// and then the level-2 projection of what remains.
pub fn fit_mfpca(cs: &CurveSet, options: &FitOptions) -> Result<MfpcaModel> {
    let grid = cs.grid().clone();
    let mean = grand_mean(cs);
    let cov = estimate_covariances(cs, &mean)?;
    let (level1, pve1) = level_from_kernel(&cov.between, &grid, options.level1)?;
    let (level2, pve2) = level_from_kernel(&cov.within, &grid, options.level2)?;

    let w = grid.weights();
    let groups = cs.group_by_subject();
    let mut sse = 0.0;
    for (_, idx) in &groups {
        let centered: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| cs.records()[i].values.iter().zip(&mean).map(|(y, m)| y - m).collect())
            .collect();
        let mut cbar = vec![0.0; level1.len()];
        for c in &centered {
            for (a, s) in cbar.iter_mut().zip(project_onto(c, &level1, w)) {
                *a += s;
            }
        }
        cbar.iter_mut().for_each(|a| *a /= idx.len() as f64);
        for mut r in centered {
            subtract_expansion(&mut r, &cbar, &level1);
            let ctilde = project_onto(&r, &level2, w);
            subtract_expansion(&mut r, &ctilde, &level2);
            sse += r.iter().map(|e| e * e).sum::<f64>();
        }
    }
    let sigma_e = sse / (cs.len() * grid.len()) as f64;

    let model = MfpcaModel {
        grid,
        mean,
        level1,
        level2,
        sigma_e,
        metadata: ModelMetadata {
            source: "fit_mfpca".into(),
            rule1: Some(options.level1),
            rule2: Some(options.level2),
            pve1,
            pve2,
            n_subjects: groups.len(),
            n_curves: cs.len(),
        },
    };
    model.validate()?;
    Ok(model)
}

/// Fit the single-level model to one curve per subject (typically the
/// output of [`crate::curves::subject_mean_curves`]). Only `options.level1`
/// is used; the covariance estimate uses denominator `N`.
pub fn fit_fpca(cs: &CurveSet, options: &FitOptions) -> Result<MfpcaModel> {
    let groups = cs.group_by_subject();
    if let Some((subject, idx)) = groups.iter().find(|(_, idx)| idx.len() > 1) {
        return Err(Error::Precondition(format!(
            "subject {subject:?} has {} curves; average each subject's curves first (subject_mean_curves)",
            idx.len()
        )));
    }
    let grid = cs.grid().clone();
    let mean = grand_mean(cs);
    let d = centered_matrix(cs, &mean);
    let total = symmetrize(&(d.transpose() * &d / cs.len() as f64));
    let (level1, pve1) = level_from_kernel(&total, &grid, options.level1)?;

    let w = grid.weights();
    let mut sse = 0.0;
    for r in cs.records() {
        let mut c: Vec<f64> = r.values.iter().zip(&mean).map(|(y, m)| y - m).collect();
        let s = project_onto(&c, &level1, w);
        subtract_expansion(&mut c, &s, &level1);
        sse += c.iter().map(|e| e * e).sum::<f64>();
    }
    let sigma_e = sse / (cs.len() * grid.len()) as f64;

    let model = MfpcaModel {
        grid,
        mean,
        level1,
        level2: Level::empty(),
        sigma_e,
        metadata: ModelMetadata {
            source: "fit_fpca".into(),
            rule1: Some(options.level1),
            rule2: None,
            pve1,
            pve2: 0.0,
            n_subjects: groups.len(),
            n_curves: cs.len(),
        },
    };
    model.validate()?;
    Ok(model)
}

/// Gram–Schmidt orthonormalization under the grid inner product followed by
/// the sign convention. Fails if a function is (numerically) in the span of
/// the previous ones.
pub fn orthonormalize(functions: &[Vec<f64>], grid: &Grid) -> Result<Vec<Vec<f64>>> {
    let w = grid.weights();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(functions.len());
    for (k, f) in functions.iter().enumerate() {
        if f.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "function {k} has {} values for {} grid points",
                f.len(),
                grid.len()
            )));
        }
        let norm0 = weighted_dot(f, f, w).sqrt();
        let mut v = f.clone();
        // two passes keep the result orthogonal to rounding level
        for _ in 0..2 {
            for q in &out {
                let c = weighted_dot(&v, q, w);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = weighted_dot(&v, &v, w).sqrt();
        if !(norm > 1e-10 * norm0.max(f64::MIN_POSITIVE)) {
            return Err(Error::Orthonormalization(format!(
                "function {k} is linearly dependent on the previous ones"
            )));
        }
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    for phi in &mut out {
        apply_sign_convention(phi);
    }
    Ok(out)
}
