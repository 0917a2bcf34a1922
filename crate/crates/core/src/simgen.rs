//! Synthetic two-occasion populations drawn from a reference model, and the
//! disease perturbations applied to the second group.
//!
//! A simulated subject takes one whole row of a reference between-score
//! matrix (bootstrap with replacement) and keeps it on every occasion; each
//! curve gets fresh within-subject scores from a multivariate normal fitted
//! to reference within-subject scores.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{CurveRecord, CurveSet, Grid};
use crate::error::{Error, Result};
use crate::mfpca::{orthonormalize, Level, MfpcaModel, ModelMetadata};

const CHOLESKY_JITTER: f64 = 1e-10;

/// Mix a base seed with a sequence of stream coordinates (splitmix64
/// finalizer). Streams keyed this way do not depend on execution order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `A · exp(−½ ((t − c)/τ)²)`.
pub fn gaussian_bump(t: f64, amplitude: f64, center: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::Config(format!("bump width must be positive, got {width}")));
    }
    Ok(bump(t, amplitude, center, width))
}

fn bump(t: f64, amplitude: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    amplitude * (-0.5 * z * z).exp()
}

/// A Gaussian bump `(amplitude, center, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl Bump {
    pub const fn new(amplitude: f64, center: f64, width: f64) -> Self {
        Bump {
            amplitude,
            center,
            width,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        bump(t, self.amplitude, self.center, self.width)
    }
}

/// Sample mean and covariance (denominator `n − 1`) of score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMoments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl ScoreMoments {
    /// Mean zero and diagonal covariance.
    pub fn diagonal(variances: &[f64]) -> Self {
        ScoreMoments {
            mean: vec![0.0; variances.len()],
            covariance: DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        }
    }
}

pub fn empirical_score_moments(scores: &[Vec<f64>]) -> Result<ScoreMoments> {
    let k = scores.first().map_or(0, Vec::len);
    if scores.len() < k + 1 || scores.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} score vectors of dimension {k}; need at least {}",
            scores.len(),
            (k + 1).max(2)
        )));
    }
    if scores.iter().any(|s| s.len() != k) {
        return Err(Error::Dimension("score vectors differ in length".into()));
    }
    let n = scores.len() as f64;
    let mean: Vec<f64> = (0..k).map(|c| scores.iter().map(|s| s[c]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(k, k);
    for s in scores {
        for a in 0..k {
            for b in 0..k {
                cov[(a, b)] += (s[a] - mean[a]) * (s[b] - mean[b]);
            }
        }
    }
    cov /= n - 1.0;
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(ScoreMoments { mean, covariance })
}

/// Lower-triangular factor `L` with `L Lᵀ = Σ`, retrying with a `1e-10`
/// diagonal jitter. An all-zero matrix factors to zero.
pub fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = cov.nrows();
    if cov.ncols() != k {
        return Err(Error::Dimension(format!("{}x{} covariance", k, cov.ncols())));
    }
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(k, k));
    }
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let jittered = cov + DMatrix::identity(k, k) * CHOLESKY_JITTER;
    jittered
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Covariance("Cholesky factorization failed after jitter".into()))
}

/// Curves per subject and occasion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveCount {
    Fixed(usize),
    /// Uniform on the inclusive range, drawn per subject and occasion.
    Range(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub n_subjects: usize,
    pub curves_per_subject: CurveCount,
    pub occasions: usize,
    pub seed: u64,
    /// Variance of independent pointwise noise added to every value.
    pub noise_variance: f64,
    /// Prefix of generated subject ids.
    pub subject_prefix: String,
}

impl PopulationSpec {
    pub fn new(n_subjects: usize, curves_per_subject: usize, seed: u64) -> Self {
        PopulationSpec {
            n_subjects,
            curves_per_subject: CurveCount::Fixed(curves_per_subject),
            occasions: 2,
            seed,
            noise_variance: 0.0,
            subject_prefix: "s".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        let counts_ok = match self.curves_per_subject {
            CurveCount::Fixed(n) => n >= 1,
            CurveCount::Range(lo, hi) => lo >= 1 && lo <= hi,
        };
        if self.n_subjects == 0 || self.occasions == 0 || !counts_ok {
            return Err(Error::Config("population counts must all be at least 1".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A population generated by [`PopulationGenerator::synthesize_detailed`].
#[derive(Debug, Clone)]
pub struct Population {
    pub curves: CurveSet,
    /// Per subject, the bootstrapped row of the between-score matrix.
    pub between_rows: Vec<usize>,
    pub subject_ids: Vec<String>,
}

/// Everything needed to draw populations from a reference model.
#[derive(Debug, Clone)]
pub struct PopulationGenerator {
    model: MfpcaModel,
    between_scores: Vec<Vec<f64>>,
    within_mean: Vec<f64>,
    within_factor: DMatrix<f64>,
}

impl PopulationGenerator {
    pub fn new(model: MfpcaModel, between_scores: Vec<Vec<f64>>, within: &ScoreMoments) -> Result<Self> {
        model.validate()?;
        if between_scores.is_empty() {
            return Err(Error::InsufficientData("between-score matrix has no rows".into()));
        }
        if let Some(row) = between_scores.iter().find(|r| r.len() != model.k1()) {
            return Err(Error::Dimension(format!(
                "between-score row of length {} for a model with {} level-1 components",
                row.len(),
                model.k1()
            )));
        }
        if within.mean.len() != model.k2() || within.covariance.nrows() != model.k2() {
            return Err(Error::Dimension(format!(
                "within-score moments of dimension {} for a model with {} level-2 components",
                within.mean.len(),
                model.k2()
            )));
        }
        let within_factor = covariance_factor(&within.covariance)?;
        Ok(PopulationGenerator {
            model,
            between_scores,
            within_mean: within.mean.clone(),
            within_factor,
        })
    }

    pub fn model(&self) -> &MfpcaModel {
        &self.model
    }

    pub fn between_scores(&self) -> &[Vec<f64>] {
        &self.between_scores
    }

    pub fn synthesize(&self, spec: &PopulationSpec) -> Result<CurveSet> {
        Ok(self.synthesize_detailed(spec)?.curves)
    }

    pub fn synthesize_detailed(&self, spec: &PopulationSpec) -> Result<Population> {
        spec.validate()?;
        let width = spec.n_subjects.to_string().len().max(3);
        let subjects: Vec<(String, usize, Vec<CurveRecord>)> = (0..spec.n_subjects)
            .into_par_iter()
            .map(|i| {
                let id = format!("{}{:0width$}", spec.subject_prefix, i + 1);
                let (row, records) = self.subject(&id, derive_seed(spec.seed, &[i as u64]), spec);
                (id, row, records)
            })
            .collect();
        let mut between_rows = Vec::with_capacity(subjects.len());
        let mut subject_ids = Vec::with_capacity(subjects.len());
        let mut records = Vec::new();
        for (id, row, recs) in subjects {
            subject_ids.push(id);
            between_rows.push(row);
            records.extend(recs);
        }
        Ok(Population {
            curves: CurveSet::new(self.model.grid.clone(), records)?,
            between_rows,
            subject_ids,
        })
    }

    fn subject(&self, id: &str, seed: u64, spec: &PopulationSpec) -> (usize, Vec<CurveRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = self.model.grid.len();
        let row = rng.random_range(0..self.between_scores.len());
        let mut base = self.model.mean.clone();
        add_expansion(&mut base, &self.between_scores[row], &self.model.level1);
        let noise_sd = spec.noise_variance.sqrt();
        let k2 = self.model.k2();
        let mut records = Vec::new();
        for m in 0..spec.occasions {
            let n = match spec.curves_per_subject {
                CurveCount::Fixed(n) => n,
                CurveCount::Range(lo, hi) => rng.random_range(lo..=hi),
            };
            let curve_width = n.to_string().len().max(2);
            for j in 0..n {
                let z = DVector::from_fn(k2, |_, _| StandardNormal.sample(&mut rng));
                let xi = &self.within_factor * z;
                let scores: Vec<f64> = (0..k2).map(|k| self.within_mean[k] + xi[k]).collect();
                let mut y = base.clone();
                add_expansion(&mut y, &scores, &self.model.level2);
                if noise_sd > 0.0 {
                    for v in y.iter_mut() {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *v += noise_sd * e;
                    }
                }
                debug_assert_eq!(y.len(), len);
                records.push(CurveRecord::new(
                    id,
                    (m + 1).to_string(),
                    format!("c{:0curve_width$}", j + 1),
                    y,
                ));
            }
        }
        (row, records)
    }
}

fn add_expansion(target: &mut [f64], scores: &[f64], level: &Level) {
    for (s, phi) in scores.iter().zip(&level.eigenfunctions) {
        target.iter_mut().zip(phi).for_each(|(t, p)| *t += s * p);
    }
}

/// One-shot form of [`PopulationGenerator`].
pub fn synthesize_population(
    model: &MfpcaModel,
    between_scores: &[Vec<f64>],
    within: &ScoreMoments,
    spec: &PopulationSpec,
) -> Result<CurveSet> {
    PopulationGenerator::new(model.clone(), between_scores.to_vec(), within)?.synthesize(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    NoChange,
    FlattenedT,
    ChangingT,
    AllFlattened,
    StElevation,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::NoChange,
        ScenarioKind::FlattenedT,
        ScenarioKind::ChangingT,
        ScenarioKind::AllFlattened,
        ScenarioKind::StElevation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::NoChange => "no_change",
            ScenarioKind::FlattenedT => "flattened_t",
            ScenarioKind::ChangingT => "changing_t",
            ScenarioKind::AllFlattened => "all_flattened",
            ScenarioKind::StElevation => "st_elevation",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind {name:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// `y · ∏ (1 − p_b(t))`
    Multiplicative,
    /// `y + Σ p_b(t)`
    Additive,
}

/// Unit at which a mixture amplitude is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureLevel {
    /// Once per subject, shared by all occasions and curves.
    Subject,
    /// Once per subject and occasion.
    Occasion,
    Curve,
}

/// Random amplitudes: when present, every bump's amplitude is replaced by a
/// value drawn from `amplitudes` with the given probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub amplitudes: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Mixture {
    fn draw(&self, u: f64) -> f64 {
        let mut cum = 0.0;
        for (a, p) in self.amplitudes.iter().zip(&self.probabilities) {
            cum += p;
            if u < cum {
                return *a;
            }
        }
        *self.amplitudes.last().expect("validated non-empty")
    }
}

pub const T_CENTER: f64 = 0.508;
pub const R_CENTER: f64 = 0.25;
pub const P_CENTER: f64 = 0.104;
pub const ST_CENTER: f64 = 0.37;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub bumps: Vec<Bump>,
    pub mixture: Option<Mixture>,
    pub mode: PerturbationMode,
    pub mixture_level: MixtureLevel,
}

impl ScenarioSpec {
    /// The default constants of each scenario.
    pub fn preset(kind: ScenarioKind) -> Self {
        let mult = |bumps: Vec<Bump>| ScenarioSpec {
            kind,
            bumps,
            mixture: None,
            mode: PerturbationMode::Multiplicative,
            mixture_level: MixtureLevel::Subject,
        };
        match kind {
            ScenarioKind::NoChange => mult(Vec::new()),
            ScenarioKind::FlattenedT => mult(vec![Bump::new(0.5, T_CENTER, 0.1)]),
            ScenarioKind::ChangingT => ScenarioSpec {
                mixture: Some(Mixture {
                    amplitudes: vec![0.2, 0.7],
                    probabilities: vec![0.5, 0.5],
                }),
                ..mult(vec![Bump::new(0.5, T_CENTER, 0.1)])
            },
            ScenarioKind::AllFlattened => mult(vec![
                Bump::new(0.2, P_CENTER, 0.1),
                Bump::new(0.2, R_CENTER, 0.1),
                Bump::new(0.2, T_CENTER, 0.1),
            ]),
            ScenarioKind::StElevation => ScenarioSpec {
                mode: PerturbationMode::Additive,
                ..mult(vec![Bump::new(120.0, ST_CENTER, 0.05)])
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.bumps {
            if !(b.width > 0.0) {
                return Err(Error::Config(format!("bump width must be positive, got {}", b.width)));
            }
            if !(b.center > 0.0 && b.center < 1.0) {
                return Err(Error::Config(format!("bump center {} must lie in (0, 1)", b.center)));
            }
        }
        if let Some(m) = &self.mixture {
            let total: f64 = m.probabilities.iter().sum();
            if m.amplitudes.is_empty()
                || m.amplitudes.len() != m.probabilities.len()
                || m.probabilities.iter().any(|p| !(*p >= 0.0))
                || (total - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(
                    "mixture needs matching amplitudes and nonnegative probabilities summing to 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn multiplier(&self, t: f64, amplitude: Option<f64>) -> f64 {
        self.bumps
            .iter()
            .map(|b| 1.0 - bump(t, amplitude.unwrap_or(b.amplitude), b.center, b.width))
            .product()
    }

    fn addend(&self, t: f64, amplitude: Option<f64>) -> f64 {
        self.bumps
            .iter()
            .map(|b| bump(t, amplitude.unwrap_or(b.amplitude), b.center, b.width))
            .sum()
    }

    /// Perturbation profile on `grid` for a given mixture amplitude.
    fn profile(&self, grid: &Grid, amplitude: Option<f64>) -> Vec<f64> {
        grid.points()
            .iter()
            .map(|&t| match self.mode {
                PerturbationMode::Multiplicative => self.multiplier(t, amplitude),
                PerturbationMode::Additive => self.addend(t, amplitude),
            })
            .collect()
    }
}

/// Optional overrides of a scenario preset, as read from a study
/// configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: String,
    /// Label in study output; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    /// Replaces all bumps of the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bumps: Option<Vec<Bump>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Mixture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PerturbationMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_level: Option<MixtureLevel>,
}

impl ScenarioConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.clone())
    }

    pub fn to_spec(&self) -> Result<ScenarioSpec> {
        let kind = ScenarioKind::parse(&self.kind)?;
        let mut spec = ScenarioSpec::preset(kind);
        if let Some(bumps) = &self.bumps {
            spec.bumps = bumps.clone();
        }
        for b in &mut spec.bumps {
            if let Some(a) = self.amplitude {
                b.amplitude = a;
            }
            if let Some(c) = self.center {
                b.center = c;
            }
            if let Some(w) = self.width {
                b.width = w;
            }
        }
        if let Some(m) = &self.mixture {
            spec.mixture = Some(m.clone());
        }
        if let Some(m) = self.mode {
            spec.mode = m;
        }
        if let Some(l) = self.mixture_level {
            spec.mixture_level = l;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Apply the scenario's perturbation to every curve. Mixture amplitudes are
/// drawn from streams keyed by `seed` and the subject's (and, depending on
/// the mixture level, occasion's or curve's) position in the set.
pub fn apply_scenario(cs: &CurveSet, spec: &ScenarioSpec, seed: u64) -> Result<CurveSet> {
    spec.validate()?;
    if spec.kind == ScenarioKind::NoChange && spec.bumps.is_empty() {
        return Ok(cs.clone());
    }
    let (lo, hi) = cs.grid().domain();
    if let Some(b) = spec.bumps.iter().find(|b| b.center < lo || b.center > hi) {
        return Err(Error::Config(format!(
            "bump center {} outside the grid domain [{lo}, {hi}]",
            b.center
        )));
    }
    let grid = cs.grid();
    let fixed_profile = if spec.mixture.is_none() {
        Some(spec.profile(grid, None))
    } else {
        None
    };

    // position of each record's subject and occasion for keyed draws
    let mut subject_index = std::collections::HashMap::new();
    let mut occasion_index = std::collections::HashMap::new();
    for r in cs.records() {
        let n = subject_index.len();
        subject_index.entry(r.subject_id.as_str()).or_insert(n);
        let n = occasion_index.len();
        occasion_index.entry(r.occasion_id.as_str()).or_insert(n);
    }

    let records = cs
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let profile = match (&fixed_profile, &spec.mixture) {
                (Some(p), _) => p.clone(),
                (None, Some(mixture)) => {
                    let s = subject_index[r.subject_id.as_str()] as u64;
                    let key = match spec.mixture_level {
                        MixtureLevel::Subject => vec![s],
                        MixtureLevel::Occasion => vec![s, occasion_index[r.occasion_id.as_str()] as u64],
                        MixtureLevel::Curve => vec![s, u64::MAX, i as u64],
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &key));
                    let a = mixture.draw(rng.random::<f64>());
                    spec.profile(grid, Some(a))
                }
                (None, None) => unreachable!(),
            };
            let values = match spec.mode {
                PerturbationMode::Multiplicative => r.values.iter().zip(&profile).map(|(y, f)| y * f).collect(),
                PerturbationMode::Additive => r.values.iter().zip(&profile).map(|(y, a)| y + a).collect(),
            };
            CurveRecord {
                values,
                ..r.clone()
            }
        })
        .collect();
    CurveSet::new(grid.clone(), records)
}

/// Ingredients of a synthetic reference model: a mean built from bumps and
/// per-level localized seed functions `(center, width)` that are
/// orthonormalized in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModelParams {
    pub grid_len: usize,
    pub mean_bumps: Vec<Bump>,
    pub level1_seeds: Vec<(f64, f64)>,
    pub level1_eigenvalues: Vec<f64>,
    pub level2_seeds: Vec<(f64, f64)>,
    pub level2_eigenvalues: Vec<f64>,
    pub sigma_e: f64,
}

impl SyntheticModelParams {
    /// ECG-like cycle: P, R and T waves at the registration landmarks.
    pub fn ecg() -> Self {
        SyntheticModelParams {
            grid_len: 256,
            mean_bumps: vec![
                Bump::new(100.0, P_CENTER, 0.02),
                Bump::new(800.0, R_CENTER, 0.015),
                Bump::new(200.0, T_CENTER, 0.04),
            ],
            level1_seeds: vec![(R_CENTER, 0.015), (T_CENTER, 0.04), (ST_CENTER, 0.05), (P_CENTER, 0.02)],
            level1_eigenvalues: vec![96.0, 28.0, 9.0, 8.0],
            level2_seeds: vec![(P_CENTER, 0.03), (T_CENTER, 0.05), (R_CENTER, 0.02), (0.7, 0.15)],
            level2_eigenvalues: vec![48.0, 20.0, 14.0, 6.6],
            sigma_e: 1.0,
        }
    }

    /// Gait-like cycle (joint angle): a stance bump early and a larger swing
    /// bump late in the cycle.
    pub fn gait() -> Self {
        SyntheticModelParams {
            grid_len: 101,
            mean_bumps: vec![Bump::new(20.0, 0.15, 0.08), Bump::new(60.0, 0.72, 0.08)],
            level1_seeds: vec![(0.72, 0.08), (0.15, 0.06), (0.45, 0.1), (0.9, 0.06)],
            level1_eigenvalues: vec![30.0, 15.0, 8.0, 4.0],
            level2_seeds: vec![(0.72, 0.1), (0.3, 0.1), (0.05, 0.05)],
            level2_eigenvalues: vec![6.0, 3.0, 1.5],
            sigma_e: 0.5,
        }
    }
}

/// Build a model from [`SyntheticModelParams`].
pub fn synthetic_reference_model(params: &SyntheticModelParams) -> Result<MfpcaModel> {
    if params.level1_seeds.len() != params.level1_eigenvalues.len()
        || params.level2_seeds.len() != params.level2_eigenvalues.len()
    {
        return Err(Error::Config("one eigenvalue is needed per seed function".into()));
    }
    let grid = Grid::uniform(params.grid_len)?;
    let seeds = |s: &[(f64, f64)]| -> Result<Vec<Vec<f64>>> {
        let raw: Result<Vec<Vec<f64>>> = s
            .iter()
            .map(|&(c, w)| grid.points().iter().map(|&t| gaussian_bump(t, 1.0, c, w)).collect())
            .collect();
        orthonormalize(&raw?, &grid)
    };
    let mean = grid
        .points()
        .iter()
        .map(|&t| params.mean_bumps.iter().map(|b| b.at(t)).sum())
        .collect();
    let total1: f64 = params.level1_eigenvalues.iter().sum();
    let total2: f64 = params.level2_eigenvalues.iter().sum();
    let model = MfpcaModel {
        level1: Level {
            eigenvalues: params.level1_eigenvalues.clone(),
            eigenfunctions: seeds(&params.level1_seeds)?,
        },
        level2: Level {
            eigenvalues: params.level2_eigenvalues.clone(),
            eigenfunctions: seeds(&params.level2_seeds)?,
        },
        grid,
        mean,
        sigma_e: params.sigma_e,
        metadata: ModelMetadata {
            source: "synthetic".into(),
            rule1: None,
            rule2: None,
            pve1: if total1 > 0.0 { 1.0 } else { 0.0 },
            pve2: if total2 > 0.0 { 1.0 } else { 0.0 },
            n_subjects: 0,
            n_curves: 0,
        },
    };
    model.validate()?;
    Ok(model)
}

/// `n` between-score rows with independent `N(0, λ_k)` entries.
pub fn gaussian_score_rows(eigenvalues: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            eigenvalues
                .iter()
                .map(|l| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    l.sqrt() * z
                })
                .collect()
        })
        .collect()
}
