//! Simulation study (summaries × scenarios × replications) and the
//! convergent-validity / responsiveness workflow.
//!
//! Each replication draws a healthy group and a second group from the same
//! reference model, perturbs the second group with every configured
//! scenario, and scores each candidate summary on reliability (ICC across
//! the two occasions) and known-groups discrimination (Mann–Whitney p and
//! AUC).

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curves::{CurveSet, Grid, POOLED_TOKEN};
use crate::error::{Error, Result};
use crate::mfpca::{fit_fpca, FitOptions, MfpcaModel};
use crate::project::{fpca_project, mfpca_project, Pooling};
use crate::simgen::{
    derive_seed, empirical_score_moments, gaussian_score_rows, synthetic_reference_model, CurveCount,
    PopulationGenerator, PopulationSpec, ScenarioConfig, ScenarioKind, ScenarioSpec, ScoreMoments,
    SyntheticModelParams, P_CENTER, R_CENTER, T_CENTER,
};
use crate::valmetrics::{group_test, icc, ks_uniform, ols_simple};

pub const DEFAULT_REPLICATIONS: usize = 200;
pub const DEFAULT_GROUP_SIZE: usize = 59;
pub const DEFAULT_CURVES_PER_OCCASION: usize = 20;
pub const DEFAULT_SWING_WINDOW: (f64, f64) = (0.5, 1.0);
/// Score components used as summaries in the study.
pub const STUDY_COMPONENTS: usize = 4;

/// How a summary turns a unit's curves into one number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryKind {
    /// Mean over the unit's curves of the value at a landmark grid point.
    ScalarAmplitude { time: f64 },
    /// Score on the reference FPCA of the unit's average curve (1-based).
    FpcaScore { component: usize },
    /// Between-subject EBLUP score on the reference MFPCA (1-based).
    MfpcaScore { component: usize },
    /// Mean over the unit's curves of the maximum inside `[lo, hi]`.
    MeanPeak { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDefinition {
    pub name: String,
    #[serde(flatten)]
    pub kind: SummaryKind,
}

impl SummaryDefinition {
    pub fn new(name: impl Into<String>, kind: SummaryKind) -> Self {
        SummaryDefinition {
            name: name.into(),
            kind,
        }
    }

    /// P, R and T amplitudes, then the first four FPCA and MFPCA scores.
    pub fn ecg_defaults() -> Vec<Self> {
        let mut defs = vec![
            Self::new("p_amplitude", SummaryKind::ScalarAmplitude { time: P_CENTER }),
            Self::new("r_amplitude", SummaryKind::ScalarAmplitude { time: R_CENTER }),
            Self::new("t_amplitude", SummaryKind::ScalarAmplitude { time: T_CENTER }),
        ];
        for c in 1..=STUDY_COMPONENTS {
            defs.push(Self::new(format!("fpca_{c}"), SummaryKind::FpcaScore { component: c }));
        }
        for c in 1..=STUDY_COMPONENTS {
            defs.push(Self::new(format!("mfpca_{c}"), SummaryKind::MfpcaScore { component: c }));
        }
        defs
    }

    /// First three MFPCA scores and the swing-phase peak.
    pub fn gait_defaults() -> Vec<Self> {
        let mut defs: Vec<Self> = (1..=3)
            .map(|c| Self::new(format!("mfpca_{c}"), SummaryKind::MfpcaScore { component: c }))
            .collect();
        let (lo, hi) = DEFAULT_SWING_WINDOW;
        defs.push(Self::new("mean_peak", SummaryKind::MeanPeak { lo, hi }));
        defs
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SummaryKind::FpcaScore { component } | SummaryKind::MfpcaScore { component } if component == 0 => Err(
                Error::Config(format!("summary {:?}: components are numbered from 1", self.name)),
            ),
            SummaryKind::MeanPeak { lo, hi } if !(lo < hi) => Err(Error::Config(format!(
                "summary {:?}: window [{lo}, {hi}] is empty",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

/// Summary values, one column per summary aligned with `units`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    /// `(subject, occasion)`; the occasion is [`POOLED_TOKEN`] at subject level.
    pub units: Vec<(String, String)>,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SummaryTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }
}

/// Whether summaries are computed per (subject, occasion) or per subject
/// over all of its curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitLevel {
    Occasion,
    Subject,
}

/// Reference models the score summaries project onto.
#[derive(Debug, Clone, Copy, Default)]
pub struct SummaryModels<'a> {
    pub mfpca: Option<&'a MfpcaModel>,
    pub fpca: Option<&'a MfpcaModel>,
}

/// Grid index of a landmark time; the nearest grid point must lie within
/// half a grid step.
pub fn landmark_index(grid: &Grid, time: f64) -> Result<usize> {
    let idx = grid.nearest_index(time);
    let nearest = grid.points()[idx];
    let tolerance = 0.5 * grid.max_step() + 1e-12;
    if (nearest - time).abs() > tolerance || !time.is_finite() {
        return Err(Error::LandmarkGrid {
            time,
            nearest,
            tolerance,
        });
    }
    Ok(idx)
}

pub fn scalar_summaries(cs: &CurveSet, landmarks: &crate::preprocess::LandmarkSet) -> Result<SummaryTable> {
    let defs: Vec<SummaryDefinition> = landmarks
        .names()
        .iter()
        .zip(landmarks.times())
        .map(|(n, &t)| SummaryDefinition::new(n.clone(), SummaryKind::ScalarAmplitude { time: t }))
        .collect();
    compute_summaries(cs, &defs, SummaryModels::default(), UnitLevel::Occasion)
}

pub fn mean_peak(cs: &CurveSet, window: (f64, f64)) -> Result<SummaryTable> {
    let def = SummaryDefinition::new(
        "mean_peak",
        SummaryKind::MeanPeak {
            lo: window.0,
            hi: window.1,
        },
    );
    compute_summaries(cs, &[def], SummaryModels::default(), UnitLevel::Occasion)
}

pub fn compute_summaries(
    cs: &CurveSet,
    defs: &[SummaryDefinition],
    models: SummaryModels<'_>,
    level: UnitLevel,
) -> Result<SummaryTable> {
    let groups: Vec<((String, String), Vec<usize>)> = match level {
        UnitLevel::Occasion => cs.group_by_unit(),
        UnitLevel::Subject => cs
            .group_by_subject()
            .into_iter()
            .map(|(s, idx)| ((s, POOLED_TOKEN.to_string()), idx))
            .collect(),
    };
    let grid = cs.grid();
    let records = cs.records();
    let unit_mean = |idx: &[usize], f: &dyn Fn(&[f64]) -> f64| -> f64 {
        idx.iter().map(|&i| f(&records[i].values)).sum::<f64>() / idx.len() as f64
    };

    let mut fpca_scores: Option<Vec<Vec<f64>>> = None;
    let mut mfpca_scores: Option<HashMap<(String, String), Vec<f64>>> = None;
    let mut values = Vec::with_capacity(defs.len());
    for def in defs {
        def.validate()?;
        let column: Vec<f64> = match def.kind {
            SummaryKind::ScalarAmplitude { time } => {
                let l = landmark_index(grid, time)?;
                groups.iter().map(|(_, idx)| unit_mean(idx, &|v| v[l])).collect()
            }
            SummaryKind::MeanPeak { lo, hi } => {
                let cols: Vec<usize> = (0..grid.len())
                    .filter(|&j| grid.points()[j] >= lo && grid.points()[j] <= hi)
                    .collect();
                if cols.is_empty() {
                    return Err(Error::Config(format!(
                        "summary {:?}: window [{lo}, {hi}] contains no grid point",
                        def.name
                    )));
                }
                let peak = |v: &[f64]| cols.iter().map(|&j| v[j]).fold(f64::NEG_INFINITY, f64::max);
                groups.iter().map(|(_, idx)| unit_mean(idx, &peak)).collect()
            }
            SummaryKind::FpcaScore { component } => {
                let model = models
                    .fpca
                    .ok_or_else(|| Error::Config(format!("summary {:?} needs an FPCA reference model", def.name)))?;
                check_component(&def.name, component, model.k1())?;
                if fpca_scores.is_none() {
                    if !grid.same_points(&model.grid) {
                        return Err(Error::Dimension("curve grid differs from the FPCA model grid".into()));
                    }
                    let scores: Result<Vec<Vec<f64>>> = groups
                        .iter()
                        .map(|(_, idx)| {
                            let mut mean = vec![0.0; grid.len()];
                            for &i in idx {
                                mean.iter_mut().zip(&records[i].values).for_each(|(m, v)| *m += v);
                            }
                            mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
                            fpca_project(model, &mean)
                        })
                        .collect();
                    fpca_scores = Some(scores?);
                }
                let scores = fpca_scores.as_ref().expect("computed above");
                scores.iter().map(|s| s[component - 1]).collect()
            }
            SummaryKind::MfpcaScore { component } => {
                let model = models
                    .mfpca
                    .ok_or_else(|| Error::Config(format!("summary {:?} needs an MFPCA reference model", def.name)))?;
                check_component(&def.name, component, model.k1())?;
                if mfpca_scores.is_none() {
                    let pooling = match level {
                        UnitLevel::Occasion => Pooling::Occasion,
                        UnitLevel::Subject => Pooling::Subject,
                    };
                    let (table, _) = mfpca_project(model, cs, pooling)?;
                    let map = table
                        .between
                        .into_iter()
                        .map(|b| {
                            let occasion = b.occasion_id.unwrap_or_else(|| POOLED_TOKEN.to_string());
                            ((b.subject_id, occasion), b.eblup)
                        })
                        .collect();
                    mfpca_scores = Some(map);
                }
                let scores = mfpca_scores.as_ref().expect("computed above");
                groups.iter().map(|(key, _)| scores[key][component - 1]).collect()
            }
        };
        values.push(column);
    }
    Ok(SummaryTable {
        units: groups.into_iter().map(|(k, _)| k).collect(),
        names: defs.iter().map(|d| d.name.clone()).collect(),
        values,
    })
}

fn check_component(name: &str, component: usize, available: usize) -> Result<()> {
    if component == 0 || component > available {
        return Err(Error::Config(format!(
            "summary {name:?} asks for component {component} but the model has {available}"
        )));
    }
    Ok(())
}

/// Which subjects enter the ICC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IccPooling {
    #[default]
    BothGroups,
    Group1,
}

/// Which summary value enters the group comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTestOccasion {
    #[default]
    First,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(default = "default_group_size")]
    pub n_subjects: usize,
    #[serde(default = "default_curves")]
    pub curves_per_subject: CurveCount,
    #[serde(default = "default_occasions")]
    pub occasions: usize,
    #[serde(default)]
    pub noise_variance: f64,
}

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

fn default_curves() -> CurveCount {
    CurveCount::Fixed(DEFAULT_CURVES_PER_OCCASION)
}

fn default_occasions() -> usize {
    2
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_subjects: DEFAULT_GROUP_SIZE,
            curves_per_subject: default_curves(),
            occasions: 2,
            noise_variance: 0.0,
        }
    }
}

/// Source of the reference model and score distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// Built-in ECG-like model; the between-score matrix has `n_rows` rows
    /// and the FPCA reference is fitted to a cohort with `fpca_curves`
    /// curves per subject and occasion.
    SyntheticEcg {
        #[serde(default = "default_group_size")]
        n_rows: usize,
        #[serde(default = "default_fpca_curves")]
        fpca_curves: usize,
    },
    /// Model files and score tables; relative paths resolve against the
    /// configuration file's directory.
    Files {
        mfpca: PathBuf,
        fpca: PathBuf,
        between_scores: PathBuf,
        within_scores: PathBuf,
    },
}

fn default_fpca_curves() -> usize {
    DEFAULT_CURVES_PER_OCCASION
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig::SyntheticEcg {
            n_rows: DEFAULT_GROUP_SIZE,
            fpca_curves: DEFAULT_CURVES_PER_OCCASION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub icc_pooling: IccPooling,
    #[serde(default)]
    pub group_test_occasion: GroupTestOccasion,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default = "default_scenarios", rename = "scenario")]
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default = "SummaryDefinition::ecg_defaults", rename = "summary")]
    pub summaries: Vec<SummaryDefinition>,
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_scenarios() -> Vec<ScenarioConfig> {
    ScenarioKind::ALL
        .iter()
        .map(|k| ScenarioConfig {
            kind: k.name().into(),
            ..Default::default()
        })
        .collect()
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replications: DEFAULT_REPLICATIONS,
            icc_pooling: IccPooling::default(),
            group_test_occasion: GroupTestOccasion::default(),
            population: PopulationConfig::default(),
            reference: ReferenceConfig::default(),
            scenarios: default_scenarios(),
            summaries: SummaryDefinition::ecg_defaults(),
        }
    }
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: StudyConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 (hex) of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml_string()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.population.occasions < 2 {
            return Err(Error::Config("the study needs at least two occasions".into()));
        }
        if self.population.n_subjects < 2 {
            return Err(Error::Config("each group needs at least two subjects".into()));
        }
        if self.scenarios.is_empty() || self.summaries.is_empty() {
            return Err(Error::Config("the study needs at least one scenario and one summary".into()));
        }
        let mut labels = BTreeSet::new();
        for s in &self.scenarios {
            s.to_spec()?;
            if !labels.insert(s.label()) {
                return Err(Error::Config(format!("duplicate scenario {:?}", s.label())));
            }
        }
        let mut names = BTreeSet::new();
        for d in &self.summaries {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate summary {:?}", d.name)));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Models and score distributions a study draws from.
#[derive(Debug, Clone)]
pub struct StudyReference {
    pub mfpca: MfpcaModel,
    pub fpca: MfpcaModel,
    pub between_scores: Vec<Vec<f64>>,
    pub within: ScoreMoments,
}

impl StudyReference {
    pub fn synthetic_ecg(n_rows: usize, fpca_curves: usize, seed: u64) -> Result<Self> {
        let mfpca = synthetic_reference_model(&SyntheticModelParams::ecg())?;
        let between_scores = gaussian_score_rows(&mfpca.level1.eigenvalues, n_rows, derive_seed(seed, &[0]));
        let within = ScoreMoments::diagonal(&mfpca.level2.eigenvalues);
        let generator = PopulationGenerator::new(mfpca.clone(), between_scores.clone(), &within)?;
        let mut spec = PopulationSpec::new(n_rows, fpca_curves, derive_seed(seed, &[1]));
        spec.subject_prefix = "ref_s".into();
        let cohort = generator.synthesize(&spec)?;
        let fpca = fit_fpca(
            &crate::curves::subject_mean_curves(&cohort),
            &FitOptions::fixed(STUDY_COMPONENTS, 0),
        )?;
        Ok(StudyReference {
            mfpca,
            fpca,
            between_scores,
            within,
        })
    }

    /// Build the reference a configuration names. The synthetic reference
    /// is derived from `seed`.
    pub fn from_config(config: &ReferenceConfig, base_dir: &Path, seed: u64) -> Result<Self> {
        match config {
            ReferenceConfig::SyntheticEcg { n_rows, fpca_curves } => {
                Self::synthetic_ecg(*n_rows, *fpca_curves, derive_seed(seed, &[u64::MAX]))
            }
            ReferenceConfig::Files {
                mfpca,
                fpca,
                between_scores,
                within_scores,
            } => {
                let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let within = empirical_score_moments(&read_score_matrix(resolve(within_scores))?)?;
                Ok(StudyReference {
                    mfpca: MfpcaModel::load(resolve(mfpca))?,
                    fpca: MfpcaModel::load(resolve(fpca))?,
                    between_scores: read_score_matrix(resolve(between_scores))?,
                    within,
                })
            }
        }
    }

    /// Every file this reference was read from.
    pub fn input_files(config: &ReferenceConfig, base_dir: &Path) -> Vec<PathBuf> {
        match config {
            ReferenceConfig::SyntheticEcg { .. } => Vec::new(),
            ReferenceConfig::Files {
                mfpca,
                fpca,
                between_scores,
                within_scores,
            } => [mfpca, fpca, between_scores, within_scores]
                .into_iter()
                .map(|p| if p.is_absolute() { p.clone() } else { base_dir.join(p) })
                .collect(),
        }
    }
}

/// Numeric CSV with a header row; every row is one score vector.
pub fn read_score_matrix(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format {
            row: r + 2,
            message: e.to_string(),
        })?;
        let row: Result<Vec<f64>> = record
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 2,
                    column: c + 1,
                    value: v.to_string(),
                })
            })
            .collect();
        rows.push(row?);
    }
    Ok(rows)
}

/// Performance measures of one summary in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub scenario: String,
    pub summary: String,
    pub replication: usize,
    pub seed: u64,
    pub icc_a1: f64,
    pub icc_c1: f64,
    pub mw_p: f64,
    /// Directional: chance that a group-2 value exceeds a group-1 value.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub summary: String,
    pub replications: usize,
    pub mean_icc_a1: f64,
    pub mean_icc_c1: f64,
    pub mean_mw_p: f64,
    pub mean_auc: f64,
    /// `max(mean_auc, 1 − mean_auc)`.
    pub mean_auc_oriented: f64,
    /// Kolmogorov–Smirnov distance of the Mann–Whitney p-values from uniform.
    pub ks_mw_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub per_replication: Vec<ReplicationRow>,
    pub aggregate: Vec<AggregateRow>,
    pub config_hash: String,
    pub seed: u64,
    pub replications: usize,
}

impl StudyResult {
    pub fn aggregate_for(&self, scenario: &str, summary: &str) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|a| a.scenario == scenario && a.summary == summary)
    }

    pub fn write_per_replication(&self, w: impl std::io::Write) -> Result<()> {
        write_rows(&self.per_replication, w)
    }

    pub fn write_aggregate(&self, w: impl std::io::Write) -> Result<()> {
        write_rows(&self.aggregate, w)
    }
}

fn write_rows<T: Serialize>(rows: &[T], w: impl std::io::Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer.serialize(row).map_err(csv_error)?;
    }
    writer.flush().map_err(|e| Error::io("<output>", e))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format {
        row: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Means over replications, grouped by (scenario, summary) in first-seen
/// order.
pub fn aggregate(rows: &[ReplicationRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&ReplicationRow>> = HashMap::new();
    for r in rows {
        let key = (r.scenario.clone(), r.summary.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            let mean = |f: fn(&ReplicationRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean_auc = mean(|r| r.auc);
            let p: Vec<f64> = g.iter().map(|r| r.mw_p).collect();
            AggregateRow {
                scenario: key.0,
                summary: key.1,
                replications: g.len(),
                mean_icc_a1: mean(|r| r.icc_a1),
                mean_icc_c1: mean(|r| r.icc_c1),
                mean_mw_p: mean(|r| r.mw_p),
                mean_auc,
                mean_auc_oriented: mean_auc.max(1.0 - mean_auc),
                ks_mw_p: ks_uniform(&p),
            }
        })
        .collect()
}

/// Run every replication on a pool of `workers` threads. Output does not
/// depend on `workers`.
pub fn run_study(reference: &StudyReference, config: &StudyConfig, seed: u64, workers: usize) -> Result<StudyResult> {
    config.validate()?;
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let scenarios: Vec<(String, ScenarioSpec)> = config
        .scenarios
        .iter()
        .map(|s| Ok((s.label(), s.to_spec()?)))
        .collect::<Result<_>>()?;
    let generator = PopulationGenerator::new(
        reference.mfpca.clone(),
        reference.between_scores.clone(),
        &reference.within,
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let per_rep: Vec<Result<Vec<ReplicationRow>>> = pool.install(|| {
        (0..config.replications)
            .into_par_iter()
            .map(|r| replicate(reference, &generator, config, &scenarios, seed, r))
            .collect()
    });
    let mut by_rep = Vec::with_capacity(per_rep.len());
    for rows in per_rep {
        by_rep.push(rows?);
    }
    // scenario-major, then summary, then replication
    let mut per_replication: Vec<ReplicationRow> = by_rep.into_iter().flatten().collect();
    let scenario_rank: HashMap<&str, usize> = scenarios.iter().enumerate().map(|(i, s)| (s.0.as_str(), i)).collect();
    let summary_rank: HashMap<&str, usize> = config
        .summaries
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    per_replication.sort_by_key(|r| {
        (
            scenario_rank[r.scenario.as_str()],
            summary_rank[r.summary.as_str()],
            r.replication,
        )
    });
    let aggregate = aggregate(&per_replication);
    Ok(StudyResult {
        per_replication,
        aggregate,
        config_hash: config.hash()?,
        seed,
        replications: config.replications,
    })
}

/// Seed of replication `r` under base seed `seed`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, &[r as u64])
}

fn replicate(
    reference: &StudyReference,
    generator: &PopulationGenerator,
    config: &StudyConfig,
    scenarios: &[(String, ScenarioSpec)],
    seed: u64,
    r: usize,
) -> Result<Vec<ReplicationRow>> {
    let rep_seed = replication_seed(seed, r);
    let wrap = |scenario: &str| {
        let scenario = scenario.to_string();
        move |e: Error| Error::Replication {
            scenario,
            replication: r,
            seed: rep_seed,
            source: Box::new(e),
        }
    };
    let models = SummaryModels {
        mfpca: Some(&reference.mfpca),
        fpca: Some(&reference.fpca),
    };
    let population = |group: u64| -> Result<CurveSet> {
        let spec = PopulationSpec {
            n_subjects: config.population.n_subjects,
            curves_per_subject: config.population.curves_per_subject,
            occasions: config.population.occasions,
            seed: derive_seed(rep_seed, &[group]),
            noise_variance: config.population.noise_variance,
            subject_prefix: format!("g{group}_s"),
        };
        generator.synthesize(&spec)
    };
    let group1 = population(1).map_err(wrap("group1"))?;
    let group2 = population(2).map_err(wrap("group2"))?;
    let table1 = compute_summaries(&group1, &config.summaries, models, UnitLevel::Occasion).map_err(wrap("group1"))?;

    let mut rows = Vec::new();
    for (s, (label, spec)) in scenarios.iter().enumerate() {
        let perturbed = apply_scenario_seeded(&group2, spec, rep_seed, s).map_err(wrap(label))?;
        let table2 =
            compute_summaries(&perturbed, &config.summaries, models, UnitLevel::Occasion).map_err(wrap(label))?;
        for (c, name) in config.summaries.iter().map(|d| &d.name).enumerate() {
            let (icc_res, test) = measures(&table1, &table2, c, config).map_err(wrap(label))?;
            rows.push(ReplicationRow {
                scenario: label.clone(),
                summary: name.clone(),
                replication: r,
                seed: rep_seed,
                icc_a1: icc_res.icc_a1,
                icc_c1: icc_res.icc_c1,
                mw_p: test.p_value,
                auc: test.auc,
            });
        }
    }
    Ok(rows)
}

fn apply_scenario_seeded(cs: &CurveSet, spec: &ScenarioSpec, rep_seed: u64, s: usize) -> Result<CurveSet> {
    crate::simgen::apply_scenario(cs, spec, derive_seed(rep_seed, &[3, s as u64]))
}

/// Per subject, the summary values ordered by occasion.
fn subject_rows(table: &SummaryTable, column: usize) -> Vec<Vec<f64>> {
    let mut order: Vec<&str> = Vec::new();
    let mut rows: HashMap<&str, Vec<f64>> = HashMap::new();
    for ((subject, _), v) in table.units.iter().zip(&table.values[column]) {
        rows.entry(subject.as_str())
            .or_insert_with(|| {
                order.push(subject);
                Vec::new()
            })
            .push(*v);
    }
    order.into_iter().map(|s| rows.remove(s).expect("inserted")).collect()
}

fn measures(
    table1: &SummaryTable,
    table2: &SummaryTable,
    column: usize,
    config: &StudyConfig,
) -> Result<(crate::valmetrics::IccResult, crate::valmetrics::GroupTestResult)> {
    let rows1 = subject_rows(table1, column);
    let rows2 = subject_rows(table2, column);
    let icc_rows: Vec<Vec<f64>> = match config.icc_pooling {
        IccPooling::BothGroups => rows1.iter().chain(&rows2).cloned().collect(),
        IccPooling::Group1 => rows1.clone(),
    };
    let icc_res = icc(&icc_rows)?;
    let pick = |rows: &[Vec<f64>]| -> Vec<f64> {
        rows.iter()
            .map(|r| match config.group_test_occasion {
                GroupTestOccasion::First => r[0],
                GroupTestOccasion::Average => r.iter().sum::<f64>() / r.len() as f64,
            })
            .collect()
    };
    let test = group_test(&pick(&rows1), &pick(&rows2))?;
    Ok((icc_res, test))
}

/// One clinical outcome measured under condition A and optionally B.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalOutcome {
    pub name: String,
    pub condition_a: Vec<f64>,
    pub condition_b: Option<Vec<f64>>,
}

/// Clinical scores, one row per subject. On disk: a CSV with a
/// `subject_id` column and `<outcome>_a` / `<outcome>_b` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalTable {
    pub subject_ids: Vec<String>,
    pub outcomes: Vec<ClinicalOutcome>,
}

impl ClinicalTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }

    pub fn read(reader: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = reader.headers().map_err(csv_error)?.clone();
        if headers.get(0).map(str::trim) != Some("subject_id") {
            return Err(Error::Format {
                row: 1,
                message: "first clinical column must be subject_id".into(),
            });
        }
        // (outcome index, is condition B) per column after the first
        let mut names: Vec<String> = Vec::new();
        let mut columns = Vec::new();
        for h in headers.iter().skip(1) {
            let h = h.trim();
            let (name, b) = if let Some(n) = h.strip_suffix("_a") {
                (n, false)
            } else if let Some(n) = h.strip_suffix("_b") {
                (n, true)
            } else {
                return Err(Error::Format {
                    row: 1,
                    message: format!("clinical column {h:?} must end in _a or _b"),
                });
            };
            let idx = names.iter().position(|n| n == name).unwrap_or_else(|| {
                names.push(name.to_string());
                names.len() - 1
            });
            if columns.contains(&(idx, b)) {
                return Err(Error::Format {
                    row: 1,
                    message: format!("duplicate clinical column {h:?}"),
                });
            }
            columns.push((idx, b));
        }
        for (i, n) in names.iter().enumerate() {
            if !columns.contains(&(i, false)) {
                return Err(Error::Format {
                    row: 1,
                    message: format!("clinical outcome {n:?} has no condition A column"),
                });
            }
        }
        let mut subject_ids = Vec::new();
        let mut a: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut b: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut seen = BTreeSet::new();
        for (r, record) in reader.records().enumerate() {
            let row = r + 2;
            let record = record.map_err(csv_error)?;
            let id = record.get(0).unwrap_or("").trim().to_string();
            if id.is_empty() || !seen.insert(id.clone()) {
                return Err(Error::Format {
                    row,
                    message: format!("missing or duplicate subject id {id:?}"),
                });
            }
            for (c, &(idx, is_b)) in columns.iter().enumerate() {
                let v = record.get(c + 1).unwrap_or("").trim();
                let x = v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                    row,
                    column: c + 2,
                    value: v.to_string(),
                })?;
                if is_b {
                    b[idx].push(x);
                } else {
                    a[idx].push(x);
                }
            }
            subject_ids.push(id);
        }
        let outcomes = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| ClinicalOutcome {
                name,
                condition_a: std::mem::take(&mut a[i]),
                condition_b: if columns.contains(&(i, true)) {
                    Some(std::mem::take(&mut b[i]))
                } else {
                    None
                },
            })
            .collect();
        Ok(ClinicalTable { subject_ids, outcomes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    CrossSectional,
    Change,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionStatus {
    Ok,
    /// The summary or the clinical values do not vary; no fit is reported.
    ZeroVariance,
}

/// One regression of a summary on a clinical outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub analysis: Analysis,
    pub summary: String,
    pub outcome: String,
    pub n: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub p_value: Option<f64>,
    pub status: RegressionStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
}

impl ValidationReport {
    pub fn find(&self, analysis: Analysis, summary: &str, outcome: &str) -> Option<&ValidationRow> {
        self.rows
            .iter()
            .find(|r| r.analysis == analysis && r.summary == summary && r.outcome == outcome)
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        write_rows(&self.rows, w)
    }
}

/// Regress condition-A summaries on each clinical outcome and, when
/// condition-B curves are given, change in summary on change in outcome.
/// Summaries are computed per subject over all of its curves.
pub fn validate_workflow(
    model: &MfpcaModel,
    curves_a: &CurveSet,
    curves_b: Option<&CurveSet>,
    clinical: &ClinicalTable,
    summaries: &[SummaryDefinition],
) -> Result<ValidationReport> {
    let known: BTreeSet<&str> = clinical.subject_ids.iter().map(String::as_str).collect();
    let mut missing: BTreeSet<String> = BTreeSet::new();
    for cs in std::iter::once(curves_a).chain(curves_b) {
        missing.extend(
            cs.subject_ids()
                .into_iter()
                .filter(|s| !known.contains(s))
                .map(str::to_string),
        );
    }
    if !missing.is_empty() {
        return Err(Error::Join(missing.into_iter().collect()));
    }
    let row_of: HashMap<&str, usize> = clinical
        .subject_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let models = SummaryModels {
        mfpca: Some(model),
        fpca: None,
    };

    let table_a = compute_summaries(curves_a, summaries, models, UnitLevel::Subject)?;
    let mut rows = Vec::new();
    for (c, name) in table_a.names.iter().enumerate() {
        for outcome in &clinical.outcomes {
            let x: Vec<f64> = table_a
                .units
                .iter()
                .map(|(s, _)| outcome.condition_a[row_of[s.as_str()]])
                .collect();
            rows.push(regression_row(Analysis::CrossSectional, name, &outcome.name, &x, &table_a.values[c])?);
        }
    }

    if let Some(curves_b) = curves_b {
        let table_b = compute_summaries(curves_b, summaries, models, UnitLevel::Subject)?;
        let b_index: HashMap<&str, usize> = table_b
            .units
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (s.as_str(), i))
            .collect();
        let paired: Vec<(usize, usize, usize)> = table_a
            .units
            .iter()
            .enumerate()
            .filter_map(|(ia, (s, _))| b_index.get(s.as_str()).map(|&ib| (ia, ib, row_of[s.as_str()])))
            .collect();
        for (c, name) in table_a.names.iter().enumerate() {
            let dy: Vec<f64> = paired
                .iter()
                .map(|&(ia, ib, _)| table_b.values[c][ib] - table_a.values[c][ia])
                .collect();
            for outcome in &clinical.outcomes {
                let Some(b) = &outcome.condition_b else { continue };
                let dx: Vec<f64> = paired
                    .iter()
                    .map(|&(_, _, k)| b[k] - outcome.condition_a[k])
                    .collect();
                rows.push(regression_row(Analysis::Change, name, &outcome.name, &dx, &dy)?);
            }
        }
    }
    Ok(ValidationReport { rows })
}

fn regression_row(analysis: Analysis, summary: &str, outcome: &str, x: &[f64], y: &[f64]) -> Result<ValidationRow> {
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    let mut row = ValidationRow {
        analysis,
        summary: summary.to_string(),
        outcome: outcome.to_string(),
        n: x.len(),
        slope: None,
        intercept: None,
        r_squared: None,
        p_value: None,
        status: RegressionStatus::ZeroVariance,
    };
    if x.is_empty() || constant(x) || constant(y) {
        return Ok(row);
    }
    let fit = ols_simple(x, y)?;
    row.slope = Some(fit.slope);
    row.intercept = Some(fit.intercept);
    row.r_squared = Some(fit.r_squared);
    row.p_value = Some(fit.p_slope);
    row.status = RegressionStatus::Ok;
    Ok(row)
}
