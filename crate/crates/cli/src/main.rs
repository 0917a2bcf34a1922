//! `mfpca`: fit, score, simulate and validate from the command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the data or
//! configuration are rejected. Every run writes a manifest before its
//! results, and results are only written once all of them are computed.

mod output;
mod tables;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfpca::curves::{load_curves, load_grid, write_curves, CsvOptions, CurveSet, Grid, POOLED_TOKEN};
use mfpca::harness::{run_study, validate_workflow, ClinicalTable, StudyConfig, StudyReference, SummaryDefinition};
use mfpca::mfpca::{fit_fpca, fit_mfpca, ComponentRule, FitOptions, MfpcaModel, DEFAULT_PVE1, DEFAULT_PVE2};
use mfpca::preprocess::{
    preprocess_recordings, LandmarkSet, PreprocessOptions, DEFAULT_MIN_GOOD, DEFAULT_OUTLIER_FACTOR, DEFAULT_R_MIN,
};
use mfpca::project::{mfpca_project, Pooling};
use mfpca::valmetrics::{group_test, icc};
use serde::Serialize;
use serde_json::json;

use output::{csv_bytes, sidecar_manifest, Outputs, RunManifest, MANIFEST_FILE};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(mfpca::Error),
}

impl CliError {
    pub fn data(e: mfpca::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<mfpca::Error> for CliError {
    fn from(e: mfpca::Error) -> Self {
        CliError::Data(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfpca", version, about = "Multilevel functional PCA of repeated curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a reference model to a curve CSV.
    Fit(FitArgs),
    /// Score curves against a fitted model.
    Project(ProjectArgs),
    /// Run a Monte Carlo study of candidate summaries.
    Simulate(SimulateArgs),
    /// Quality-control, smooth and register raw cycles.
    Preprocess(PreprocessArgs),
    /// ICC(A,1) and ICC(C,1) of each summary across occasions.
    Icc(IccArgs),
    /// Mann-Whitney test and AUC of each summary between two groups.
    Compare(CompareArgs),
    /// Regress summaries on clinical outcomes.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct CurveInput {
    /// Wide curve CSV: subject_id, occasion_id, curve_id, then one column per grid point.
    #[arg(long)]
    curves: PathBuf,
    /// Grid sidecar CSV with a single column `t`.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// The curve CSV has no header row.
    #[arg(long)]
    no_header: bool,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

impl CurveInput {
    fn load(&self, fallback: Option<&Grid>, manifest: &mut RunManifest) -> Result<CurveSet, CliError> {
        if !self.delimiter.is_ascii() {
            return Err(CliError::Usage(format!("delimiter {:?} is not ASCII", self.delimiter)));
        }
        let options = CsvOptions {
            delimiter: self.delimiter as u8,
            has_header: !self.no_header,
        };
        let grid = match &self.grid {
            Some(path) => {
                manifest.digest(path)?;
                Some(load_grid(path)?)
            }
            None => fallback.cloned(),
        };
        manifest.digest(&self.curves)?;
        Ok(load_curves(&self.curves, &options, grid)?)
    }

    fn settings(&self) -> serde_json::Value {
        json!({ "no_header": self.no_header, "delimiter": self.delimiter.to_string() })
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: CurveInput,
    /// Level-1 fraction of variance explained.
    #[arg(long, default_value_t = DEFAULT_PVE1, conflicts_with = "k1")]
    pve1: f64,
    /// Level-2 fraction of variance explained.
    #[arg(long, default_value_t = DEFAULT_PVE2, conflicts_with = "k2")]
    pve2: f64,
    /// Fixed number of level-1 components.
    #[arg(long)]
    k1: Option<usize>,
    /// Fixed number of level-2 components.
    #[arg(long)]
    k2: Option<usize>,
    /// Fit a single-level FPCA instead (level 2 stays empty).
    #[arg(long)]
    fpca: bool,
    /// Model JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Levels {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: CurveInput,
    /// Score each (subject, occasion) separately instead of pooling a subject's occasions.
    #[arg(long)]
    per_occasion: bool,
    #[arg(long, value_enum, default_value = "both")]
    levels: Levels,
    /// Score CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Study configuration (TOML). Defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed; required so that every run is reproducible.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "MFPCA_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[command(flatten)]
    input: CurveInput,
    /// Minimum correlation of a cycle with its recording's template.
    #[arg(long, default_value_t = DEFAULT_R_MIN)]
    qc_rmin: f64,
    /// Minimum number of passing cycles for a recording to be kept.
    #[arg(long, default_value_t = DEFAULT_MIN_GOOD)]
    qc_min_good: usize,
    /// Boxplot fence factor for outlying cycles.
    #[arg(long, default_value_t = DEFAULT_OUTLIER_FACTOR)]
    outlier_factor: f64,
    /// Target landmarks as NAME=TIME pairs.
    #[arg(long, default_value = "P=0.104,R=0.25,T=0.508")]
    landmarks: String,
    /// Half-width of the peak search window around each landmark.
    #[arg(long, default_value_t = 0.05)]
    window: f64,
    #[arg(long, default_value_t = mfpca::basis::DEFAULT_N_BASIS)]
    n_basis: usize,
    /// Roughness penalty of the spline smoother.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IccArgs {
    /// Summary table (wide, or the output of `project --per-occasion`).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    group1: PathBuf,
    #[arg(long)]
    group2: PathBuf,
    /// Use this occasion only; by default a subject's occasions are averaged.
    #[arg(long)]
    occasion: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    curves_a: PathBuf,
    #[arg(long)]
    curves_b: Option<PathBuf>,
    /// Clinical CSV: subject_id, then <outcome>_a and optional <outcome>_b columns.
    #[arg(long)]
    clinical: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Project(a) => project(a),
        Command::Simulate(a) => simulate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Icc(a) => icc_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn fit(a: FitArgs) -> Result<(), CliError> {
    for (flag, v) in [("--pve1", a.pve1), ("--pve2", a.pve2)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(CliError::Usage(format!("{flag} must lie in (0, 1], got {v}")));
        }
    }
    let options = FitOptions {
        level1: a.k1.map_or(ComponentRule::Pve(a.pve1), ComponentRule::Fixed),
        level2: a.k2.map_or(ComponentRule::Pve(a.pve2), ComponentRule::Fixed),
    };
    let settings = json!({
        "level1": options.level1,
        "level2": options.level2,
        "fpca": a.fpca,
        "input": a.input.settings(),
    });
    let mut manifest = RunManifest::new("fit", settings, None, None);
    let cs = a.input.load(None, &mut manifest)?;
    let model = if a.fpca {
        fit_fpca(&cs, &options)?
    } else {
        fit_mfpca(&cs, &options)?
    };
    let mut outputs = Outputs::new();
    outputs.add(&a.out, model.to_json()?.into_bytes());
    outputs.commit(&sidecar_manifest(&a.out), &manifest)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    subject_id: &'a str,
    occasion_id: &'a str,
    curve_id: &'a str,
    level: u8,
    component: usize,
    raw: f64,
    score: f64,
}

fn project(a: ProjectArgs) -> Result<(), CliError> {
    let settings = json!({
        "per_occasion": a.per_occasion,
        "levels": format!("{:?}", a.levels).to_lowercase(),
        "input": a.input.settings(),
    });
    let mut manifest = RunManifest::new("project", settings, None, None);
    manifest.digest(&a.model)?;
    let model = MfpcaModel::load(&a.model)?;
    let cs = a.input.load(Some(&model.grid), &mut manifest)?;
    let pooling = if a.per_occasion { Pooling::Occasion } else { Pooling::Subject };
    let (scores, _) = mfpca_project(&model, &cs, pooling)?;

    let mut rows = Vec::new();
    if a.levels != Levels::Two {
        for b in &scores.between {
            let occasion = b.occasion_id.as_deref().unwrap_or(POOLED_TOKEN);
            for (k, (raw, score)) in b.raw.iter().zip(&b.eblup).enumerate() {
                rows.push(ScoreRow {
                    subject_id: &b.subject_id,
                    occasion_id: occasion,
                    curve_id: POOLED_TOKEN,
                    level: 1,
                    component: k + 1,
                    raw: *raw,
                    score: *score,
                });
            }
        }
    }
    if a.levels != Levels::One {
        for w in &scores.within {
            for (k, (raw, score)) in w.raw.iter().zip(&w.eblup).enumerate() {
                rows.push(ScoreRow {
                    subject_id: &w.subject_id,
                    occasion_id: &w.occasion_id,
                    curve_id: &w.curve_id,
                    level: 2,
                    component: k + 1,
                    raw: *raw,
                    score: *score,
                });
            }
        }
    }
    let mut outputs = Outputs::new();
    outputs.add(&a.out, score_csv(&rows)?);
    outputs.commit(&sidecar_manifest(&a.out), &manifest)
}

/// Score CSV with its header even when there are no rows.
fn score_csv(rows: &[ScoreRow<'_>]) -> Result<Vec<u8>, CliError> {
    if rows.is_empty() {
        return Ok(b"subject_id,occasion_id,curve_id,level,component,raw,score\n".to_vec());
    }
    csv_bytes(rows)
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let workers = match a.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let (mut config, base_dir) = match &a.config {
        Some(path) => (
            StudyConfig::load(path)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (StudyConfig::default(), PathBuf::from(".")),
    };
    if let Some(reps) = a.reps {
        if reps == 0 {
            return Err(CliError::Usage("--reps must be at least 1".into()));
        }
        config.replications = reps;
    }
    config.validate()?;
    let echo = config.to_toml_string()?;
    let hash = config.hash()?;
    let settings = json!({ "workers": workers, "replications": config.replications });
    let mut manifest = RunManifest::new("simulate", settings, Some(hash.clone()), Some(a.seed));
    if let Some(path) = &a.config {
        manifest.digest(path)?;
    }
    for path in StudyReference::input_files(&config.reference, &base_dir) {
        manifest.digest(&path)?;
    }

    let reference = StudyReference::from_config(&config.reference, &base_dir, a.seed)?;
    let result = run_study(&reference, &config, a.seed, workers)?;
    let mut per = Vec::new();
    result.write_per_replication(&mut per)?;
    let mut agg = Vec::new();
    result.write_aggregate(&mut agg)?;

    let mut outputs = Outputs::new();
    outputs.add(a.out.join("per_replication.csv"), per);
    outputs.add(a.out.join("aggregate.csv"), agg);
    outputs.add(
        a.out.join("config_echo.toml"),
        format!("# sha256 {hash}\n# seed {}\n{echo}", a.seed).into_bytes(),
    );
    outputs.commit(&a.out.join(MANIFEST_FILE), &manifest)
}

#[derive(Serialize)]
struct QcRow<'a> {
    subject_id: &'a str,
    occasion_id: &'a str,
    curve_id: &'a str,
    correlation: Option<f64>,
    qc_passed: bool,
    recording_good: bool,
    outlier: bool,
    landmarks_found: bool,
    kept: bool,
}

fn preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let landmarks = LandmarkSet::parse(&a.landmarks).map_err(|e| CliError::Usage(e.to_string()))?;
    let options = PreprocessOptions {
        r_min: a.qc_rmin,
        min_good: a.qc_min_good,
        outlier_factor: a.outlier_factor,
        landmarks,
        window_half_width: a.window,
        n_basis: a.n_basis,
        lambda: a.lambda,
        ..Default::default()
    };
    let settings = json!({
        "qc_rmin": a.qc_rmin,
        "qc_min_good": a.qc_min_good,
        "outlier_factor": a.outlier_factor,
        "landmarks": a.landmarks,
        "window": a.window,
        "n_basis": a.n_basis,
        "lambda": a.lambda,
        "input": a.input.settings(),
    });
    let mut manifest = RunManifest::new("preprocess", settings, None, None);
    let cs = a.input.load(None, &mut manifest)?;
    let (status, cleaned) = preprocess_recordings(&cs, &options)?;
    let rows: Vec<QcRow<'_>> = status
        .iter()
        .map(|s| QcRow {
            subject_id: &s.subject_id,
            occasion_id: &s.occasion_id,
            curve_id: &s.curve_id,
            correlation: s.correlation,
            qc_passed: s.qc_passed,
            recording_good: s.recording_good,
            outlier: s.outlier,
            landmarks_found: s.landmarks_found,
            kept: s.kept,
        })
        .collect();

    let mut outputs = Outputs::new();
    outputs.add(a.out.join("qc.csv"), csv_bytes(&rows)?);
    match cleaned {
        Some(cleaned) => {
            let mut curves = Vec::new();
            write_curves(&cleaned, &mut curves).map_err(|e| CliError::data(mfpca::Error::io("<curves>", e)))?;
            outputs.add(a.out.join("curves.csv"), curves);
            outputs.add(a.out.join("grid.csv"), grid_csv(cleaned.grid()));
        }
        None => eprintln!("warning: no curve survived preprocessing; only qc.csv is written"),
    }
    outputs.commit(&a.out.join(MANIFEST_FILE), &manifest)
}

fn grid_csv(grid: &Grid) -> Vec<u8> {
    let mut out = String::from("t\n");
    for t in grid.points() {
        out.push_str(&format!("{t:?}\n"));
    }
    out.into_bytes()
}

#[derive(Serialize)]
struct MetricRow<'a> {
    summary: &'a str,
    metric: &'static str,
    value: f64,
}

fn icc_cmd(a: IccArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("icc", json!({}), None, None);
    manifest.digest(&a.scores)?;
    let table = tables::load_summaries(&a.scores)?;
    let mut rows = Vec::new();
    for name in &table.names {
        let res = icc(&table.two_way(name)?)?;
        rows.push(MetricRow {
            summary: name,
            metric: "icc_a1",
            value: res.icc_a1,
        });
        rows.push(MetricRow {
            summary: name,
            metric: "icc_c1",
            value: res.icc_c1,
        });
    }
    let mut outputs = Outputs::new();
    outputs.add(&a.out, csv_bytes(&rows)?);
    outputs.commit(&sidecar_manifest(&a.out), &manifest)
}

fn compare(a: CompareArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("compare", json!({ "occasion": a.occasion }), None, None);
    manifest.digest(&a.group1)?;
    manifest.digest(&a.group2)?;
    let g1 = tables::load_summaries(&a.group1)?;
    let g2 = tables::load_summaries(&a.group2)?;
    let mut rows = Vec::new();
    for name in &g1.names {
        if !g2.names.contains(name) {
            return Err(mfpca::Error::Join(vec![name.clone()]).into());
        }
        let occasion = a.occasion.as_deref();
        let res = group_test(&g1.per_subject(name, occasion), &g2.per_subject(name, occasion))?;
        for (metric, value) in [("mw_u", res.u_statistic), ("mw_p", res.p_value), ("auc", res.auc)] {
            rows.push(MetricRow {
                summary: name,
                metric,
                value,
            });
        }
    }
    let mut outputs = Outputs::new();
    outputs.add(&a.out, csv_bytes(&rows)?);
    outputs.commit(&sidecar_manifest(&a.out), &manifest)
}

fn validate(a: ValidateArgs) -> Result<(), CliError> {
    let summaries = SummaryDefinition::gait_defaults();
    let settings = json!({ "summaries": summaries });
    let mut manifest = RunManifest::new("validate", settings, None, None);
    manifest.digest(&a.model)?;
    let model = MfpcaModel::load(&a.model)?;
    let options = CsvOptions::default();
    manifest.digest(&a.curves_a)?;
    let curves_a = load_curves(&a.curves_a, &options, Some(model.grid.clone()))?;
    let curves_b = match &a.curves_b {
        Some(path) => {
            manifest.digest(path)?;
            Some(load_curves(path, &options, Some(model.grid.clone()))?)
        }
        None => None,
    };
    manifest.digest(&a.clinical)?;
    let clinical = ClinicalTable::load(&a.clinical)?;
    let report = validate_workflow(&model, &curves_a, curves_b.as_ref(), &clinical, &summaries)?;
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;

    let mut outputs = Outputs::new();
    outputs.add(a.out.join("validation.csv"), bytes);
    outputs.commit(&a.out.join(MANIFEST_FILE), &manifest)
}
