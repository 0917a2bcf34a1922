//! On-disk formats: curve CSV, grid sidecar, model JSON, score matrices and
//! clinical tables.

mod common;

use mfpca::curves::{load_curves, load_grid, save_curves, save_grid, CsvOptions, Grid};
use mfpca::harness::{read_score_matrix, ClinicalTable};
use mfpca::mfpca::{fit_mfpca, FitOptions, MfpcaModel, MODEL_FORMAT_VERSION};
use mfpca::Error;

fn fitted() -> MfpcaModel {
    let oracle = common::OracleModel::fourier(33, vec![2.0, 1.0], vec![0.5], 0.01);
    let (cs, _) = oracle.sample(12, 3, 5);
    fit_mfpca(&cs, &FitOptions::default()).unwrap()
}

#[test]
fn model_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = fitted();
    model.save(&path).unwrap();
    let back = MfpcaModel::load(&path).unwrap();
    assert_eq!(back, model);
    let text = std::fs::read_to_string(&path).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["version"], MODEL_FORMAT_VERSION);
    for key in ["grid", "mean", "level1", "level2", "sigma_e", "metadata"] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
}

fn edited(f: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut value: serde_json::Value = serde_json::from_str(&fitted().to_json().unwrap()).unwrap();
    f(&mut value);
    value.to_string()
}

#[test]
fn model_version_is_checked_first() {
    let newer = edited(|v| v["version"] = serde_json::json!(MODEL_FORMAT_VERSION + 1));
    assert!(matches!(MfpcaModel::from_json(&newer), Err(Error::Version { .. })));
    let missing = edited(|v| {
        v.as_object_mut().unwrap().remove("version");
    });
    assert!(matches!(MfpcaModel::from_json(&missing), Err(Error::Version { .. })));
    // a bad version wins over other damage
    let both = edited(|v| {
        v["version"] = serde_json::json!("one");
        v.as_object_mut().unwrap().remove("mean");
    });
    assert!(matches!(MfpcaModel::from_json(&both), Err(Error::Version { .. })));
}

#[test]
fn damaged_models_are_corrupt() {
    let cases = [
        edited(|v| {
            v.as_object_mut().unwrap().insert("extra".into(), serde_json::json!(1));
        }),
        edited(|v| v["mean"].as_array_mut().unwrap().truncate(3)),
        edited(|v| v["level1"]["eigenfunctions"][0][4] = serde_json::json!(10.0)),
        edited(|v| v["sigma_e"] = serde_json::json!(-1.0)),
        edited(|v| v["level1"]["eigenvalues"] = serde_json::json!([1.0])),
        "{\"version\": 1".to_string(),
    ];
    for text in cases {
        assert!(matches!(MfpcaModel::from_json(&text), Err(Error::CorruptModel(_))), "{text:.80}");
    }
}

#[test]
fn curve_files_and_grid_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let oracle = common::OracleModel::fourier(17, vec![1.0], vec![0.5], 0.1);
    let (cs, _) = oracle.sample(3, 2, 1);
    let curves = dir.path().join("curves.csv");
    let grid_path = dir.path().join("grid.csv");
    save_curves(&cs, &curves).unwrap();
    save_grid(cs.grid(), &grid_path).unwrap();
    let grid = load_grid(&grid_path).unwrap();
    assert_eq!(grid.points(), cs.grid().points());
    let back = load_curves(&curves, &CsvOptions::default(), Some(grid)).unwrap();
    assert_eq!(back, cs);

    let wrong = Grid::uniform(5).unwrap();
    assert!(matches!(
        load_curves(&curves, &CsvOptions::default(), Some(wrong)),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        load_curves(dir.path().join("absent.csv"), &CsvOptions::default(), None),
        Err(Error::Io { .. })
    ));

    let semicolon = dir.path().join("semi.csv");
    std::fs::write(&semicolon, "s1;1;c1;0.5;1.5;2.5\ns1;1;c2;1;2;3\n").unwrap();
    let opts = CsvOptions {
        delimiter: b';',
        has_header: false,
    };
    let cs = load_curves(&semicolon, &opts, None).unwrap();
    assert_eq!(cs.len(), 2);
    assert_eq!(cs.records()[1].values, vec![1.0, 2.0, 3.0]);
}

#[test]
fn malformed_curve_rows_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "subject_id,occasion_id,curve_id,v0,v1\ns1,1,c1,0.5,x\n").unwrap();
    match load_curves(&path, &CsvOptions::default(), None) {
        Err(Error::Parse { row, column, value }) => {
            assert_eq!((row, column, value.as_str()), (2, 5, "x"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "subject_id,occasion_id,curve_id,v0,v1\ns1,1,c1,0.5\n").unwrap();
    assert!(matches!(
        load_curves(&path, &CsvOptions::default(), None),
        Err(Error::Format { row: 2, .. })
    ));
    std::fs::write(&path, "subject_id,occasion_id,curve_id,v0,v1\ns1,1,c1,1,0\ns1,1,c1,2,0\n").unwrap();
    assert!(matches!(
        load_curves(&path, &CsvOptions::default(), None),
        Err(Error::DuplicateKey { .. })
    ));
}

#[test]
fn score_matrices_and_clinical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    std::fs::write(&path, "c1,c2\n1.5,-2\n0,3e-2\n").unwrap();
    assert_eq!(read_score_matrix(&path).unwrap(), vec![vec![1.5, -2.0], vec![0.0, 0.03]]);
    std::fs::write(&path, "c1,c2\n1.5,nope\n").unwrap();
    assert!(matches!(read_score_matrix(&path), Err(Error::Parse { row: 2, column: 2, .. })));

    let clinical = dir.path().join("clinical.csv");
    std::fs::write(&clinical, "subject_id,updrs_a,updrs_b\np01,30,22\np02,41,35\n").unwrap();
    let table = ClinicalTable::load(&clinical).unwrap();
    assert_eq!(table.subject_ids, vec!["p01", "p02"]);
    assert_eq!(table.outcomes[0].condition_a, vec![30.0, 41.0]);
    std::fs::write(&clinical, "subject_id,updrs_a\np01,30\np01,31\n").unwrap();
    assert!(matches!(ClinicalTable::load(&clinical), Err(Error::Format { row: 3, .. })));
}

#[test]
fn shipped_study_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["study.toml", "quick.toml"] {
        let config = mfpca::harness::StudyConfig::load(dir.join(name)).unwrap();
        // the echo is itself a valid configuration with the same hash
        let echoed = mfpca::harness::StudyConfig::from_toml_str(&config.to_toml_string().unwrap()).unwrap();
        assert_eq!(echoed, config, "{name}");
    }
    let quick = mfpca::harness::StudyConfig::load(dir.join("quick.toml")).unwrap();
    assert_eq!(quick.population.curves_per_subject, mfpca::simgen::CurveCount::Range(4, 8));
    assert_eq!(quick.scenarios[1].to_spec().unwrap().bumps[0].amplitude, 0.8);
}
