//! Simulation and validation workflows end to end.

mod common;

use common::ORACLE_SEED;
use mfpca::curves::unit_mean_curves;
use mfpca::harness::{
    run_study, validate_workflow, Analysis, ClinicalOutcome, ClinicalTable, IccPooling, PopulationConfig,
    StudyConfig, StudyReference, SummaryDefinition, SummaryKind,
};
use mfpca::project::fpca_project;
use mfpca::simgen::{
    gaussian_score_rows, synthetic_reference_model, CurveCount, PopulationGenerator, PopulationSpec,
    ScenarioConfig, ScoreMoments, SyntheticModelParams,
};
use mfpca::valmetrics::{correlation, ks_uniform, CorrelationMethod};
use mfpca::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small(scenarios: &[&str], reps: usize) -> StudyConfig {
    StudyConfig {
        replications: reps,
        population: PopulationConfig {
            n_subjects: 15,
            curves_per_subject: CurveCount::Fixed(5),
            ..Default::default()
        },
        scenarios: scenarios
            .iter()
            .map(|k| ScenarioConfig {
                kind: k.to_string(),
                ..Default::default()
            })
            .collect(),
        ..Default::default()
    }
}

#[test]
fn occasions_share_between_scores() {
    let model = synthetic_reference_model(&SyntheticModelParams::ecg()).unwrap();
    let rows = gaussian_score_rows(&model.level1.eigenvalues, 200, ORACLE_SEED);
    let within = ScoreMoments::diagonal(&model.level2.eigenvalues);
    let generator = PopulationGenerator::new(model.clone(), rows, &within).unwrap();
    let cs = generator.synthesize(&PopulationSpec::new(200, 20, ORACLE_SEED)).unwrap();
    let means = unit_mean_curves(&cs);
    let mut first = vec![Vec::new(); model.k1()];
    let mut second = vec![Vec::new(); model.k1()];
    for r in means.records() {
        let s = fpca_project(&model, &r.values).unwrap();
        let target = if r.occasion_id == "1" { &mut first } else { &mut second };
        for (k, v) in s.into_iter().enumerate() {
            target[k].push(v);
        }
    }
    // Within-subject variation leaks into a level-1 projection through the
    // overlap ⟨φ_k, ψ_m⟩, so the expected paired correlation of occasion
    // means is λ1_k / (λ1_k + Σ_m λ2_m ⟨φ_k, ψ_m⟩² / n_i).
    for k in 0..model.k1() {
        let phi = &model.level1.eigenfunctions[k];
        let leak: f64 = model
            .level2
            .eigenfunctions
            .iter()
            .zip(&model.level2.eigenvalues)
            .map(|(psi, l)| l * common::inner(phi, psi, &model.grid).powi(2))
            .sum::<f64>()
            / 20.0;
        let lambda = model.level1.eigenvalues[k];
        let expected = lambda / (lambda + leak);
        let r = correlation(&first[k], &second[k], CorrelationMethod::Pearson).unwrap();
        assert!((r - expected).abs() < 0.05, "component {}: paired correlation {r}, expected {expected}", k + 1);
        if expected >= 0.95 {
            assert!(r >= 0.9, "component {}: paired correlation {r}", k + 1);
        }
    }
}

#[test]
fn group_one_is_shared_across_scenarios() {
    let reference = StudyReference::synthetic_ecg(20, 5, 1).unwrap();
    let mut config = small(&["no_change", "flattened_t", "st_elevation"], 2);
    config.icc_pooling = IccPooling::Group1;
    let result = run_study(&reference, &config, 9, 1).unwrap();
    for summary in ["t_amplitude", "mfpca_1", "fpca_2"] {
        let iccs: Vec<f64> = result
            .aggregate
            .iter()
            .filter(|a| a.summary == summary)
            .map(|a| a.mean_icc_a1)
            .collect();
        assert_eq!(iccs.len(), 3);
        assert!(iccs.iter().all(|v| *v == iccs[0]), "{summary}: {iccs:?}");
    }
}

#[test]
fn replication_failures_name_the_replication() {
    let reference = StudyReference::synthetic_ecg(20, 5, 1).unwrap();
    let mut config = small(&["no_change"], 3);
    config.summaries = vec![SummaryDefinition::new("fpca_9", SummaryKind::FpcaScore { component: 9 })];
    match run_study(&reference, &config, 4, 2) {
        Err(Error::Replication {
            replication, seed, source, ..
        }) => {
            assert_eq!(replication, 0);
            assert_eq!(seed, mfpca::harness::replication_seed(4, 0));
            assert!(matches!(*source, Error::Config(_)));
        }
        other => panic!("expected a replication error, got {other:?}"),
    }
}

#[test]
fn study_tables_have_stable_headers() {
    let reference = StudyReference::synthetic_ecg(20, 5, 1).unwrap();
    let result = run_study(&reference, &small(&["no_change"], 2), 3, 1).unwrap();
    let mut per = Vec::new();
    result.write_per_replication(&mut per).unwrap();
    let per = String::from_utf8(per).unwrap();
    assert!(per.starts_with("scenario,summary,replication,seed,icc_a1,icc_c1,mw_p,auc\n"));
    assert_eq!(per.lines().count(), 1 + 2 * 11);
    let mut agg = Vec::new();
    result.write_aggregate(&mut agg).unwrap();
    let agg = String::from_utf8(agg).unwrap();
    assert!(agg.starts_with(
        "scenario,summary,replications,mean_icc_a1,mean_icc_c1,mean_mw_p,mean_auc,mean_auc_oriented,ks_mw_p\n"
    ));
    // values written are the values held
    let first = per.lines().nth(1).unwrap();
    let icc: f64 = first.split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(icc, result.per_replication[0].icc_a1);
}

#[test]
fn unrelated_clinical_scores_give_uniform_p_values() {
    let model = synthetic_reference_model(&SyntheticModelParams::gait()).unwrap();
    let within = ScoreMoments::diagonal(&model.level2.eigenvalues);
    let summaries = SummaryDefinition::gait_defaults();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut p = Vec::new();
    for r in 0..200u64 {
        let seed = ORACLE_SEED + 7 * r;
        let rows = gaussian_score_rows(&model.level1.eigenvalues, 300, seed);
        let generator = PopulationGenerator::new(model.clone(), rows, &within).unwrap();
        let mut spec = PopulationSpec::new(22, 4, seed + 1);
        spec.occasions = 1;
        let pop = generator.synthesize_detailed(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let clinical = ClinicalTable {
            subject_ids: pop.subject_ids.clone(),
            outcomes: vec![ClinicalOutcome {
                name: "unrelated".into(),
                condition_a: (0..22).map(|_| noise.sample(&mut rng)).collect(),
                condition_b: None,
            }],
        };
        let report = validate_workflow(&model, &pop.curves, None, &clinical, &summaries).unwrap();
        p.push(report.find(Analysis::CrossSectional, "mfpca_1", "unrelated").unwrap().p_value.unwrap());
    }
    // 95% critical value of the one-sample KS statistic at n = 200 is 0.096
    let ks = ks_uniform(&p);
    assert!(ks < 0.096, "KS = {ks}");
}
