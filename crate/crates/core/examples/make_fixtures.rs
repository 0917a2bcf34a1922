//! Write the small synthetic data set used by the README and the guide.
//!
//! cargo run -p mfpca --example make_fixtures -- fixtures

use std::path::PathBuf;

use mfpca::curves::{save_curves, save_grid};
use mfpca::simgen::{
    derive_seed, gaussian_score_rows, synthetic_reference_model, PopulationGenerator, PopulationSpec, ScoreMoments,
    SyntheticModelParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEED: u64 = 7;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir)?;

    let mut params = SyntheticModelParams::gait();
    params.grid_len = 51;
    let model = synthetic_reference_model(&params)?;
    let within = ScoreMoments::diagonal(&model.level2.eigenvalues);
    let pool = gaussian_score_rows(&model.level1.eigenvalues, 200, derive_seed(SEED, &[0]));
    let generator = PopulationGenerator::new(model.clone(), pool, &within)?;

    let mut spec = PopulationSpec::new(16, 3, derive_seed(SEED, &[1]));
    spec.noise_variance = 0.05;
    spec.subject_prefix = "ref".into();
    let reference = generator.synthesize(&spec)?;
    save_curves(&reference, dir.join("reference.csv"))?;
    save_grid(reference.grid(), dir.join("grid.csv"))?;

    // A second cohort seen under two conditions (its two occasions); the
    // clinical score tracks the second between-subject score.
    let mut spec = PopulationSpec::new(12, 3, derive_seed(SEED, &[2]));
    spec.noise_variance = 0.05;
    let cohort = generator.synthesize_detailed(&spec)?;
    let a = cohort.curves.filter(|r| r.occasion_id == "1")?;
    let b = cohort.curves.filter(|r| r.occasion_id == "2")?;
    save_curves(&a, dir.join("condition_a.csv"))?;
    save_curves(&b, dir.join("condition_b.csv"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SEED, &[3]));
    let noise = Normal::new(0.0, 1.0)?;
    let mut clinical = String::from("subject_id,score_a,score_b\n");
    for (id, &row) in cohort.subject_ids.iter().zip(&cohort.between_rows) {
        let signal = 3.0 * generator.between_scores()[row][1];
        let sa = signal + noise.sample(&mut rng);
        let sb = signal + noise.sample(&mut rng);
        clinical.push_str(&format!("{id},{sa:.3},{sb:.3}\n"));
    }
    std::fs::write(dir.join("clinical.csv"), clinical)?;
    Ok(())
}
