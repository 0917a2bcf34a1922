//! Scoring new curves against a fixed reference model.
//!
//! Between-subject scores are shrunk toward zero by the empirical BLUP factor
//! `λ / (λ + σ_e / n_i)`, so subjects contributing few curves get scores
//! closer to the population mean. Within-subject scores are computed on the
//! residual left after removing the fitted between-subject function, with
//! factor `λ / (λ + σ_e)`.

use crate::basis::weighted_dot;
use crate::curves::{CurveRecord, CurveSet};
use crate::error::{Error, Result};
use crate::mfpca::{Level, MfpcaModel};

/// Which curves are averaged into one between-subject score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// All of a subject's curves, across occasions.
    #[default]
    Subject,
    /// Each (subject, occasion) pair is scored separately.
    Occasion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScores {
    pub subject_id: String,
    /// Set only under [`Pooling::Occasion`].
    pub occasion_id: Option<String>,
    pub n_curves: usize,
    /// Subject-average raw projections `c̄_ik`.
    pub raw: Vec<f64>,
    /// Shrunken scores `b̂_ik`.
    pub eblup: Vec<f64>,
    pub shrinkage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveScores {
    pub subject_id: String,
    pub occasion_id: String,
    pub curve_id: String,
    /// Raw projections `c̃_ijk` of the level-1 residual.
    pub raw: Vec<f64>,
    /// Shrunken scores `â_ijk`.
    pub eblup: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub between: Vec<SubjectScores>,
    pub within: Vec<CurveScores>,
}

impl ScoreTable {
    /// The between-score row a curve belongs to.
    pub fn unit_of(&self, subject_id: &str, occasion_id: &str) -> Option<&SubjectScores> {
        self.between.iter().find(|b| {
            b.subject_id == subject_id && b.occasion_id.as_deref().is_none_or(|o| o == occasion_id)
        })
    }
}

/// Per-curve pieces of the two-stage fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveFit {
    pub subject_id: String,
    pub occasion_id: String,
    pub curve_id: String,
    pub level1_fit: Vec<f64>,
    /// `y − μ − level1_fit`.
    pub residual: Vec<f64>,
    pub level2_fit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FittedDecomposition {
    pub curves: Vec<CurveFit>,
}

/// Shrinkage factor `λ / (λ + noise)`; zero when `λ = 0`.
pub fn shrinkage_factor(lambda: f64, noise: f64) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else {
        lambda / (lambda + noise)
    }
}

fn check_grid(model: &MfpcaModel, len: usize) -> Result<()> {
    if len != model.grid.len() {
        return Err(Error::Dimension(format!(
            "curve has {len} values but the model grid has {} points",
            model.grid.len()
        )));
    }
    Ok(())
}

fn raw_scores(centered: &[f64], level: &Level, w: &[f64]) -> Vec<f64> {
    level.eigenfunctions.iter().map(|phi| weighted_dot(centered, phi, w)).collect()
}

fn expand(scores: &[f64], level: &Level, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (s, phi) in scores.iter().zip(&level.eigenfunctions) {
        out.iter_mut().zip(phi).for_each(|(o, p)| *o += s * p);
    }
    out
}

/// Single-level scores `⟨y − μ, φ_k⟩` for every level-1 component.
pub fn fpca_project(model: &MfpcaModel, curve: &[f64]) -> Result<Vec<f64>> {
    check_grid(model, curve.len())?;
    let centered: Vec<f64> = curve.iter().zip(&model.mean).map(|(y, m)| y - m).collect();
    Ok(raw_scores(&centered, &model.level1, model.grid.weights()))
}

/// Two-stage scoring of a curve set against `model`.
pub fn mfpca_project(model: &MfpcaModel, cs: &CurveSet, pooling: Pooling) -> Result<(ScoreTable, FittedDecomposition)> {
    if !cs.grid().same_points(&model.grid) {
        return Err(Error::Dimension(format!(
            "curve grid ({} points) differs from the model grid ({} points)",
            cs.grid().len(),
            model.grid.len()
        )));
    }
    if model.k1() == 0 {
        return Err(Error::Precondition("model has no level-1 components".into()));
    }
    let len = model.grid.len();
    let w = model.grid.weights();
    let units: Vec<(String, Option<String>, Vec<usize>)> = match pooling {
        Pooling::Subject => cs.group_by_subject().into_iter().map(|(s, idx)| (s, None, idx)).collect(),
        Pooling::Occasion => cs
            .group_by_unit()
            .into_iter()
            .map(|((s, o), idx)| (s, Some(o), idx))
            .collect(),
    };

    let mut table = ScoreTable::default();
    let mut fits = FittedDecomposition::default();
    for (subject_id, occasion_id, idx) in units {
        let n = idx.len();
        let centered: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| cs.records()[i].values.iter().zip(&model.mean).map(|(y, m)| y - m).collect())
            .collect();
        let mut cbar = vec![0.0; model.k1()];
        for c in &centered {
            for (a, s) in cbar.iter_mut().zip(raw_scores(c, &model.level1, w)) {
                *a += s;
            }
        }
        cbar.iter_mut().for_each(|a| *a /= n as f64);
        let shrinkage: Vec<f64> = model
            .level1
            .eigenvalues
            .iter()
            .map(|&l| shrinkage_factor(l, model.sigma_e / n as f64))
            .collect();
        let eblup: Vec<f64> = cbar.iter().zip(&shrinkage).map(|(c, s)| c * s).collect();
        let level1_fit = expand(&eblup, &model.level1, len);

        for (&i, c) in idx.iter().zip(centered) {
            let rec = &cs.records()[i];
            let residual: Vec<f64> = c.iter().zip(&level1_fit).map(|(a, b)| a - b).collect();
            let raw2 = raw_scores(&residual, &model.level2, w);
            let eblup2: Vec<f64> = raw2
                .iter()
                .zip(&model.level2.eigenvalues)
                .map(|(c, &l)| c * shrinkage_factor(l, model.sigma_e))
                .collect();
            let level2_fit = expand(&eblup2, &model.level2, len);
            table.within.push(CurveScores {
                subject_id: rec.subject_id.clone(),
                occasion_id: rec.occasion_id.clone(),
                curve_id: rec.curve_id.clone(),
                raw: raw2,
                eblup: eblup2,
            });
            fits.curves.push(CurveFit {
                subject_id: rec.subject_id.clone(),
                occasion_id: rec.occasion_id.clone(),
                curve_id: rec.curve_id.clone(),
                level1_fit: level1_fit.clone(),
                residual,
                level2_fit,
            });
        }
        table.between.push(SubjectScores {
            subject_id,
            occasion_id,
            n_curves: n,
            raw: cbar,
            eblup,
            shrinkage,
        });
    }
    Ok((table, fits))
}

/// Synthesize `μ + Σ b̂_k φ_k + Σ â_k ψ_k` for every within-score row.
/// Score vectors may be shorter than the model's component counts (the
/// missing components count as zero) but not longer.
pub fn reconstruct(model: &MfpcaModel, scores: &ScoreTable) -> Result<CurveSet> {
    let len = model.grid.len();
    for b in &scores.between {
        if b.eblup.len() > model.k1() {
            return Err(Error::Dimension(format!(
                "subject {:?} has {} level-1 scores; the model has {}",
                b.subject_id,
                b.eblup.len(),
                model.k1()
            )));
        }
    }
    let mut records = Vec::with_capacity(scores.within.len());
    for c in &scores.within {
        if c.eblup.len() > model.k2() {
            return Err(Error::Dimension(format!(
                "curve {:?} has {} level-2 scores; the model has {}",
                c.curve_id,
                c.eblup.len(),
                model.k2()
            )));
        }
        let unit = scores.unit_of(&c.subject_id, &c.occasion_id).ok_or_else(|| {
            Error::Dimension(format!(
                "no between-subject scores for subject {:?}, occasion {:?}",
                c.subject_id, c.occasion_id
            ))
        })?;
        let f1 = expand(&unit.eblup, &model.level1, len);
        let f2 = expand(&c.eblup, &model.level2, len);
        let values = (0..len).map(|l| model.mean[l] + f1[l] + f2[l]).collect();
        records.push(CurveRecord::new(
            c.subject_id.clone(),
            c.occasion_id.clone(),
            c.curve_id.clone(),
            values,
        ));
    }
    CurveSet::new(model.grid.clone(), records)
}
