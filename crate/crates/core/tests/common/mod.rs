//! Oracle data shared by the integration tests. Nothing here calls the
//! estimation code under test: bases are orthonormalized with a QR of the
//! weighted design and data are drawn straight from the generating model.

#![allow(dead_code)]

use mfpca::curves::{CurveRecord, CurveSet, Grid};
use mfpca::mfpca::{Level, MfpcaModel, ModelMetadata};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Seed fixed for every Monte Carlo check before any result was seen.
pub const ORACLE_SEED: u64 = 20240601;

/// Orthonormalize `functions` under the grid weights by QR of `W^{1/2} F`.
pub fn qr_orthonormal(functions: &[Vec<f64>], grid: &Grid) -> Vec<Vec<f64>> {
    let l = grid.len();
    let w = grid.weights();
    let f = DMatrix::from_fn(l, functions.len(), |i, k| w[i].sqrt() * functions[k][i]);
    let qr = f.qr();
    let (q, r) = (qr.q(), qr.r());
    (0..functions.len())
        .map(|k| {
            let sign = r[(k, k)].signum();
            (0..l).map(|i| sign * q[(i, k)] / w[i].sqrt()).collect()
        })
        .collect()
}

/// `⟨f, g⟩` under the grid weights, written out here to stay independent.
pub fn inner(f: &[f64], g: &[f64], grid: &Grid) -> f64 {
    f.iter().zip(g).zip(grid.weights()).map(|((a, b), w)| a * b * w).sum()
}

pub fn sines(grid: &Grid, harmonics: &[(bool, f64)]) -> Vec<Vec<f64>> {
    harmonics
        .iter()
        .map(|&(is_sin, k)| {
            grid.points()
                .iter()
                .map(|t| {
                    let x = 2.0 * std::f64::consts::PI * k * t;
                    if is_sin {
                        x.sin()
                    } else {
                        x.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// A known two-level model.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub grid: Grid,
    pub mean: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub noise_variance: f64,
}

impl OracleModel {
    /// Level 1 on the first harmonic, level 2 on the third.
    pub fn fourier(grid_len: usize, lambda1: Vec<f64>, lambda2: Vec<f64>, noise_variance: f64) -> Self {
        let grid = Grid::uniform(grid_len).unwrap();
        let phi = qr_orthonormal(&sines(&grid, &[(true, 1.0), (false, 1.0)])[..lambda1.len()], &grid);
        let psi = qr_orthonormal(&sines(&grid, &[(true, 3.0), (false, 3.0)])[..lambda2.len()], &grid);
        let mean = grid.points().iter().map(|t| 1.0 + t).collect();
        OracleModel {
            grid,
            mean,
            phi,
            psi,
            lambda1,
            lambda2,
            noise_variance,
        }
    }

    pub fn as_model(&self) -> MfpcaModel {
        MfpcaModel {
            grid: self.grid.clone(),
            mean: self.mean.clone(),
            level1: Level {
                eigenvalues: self.lambda1.clone(),
                eigenfunctions: self.phi.clone(),
            },
            level2: Level {
                eigenvalues: self.lambda2.clone(),
                eigenfunctions: self.psi.clone(),
            },
            sigma_e: self.noise_variance,
            metadata: ModelMetadata {
                source: "oracle".into(),
                rule1: None,
                rule2: None,
                pve1: 1.0,
                pve2: 1.0,
                n_subjects: 0,
                n_curves: 0,
            },
        }
    }

    /// `n_subjects` subjects with `curves` curves each on one occasion, and
    /// the between-subject scores used.
    pub fn sample(&self, n_subjects: usize, curves: usize, seed: u64) -> (CurveSet, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_variance.sqrt()).unwrap();
        let mut records = Vec::with_capacity(n_subjects * curves);
        let mut between = Vec::with_capacity(n_subjects);
        for i in 0..n_subjects {
            let b: Vec<f64> = self
                .lambda1
                .iter()
                .map(|l| l.sqrt() * standard_normal(&mut rng))
                .collect();
            for j in 0..curves {
                let a: Vec<f64> = self
                    .lambda2
                    .iter()
                    .map(|l| l.sqrt() * standard_normal(&mut rng))
                    .collect();
                let values = (0..self.grid.len())
                    .map(|t| {
                        let mut y = self.mean[t];
                        y += b.iter().zip(&self.phi).map(|(s, f)| s * f[t]).sum::<f64>();
                        y += a.iter().zip(&self.psi).map(|(s, f)| s * f[t]).sum::<f64>();
                        y + noise.sample(&mut rng)
                    })
                    .collect();
                records.push(CurveRecord::new(format!("s{i:04}"), "1", format!("c{j:02}"), values));
            }
            between.push(b);
        }
        (CurveSet::new(self.grid.clone(), records).unwrap(), between)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Mann–Whitney U of `y` over `x` by counting pairs.
pub fn brute_force_u(x: &[f64], y: &[f64]) -> f64 {
    let mut u = 0.0;
    for a in x {
        for b in y {
            if b > a {
                u += 1.0;
            } else if b == a {
                u += 0.5;
            }
        }
    }
    u
}
