//! B-spline bases on a grid, penalized least-squares smoothing and the grid
//! inner product.

use nalgebra::{DMatrix, DVector};

use crate::curves::{CurveRecord, CurveSet, Grid};
use crate::error::{Error, Result};

/// Basis count used for ECG cycle smoothing.
pub const DEFAULT_N_BASIS: usize = 18;
pub const DEFAULT_DEGREE: usize = 3;

/// A B-spline basis evaluated on a grid together with its roughness penalty
/// `P[a][b] = ∫ B_a''(t) B_b''(t) dt`.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    degree: usize,
    n_basis: usize,
    knots: Vec<f64>,
    design: DMatrix<f64>,
    penalty: DMatrix<f64>,
    penalty_root: DMatrix<f64>,
}

impl BasisSystem {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// Full knot vector, endpoints repeated `degree + 1` times.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knots strictly inside the domain.
    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    /// `L × n_basis` matrix of basis values at the grid points.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Evaluate `Σ c_b B_b(t)` at an arbitrary point of the domain.
    pub fn evaluate(&self, coefficients: &[f64], t: f64) -> f64 {
        let span = find_span(&self.knots, self.degree, self.n_basis, t);
        let vals = basis_derivatives(&self.knots, self.degree, span, t, 0);
        (0..=self.degree)
            .map(|r| coefficients[span - self.degree + r] * vals[0][r])
            .sum()
    }
}

/// Build a B-spline basis of `n_basis` functions of the given degree with
/// equally spaced knots over the grid's domain.
pub fn build_basis(grid: &Grid, n_basis: usize, degree: usize) -> Result<BasisSystem> {
    if n_basis < degree + 1 {
        return Err(Error::Config(format!(
            "n_basis ({n_basis}) must be at least degree + 1 ({})",
            degree + 1
        )));
    }
    let (lo, hi) = grid.domain();
    let n_intervals = n_basis - degree;
    let mut knots = vec![lo; degree + 1];
    for k in 1..n_intervals {
        knots.push(lo + (hi - lo) * k as f64 / n_intervals as f64);
    }
    knots.extend(std::iter::repeat_n(hi, degree + 1));

    let mut design = DMatrix::zeros(grid.len(), n_basis);
    for (row, &t) in grid.points().iter().enumerate() {
        let span = find_span(&knots, degree, n_basis, t);
        let vals = basis_derivatives(&knots, degree, span, t, 0);
        for r in 0..=degree {
            design[(row, span - degree + r)] = vals[0][r];
        }
    }

    let (penalty, penalty_root) = roughness_penalty(&knots, degree, n_basis);
    Ok(BasisSystem {
        degree,
        n_basis,
        knots,
        design,
        penalty,
        penalty_root,
    })
}

/// Minimize `‖y − Bc‖² + λ cᵀPc`. Returns the coefficients and the fitted
/// values on the grid.
pub fn penalized_smooth(values: &[f64], basis: &BasisSystem, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = &basis.design;
    if values.len() != b.nrows() {
        return Err(Error::Dimension(format!(
            "{} values for a basis evaluated at {} points",
            values.len(),
            b.nrows()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if lambda == 0.0 && b.nrows() < b.ncols() {
        return Err(Error::Rank(format!(
            "{} points cannot determine {} coefficients without a penalty",
            b.nrows(),
            b.ncols()
        )));
    }
    // Least squares on the stacked system [B; √λ R] c ≈ [y; 0], with
    // RᵀR = P. Its conditioning is the square root of that of the normal
    // equations, which matters for large λ.
    let (n_rows, n_cols) = (b.nrows(), b.ncols());
    let root = &basis.penalty_root;
    let pen_rows = if lambda > 0.0 { root.nrows() } else { 0 };
    let mut stacked = DMatrix::zeros(n_rows + pen_rows, n_cols);
    stacked.rows_mut(0, n_rows).copy_from(b);
    if pen_rows > 0 {
        stacked.rows_mut(n_rows, pen_rows).copy_from(&(root * lambda.sqrt()));
    }
    let mut rhs = DVector::zeros(n_rows + pen_rows);
    rhs.rows_mut(0, n_rows).copy_from_slice(values);

    let coef = match solve_least_squares(&stacked, &rhs) {
        Some(c) => c,
        None => {
            // ridge jitter 1e-12 on the normal equations
            let mut jittered = DMatrix::zeros(stacked.nrows() + n_cols, n_cols);
            jittered.rows_mut(0, stacked.nrows()).copy_from(&stacked);
            jittered
                .rows_mut(stacked.nrows(), n_cols)
                .copy_from(&(DMatrix::<f64>::identity(n_cols, n_cols) * 1e-6));
            let mut rhs_j = DVector::zeros(stacked.nrows() + n_cols);
            rhs_j.rows_mut(0, rhs.nrows()).copy_from(&rhs);
            solve_least_squares(&jittered, &rhs_j)
                .ok_or_else(|| Error::Rank("normal equations are singular".into()))?
        }
    };
    let fitted = b * &coef;
    Ok((coef.as_slice().to_vec(), fitted.as_slice().to_vec()))
}

fn solve_least_squares(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().amax();
    if max_diag == 0.0 || r.diagonal().iter().any(|d| d.abs() <= 1e-12 * max_diag) {
        return None;
    }
    let qt_rhs = qr.q().tr_mul(rhs);
    r.solve_upper_triangular(&qt_rhs)
}

/// Smooth every curve of a set with the same basis and penalty.
pub fn smooth_curves(cs: &CurveSet, basis: &BasisSystem, lambda: f64) -> Result<CurveSet> {
    let records = cs
        .records()
        .iter()
        .map(|r| {
            let (_, fitted) = penalized_smooth(&r.values, basis, lambda)?;
            Ok(CurveRecord {
                values: fitted,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CurveSet::new(cs.grid().clone(), records)
}

/// `⟨f, g⟩ ≈ Σ f(t_ℓ) g(t_ℓ) w_ℓ`.
pub fn inner_product(f: &[f64], g: &[f64], grid: &Grid) -> Result<f64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {} on a grid of {} points",
            f.len(),
            g.len(),
            grid.len()
        )));
    }
    Ok(weighted_dot(f, g, grid.weights()))
}

#[inline]
pub(crate) fn weighted_dot(f: &[f64], g: &[f64], w: &[f64]) -> f64 {
    f.iter().zip(g).zip(w).map(|((a, b), w)| a * b * w).sum()
}

/// Knot span index `i` with `knots[i] <= t < knots[i+1]`; the right end of
/// the domain maps to the last non-empty span.
fn find_span(knots: &[f64], degree: usize, n_basis: usize, t: f64) -> usize {
    if t >= knots[n_basis] {
        return n_basis - 1;
    }
    if t <= knots[degree] {
        return degree;
    }
    // first index with knots[idx] > t, minus one
    let idx = knots[..=n_basis].partition_point(|&k| k <= t);
    (idx - 1).clamp(degree, n_basis - 1)
}

/// Values and derivatives up to order `n_ders` of the `degree + 1` basis
/// functions that are nonzero on knot span `span`. `out[k][r]` is the k-th
/// derivative of `B_{span - degree + r}`.
fn basis_derivatives(knots: &[f64], degree: usize, span: usize, t: f64, n_ders: usize) -> Vec<Vec<f64>> {
    let p = degree;
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = vec![vec![0.0; p + 1]; n_ders + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    if n_ders == 0 {
        return ders;
    }

    let p_i = p as isize;
    let mut a = vec![vec![0.0; p + 1]; 2];
    for r in 0..=p_i {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=(n_ders as isize) {
            let mut d = 0.0;
            let rk = r - k;
            let pk = p_i - k;
            if k > p_i {
                ders[k as usize][r as usize] = 0.0;
                continue;
            }
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk as usize];
            }
            let j1 = if rk >= -1 { 1 } else { -rk };
            let j2 = if r - 1 <= pk { k - 1 } else { p_i - r };
            for j in j1..=j2 {
                a[s2][j as usize] = (a[s1][j as usize] - a[s1][(j - 1) as usize])
                    / ndu[(pk + 1) as usize][(rk + j) as usize];
                d += a[s2][j as usize] * ndu[(rk + j) as usize][pk as usize];
            }
            if r <= pk {
                a[s2][k as usize] = -a[s1][(k - 1) as usize] / ndu[(pk + 1) as usize][r as usize];
                d += a[s2][k as usize] * ndu[r as usize][pk as usize];
            }
            ders[k as usize][r as usize] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for k in 1..=n_ders {
        for j in 0..=p {
            ders[k][j] *= factor;
        }
        factor *= p as f64 - k as f64;
    }
    ders
}

/// Second-derivative operator on coefficients: the second derivative of
/// `Σ c_j B_{j,p}` is `Σ (D c)_j B_{j,p-2}` on the knot vector with two
/// knots removed at each end. Constants and lines map to exactly zero.
fn second_derivative_operator(knots: &[f64], degree: usize, n_basis: usize) -> DMatrix<f64> {
    let p = degree as f64;
    // first derivative: (n-1) x n
    let mut d1 = DMatrix::zeros(n_basis - 1, n_basis);
    for j in 0..n_basis - 1 {
        let s = p / (knots[j + degree + 1] - knots[j + 1]);
        d1[(j, j)] = -s;
        d1[(j, j + 1)] = s;
    }
    // second stage on knots[1..] with degree p-1: (n-2) x (n-1)
    let mut d2 = DMatrix::zeros(n_basis - 2, n_basis - 1);
    for j in 0..n_basis - 2 {
        let s = (p - 1.0) / (knots[j + degree + 1] - knots[j + 2]);
        d2[(j, j)] = -s;
        d2[(j, j + 1)] = s;
    }
    d2 * d1
}

/// Gram matrix `∫ B_a B_b` of a B-spline basis, exact by Gauss–Legendre
/// quadrature on every knot interval.
fn gram_matrix(knots: &[f64], degree: usize, n_basis: usize) -> DMatrix<f64> {
    let mut gram = DMatrix::zeros(n_basis, n_basis);
    let (nodes, weights) = gauss_legendre(degree + 1);
    for span in degree..n_basis {
        let (a, b) = (knots[span], knots[span + 1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in nodes.iter().zip(&weights) {
            let vals = &basis_derivatives(knots, degree, span, mid + half * x, 0)[0];
            for r in 0..=degree {
                for s in 0..=degree {
                    gram[(span - degree + r, span - degree + s)] += w * half * vals[r] * vals[s];
                }
            }
        }
    }
    (&gram + gram.transpose()) * 0.5
}

/// Roughness penalty `P = Dᵀ G D` and a square-root factor `R` with
/// `RᵀR = P`. Returns empty factors for degree < 2.
fn roughness_penalty(knots: &[f64], degree: usize, n_basis: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    if degree < 2 || n_basis < 3 {
        return (DMatrix::zeros(n_basis, n_basis), DMatrix::zeros(0, n_basis));
    }
    let d = second_derivative_operator(knots, degree, n_basis);
    let inner = &knots[2..knots.len() - 2];
    let gram = gram_matrix(inner, degree - 2, n_basis - 2);
    let chol = gram
        .clone()
        .cholesky()
        .expect("B-spline Gram matrix is positive definite");
    let root = chol.l().transpose() * &d;
    let pen = d.transpose() * gram * &d;
    ((&pen + pen.transpose()) * 0.5, root)
}

/// Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp;
        loop {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_of_unity() {
        for (len, nb, deg) in [(50, 18, 3), (11, 4, 3), (101, 10, 2), (7, 3, 0), (200, 30, 5)] {
            let g = Grid::uniform(len).unwrap();
            let b = build_basis(&g, nb, deg).unwrap();
            for row in b.design().row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn piecewise_constant_basis_splits_at_half() {
        let g = Grid::from_points(vec![0.0, 0.49, 0.51, 1.0]).unwrap();
        let b = build_basis(&g, 2, 0).unwrap();
        let expected = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(b.design(), &expected);
    }

    #[test]
    fn cubic_18_has_14_interior_knots() {
        let g = Grid::uniform(256).unwrap();
        let b = build_basis(&g, 18, 3).unwrap();
        assert_eq!(b.knots().len(), 22);
        assert_eq!(b.interior_knots().len(), 14);
        let mut unique = b.knots().to_vec();
        unique.dedup();
        // 16 distinct knots delimit 15 polynomial pieces
        assert_eq!(unique.len() - 1, 15);
    }

    #[test]
    fn too_few_basis_functions() {
        let g = Grid::uniform(10).unwrap();
        assert!(matches!(build_basis(&g, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn penalty_is_symmetric_psd_and_kills_lines() {
        let g = Grid::uniform(64).unwrap();
        let b = build_basis(&g, 12, 3).unwrap();
        let p = b.penalty();
        assert!((p - p.transpose()).abs().max() < 1e-12);
        let eig = p.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-8 * p.abs().max()));
        // Greville abscissae reproduce t exactly; lines have zero curvature.
        let k = b.knots();
        let line: Vec<f64> = (0..12)
            .map(|j| (1..=3).map(|r| k[j + r]).sum::<f64>() / 3.0)
            .collect();
        let c = DVector::from_vec(line.iter().map(|g| 2.0 + 3.0 * g).collect());
        assert!((c.transpose() * p * &c)[(0, 0)].abs() < 1e-8);
    }

    #[test]
    fn penalty_matches_finite_difference_curvature() {
        // Independent check: integrate squared second differences of a fine
        // evaluation of a spline against cᵀPc.
        let g = Grid::uniform(40).unwrap();
        let b = build_basis(&g, 9, 3).unwrap();
        let c: Vec<f64> = (0..9).map(|j| ((j * 7 % 5) as f64) - 1.5).collect();
        let cv = DVector::from_column_slice(&c);
        let exact = (cv.transpose() * b.penalty() * &cv)[(0, 0)];
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f: Vec<f64> = (0..=n).map(|i| b.evaluate(&c, i as f64 * h)).collect();
        let mut approx = 0.0;
        for i in 1..n {
            let d2 = (f[i + 1] - 2.0 * f[i] + f[i - 1]) / (h * h);
            approx += d2 * d2 * h;
        }
        assert!((approx - exact).abs() / exact < 1e-3, "{approx} vs {exact}");
    }

    #[test]
    fn constant_is_reproduced_for_any_lambda() {
        let g = Grid::uniform(100).unwrap();
        let b = build_basis(&g, 18, 3).unwrap();
        for lambda in [0.0, 1e-5, 1.0, 1e6] {
            let (_, fit) = penalized_smooth(&[5.0; 100], &b, lambda).unwrap();
            let err = fit.iter().map(|v| (v - 5.0).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "lambda {lambda}: max error {err:e}");
        }
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let g = Grid::uniform(80).unwrap();
        let b = build_basis(&g, 18, 3).unwrap();
        let c: Vec<f64> = (0..18).map(|j| (j as f64 * 0.7).sin() * 3.0).collect();
        let y = b.design() * DVector::from_column_slice(&c);
        let (coef, fit) = penalized_smooth(y.as_slice(), &b, 0.0).unwrap();
        for (a, e) in coef.iter().zip(&c) {
            assert!((a - e).abs() < 1e-8);
        }
        for (a, e) in fit.iter().zip(y.iter()) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn rss_grows_with_lambda() {
        let g = Grid::uniform(128).unwrap();
        let b = build_basis(&g, 18, 3).unwrap();
        let y: Vec<f64> = g
            .points()
            .iter()
            .enumerate()
            .map(|(i, t)| (2.0 * std::f64::consts::PI * t).sin() + 0.2 * (((i * 7919) % 97) as f64 / 97.0 - 0.5))
            .collect();
        let mut last = -1.0;
        for e in -6..=6 {
            let lambda = if e == -6 { 0.0 } else { 10f64.powi(e) };
            let (_, fit) = penalized_smooth(&y, &b, lambda).unwrap();
            let rss: f64 = y.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(rss >= last - 1e-12, "rss decreased at lambda {lambda}");
            last = rss;
        }
    }

    #[test]
    fn underdetermined_without_penalty_is_a_rank_error() {
        let g = Grid::uniform(6).unwrap();
        let b = build_basis(&g, 10, 3).unwrap();
        assert!(matches!(penalized_smooth(&[0.0; 6], &b, 0.0), Err(Error::Rank(_))));
        assert!(penalized_smooth(&[0.0; 6], &b, 1e-3).is_ok());
    }

    #[test]
    fn inner_product_basics() {
        let g = Grid::uniform(512).unwrap();
        assert_eq!(inner_product(&[1.0; 512], &[1.0; 512], &g).unwrap(), 1.0);
        let f: Vec<f64> = g.points().iter().map(|t| t.exp()).collect();
        assert_eq!(inner_product(&f, &[0.0; 512], &g).unwrap(), 0.0);
        let s: Vec<f64> = g.points().iter().map(|t| (2.0 * std::f64::consts::PI * t).sin()).collect();
        let c: Vec<f64> = g.points().iter().map(|t| (2.0 * std::f64::consts::PI * t).cos()).collect();
        assert!(inner_product(&s, &c, &g).unwrap().abs() < 1e-3);
        assert!(matches!(inner_product(&s, &c[..10], &g), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn inner_product_symmetric_bilinear(
            f in proptest::collection::vec(-10.0f64..10.0, 16),
            g in proptest::collection::vec(-10.0f64..10.0, 16),
            h in proptest::collection::vec(-10.0f64..10.0, 16),
            a in -3.0f64..3.0,
        ) {
            let grid = Grid::uniform(16).unwrap();
            let fg = inner_product(&f, &g, &grid).unwrap();
            prop_assert!((fg - inner_product(&g, &f, &grid).unwrap()).abs() < 1e-12);
            let combo: Vec<f64> = f.iter().zip(&h).map(|(x, y)| a * x + y).collect();
            let lhs = inner_product(&combo, &g, &grid).unwrap();
            let rhs = a * fg + inner_product(&h, &g, &grid).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn spline_span_is_reproduced(c in proptest::collection::vec(-5.0f64..5.0, 10)) {
            let grid = Grid::uniform(60).unwrap();
            let b = build_basis(&grid, 10, 3).unwrap();
            let y = b.design() * DVector::from_column_slice(&c);
            let (_, fit) = penalized_smooth(y.as_slice(), &b, 0.0).unwrap();
            for (a, e) in fit.iter().zip(y.iter()) {
                prop_assert!((a - e).abs() < 1e-8);
            }
        }
    }
}
