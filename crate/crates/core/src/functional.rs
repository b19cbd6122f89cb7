//! Functional-data path: spline basis, basis Gram matrix, curve projection
//! and the induced kernel, plus principal-band curves for interpretation.
//!
//! A curve is mapped to its integral coefficients `gamma_j(x) = ∫ x(t) b_j(t) dt`
//! against a basis `(b_j)`, and the kernel between two curves is the bilinear
//! form `gamma(x)' B^{-1} gamma(y)` where `B` is the Gram matrix of the basis.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linspace, quad_trapezoid, SymMatrix};

/// A sampled curve with strictly increasing grid in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl CurveSample {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Input("curve grid must lie in [0, 1]".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input("curve grid must be strictly increasing".into()));
        }
        Ok(CurveSample { grid, values })
    }

    /// Linear interpolation with constant extension outside the grid span.
    pub fn interp(&self, t: f64) -> f64 {
        let g = &self.grid;
        if t <= g[0] {
            return self.values[0];
        }
        if t >= g[g.len() - 1] {
            return self.values[g.len() - 1];
        }
        let i = match g.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.values[i],
            Err(i) => i - 1,
        };
        let w = (t - g[i]) / (g[i + 1] - g[i]);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

/// A finite family of basis functions on `[0, 1]`.
pub trait Basis {
    fn len(&self) -> usize;
    fn eval(&self, j: usize, t: f64) -> f64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cardinal natural cubic spline basis on uniform knots in `[0, 1]`.
///
/// Basis function `j` is the natural cubic spline interpolating 1 at knot `j`
/// and 0 at every other knot. Natural boundary conditions (zero second
/// derivative at 0 and 1) hold by construction; with two knots the basis
/// degenerates to the linear hat pair.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    knots: Vec<f64>,
    h: f64,
    /// Second derivatives at the knots, one vector per basis function.
    curvatures: Vec<Vec<f64>>,
}

impl SplineBasis {
    pub fn natural_cubic(l: usize) -> Result<Self> {
        if l < 2 {
            return Err(Error::Config(
                "natural cubic spline basis needs at least 2 functions".into(),
            ));
        }
        let knots = linspace(0.0, 1.0, l);
        let h = 1.0 / (l - 1) as f64;
        let mut curvatures = Vec::with_capacity(l);
        for j in 0..l {
            let mut y = vec![0.0; l];
            y[j] = 1.0;
            curvatures.push(natural_spline_curvatures(&y, h));
        }
        Ok(SplineBasis {
            knots,
            h,
            curvatures,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
}

/// Solve the tridiagonal natural-spline system for second derivatives.
fn natural_spline_curvatures(y: &[f64], h: f64) -> Vec<f64> {
    let l = y.len();
    let mut m = vec![0.0; l];
    if l <= 2 {
        return m;
    }
    let k = l - 2;
    let mut diag = vec![2.0 * h / 3.0; k];
    let off = h / 6.0;
    let mut rhs: Vec<f64> = (1..l - 1)
        .map(|i| (y[i + 1] - 2.0 * y[i] + y[i - 1]) / h)
        .collect();
    // Thomas algorithm.
    for i in 1..k {
        let w = off / diag[i - 1];
        diag[i] -= w * off;
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - off * m[i + 2]) / diag[i];
    }
    m
}

impl Basis for SplineBasis {
    fn len(&self) -> usize {
        self.knots.len()
    }

    fn eval(&self, j: usize, t: f64) -> f64 {
        let l = self.knots.len();
        let t = t.clamp(0.0, 1.0);
        let i = ((t / self.h) as usize).min(l - 2);
        let a = (self.knots[i + 1] - t) / self.h;
        let b = (t - self.knots[i]) / self.h;
        let y0 = if i == j { 1.0 } else { 0.0 };
        let y1 = if i + 1 == j { 1.0 } else { 0.0 };
        let m = &self.curvatures[j];
        a * y0
            + b * y1
            + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * self.h * self.h / 6.0
    }
}

/// Gram matrix of a basis with its SPD factorization.
#[derive(Debug, Clone)]
pub struct BasisGram {
    b: SymMatrix,
    chol: Cholesky<f64, Dyn>,
    quad_density: usize,
}

impl BasisGram {
    pub fn matrix(&self) -> &SymMatrix {
        &self.b
    }

    pub fn order(&self) -> usize {
        self.b.order()
    }

    pub fn quad_density(&self) -> usize {
        self.quad_density
    }

    /// `B^{-1} rhs` through the Cholesky factor.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(rhs);
        self.chol.solve(&v).iter().copied().collect()
    }

    /// `B^{-1} X` column-wise for a matrix stored as columns.
    pub fn solve_dmatrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

/// Gram matrix of the basis by trapezoid quadrature on a uniform grid.
pub fn basis_gram<B: Basis>(basis: &B, quad_density: usize) -> Result<BasisGram> {
    if quad_density < 101 {
        return Err(Error::Config(
            "basis quadrature density must be at least 101 points".into(),
        ));
    }
    let l = basis.len();
    if l == 0 {
        return Err(Error::Config("empty basis".into()));
    }
    let grid = linspace(0.0, 1.0, quad_density);
    let vals: Vec<Vec<f64>> = (0..l)
        .map(|j| grid.iter().map(|&t| basis.eval(j, t)).collect())
        .collect();
    let b = SymMatrix::from_fn(l, |i, j| {
        let prod: Vec<f64> = vals[i].iter().zip(&vals[j]).map(|(x, y)| x * y).collect();
        quad_trapezoid(&grid, &prod).expect("valid quadrature grid")
    });
    let chol = Cholesky::new(b.to_dmatrix()).ok_or_else(|| {
        Error::Numeric("basis Gram matrix is not positive definite (degenerate basis)".into())
    })?;
    Ok(BasisGram {
        b,
        chol,
        quad_density,
    })
}

/// Integral coefficients of a curve against the basis, by quadrature after
/// linear interpolation onto the quadrature grid.
pub fn project_curve<B: Basis>(
    curve: &CurveSample,
    basis: &B,
    gram: &BasisGram,
) -> Result<Vec<f64>> {
    if curve.grid.len() < 4 {
        return Err(Error::Input(format!(
            "curve has {} points; at least 4 are required",
            curve.grid.len()
        )));
    }
    let first = curve.grid[0];
    let last = curve.grid[curve.grid.len() - 1];
    if first > 0.05 || last < 0.95 {
        return Err(Error::Input(format!(
            "curve must cover [0, 1]: starts at {first:.3}, ends at {last:.3}"
        )));
    }
    let grid = linspace(0.0, 1.0, gram.quad_density());
    let x: Vec<f64> = grid.iter().map(|&t| curve.interp(t)).collect();
    (0..basis.len())
        .map(|j| {
            let prod: Vec<f64> = grid
                .iter()
                .zip(&x)
                .map(|(&t, &v)| v * basis.eval(j, t))
                .collect();
            quad_trapezoid(&grid, &prod)
        })
        .collect()
}

/// Kernel between two projected curves: `gamma_a' B^{-1} gamma_b`.
pub fn functional_kernel(gamma_a: &[f64], gamma_b: &[f64], gram: &BasisGram) -> Result<f64> {
    if gamma_a.len() != gram.order() || gamma_b.len() != gram.order() {
        return Err(Error::LengthMismatch {
            expected: gram.order(),
            got: gamma_a.len().max(gamma_b.len()),
        });
    }
    let z = gram.solve(gamma_b);
    Ok(gamma_a.iter().zip(&z).map(|(a, b)| a * b).sum())
}

/// Basis, quadrature Gram and projected training curves bundled for reuse.
#[derive(Debug, Clone)]
pub struct FunctionalContext {
    pub basis: SplineBasis,
    pub gram: BasisGram,
    pub coeffs: Vec<Vec<f64>>,
}

impl FunctionalContext {
    pub fn new(basis_size: usize, quad_density: usize, curves: &[CurveSample]) -> Result<Self> {
        let basis = SplineBasis::natural_cubic(basis_size)?;
        let gram = basis_gram(&basis, quad_density)?;
        let coeffs = curves
            .iter()
            .map(|c| project_curve(c, &basis, &gram))
            .collect::<Result<Vec<_>>>()?;
        Ok(FunctionalContext {
            basis,
            gram,
            coeffs,
        })
    }
}

/// One feature-subspace axis of a class, expressed in basis coordinates.
#[derive(Debug, Clone)]
pub struct FeatureAxis {
    pub mean_coeffs: Vec<f64>,
    pub axis_coeffs: Vec<f64>,
    pub variance: f64,
}

/// Build the axis description for a class from its member coefficients and
/// the eigenvector `beta` with eigenvalue `lambda` of its centered kernel
/// matrix. Coefficients of the mean and the eigenfunction come out in basis
/// coordinates (`B^{-1}` applied through the factorization).
pub fn class_axis(
    ctx: &FunctionalContext,
    members: &[usize],
    beta: &[f64],
    lambda: f64,
) -> Result<FeatureAxis> {
    if members.is_empty() {
        return Err(Error::Model("class has no members".into()));
    }
    if beta.len() != members.len() {
        return Err(Error::LengthMismatch {
            expected: members.len(),
            got: beta.len(),
        });
    }
    let l = ctx.gram.order();
    let n_i = members.len() as f64;
    let mut gbar = vec![0.0; l];
    for &m in members {
        for (j, v) in ctx.coeffs[m].iter().enumerate() {
            gbar[j] += v / n_i;
        }
    }
    let mean_coeffs = ctx.gram.solve(&gbar);
    let axis_coeffs = if lambda > 0.0 {
        let scale = 1.0 / (n_i * lambda).sqrt();
        let mut w = vec![0.0; l];
        for (b, &m) in beta.iter().zip(members) {
            for (j, v) in ctx.coeffs[m].iter().enumerate() {
                w[j] += b * (v - gbar[j]) * scale;
            }
        }
        ctx.gram.solve(&w)
    } else {
        vec![0.0; l]
    };
    Ok(FeatureAxis {
        mean_coeffs,
        axis_coeffs,
        variance: lambda,
    })
}

/// Mean curve with the plus and minus band at two standard deviations.
#[derive(Debug, Clone)]
pub struct PrincipalBand {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

/// Reconstruct the mean curve and the band `mean ± 2 sqrt(variance) q(t)`
/// on a plotting grid.
pub fn principal_band<B: Basis>(axis: &FeatureAxis, basis: &B, grid_points: usize) -> PrincipalBand {
    let grid = linspace(0.0, 1.0, grid_points.max(2));
    let reconstruct = |coeffs: &[f64], t: f64| -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c * basis.eval(j, t))
            .sum()
    };
    let spread = 2.0 * axis.variance.max(0.0).sqrt();
    let mut mean = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    for &t in &grid {
        let m = reconstruct(&axis.mean_coeffs, t);
        let q = reconstruct(&axis.axis_coeffs, t);
        mean.push(m);
        upper.push(m + spread * q);
        lower.push(m - spread * q);
    }
    PrincipalBand {
        grid,
        mean,
        upper,
        lower,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Orthonormal pair on [0, 1]: the constant 1 and the scaled line.
    struct PolyBasis;

    impl Basis for PolyBasis {
        fn len(&self) -> usize {
            2
        }
        fn eval(&self, j: usize, t: f64) -> f64 {
            match j {
                0 => 1.0,
                _ => 3f64.sqrt() * (2.0 * t - 1.0),
            }
        }
    }

    struct ConstBasis;

    impl Basis for ConstBasis {
        fn len(&self) -> usize {
            1
        }
        fn eval(&self, _: usize, _: f64) -> f64 {
            1.0
        }
    }

    #[test]
    fn orthonormal_basis_gram_is_identity() {
        let g = basis_gram(&PolyBasis, 2001).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.matrix().get(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_basis_gram() {
        let g = basis_gram(&ConstBasis, 101).unwrap();
        assert!((g.matrix().get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spline_basis_interpolates_knots() {
        let b = SplineBasis::natural_cubic(7).unwrap();
        for j in 0..7 {
            for (i, &t) in b.knots().iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((b.eval(j, t) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spline_gram_spd_and_quadrature_converged() {
        let b = SplineBasis::natural_cubic(20).unwrap();
        let coarse = basis_gram(&b, 4001).unwrap();
        let fine = basis_gram(&b, 8001).unwrap();
        let scale = (0..20).map(|i| fine.matrix().get(i, i)).fold(0.0f64, f64::max);
        for i in 0..20 {
            for j in 0..20 {
                let a = coarse.matrix().get(i, j);
                let c = fine.matrix().get(i, j);
                assert!((a - c).abs() <= 1e-5 * scale, "({i},{j}): {a} vs {c}");
                assert_eq!(coarse.matrix().get(i, j), coarse.matrix().get(j, i));
            }
        }
    }

    #[test]
    fn project_zero_curve() {
        let b = SplineBasis::natural_cubic(5).unwrap();
        let g = basis_gram(&b, 501).unwrap();
        let c = CurveSample::new(linspace(0.0, 1.0, 21), vec![0.0; 21]).unwrap();
        let gamma = project_curve(&c, &b, &g).unwrap();
        assert!(gamma.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn project_orthonormal_member() {
        let g = basis_gram(&PolyBasis, 2001).unwrap();
        let grid = linspace(0.0, 1.0, 401);
        let vals: Vec<f64> = grid.iter().map(|&t| PolyBasis.eval(0, t)).collect();
        let c = CurveSample::new(grid, vals).unwrap();
        let gamma = project_curve(&c, &PolyBasis, &g).unwrap();
        assert!((gamma[0] - 1.0).abs() < 1e-5);
        assert!(gamma[1].abs() < 1e-5);
    }

    #[test]
    fn projection_is_linear_in_the_curve() {
        let b = SplineBasis::natural_cubic(6).unwrap();
        let g = basis_gram(&b, 1001).unwrap();
        // Sample on the quadrature grid itself so interpolation is exact.
        let grid = linspace(0.0, 1.0, 1001);
        let vals: Vec<f64> = grid
            .iter()
            .map(|&t| 2.0 * b.eval(0, t) + 3.0 * b.eval(1, t))
            .collect();
        let c = CurveSample::new(grid, vals).unwrap();
        let gamma = project_curve(&c, &b, &g).unwrap();
        for j in 0..6 {
            let want = 2.0 * g.matrix().get(0, j) + 3.0 * g.matrix().get(1, j);
            assert!((gamma[j] - want).abs() < 1e-5, "axis {j}");
        }
    }

    #[test]
    fn kernel_through_scalar_inverse() {
        struct TwoBasis;
        impl Basis for TwoBasis {
            fn len(&self) -> usize {
                1
            }
            fn eval(&self, _: usize, _: f64) -> f64 {
                2.0
            }
        }
        let g = basis_gram(&TwoBasis, 101).unwrap();
        assert!((g.matrix().get(0, 0) - 4.0).abs() < 1e-12);
        let k = functional_kernel(&[1.0], &[1.0], &g).unwrap();
        assert!((k - 0.25).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_plain_dot_for_orthonormal_basis() {
        let g = basis_gram(&PolyBasis, 2001).unwrap();
        let a = [0.3, -1.2];
        let b = [0.7, 0.4];
        let dot = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
        assert!((functional_kernel(&a, &b, &g).unwrap() - dot).abs() < 1e-5);
    }

    #[test]
    fn band_collapses_at_zero_variance() {
        let b = SplineBasis::natural_cubic(4).unwrap();
        let axis = FeatureAxis {
            mean_coeffs: vec![1.0, 0.5, -0.5, 0.2],
            axis_coeffs: vec![0.1, 0.1, 0.1, 0.1],
            variance: 0.0,
        };
        let band = principal_band(&axis, &b, 50);
        for i in 0..band.grid.len() {
            assert_eq!(band.mean[i], band.upper[i]);
            assert_eq!(band.mean[i], band.lower[i]);
        }
    }

    #[test]
    fn band_half_width_matches_axis() {
        let b = SplineBasis::natural_cubic(4).unwrap();
        let axis = FeatureAxis {
            mean_coeffs: vec![0.0; 4],
            axis_coeffs: vec![1.0, -0.3, 0.0, 0.4],
            variance: 2.25,
        };
        let band = principal_band(&axis, &b, 73);
        for (i, &t) in band.grid.iter().enumerate() {
            let q: f64 = (0..4).map(|j| axis.axis_coeffs[j] * b.eval(j, t)).sum();
            let half = 2.0 * 1.5 * q;
            assert!((band.upper[i] - band.mean[i] - half).abs() < 1e-12);
            assert!((band.mean[i] - band.lower[i] - half).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_curve_rejected() {
        let b = SplineBasis::natural_cubic(4).unwrap();
        let g = basis_gram(&b, 201).unwrap();
        let c = CurveSample::new(vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(project_curve(&c, &b, &g).is_err());
    }
}
