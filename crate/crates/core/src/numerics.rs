//! Dense numeric core shared by all other modules: symmetric
//! eigendecomposition, a stable soft-min transform and trapezoid quadrature.
//!
//! Everything here is a pure function on immutable inputs and safe to call
//! from many threads at once.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense symmetric matrix with mirrored storage.
///
/// Symmetry is enforced on construction: writes go through [`SymMatrix::set`]
/// which updates both triangles, and bulk constructors either mirror the
/// upper triangle or average the two triangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "matrix order must be at least 1");
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Build from a function evaluated on the upper triangle and mirrored.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(n: usize, mut f: F) -> Self {
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    /// Build from full rows, averaging the two triangles.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Input("empty matrix".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Input(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    n
                )));
            }
        }
        Ok(SymMatrix::from_fn(n, |i, j| 0.5 * (rows[i][j] + rows[j][i])))
    }

    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Set both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_diag(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).fold(f64::MIN, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Principal submatrix at the given indices, in the given order.
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix::from_fn(idx.len(), |a, b| self.get(idx[a], idx[b]))
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        SymMatrix::from_fn(m.nrows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }
}

/// Full spectrum of a symmetric matrix, eigenvalues descending and
/// eigenvectors orthonormal, one per value.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Full symmetric eigendecomposition with deterministic ordering.
///
/// Values come out non-increasing. Each eigenvector gets a canonical sign
/// (first coordinate of significant magnitude made positive) and exact-tie
/// eigenvalues are ordered by lexicographic vector comparison so identical
/// inputs always yield identical output.
pub fn sym_eig(s: &SymMatrix) -> Result<EigenSystem> {
    if !s.is_finite() {
        return Err(Error::NonFinite("symmetric matrix"));
    }
    let n = s.order();
    let eig = nalgebra::SymmetricEigen::new(s.to_dmatrix());
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            canonical_sign(&mut v);
            (eig.eigenvalues[j], v)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_cmp(&a.1, &b.1))
    });
    Ok(EigenSystem {
        values: pairs.iter().map(|p| p.0).collect(),
        vectors: pairs.into_iter().map(|p| p.1).collect(),
    })
}

fn canonical_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let lead = v.iter().find(|x| x.abs() > 1e-12 * max).copied().unwrap_or(0.0);
    if lead < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Clamp round-off negatives in the spectrum of a matrix that is positive
/// semi-definite in exact arithmetic: values with `|v| <= 1e-10 * values[0]`
/// become 0. Input must be sorted descending.
pub fn clamp_psd_spectrum(values: &[f64]) -> Vec<f64> {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let thr = 1e-10 * top;
    values
        .iter()
        .map(|&v| if v.abs() <= thr { 0.0 } else { v })
        .collect()
}

/// Probabilities proportional to `exp(-score / 2)`, computed by shifting by
/// the minimum score so large magnitudes cannot overflow.
///
/// The `-1/2` exponent makes the output the posterior of a classification
/// score defined as minus twice a log-density; adding a common constant to
/// all scores leaves the result unchanged.
pub fn softmin_neg_half(scores: &[f64]) -> Vec<f64> {
    assert!(!scores.is_empty(), "scores must be nonempty");
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = scores.iter().map(|s| (-(s - min) / 2.0).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Composite trapezoid rule over an increasing grid.
pub fn quad_trapezoid(grid: &[f64], values: &[f64]) -> Result<f64> {
    if grid.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: values.len(),
        });
    }
    if grid.len() < 2 {
        return Err(Error::Input("quadrature needs at least 2 grid points".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("quadrature grid must be strictly increasing".into()));
    }
    let mut acc = 0.0;
    for i in 0..grid.len() - 1 {
        acc += 0.5 * (values[i] + values[i + 1]) * (grid[i + 1] - grid[i]);
    }
    Ok(acc)
}

/// Uniform grid of `n` points spanning `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + h * i as f64).collect()
}
