//! Kernel specifications, Gram matrices for every supported data type,
//! class-centered kernel evaluations and their responsibility-weighted
//! variants.
//!
//! A [`GramMatrix`] carries the full n-by-n kernel evaluations plus the rank
//! bound rule of its kernel family, so downstream code never needs the raw
//! data again. Prediction-time evaluations against fresh samples go through
//! [`KernelRow`] (computed lazily by [`Evaluator`] for analytic kernels,
//! user-supplied for precomputed ones).

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::functional::{project_curve, FunctionalContext};
use crate::numerics::SymMatrix;

fn default_quad_density() -> usize {
    1001
}

/// Declarative kernel description; Gram matrices are reproducible from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `<x, y>` on numeric columns.
    Linear,
    /// `exp(-||x - y||^2 / (2 sigma^2))` on numeric columns.
    Gaussian { sigma: f64 },
    /// `(<x, y> + 1)^degree` on numeric columns.
    Polynomial { degree: u32 },
    /// `exp(-gamma * d_H(a, b))` on categorical columns, with `d_H` the
    /// number of differing positions.
    Hamming { gamma: f64 },
    /// Regularized Laplacian kernel `(L + nu I)^{-1}` on an adjacency matrix.
    Laplacian { nu: f64 },
    /// `gamma(x)' B^{-1} gamma(y)` through a natural cubic spline basis.
    Functional {
        basis_size: usize,
        #[serde(default = "default_quad_density")]
        quad_density: usize,
    },
    /// Convex combination `alpha * left + (1 - alpha) * right`.
    Combined {
        alpha: f64,
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
    },
    /// Entries supplied by the user; fresh rows must be supplied too.
    Precomputed,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian { sigma } if *sigma <= 0.0 => {
                Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")))
            }
            KernelSpec::Polynomial { degree } if *degree < 1 => {
                Err(Error::Config("polynomial degree must be at least 1".into()))
            }
            KernelSpec::Hamming { gamma } if *gamma <= 0.0 => {
                Err(Error::Config(format!("hamming rate must be positive, got {gamma}")))
            }
            KernelSpec::Laplacian { nu } if *nu <= 0.0 => {
                Err(Error::Config(format!("laplacian nu must be positive, got {nu}")))
            }
            KernelSpec::Functional { basis_size, quad_density } => {
                if *basis_size < 2 {
                    return Err(Error::Config("functional basis needs at least 2 functions".into()));
                }
                if *quad_density < 101 {
                    return Err(Error::Config("functional quadrature density must be >= 101".into()));
                }
                Ok(())
            }
            KernelSpec::Combined { alpha, left, right } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::Config(format!("combined alpha must lie in [0, 1], got {alpha}")));
                }
                left.validate()?;
                right.validate()
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            KernelSpec::Polynomial { degree } => write!(f, "poly(degree={degree})"),
            KernelSpec::Hamming { gamma } => write!(f, "hamming(gamma={gamma})"),
            KernelSpec::Laplacian { nu } => write!(f, "laplacian(nu={nu})"),
            KernelSpec::Functional { basis_size, .. } => write!(f, "functional(L={basis_size})"),
            KernelSpec::Combined { alpha, left, right } => {
                write!(f, "{alpha}*{left} + {}*{right}", 1.0 - alpha)
            }
            KernelSpec::Precomputed => write!(f, "precomputed"),
        }
    }
}

/// Rank-bound rule of a kernel family: the feature-space rank of a class of
/// size `n_i` is `min(n_i, cap)`, unbounded families use `n_i` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankCap {
    Unbounded,
    Capped(usize),
}

impl RankCap {
    fn combine(self, other: RankCap) -> RankCap {
        match (self, other) {
            (RankCap::Capped(a), RankCap::Capped(b)) => RankCap::Capped(a.saturating_add(b)),
            _ => RankCap::Unbounded,
        }
    }
}

/// `C(p + q, p)` saturating at `usize::MAX`.
fn binomial_saturating(p: u64, q: u64) -> usize {
    let mut acc: u128 = 1;
    for i in 1..=q.min(p) {
        let num = p + q - i + 1;
        acc = acc.saturating_mul(num as u128) / i as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc.min(usize::MAX as u128) as usize
}

/// Full kernel evaluations over a sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramMatrix {
    pub spec: KernelSpec,
    entries: SymMatrix,
    rank: RankCap,
}

impl GramMatrix {
    pub fn from_parts(spec: KernelSpec, entries: SymMatrix, rank: RankCap) -> Self {
        GramMatrix { spec, entries, rank }
    }

    pub fn n(&self) -> usize {
        self.entries.order()
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    pub fn entries(&self) -> &SymMatrix {
        &self.entries
    }

    pub fn rank_cap(&self) -> RankCap {
        self.rank
    }

    /// Feature-space rank bound for a class of the given size.
    pub fn rank_bound(&self, class_size: usize) -> usize {
        match self.rank {
            RankCap::Unbounded => class_size,
            RankCap::Capped(c) => class_size.min(c),
        }
    }

    /// Principal submatrix on the given sample indices.
    pub fn slice(&self, idx: &[usize]) -> GramMatrix {
        GramMatrix {
            spec: self.spec.clone(),
            entries: self.entries.submatrix(idx),
            rank: self.rank,
        }
    }

    /// Kernel row of training sample `i` against a training subset.
    pub fn row_for(&self, i: usize, train_idx: &[usize]) -> KernelRow {
        KernelRow {
            values: train_idx.iter().map(|&j| self.entry(i, j)).collect(),
            self_eval: self.entry(i, i),
        }
    }
}

/// Kernel evaluations of one sample against the training set, plus its
/// self-evaluation `K(x, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub values: Vec<f64>,
    pub self_eval: f64,
}

/// Build the Gram matrix of `spec` over the dataset view it consumes.
pub fn gram(spec: &KernelSpec, data: &Dataset) -> Result<GramMatrix> {
    spec.validate()?;
    match spec {
        KernelSpec::Linear | KernelSpec::Gaussian { .. } | KernelSpec::Polynomial { .. } => {
            let rows = numeric_view(data)?;
            let p = rows[0].len();
            let n = rows.len();
            let entries = SymMatrix::from_fn(n, |i, j| numeric_eval(spec, rows[i], rows[j]));
            let rank = match spec {
                KernelSpec::Linear => RankCap::Capped(p),
                KernelSpec::Gaussian { .. } => RankCap::Unbounded,
                KernelSpec::Polynomial { degree } => {
                    RankCap::Capped(binomial_saturating(p as u64, *degree as u64))
                }
                _ => unreachable!(),
            };
            Ok(GramMatrix::from_parts(spec.clone(), entries, rank))
        }
        KernelSpec::Hamming { gamma } => {
            let rows = categorical_view(data)?;
            let n = rows.len();
            let entries = SymMatrix::from_fn(n, |i, j| {
                hamming_eval(rows[i], rows[j], *gamma).expect("equal tuple lengths")
            });
            Ok(GramMatrix::from_parts(spec.clone(), entries, RankCap::Unbounded))
        }
        KernelSpec::Laplacian { nu } => {
            let adj = data.adjacency.as_ref().ok_or_else(|| {
                Error::Config("laplacian kernel requires adjacency data (edge-list format)".into())
            })?;
            laplacian_gram(adj, *nu)
        }
        KernelSpec::Functional { basis_size, quad_density } => {
            if data.curves.is_empty() {
                return Err(Error::Config(
                    "functional kernel requires curve data (curves-csv format)".into(),
                ));
            }
            let ctx = FunctionalContext::new(*basis_size, *quad_density, &data.curves)?;
            Ok(functional_gram(spec.clone(), &ctx))
        }
        KernelSpec::Combined { alpha, left, right } => {
            let gl = gram(left, data)?;
            let gr = gram(right, data)?;
            combine(&gl, &gr, *alpha)
        }
        KernelSpec::Precomputed => {
            let k = data.kernel.as_ref().ok_or_else(|| {
                Error::Config("precomputed kernel requires kernel-csv data".into())
            })?;
            Ok(GramMatrix::from_parts(spec.clone(), k.clone(), RankCap::Unbounded))
        }
    }
}

fn numeric_view(data: &Dataset) -> Result<Vec<&Vec<f64>>> {
    if data.numeric.is_empty() || data.numeric[0].is_empty() {
        return Err(Error::Config(
            "kernel requires numeric columns but the dataset has none".into(),
        ));
    }
    Ok(data.numeric.iter().collect())
}

fn categorical_view(data: &Dataset) -> Result<Vec<&Vec<u16>>> {
    if data.categorical.is_empty() || data.categorical[0].is_empty() {
        return Err(Error::Config(
            "hamming kernel requires categorical columns but the dataset has none".into(),
        ));
    }
    Ok(data.categorical.iter().collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn numeric_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match spec {
        KernelSpec::Linear => dot(a, b),
        KernelSpec::Gaussian { sigma } => {
            if std::ptr::eq(a, b) {
                return 1.0;
            }
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-sq / (2.0 * sigma * sigma)).exp()
        }
        KernelSpec::Polynomial { degree } => (dot(a, b) + 1.0).powi(*degree as i32),
        _ => unreachable!(),
    }
}

/// Hamming-distance kernel between two categorical tuples.
pub fn hamming_eval(a: &[u16], b: &[u16], gamma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let d = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok((-gamma * d as f64).exp())
}

/// Regularized Laplacian kernel `(I - D^{-1/2} X D^{-1/2} + nu I)^{-1}` of a
/// simple undirected graph.
pub fn laplacian_gram(adjacency: &SymMatrix, nu: f64) -> Result<GramMatrix> {
    if nu <= 0.0 {
        return Err(Error::Config(format!("laplacian nu must be positive, got {nu}")));
    }
    if !adjacency.is_finite() {
        return Err(Error::NonFinite("adjacency matrix"));
    }
    let n = adjacency.order();
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        if adjacency.get(i, i) != 0.0 {
            return Err(Error::Input(format!("adjacency has nonzero diagonal at node {i}")));
        }
        let deg: f64 = adjacency.row(i).iter().sum();
        if deg <= 0.0 {
            return Err(Error::IsolatedNode(i));
        }
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            let v = adjacency.get(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(Error::Input(format!(
                    "adjacency must be binary, entry ({i},{j}) = {v}"
                )));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| {
        let norm = -inv_sqrt_deg[i] * adjacency.get(i, j) * inv_sqrt_deg[j];
        if i == j {
            1.0 + nu + norm
        } else {
            norm
        }
    });
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::Numeric("regularized Laplacian is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok(GramMatrix::from_parts(
        KernelSpec::Laplacian { nu },
        SymMatrix::from_dmatrix(&inv),
        RankCap::Unbounded,
    ))
}

/// Gram of projected curves under the basis form `gamma' B^{-1} gamma`.
pub fn functional_gram(spec: KernelSpec, ctx: &FunctionalContext) -> GramMatrix {
    let n = ctx.coeffs.len();
    let l = ctx.gram.order();
    let g = DMatrix::from_fn(l, n, |i, j| ctx.coeffs[j][i]);
    let z = ctx.gram.solve_dmatrix(&g);
    let prod = g.transpose() * z;
    GramMatrix::from_parts(spec, SymMatrix::from_dmatrix(&prod), RankCap::Capped(l))
}

/// Entrywise convex combination of two Gram matrices over the same samples.
pub fn combine(left: &GramMatrix, right: &GramMatrix, alpha: f64) -> Result<GramMatrix> {
    if left.n() != right.n() {
        return Err(Error::LengthMismatch {
            expected: left.n(),
            got: right.n(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("combined alpha must lie in [0, 1], got {alpha}")));
    }
    let entries = SymMatrix::from_fn(left.n(), |i, j| {
        alpha * left.entry(i, j) + (1.0 - alpha) * right.entry(i, j)
    });
    Ok(GramMatrix::from_parts(
        KernelSpec::Combined {
            alpha,
            left: Box::new(left.spec.clone()),
            right: Box::new(right.spec.clone()),
        },
        entries,
        left.rank_cap().combine(right.rank_cap()),
    ))
}

/// A training sample index or a fresh sample's kernel row.
#[derive(Clone, Copy)]
pub enum Probe<'a> {
    Train(usize),
    Fresh(&'a KernelRow),
}

/// Cached sums for centering kernel evaluations on one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCentering {
    members: Vec<usize>,
    /// `sum_{m in C} K(x_m, x_j)` for every training sample `j`.
    row_sums: Vec<f64>,
    /// `(1/n_i^2) sum_{m,m' in C} K(x_m, x_m')`.
    block_mean: f64,
}

impl ClassCentering {
    pub fn new(gram: &GramMatrix, members: &[usize]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Model("centering over an empty class".into()));
        }
        let n = gram.n();
        let mut row_sums = vec![0.0; n];
        for j in 0..n {
            row_sums[j] = members.iter().map(|&m| gram.entry(m, j)).sum();
        }
        let n_i = members.len() as f64;
        let block: f64 = members.iter().map(|&m| row_sums[m]).sum();
        Ok(ClassCentering {
            members: members.to_vec(),
            row_sums,
            block_mean: block / (n_i * n_i),
        })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn class_size(&self) -> usize {
        self.members.len()
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn block_mean(&self) -> f64 {
        self.block_mean
    }

    fn fresh_sum(&self, row: &KernelRow) -> f64 {
        self.members.iter().map(|&m| row.values[m]).sum()
    }
}

/// Class-centered kernel: the feature-space inner product after subtracting
/// the class mean from both arguments.
pub fn rho(gram: &GramMatrix, centering: &ClassCentering, a: Probe, b: Probe) -> Result<f64> {
    let n = gram.n();
    let n_i = centering.class_size() as f64;
    let check = |r: &KernelRow| -> Result<()> {
        if r.values.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: r.values.len(),
            });
        }
        Ok(())
    };
    match (a, b) {
        (Probe::Train(i), Probe::Train(j)) => Ok(gram.entry(i, j)
            - (centering.row_sums[i] + centering.row_sums[j]) / n_i
            + centering.block_mean),
        (Probe::Train(i), Probe::Fresh(r)) | (Probe::Fresh(r), Probe::Train(i)) => {
            check(r)?;
            Ok(r.values[i] - (centering.fresh_sum(r) + centering.row_sums[i]) / n_i
                + centering.block_mean)
        }
        (Probe::Fresh(r), Probe::Fresh(s)) => {
            check(r)?;
            if !std::ptr::eq(r, s) {
                return Err(Error::Input(
                    "centered evaluation of two distinct fresh samples needs their mutual \
                     kernel value; supply one of them as a training sample"
                        .into(),
                ));
            }
            Ok(r.self_eval - 2.0 * centering.fresh_sum(r) / n_i + centering.block_mean)
        }
    }
}

/// Soft (responsibility-weighted) centering caches for one cluster.
#[derive(Debug, Clone)]
pub struct WeightedCentering {
    weights: Vec<f64>,
    n_eff: f64,
    row_sums: Vec<f64>,
    block_mean: f64,
}

impl WeightedCentering {
    pub fn new(gram: &GramMatrix, weights: &[f64], cluster: usize) -> Result<Self> {
        let n = gram.n();
        if weights.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("weights must be finite and nonnegative".into()));
        }
        let n_eff: f64 = weights.iter().sum();
        if n_eff <= 0.0 {
            return Err(Error::ClusterCollapse {
                index: cluster,
                size: n_eff,
            });
        }
        let mut row_sums = vec![0.0; n];
        for j in 0..n {
            row_sums[j] = (0..n).map(|m| weights[m] * gram.entry(m, j)).sum();
        }
        let block: f64 = (0..n).map(|m| weights[m] * row_sums[m]).sum();
        Ok(WeightedCentering {
            weights: weights.to_vec(),
            n_eff,
            row_sums,
            block_mean: block / (n_eff * n_eff),
        })
    }

    pub fn effective_size(&self) -> f64 {
        self.n_eff
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn block_mean(&self) -> f64 {
        self.block_mean
    }

    fn fresh_sum(&self, row: &KernelRow) -> f64 {
        self.weights.iter().zip(&row.values).map(|(w, v)| w * v).sum()
    }
}

/// Kernel centered on a weighted mean, the soft-assignment analogue of
/// [`rho`]. Indicator weights reduce it to the supervised case.
pub fn rho_weighted(
    gram: &GramMatrix,
    centering: &WeightedCentering,
    a: Probe,
    b: Probe,
) -> Result<f64> {
    let n = gram.n();
    let n_eff = centering.n_eff;
    let check = |r: &KernelRow| -> Result<()> {
        if r.values.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: r.values.len(),
            });
        }
        Ok(())
    };
    match (a, b) {
        (Probe::Train(i), Probe::Train(j)) => Ok(gram.entry(i, j)
            - (centering.row_sums[i] + centering.row_sums[j]) / n_eff
            + centering.block_mean),
        (Probe::Train(i), Probe::Fresh(r)) | (Probe::Fresh(r), Probe::Train(i)) => {
            check(r)?;
            Ok(r.values[i] - (centering.fresh_sum(r) + centering.row_sums[i]) / n_eff
                + centering.block_mean)
        }
        (Probe::Fresh(r), Probe::Fresh(s)) => {
            check(r)?;
            if !std::ptr::eq(r, s) {
                return Err(Error::Input(
                    "centered evaluation of two distinct fresh samples needs their mutual \
                     kernel value"
                        .into(),
                ));
            }
            Ok(r.self_eval - 2.0 * centering.fresh_sum(r) / n_eff + centering.block_mean)
        }
    }
}

/// Prepared sample parts reused across all training pairs of one row.
struct PreparedSample {
    numeric: Vec<f64>,
    categorical: Vec<u16>,
    /// Projected curve coefficients and their `B^{-1}` image.
    gamma: Option<(Vec<f64>, Vec<f64>)>,
}

/// Computes prediction-time kernel rows from stored training samples.
///
/// Covers the analytic families; precomputed and graph kernels are
/// transductive, so their rows must be supplied by the caller.
pub struct Evaluator {
    spec: KernelSpec,
    numeric: Vec<Vec<f64>>,
    categorical: Vec<Vec<u16>>,
    func: Option<FunctionalContext>,
    n: usize,
}

impl Evaluator {
    pub fn new(
        spec: KernelSpec,
        numeric: Vec<Vec<f64>>,
        categorical: Vec<Vec<u16>>,
        coeffs: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        spec.validate()?;
        let n = numeric
            .len()
            .max(categorical.len())
            .max(coeffs.as_ref().map_or(0, |c| c.len()));
        if n == 0 {
            return Err(Error::Input("evaluator needs stored training samples".into()));
        }
        let func = match needs_functional(&spec) {
            Some((basis_size, quad_density)) => {
                let coeffs = coeffs.ok_or_else(|| {
                    Error::Model("functional kernel needs stored curve coefficients".into())
                })?;
                let mut ctx = FunctionalContext::new(basis_size, quad_density, &[])?;
                ctx.coeffs = coeffs;
                Some(ctx)
            }
            None => None,
        };
        Ok(Evaluator {
            spec,
            numeric,
            categorical,
            func,
            n,
        })
    }

    pub fn from_dataset(spec: KernelSpec, data: &Dataset) -> Result<Self> {
        let coeffs = match needs_functional(&spec) {
            Some((basis_size, quad_density)) => {
                let ctx = FunctionalContext::new(basis_size, quad_density, &data.curves)?;
                Some(ctx.coeffs)
            }
            None => None,
        };
        Evaluator::new(spec, data.numeric.clone(), data.categorical.clone(), coeffs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn functional_context(&self) -> Option<&FunctionalContext> {
        self.func.as_ref()
    }

    /// Stored curve coefficients, when the kernel has a functional part.
    pub fn coeffs(&self) -> Option<&Vec<Vec<f64>>> {
        self.func.as_ref().map(|c| &c.coeffs)
    }

    /// Kernel row of a fresh sample against the stored training samples.
    pub fn row(&self, sample: &Sample) -> Result<KernelRow> {
        let prepared = self.prepare(sample)?;
        let values = (0..self.n)
            .map(|j| self.eval_pair(&self.spec, j, &prepared))
            .collect::<Result<Vec<f64>>>()?;
        let self_eval = self.eval_self(&self.spec, &prepared)?;
        Ok(KernelRow { values, self_eval })
    }

    fn prepare(&self, sample: &Sample) -> Result<PreparedSample> {
        let gamma = match &self.func {
            Some(ctx) => {
                let curve = sample.curve.as_ref().ok_or_else(|| {
                    Error::Input("functional kernel needs a curve sample".into())
                })?;
                let g = project_curve(curve, &ctx.basis, &ctx.gram)?;
                let z = ctx.gram.solve(&g);
                Some((g, z))
            }
            None => None,
        };
        Ok(PreparedSample {
            numeric: sample.numeric.clone(),
            categorical: sample.categorical.clone(),
            gamma,
        })
    }

    fn eval_pair(&self, spec: &KernelSpec, j: usize, s: &PreparedSample) -> Result<f64> {
        match spec {
            KernelSpec::Linear | KernelSpec::Gaussian { .. } | KernelSpec::Polynomial { .. } => {
                let row = self
                    .numeric
                    .get(j)
                    .filter(|r| r.len() == s.numeric.len() && !r.is_empty())
                    .ok_or_else(|| Error::Input("numeric parts do not match training data".into()))?;
                Ok(numeric_eval(spec, row, &s.numeric))
            }
            KernelSpec::Hamming { gamma } => {
                let row = self
                    .categorical
                    .get(j)
                    .ok_or_else(|| Error::Input("categorical parts missing".into()))?;
                hamming_eval(row, &s.categorical, *gamma)
            }
            KernelSpec::Functional { .. } => {
                let ctx = self.func.as_ref().expect("functional context");
                let (_, z) = s.gamma.as_ref().expect("prepared curve");
                Ok(dot(&ctx.coeffs[j], z))
            }
            KernelSpec::Combined { alpha, left, right } => {
                Ok(alpha * self.eval_pair(left, j, s)? + (1.0 - alpha) * self.eval_pair(right, j, s)?)
            }
            KernelSpec::Laplacian { .. } | KernelSpec::Precomputed => Err(Error::MissingKernelRow),
        }
    }

    fn eval_self(&self, spec: &KernelSpec, s: &PreparedSample) -> Result<f64> {
        match spec {
            KernelSpec::Linear => Ok(dot(&s.numeric, &s.numeric)),
            KernelSpec::Gaussian { .. } => Ok(1.0),
            KernelSpec::Polynomial { degree } => {
                Ok((dot(&s.numeric, &s.numeric) + 1.0).powi(*degree as i32))
            }
            KernelSpec::Hamming { .. } => Ok(1.0),
            KernelSpec::Functional { .. } => {
                let (g, z) = s.gamma.as_ref().expect("prepared curve");
                Ok(dot(g, z))
            }
            KernelSpec::Combined { alpha, left, right } => {
                Ok(alpha * self.eval_self(left, s)? + (1.0 - alpha) * self.eval_self(right, s)?)
            }
            KernelSpec::Laplacian { .. } | KernelSpec::Precomputed => Err(Error::MissingKernelRow),
        }
    }
}

fn needs_functional(spec: &KernelSpec) -> Option<(usize, usize)> {
    match spec {
        KernelSpec::Functional { basis_size, quad_density } => Some((*basis_size, *quad_density)),
        KernelSpec::Combined { left, right, .. } => {
            needs_functional(left).or_else(|| needs_functional(right))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_dataset(rows: Vec<Vec<f64>>) -> Dataset {
        Dataset {
            ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            numeric: rows,
            ..Default::default()
        }
    }

    #[test]
    fn linear_gram_on_orthonormal_rows() {
        let ds = numeric_dataset(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = gram(&KernelSpec::Linear, &ds).unwrap();
        assert_eq!(g.entry(0, 0), 1.0);
        assert_eq!(g.entry(0, 1), 0.0);
        assert_eq!(g.entry(1, 1), 1.0);
        assert_eq!(g.rank_bound(5), 2);
    }

    #[test]
    fn gaussian_diagonal_is_one() {
        let ds = numeric_dataset(vec![vec![1.5, -2.0], vec![0.3, 0.4], vec![9.0, 9.0]]);
        let g = gram(&KernelSpec::Gaussian { sigma: 0.7 }, &ds).unwrap();
        for i in 0..3 {
            assert!((g.entry(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn polynomial_hand_value() {
        let ds = numeric_dataset(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let g = gram(&KernelSpec::Polynomial { degree: 2 }, &ds).unwrap();
        assert!((g.entry(0, 1) - 9.0).abs() < 1e-12);
        // C(p+q, p) = C(4, 2) = 6
        assert_eq!(g.rank_cap(), RankCap::Capped(6));
    }

    #[test]
    fn hamming_values() {
        assert!((hamming_eval(&[1, 2, 3], &[1, 2, 3], 0.5).unwrap() - 1.0).abs() < 1e-15);
        let p = 4;
        let a = vec![0u16; p];
        let b = vec![1u16; p];
        let k = hamming_eval(&a, &b, 1.0 / p as f64).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12);
        let mut c = vec![0u16; 16];
        c[7] = 5;
        let k = hamming_eval(&vec![0u16; 16], &c, 1.0).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12);
        assert!(hamming_eval(&[1, 2], &[1], 1.0).is_err());
    }

    #[test]
    fn laplacian_two_nodes_hand_inverse() {
        let mut adj = SymMatrix::zeros(2);
        adj.set(0, 1, 1.0);
        let g = laplacian_gram(&adj, 1.0).unwrap();
        for (i, j, want) in [(0, 0, 2.0 / 3.0), (0, 1, 1.0 / 3.0), (1, 1, 2.0 / 3.0)] {
            assert!((g.entry(i, j) - want).abs() < 1e-12, "({i},{j})");
        }
    }

    #[test]
    fn laplacian_rejects_isolated_node() {
        let adj = SymMatrix::zeros(3);
        let err = laplacian_gram(&adj, 1.0).unwrap_err();
        assert!(matches!(err, Error::IsolatedNode(0)));
    }

    #[test]
    fn combine_endpoints_and_midpoint() {
        let k1 = GramMatrix::from_parts(
            KernelSpec::Precomputed,
            SymMatrix::from_fn(2, |i, j| if i == j { 1.0 } else { 0.0 }),
            RankCap::Unbounded,
        );
        let k2 = GramMatrix::from_parts(
            KernelSpec::Precomputed,
            SymMatrix::from_fn(2, |_, _| 1.0),
            RankCap::Unbounded,
        );
        let c1 = combine(&k1, &k2, 1.0).unwrap();
        assert_eq!(c1.entry(0, 1), 0.0);
        let c0 = combine(&k1, &k2, 0.0).unwrap();
        assert_eq!(c0.entry(0, 1), 1.0);
        let ch = combine(&k1, &k2, 0.5).unwrap();
        assert_eq!(ch.entry(0, 0), 1.0);
        assert_eq!(ch.entry(0, 1), 0.5);
    }

    #[test]
    fn rho_single_member_class_is_zero() {
        let ds = numeric_dataset(vec![vec![2.0, 1.0], vec![5.0, -1.0]]);
        let g = gram(&KernelSpec::Linear, &ds).unwrap();
        let c = ClassCentering::new(&g, &[0]).unwrap();
        let v = rho(&g, &c, Probe::Train(0), Probe::Train(0)).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn rho_matches_centered_dot_product_for_linear_kernel() {
        let rows = vec![
            vec![1.0, 2.0],
            vec![-1.0, 0.5],
            vec![3.0, 3.0],
            vec![0.0, -2.0],
        ];
        let members = vec![0, 2, 3];
        let mean: Vec<f64> = (0..2)
            .map(|j| members.iter().map(|&m| rows[m][j]).sum::<f64>() / members.len() as f64)
            .collect();
        let ds = numeric_dataset(rows.clone());
        let g = gram(&KernelSpec::Linear, &ds).unwrap();
        let c = ClassCentering::new(&g, &members).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let want: f64 = (0..2)
                    .map(|j| (rows[a][j] - mean[j]) * (rows[b][j] - mean[j]))
                    .sum();
                let got = rho(&g, &c, Probe::Train(a), Probe::Train(b)).unwrap();
                assert!((got - want).abs() < 1e-12, "({a},{b})");
            }
        }
    }

    #[test]
    fn rho_sums_to_zero_over_class_members() {
        let ds = numeric_dataset(vec![
            vec![0.3, 1.0],
            vec![1.2, -0.4],
            vec![2.0, 0.0],
            vec![-1.0, 0.9],
        ]);
        let g = gram(&KernelSpec::Gaussian { sigma: 1.3 }, &ds).unwrap();
        let members = vec![0, 1, 3];
        let c = ClassCentering::new(&g, &members).unwrap();
        for y in 0..4 {
            let total: f64 = members
                .iter()
                .map(|&m| rho(&g, &c, Probe::Train(m), Probe::Train(y)).unwrap())
                .sum();
            assert!(total.abs() < 1e-10, "y = {y}");
        }
    }

    #[test]
    fn centering_caches_match_direct_summation() {
        let ds = numeric_dataset(vec![vec![0.5], vec![1.5], vec![-0.7], vec![2.2]]);
        let g = gram(&KernelSpec::Gaussian { sigma: 0.9 }, &ds).unwrap();
        let members = vec![1, 3];
        let c = ClassCentering::new(&g, &members).unwrap();
        for j in 0..4 {
            let direct: f64 = members.iter().map(|&m| g.entry(m, j)).sum();
            assert!((c.row_sums()[j] - direct).abs() < 1e-12);
        }
        let direct: f64 = members
            .iter()
            .flat_map(|&a| members.iter().map(move |&b| (a, b)))
            .map(|(a, b)| g.entry(a, b))
            .sum();
        assert!((c.block_mean() - direct / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_rho_with_indicator_weights_reduces_to_supervised() {
        let ds = numeric_dataset(vec![vec![1.0], vec![2.0], vec![4.0], vec![8.0]]);
        let g = gram(&KernelSpec::Linear, &ds).unwrap();
        let members = vec![1, 2];
        let c = ClassCentering::new(&g, &members).unwrap();
        let w = vec![0.0, 1.0, 1.0, 0.0];
        let wc = WeightedCentering::new(&g, &w, 0).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let hard = rho(&g, &c, Probe::Train(a), Probe::Train(b)).unwrap();
                let soft = rho_weighted(&g, &wc, Probe::Train(a), Probe::Train(b)).unwrap();
                assert!((hard - soft).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_rho_matches_weighted_mean_oracle() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0], vec![-1.0, -1.0]];
        let w = vec![0.2, 0.8, 1.5, 0.5];
        let n_eff: f64 = w.iter().sum();
        let mean: Vec<f64> = (0..2)
            .map(|j| rows.iter().zip(&w).map(|(r, wi)| wi * r[j]).sum::<f64>() / n_eff)
            .collect();
        let ds = numeric_dataset(rows.clone());
        let g = gram(&KernelSpec::Linear, &ds).unwrap();
        let wc = WeightedCentering::new(&g, &w, 0).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let want: f64 = (0..2)
                    .map(|j| (rows[a][j] - mean[j]) * (rows[b][j] - mean[j]))
                    .sum();
                let got = rho_weighted(&g, &wc, Probe::Train(a), Probe::Train(b)).unwrap();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_rho_rejects_zero_weights() {
        let ds = numeric_dataset(vec![vec![1.0], vec![2.0]]);
        let g = gram(&KernelSpec::Linear, &ds).unwrap();
        let err = WeightedCentering::new(&g, &[0.0, 0.0], 3).unwrap_err();
        assert!(matches!(err, Error::ClusterCollapse { index: 3, .. }));
    }

    #[test]
    fn evaluator_rows_match_gram_for_training_samples() {
        let ds = Dataset {
            ids: vec!["a".into(), "b".into(), "c".into()],
            numeric: vec![vec![0.1, 0.2], vec![1.0, -1.0], vec![0.4, 0.4]],
            categorical: vec![vec![0, 1], vec![1, 1], vec![0, 0]],
            ..Default::default()
        };
        let spec = KernelSpec::Combined {
            alpha: 0.4,
            left: Box::new(KernelSpec::Hamming { gamma: 0.6 }),
            right: Box::new(KernelSpec::Gaussian { sigma: 1.1 }),
        };
        let g = gram(&spec, &ds).unwrap();
        let ev = Evaluator::from_dataset(spec, &ds).unwrap();
        for i in 0..3 {
            let row = ev.row(&ds.sample(i)).unwrap();
            for j in 0..3 {
                assert!((row.values[j] - g.entry(i, j)).abs() < 1e-12);
            }
            assert!((row.self_eval - g.entry(i, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_saturates() {
        assert_eq!(binomial_saturating(4, 2), 15); // C(6, 4)
        assert_eq!(binomial_saturating(2, 2), 6); // C(4, 2)
        assert_eq!(binomial_saturating(500, 300), usize::MAX);
    }
}
