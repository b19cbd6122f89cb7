//! Unsupervised classification: EM iterations that alternate soft
//! assignments against the current parsimonious model with re-estimation
//! through responsibility-weighted kernel matrices.
//!
//! The M step rebuilds one weighted centered kernel matrix per cluster
//! (size n-by-n, recomputed every iteration), decomposes it and re-applies
//! the submodel constraints; the E step scores every sample against every
//! cluster and renormalizes. Restarts run independently and the best final
//! objective wins.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, WeightedCentering};
use crate::numerics::{clamp_psd_spectrum, softmin_neg_half, sym_eig, SymMatrix};
use crate::pgpda::{resolve_spectra, ScreeParams, SpectralClass, Submodel};

/// Soft cluster assignments: rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    t: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl Responsibilities {
    pub fn new(t: Vec<Vec<f64>>) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::Input("empty responsibility matrix".into()));
        }
        let k = t[0].len();
        for (i, row) in t.iter().enumerate() {
            if row.len() != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input(format!("invalid responsibility in row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Input(format!(
                    "responsibility row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Responsibilities { t, iteration: 0 })
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn k(&self) -> usize {
        self.t[0].len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.t[i][j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.t[i]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.t.iter().map(|r| r[j]).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.k()];
        for row in &self.t {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Row argmax with ties to the smaller index.
    pub fn hard_partition(&self) -> Vec<usize> {
        self.t
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn mean_abs_change(&self, other: &Responsibilities) -> f64 {
        let total: f64 = self
            .t
            .iter()
            .zip(&other.t)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .sum();
        total / (self.n() * self.k()) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Rows drawn from a flat Dirichlet.
    Random,
    /// Kernel k-means partition softened by 0.9 indicator + 0.1 uniform.
    KernelKMeans,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "kkmeans" => Ok(InitMode::KernelKMeans),
            other => Err(Error::Config(format!(
                "unknown init mode '{other}' (expected random or kkmeans)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub k: usize,
    pub submodel: Submodel,
    pub scree: ScreeParams,
    pub max_iter: usize,
    /// Convergence tolerance on the mean absolute responsibility change.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub init: InitMode,
    /// Freeze per-cluster dimensions after this iteration to stabilize the
    /// objective; `None` re-selects them every iteration.
    pub freeze_dims_after: Option<usize>,
    pub auto_shrink: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            k: 2,
            submodel: Submodel::M0,
            scree: ScreeParams::default(),
            max_iter: 200,
            tol: 1e-4,
            restarts: 10,
            seed: 0,
            init: InitMode::KernelKMeans,
            freeze_dims_after: None,
            auto_shrink: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.tol <= 0.0 {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.restarts < 1 || self.max_iter < 1 {
            return Err(Error::Config("restarts and max_iter must be at least 1".into()));
        }
        if self.submodel.common_orientation() {
            return Err(Error::Config(
                "shared-orientation submodels (M7, M8) are not supported for clustering".into(),
            ));
        }
        self.scree.validate()
    }
}

/// Parameters of one cluster after an M step.
#[derive(Debug, Clone)]
pub struct ClusterParams {
    pub weights: Vec<f64>,
    pub n_eff: f64,
    pub prior: f64,
    pub dim: usize,
    pub raw_eigenvalues: Vec<f64>,
    pub model_eigenvalues: Vec<f64>,
    /// Retained eigenvectors of the weighted matrix, length n.
    pub basis_vectors: Vec<Vec<f64>>,
    /// Weighted row sums `sum_j t_ji K(x_j, x_l)` for all `l`.
    pub row_sums: Vec<f64>,
    pub block_mean: f64,
}

impl ClusterParams {
    /// Weighted centered kernel between training samples `a` and `b`.
    #[inline]
    fn centered(&self, gram: &GramMatrix, a: usize, b: usize) -> f64 {
        gram.entry(a, b) - (self.row_sums[a] + self.row_sums[b]) / self.n_eff + self.block_mean
    }
}

/// Model state between EM iterations.
#[derive(Debug, Clone)]
pub struct EmModel {
    pub submodel: Submodel,
    pub clusters: Vec<ClusterParams>,
    pub noise: f64,
    pub d_max: usize,
    pub n: usize,
}

impl EmModel {
    pub fn dims(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.dim).collect()
    }

    /// Classification scores of a training sample against every cluster.
    pub fn scores_train(&self, gram: &GramMatrix, m: usize) -> Vec<f64> {
        self.clusters
            .iter()
            .map(|c| {
                let rho_xx = c.centered(gram, m, m);
                let mut quad = 0.0;
                for j in 0..c.dim {
                    let raw = c.raw_eigenvalues[j];
                    if raw <= 0.0 {
                        continue;
                    }
                    let proj: f64 = (0..self.n)
                        .map(|l| {
                            c.basis_vectors[j][l]
                                * c.weights[l].sqrt()
                                * c.centered(gram, m, l)
                        })
                        .sum();
                    let p2 = proj * proj / (c.n_eff * raw);
                    quad += (1.0 / c.model_eigenvalues[j] - 1.0 / self.noise) * p2;
                }
                let logdet: f64 = c.model_eigenvalues.iter().map(|l| l.ln()).sum();
                quad + rho_xx / self.noise
                    + logdet
                    + (self.d_max - c.dim) as f64 * self.noise.ln()
                    - 2.0 * c.prior.ln()
            })
            .collect()
    }
}

/// Initial soft assignments, deterministic for a given seed.
pub fn init_responsibilities(
    gram: &GramMatrix,
    k: usize,
    mode: InitMode,
    seed: u64,
) -> Result<Responsibilities> {
    let n = gram.n();
    if k > n {
        return Err(Error::Input(format!("k = {k} exceeds the sample count {n}")));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = match mode {
        InitMode::Random => (0..n)
            .map(|_| {
                let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                let sum: f64 = draws.iter().sum();
                draws.into_iter().map(|d| d / sum).collect()
            })
            .collect(),
        InitMode::KernelKMeans => {
            let labels = kernel_kmeans(gram, k, &mut rng);
            (0..n)
                .map(|i| {
                    (0..k)
                        .map(|j| {
                            let ind = if labels[i] == j { 0.9 } else { 0.0 };
                            ind + 0.1 / k as f64
                        })
                        .collect()
                })
                .collect()
        }
    };
    Responsibilities::new(t)
}

/// Lloyd iterations on feature-space distances computed through the kernel.
fn kernel_kmeans(gram: &GramMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = gram.n();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    // Make sure every cluster starts nonempty.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for (c, &i) in order.iter().take(k).enumerate() {
        labels[i] = c;
    }
    for _ in 0..50 {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &z) in labels.iter().enumerate() {
            members[z].push(i);
        }
        // Distances: K(m,m) - 2 mean K(m, C) + mean block(C).
        let mut dist = vec![vec![0.0; k]; n];
        for (c, mem) in members.iter().enumerate() {
            if mem.is_empty() {
                for row in dist.iter_mut() {
                    row[c] = f64::INFINITY;
                }
                continue;
            }
            let size = mem.len() as f64;
            let block: f64 = mem
                .iter()
                .flat_map(|&a| mem.iter().map(move |&b| (a, b)))
                .map(|(a, b)| gram.entry(a, b))
                .sum::<f64>()
                / (size * size);
            for m in 0..n {
                let cross: f64 = mem.iter().map(|&a| gram.entry(m, a)).sum::<f64>() / size;
                dist[m][c] = gram.entry(m, m) - 2.0 * cross + block;
            }
        }
        let mut next: Vec<usize> = dist
            .iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v < row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        // An emptied cluster grabs the sample farthest from its assignment.
        for c in 0..k {
            if !next.contains(&c) {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist[a][next[a]]
                            .partial_cmp(&dist[b][next[b]])
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap();
                next[far] = c;
            }
        }
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Re-estimate cluster parameters from the current responsibilities.
pub fn m_step(
    gram: &GramMatrix,
    t: &Responsibilities,
    submodel: Submodel,
    scree: &ScreeParams,
) -> Result<EmModel> {
    m_step_inner(gram, t, submodel, scree, None, true)
}

fn m_step_inner(
    gram: &GramMatrix,
    t: &Responsibilities,
    submodel: Submodel,
    scree: &ScreeParams,
    forced_dims: Option<&[usize]>,
    auto_shrink: bool,
) -> Result<EmModel> {
    let n = gram.n();
    if t.n() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: t.n(),
        });
    }
    let k = t.k();
    let mut clusters = Vec::with_capacity(k);
    let mut spectral = Vec::with_capacity(k);
    let mut eigs = Vec::with_capacity(k);
    for i in 0..k {
        let w = t.column(i);
        let n_eff: f64 = w.iter().sum();
        if n_eff < 1e-8 * n as f64 || n_eff.round() < 2.0 {
            return Err(Error::ClusterCollapse {
                index: i,
                size: n_eff,
            });
        }
        let wc = WeightedCentering::new(gram, &w, i)?;
        let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let m = SymMatrix::from_fn(n, |a, b| {
            let centered = gram.entry(a, b)
                - (wc.row_sums()[a] + wc.row_sums()[b]) / n_eff
                + wc.block_mean();
            sqrt_w[a] * sqrt_w[b] * centered / n_eff
        });
        let eig = sym_eig(&m)?;
        let spectrum = clamp_psd_spectrum(&eig.values);
        spectral.push(SpectralClass {
            spectrum,
            rank: gram.rank_bound(n_eff.round() as usize),
            prior: n_eff / n as f64,
            can_model: true,
        });
        eigs.push(eig);
        clusters.push((w, n_eff, wc));
    }

    let resolution = resolve_spectra(&spectral, None, submodel, scree, auto_shrink, forced_dims)?;

    let clusters = clusters
        .into_iter()
        .enumerate()
        .map(|(i, (weights, n_eff, wc))| {
            let d = resolution.dims[i];
            ClusterParams {
                weights,
                n_eff,
                prior: spectral[i].prior,
                dim: d,
                raw_eigenvalues: spectral[i].spectrum.iter().copied().take(d).collect(),
                model_eigenvalues: resolution.model_eigenvalues[i].clone(),
                basis_vectors: eigs[i].vectors.iter().take(d).cloned().collect(),
                row_sums: wc.row_sums().to_vec(),
                block_mean: wc.block_mean(),
            }
        })
        .collect();

    Ok(EmModel {
        submodel,
        clusters,
        noise: resolution.noise,
        d_max: resolution.d_max,
        n,
    })
}

/// Soft assignments against the current parameters, plus the objective
/// `sum_j log sum_i exp(-D_i(x_j) / 2)`.
pub fn e_step(model: &EmModel, gram: &GramMatrix) -> Result<(Responsibilities, f64)> {
    let n = gram.n();
    if model.n != n {
        return Err(Error::LengthMismatch {
            expected: model.n,
            got: n,
        });
    }
    let mut t = Vec::with_capacity(n);
    let mut objective = 0.0;
    for m in 0..n {
        let scores = model.scores_train(gram, m);
        if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite score for sample {m} against cluster {bad}"
            )));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let logsum: f64 = scores
            .iter()
            .map(|s| (-(s - min) / 2.0).exp())
            .sum::<f64>()
            .ln();
        objective += -min / 2.0 + logsum;
        t.push(softmin_neg_half(&scores));
    }
    Ok((Responsibilities::new(t)?, objective))
}

/// One iteration record for convergence monitoring.
#[derive(Debug, Clone)]
pub struct IterStat {
    pub iteration: usize,
    pub objective: f64,
    pub delta: f64,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub iterations: Vec<IterStat>,
}

/// Result of the best restart.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub partition: Vec<usize>,
    pub responsibilities: Responsibilities,
    pub model: EmModel,
    pub trace: EmTrace,
    pub objective: f64,
    pub restart: usize,
}

/// Run the EM algorithm with restarts; the run with the highest final
/// objective wins. Collapsed restarts are recorded and skipped.
pub fn run(gram: &GramMatrix, config: &EmConfig) -> Result<EmOutcome> {
    config.validate()?;
    if config.k > gram.n() {
        return Err(Error::Input(format!(
            "k = {} exceeds the sample count {}",
            config.k,
            gram.n()
        )));
    }
    let results: Vec<Result<EmOutcome>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| run_single(gram, config, r))
        .collect();
    let mut best: Option<EmOutcome> = None;
    let mut collapsed = 0;
    for res in results {
        match res {
            Ok(candidate) => {
                let better = match &best {
                    None => true,
                    Some(b) => candidate.objective > b.objective,
                };
                if better {
                    best = Some(candidate);
                }
            }
            Err(e) => {
                log::warn!("restart collapsed: {e}");
                collapsed += 1;
            }
        }
    }
    best.ok_or(Error::ClusteringFailed(collapsed))
}

fn run_single(gram: &GramMatrix, config: &EmConfig, restart: usize) -> Result<EmOutcome> {
    let mut t = init_responsibilities(gram, config.k, config.init, config.seed + restart as u64)?;
    let mut trace = EmTrace::default();
    let mut frozen: Option<Vec<usize>> = None;
    let mut model = m_step_inner(
        gram,
        &t,
        config.submodel,
        &config.scree,
        None,
        config.auto_shrink,
    )?;
    let mut objective = f64::NEG_INFINITY;
    for q in 1..=config.max_iter {
        let (mut t_new, obj) = e_step(&model, gram)?;
        t_new.iteration = q;
        let delta = t_new.mean_abs_change(&t);
        objective = obj;
        trace.iterations.push(IterStat {
            iteration: q,
            objective: obj,
            delta,
            dims: model.dims(),
        });
        t = t_new;
        if delta < config.tol || q == config.max_iter {
            break;
        }
        if let Some(freeze_at) = config.freeze_dims_after {
            if q >= freeze_at && frozen.is_none() {
                frozen = Some(model.dims());
            }
        }
        model = m_step_inner(
            gram,
            &t,
            config.submodel,
            &config.scree,
            frozen.as_deref(),
            config.auto_shrink,
        )?;
    }
    Ok(EmOutcome {
        partition: t.hard_partition(),
        responsibilities: t,
        model,
        trace,
        objective,
        restart,
    })
}

/// Best agreement between a partition and reference labels over all
/// relabelings; both sides must use at most 8 distinct labels.
pub fn cluster_accuracy(partition: &[usize], labels: &[usize]) -> Result<f64> {
    if partition.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            got: partition.len(),
        });
    }
    if partition.is_empty() {
        return Err(Error::Input("empty partition".into()));
    }
    let k = partition.iter().chain(labels).copied().max().unwrap() + 1;
    if k > 8 {
        return Err(Error::Input(format!(
            "exact relabeling search supports at most 8 clusters, got {k}"
        )));
    }
    // Count agreement under every relabeling via the confusion matrix.
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in partition.iter().zip(labels) {
        confusion[p][l] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    heap_permutations(&mut perm, 0, &mut |perm| {
        let hits: usize = (0..k).map(|c| confusion[c][perm[c]]).sum();
        best = best.max(hits);
    });
    Ok(best as f64 / partition.len() as f64)
}

fn heap_permutations(arr: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == arr.len() {
        visit(arr);
        return;
    }
    for i in start..arr.len() {
        arr.swap(start, i);
        heap_permutations(arr, start + 1, visit);
        arr.swap(start, i);
    }
}
