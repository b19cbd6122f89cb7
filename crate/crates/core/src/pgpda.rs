//! Supervised kernel discriminant analysis with parsimonious Gaussian
//! process models.
//!
//! Each class gets a centered kernel matrix whose spectrum matches the
//! nonzero spectrum of the class covariance operator in feature space. A
//! submodel (M0..M8) constrains eigenvalues, intrinsic dimensions and
//! orientations across classes; everything beyond the retained axes shares a
//! single noise eigenvalue estimated from the trace residual. Classification
//! scores, posteriors and feature-subspace projections are all computed
//! through kernel evaluations only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ClassCentering, GramMatrix, KernelRow, KernelSpec, Probe};
use crate::numerics::{clamp_psd_spectrum, softmin_neg_half, sym_eig, SymMatrix};

/// Constraint pattern of the parsimonious family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Submodel {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
}

/// How retained eigenvalues are pooled across and within classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenPooling {
    Free,
    CommonWithin,
    CommonBetween,
    CommonWithinBetween,
}

impl Submodel {
    pub fn all() -> [Submodel; 9] {
        use Submodel::*;
        [M0, M1, M2, M3, M4, M5, M6, M7, M8]
    }

    pub fn pooling(self) -> EigenPooling {
        use Submodel::*;
        match self {
            M0 | M1 => EigenPooling::Free,
            M2 | M3 => EigenPooling::CommonWithin,
            M4 | M7 => EigenPooling::CommonBetween,
            M5 | M6 | M8 => EigenPooling::CommonWithinBetween,
        }
    }

    pub fn common_dimension(self) -> bool {
        use Submodel::*;
        matches!(self, M1 | M3 | M4 | M6 | M7 | M8)
    }

    pub fn common_orientation(self) -> bool {
        matches!(self, Submodel::M7 | Submodel::M8)
    }
}

impl std::fmt::Display for Submodel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "M{}", *self as usize)
    }
}

impl std::str::FromStr for Submodel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let all = Submodel::all();
        for m in all {
            if s.eq_ignore_ascii_case(&m.to_string()) {
                return Ok(m);
            }
        }
        Err(Error::Config(format!("unknown submodel '{s}' (expected M0..M8)")))
    }
}

/// Dimension selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScreeMode {
    /// Use the given dimension, capped by the rank bound.
    Fixed(usize),
    /// Cattell scree test at the given threshold on normalized differences.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeParams {
    pub mode: ScreeMode,
    pub d_min: usize,
    pub cap: Option<usize>,
}

impl Default for ScreeParams {
    fn default() -> Self {
        ScreeParams {
            mode: ScreeMode::Threshold(0.2),
            d_min: 1,
            cap: None,
        }
    }
}

impl ScreeParams {
    pub fn threshold(tau: f64) -> Self {
        ScreeParams {
            mode: ScreeMode::Threshold(tau),
            ..Default::default()
        }
    }

    pub fn fixed(d: usize) -> Self {
        ScreeParams {
            mode: ScreeMode::Fixed(d),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ScreeMode::Fixed(d) if d < 1 => {
                Err(Error::Config("fixed dimension must be at least 1".into()))
            }
            ScreeMode::Threshold(t) if !(t > 0.0 && t <= 1.0) => {
                Err(Error::Config(format!("scree threshold must lie in (0, 1], got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// Dimension from the eigenvalue scree: the last index whose drop to the
/// next eigenvalue is at least `tau` times the largest drop, clipped to
/// `[d_min, min(cap, hard_cap)]`. A flat spectrum falls back to `d_min`.
pub fn cattell_dim(values: &[f64], params: &ScreeParams, hard_cap: usize) -> Result<usize> {
    params.validate()?;
    let upper = params.cap.unwrap_or(usize::MAX).min(hard_cap).max(1);
    let lower = params.d_min.max(1).min(upper);
    match params.mode {
        ScreeMode::Fixed(d) => Ok(d.clamp(lower, upper)),
        ScreeMode::Threshold(tau) => {
            if values.len() < 2 {
                return Err(Error::Input(
                    "scree test needs at least 2 eigenvalues".into(),
                ));
            }
            let diffs: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).collect();
            let best = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best <= 0.0 {
                log::warn!("flat eigenvalue scree; falling back to d = {lower}");
                return Ok(lower);
            }
            let mut d = lower;
            for (j, diff) in diffs.iter().enumerate() {
                if *diff >= tau * best {
                    d = j + 1;
                }
            }
            Ok(d.clamp(lower, upper))
        }
    }
}

/// Common dimension across classes: the scree test applied to the
/// prior-weighted mean spectrum, spectra padded with zeros to equal length.
pub fn common_dimension(
    spectra: &[&[f64]],
    priors: &[f64],
    params: &ScreeParams,
    hard_cap: usize,
) -> Result<usize> {
    if spectra.is_empty() {
        return Err(Error::Input("no spectra".into()));
    }
    let len = spectra.iter().map(|s| s.len()).max().unwrap();
    let mut mean = vec![0.0; len];
    for (s, &p) in spectra.iter().zip(priors) {
        for (j, &v) in s.iter().enumerate() {
            mean[j] += p * v;
        }
    }
    cattell_dim(&mean, params, hard_cap)
}

/// Apply a submodel's eigenvalue constraint to the retained spectra.
///
/// Free leaves them unchanged; common-within replaces each class's values by
/// their mean; common-between replaces value `j` by the prior-weighted mean
/// over classes (requires equal dimensions); common-within-and-between uses
/// the prior-weighted grand mean everywhere.
pub fn fuse_spectra(
    retained: &[Vec<f64>],
    priors: &[f64],
    pooling: EigenPooling,
) -> Result<Vec<Vec<f64>>> {
    if retained.len() != priors.len() {
        return Err(Error::LengthMismatch {
            expected: retained.len(),
            got: priors.len(),
        });
    }
    match pooling {
        EigenPooling::Free => Ok(retained.to_vec()),
        EigenPooling::CommonWithin => Ok(retained
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Vec::new()
                } else {
                    let m = s.iter().sum::<f64>() / s.len() as f64;
                    vec![m; s.len()]
                }
            })
            .collect()),
        EigenPooling::CommonBetween => {
            let d = retained.iter().map(|s| s.len()).max().unwrap_or(0);
            if retained.iter().any(|s| !s.is_empty() && s.len() != d) {
                return Err(Error::Config(
                    "common-between pooling requires a common dimension".into(),
                ));
            }
            let mut pooled = vec![0.0; d];
            let mut weight = 0.0;
            for (s, &p) in retained.iter().zip(priors) {
                if s.is_empty() {
                    continue;
                }
                weight += p;
                for (j, &v) in s.iter().enumerate() {
                    pooled[j] += p * v;
                }
            }
            if weight > 0.0 {
                for v in pooled.iter_mut() {
                    *v /= weight;
                }
            }
            Ok(retained
                .iter()
                .map(|s| if s.is_empty() { Vec::new() } else { pooled.clone() })
                .collect())
        }
        EigenPooling::CommonWithinBetween => {
            let mut grand = 0.0;
            let mut weight = 0.0;
            for (s, &p) in retained.iter().zip(priors) {
                if s.is_empty() {
                    continue;
                }
                grand += p * s.iter().sum::<f64>() / s.len() as f64;
                weight += p;
            }
            let grand = if weight > 0.0 { grand / weight } else { 0.0 };
            Ok(retained
                .iter()
                .map(|s| vec![grand; s.len()])
                .collect())
        }
    }
}

/// Pooled noise variance from the trace residuals: the prior-weighted mass
/// beyond the retained axes over the prior-weighted count of noise axes.
/// Uses the unfused per-class spectra.
pub fn estimate_noise(
    spectra: &[Vec<f64>],
    dims: &[usize],
    ranks: &[usize],
    priors: &[f64],
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (((s, &d), &r), &p) in spectra.iter().zip(dims).zip(ranks).zip(priors) {
        if r < d {
            return Err(Error::DimensionTooLarge { dim: d, bound: r });
        }
        num += p * s.iter().skip(d).sum::<f64>();
        den += p * (r - d) as f64;
    }
    if den <= 0.0 {
        return Err(Error::DimensionTooLarge {
            dim: dims.iter().copied().max().unwrap_or(0),
            bound: ranks.iter().copied().min().unwrap_or(0),
        });
    }
    let noise = num / den;
    if noise <= 1e-14 {
        return Err(Error::DegenerateNoise { value: noise });
    }
    Ok(noise)
}

/// Per-class spectral inputs to the shared constraint-resolution pipeline.
#[derive(Debug, Clone)]
pub(crate) struct SpectralClass {
    /// Clamped full spectrum, descending.
    pub spectrum: Vec<f64>,
    /// Rank bound `r_i`.
    pub rank: usize,
    pub prior: f64,
    /// False for singleton classes, which keep dimension 0.
    pub can_model: bool,
}

impl SpectralClass {
    fn degenerate(&self) -> bool {
        self.spectrum.first().copied().unwrap_or(0.0) <= 0.0
    }

    fn truncated(&self) -> &[f64] {
        &self.spectrum[..self.rank.min(self.spectrum.len())]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SpectralResolution {
    pub dims: Vec<usize>,
    /// Eigenvalues entering the density terms, one list per class.
    pub model_eigenvalues: Vec<Vec<f64>>,
    pub noise: f64,
    pub d_max: usize,
}

/// Resolve dimensions, constrained eigenvalues and the noise level for one
/// submodel. `pooled` carries the shared-orientation spectrum for M7/M8;
/// `forced_dims` bypasses the scree test (used to freeze dimensions across
/// EM iterations) and disables shrinking.
pub(crate) fn resolve_spectra(
    classes: &[SpectralClass],
    pooled: Option<&[f64]>,
    submodel: Submodel,
    scree: &ScreeParams,
    auto_shrink: bool,
    forced_dims: Option<&[usize]>,
) -> Result<SpectralResolution> {
    scree.validate()?;
    let priors: Vec<f64> = classes.iter().map(|c| c.prior).collect();
    let modeled: Vec<usize> = (0..classes.len())
        .filter(|&i| classes[i].can_model)
        .collect();
    if modeled.is_empty() {
        return Err(Error::Input("no class has at least 2 members".into()));
    }
    let auto_shrink = auto_shrink && forced_dims.is_none();

    // Initial dimensions.
    let mut dims = vec![0usize; classes.len()];
    if let Some(forced) = forced_dims {
        if forced.len() != classes.len() {
            return Err(Error::LengthMismatch {
                expected: classes.len(),
                got: forced.len(),
            });
        }
        for &i in &modeled {
            let cap = classes[i].rank.saturating_sub(1);
            if cap == 0 {
                return Err(Error::DimensionTooLarge { dim: 1, bound: 1 });
            }
            dims[i] = forced[i].clamp(1, cap);
        }
    } else if submodel.common_dimension() {
        let cap = modeled
            .iter()
            .map(|&i| classes[i].rank.saturating_sub(1))
            .min()
            .unwrap();
        if cap == 0 {
            return Err(Error::DimensionTooLarge { dim: 1, bound: 1 });
        }
        let spectra: Vec<&[f64]> = modeled.iter().map(|&i| classes[i].truncated()).collect();
        let pri: Vec<f64> = modeled.iter().map(|&i| classes[i].prior).collect();
        let mut d = common_dimension(&spectra, &pri, scree, cap)?;
        if let Some(p) = pooled {
            let positive = p.iter().filter(|v| **v > 0.0).count();
            d = d.min(positive.max(1));
        }
        for &i in &modeled {
            dims[i] = d;
        }
    } else {
        for &i in &modeled {
            let c = &classes[i];
            let cap = c.rank.saturating_sub(1);
            if cap == 0 {
                return Err(Error::DimensionTooLarge { dim: 1, bound: 1 });
            }
            dims[i] = if c.degenerate() {
                scree.d_min.max(1).min(cap)
            } else {
                cattell_dim(c.truncated(), scree, cap)?
            };
        }
    }

    // Fuse and estimate noise, shrinking while a retained model eigenvalue
    // does not exceed the noise level.
    let ranks: Vec<usize> = classes.iter().map(|c| c.rank).collect();
    let spectra: Vec<Vec<f64>> = classes.iter().map(|c| c.spectrum.clone()).collect();
    loop {
        let (fused, pooled_fused) = fuse_for(classes, &dims, submodel, pooled)?;
        let noise = estimate_noise(&spectra, &dims, &ranks, &priors)?;
        if !auto_shrink {
            return finish(classes, dims, fused, pooled_fused, noise, submodel);
        }
        let mut shrunk = false;
        if submodel.common_dimension() {
            let d = modeled.iter().map(|&i| dims[i]).max().unwrap();
            let violated = modeled.iter().any(|&i| {
                let v = pooled_fused.as_ref().map(|p| p[dims[i] - 1]).unwrap_or_else(|| fused[i][dims[i] - 1]);
                dims[i] > 0 && !classes[i].degenerate() && v <= noise
            });
            if violated && d > scree.d_min.max(1) {
                for &i in &modeled {
                    dims[i] -= 1;
                }
                shrunk = true;
            }
        } else {
            for &i in &modeled {
                if dims[i] > scree.d_min.max(1)
                    && !classes[i].degenerate()
                    && fused[i][dims[i] - 1] <= noise
                {
                    dims[i] -= 1;
                    shrunk = true;
                }
            }
        }
        if !shrunk {
            if modeled.iter().any(|&i| {
                !classes[i].degenerate()
                    && dims[i] > 0
                    && fused[i].last().copied().unwrap_or(f64::INFINITY) <= noise
            }) {
                log::warn!(
                    "a retained eigenvalue does not exceed the noise level {noise:.3e}; \
                     scores remain computable but that axis acts as amplified noise"
                );
            }
            return finish(classes, dims, fused, pooled_fused, noise, submodel);
        }
    }
}

/// Submodel-specific fusion. Returns per-class model eigenvalues and, for
/// shared-orientation submodels, the pooled model eigenvalues.
fn fuse_for(
    classes: &[SpectralClass],
    dims: &[usize],
    submodel: Submodel,
    pooled: Option<&[f64]>,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    if submodel.common_orientation() {
        let pooled = pooled.ok_or_else(|| {
            Error::Model("shared-orientation submodel needs the pooled spectrum".into())
        })?;
        let d = dims.iter().copied().max().unwrap_or(0);
        let retained: Vec<f64> = pooled.iter().copied().take(d).collect();
        let fused = match submodel.pooling() {
            EigenPooling::CommonBetween => retained.clone(),
            EigenPooling::CommonWithinBetween => {
                let m = if retained.is_empty() {
                    0.0
                } else {
                    retained.iter().sum::<f64>() / retained.len() as f64
                };
                vec![m; retained.len()]
            }
            _ => unreachable!("shared orientation implies between-class pooling"),
        };
        let per_class = dims
            .iter()
            .map(|&d_i| fused.iter().copied().take(d_i).collect())
            .collect();
        Ok((per_class, Some(fused)))
    } else {
        let retained: Vec<Vec<f64>> = classes
            .iter()
            .zip(dims)
            .map(|(c, &d)| c.spectrum.iter().copied().take(d).collect())
            .collect();
        let priors: Vec<f64> = classes.iter().map(|c| c.prior).collect();
        let fused = fuse_spectra(&retained, &priors, submodel.pooling())?;
        Ok((fused, None))
    }
}

fn finish(
    classes: &[SpectralClass],
    dims: Vec<usize>,
    mut fused: Vec<Vec<f64>>,
    pooled_fused: Option<Vec<f64>>,
    noise: f64,
    submodel: Submodel,
) -> Result<SpectralResolution> {
    for (i, c) in classes.iter().enumerate() {
        if c.degenerate() {
            // No within-class spread at all: the class is modeled as pure
            // noise around its mean, so its axes carry the noise eigenvalue.
            fused[i] = vec![noise; dims[i]];
            continue;
        }
        if !submodel.common_orientation() {
            let floor = 1e-12 * c.spectrum[0];
            if c.spectrum[..dims[i]].iter().any(|&v| v <= floor) {
                return Err(Error::DegenerateNoise { value: noise });
            }
        }
    }
    let _ = pooled_fused;
    let d_max = dims.iter().copied().max().unwrap_or(0);
    Ok(SpectralResolution {
        dims,
        model_eigenvalues: fused,
        noise,
        d_max,
    })
}

/// Normalized class-centered kernel matrix: entries are the centered kernel
/// over class members divided by the class size. Its nonzero spectrum equals
/// the class covariance operator's.
pub fn class_matrix(gram: &GramMatrix, members: &[usize]) -> Result<SymMatrix> {
    let centering = ClassCentering::new(gram, members)?;
    let n_i = members.len() as f64;
    let mut m = SymMatrix::zeros(members.len());
    for a in 0..members.len() {
        for b in a..members.len() {
            let v = crate::kernels::rho(
                gram,
                &centering,
                Probe::Train(members[a]),
                Probe::Train(members[b]),
            )?;
            m.set(a, b, v / n_i);
        }
    }
    Ok(m)
}

/// One class of a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassModel {
    pub members: Vec<usize>,
    pub prior: f64,
    /// Intrinsic dimension; 0 for singleton classes.
    pub dim: usize,
    /// Retained eigenvalues of the class matrix (projection normalization).
    pub raw_eigenvalues: Vec<f64>,
    /// Constrained eigenvalues entering the density terms.
    pub model_eigenvalues: Vec<f64>,
    /// Retained unit-norm eigenvectors over class members; empty under a
    /// shared orientation.
    pub basis_vectors: Vec<Vec<f64>>,
    /// `sum_{m in C_i} K(x_m, x_j)` for every training sample `j`.
    pub row_sums: Vec<f64>,
    /// `(1/n_i^2) sum_{m,m' in C_i} K(x_m, x_m')`.
    pub block_mean: f64,
}

impl ClassModel {
    pub fn class_size(&self) -> usize {
        self.members.len()
    }
}

/// Shared orientation block for M7/M8: spectrum and eigenvectors of the
/// pooled within-class-centered kernel matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharedOrientation {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `(1/(n_i n_j)) sum_{a in C_i, b in C_j} K(x_a, x_b)`.
    pub cross_block_means: Vec<Vec<f64>>,
}

/// A fitted classifier: the unit of persistence and prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub submodel: Submodel,
    pub classes: Vec<ClassModel>,
    /// Shared noise eigenvalue.
    pub noise: f64,
    pub d_max: usize,
    pub kernel: KernelSpec,
    pub n_train: usize,
    pub shared: Option<SharedOrientation>,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub submodel: Submodel,
    pub scree: ScreeParams,
    /// Shrink a class dimension while its weakest retained eigenvalue does
    /// not exceed the noise level.
    pub auto_shrink: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            submodel: Submodel::M0,
            scree: ScreeParams::default(),
            auto_shrink: true,
        }
    }
}

impl FitOptions {
    pub fn new(submodel: Submodel, scree: ScreeParams) -> Self {
        FitOptions {
            submodel,
            scree,
            auto_shrink: true,
        }
    }
}

/// Fit the classifier from a Gram matrix and dense class labels `0..k`.
pub fn fit(gram: &GramMatrix, labels: &[usize], opts: &FitOptions) -> Result<FittedModel> {
    let n = gram.n();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    if k == 0 {
        return Err(Error::Input("no samples".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &z) in labels.iter().enumerate() {
        members[z].push(i);
    }
    if let Some(empty) = (0..k).find(|&i| members[i].is_empty()) {
        return Err(Error::EmptyClass(empty));
    }

    let mut centerings = Vec::with_capacity(k);
    let mut eigs = Vec::with_capacity(k);
    let mut spectral = Vec::with_capacity(k);
    for class in 0..k {
        let c = ClassCentering::new(gram, &members[class])?;
        let n_i = members[class].len();
        if n_i == 1 {
            log::warn!("class {class} has a single member; modeling it as pure noise");
            eigs.push(None);
            spectral.push(SpectralClass {
                spectrum: vec![0.0],
                rank: gram.rank_bound(1),
                prior: 1.0 / n as f64,
                can_model: false,
            });
            centerings.push(c);
            continue;
        }
        let m = class_matrix(gram, &members[class])?;
        let eig = sym_eig(&m)?;
        let spectrum = clamp_psd_spectrum(&eig.values);
        spectral.push(SpectralClass {
            spectrum,
            rank: gram.rank_bound(n_i),
            prior: n_i as f64 / n as f64,
            can_model: true,
        });
        eigs.push(Some(eig));
        centerings.push(c);
    }

    // Pooled within-class-centered matrix for the shared orientation.
    let mut shared_eig = None;
    if opts.submodel.common_orientation() {
        let pooled = pooled_within_matrix(gram, labels, &centerings, &members)?;
        let eig = sym_eig(&pooled)?;
        let values = clamp_psd_spectrum(&eig.values);
        shared_eig = Some((values, eig.vectors));
    }

    let resolution = resolve_spectra(
        &spectral,
        shared_eig.as_ref().map(|(v, _)| v.as_slice()),
        opts.submodel,
        &opts.scree,
        opts.auto_shrink,
        None,
    )?;

    let mut classes = Vec::with_capacity(k);
    for i in 0..k {
        let d = resolution.dims[i];
        let (raw, vectors) = match &eigs[i] {
            Some(eig) => {
                let raw: Vec<f64> = spectral[i].spectrum.iter().copied().take(d).collect();
                let vectors = if opts.submodel.common_orientation() {
                    Vec::new()
                } else {
                    eig.vectors.iter().take(d).cloned().collect()
                };
                (raw, vectors)
            }
            None => (Vec::new(), Vec::new()),
        };
        classes.push(ClassModel {
            members: members[i].clone(),
            prior: spectral[i].prior,
            dim: d,
            raw_eigenvalues: raw,
            model_eigenvalues: resolution.model_eigenvalues[i].clone(),
            basis_vectors: vectors,
            row_sums: centerings[i].row_sums().to_vec(),
            block_mean: centerings[i].block_mean(),
        });
    }

    let shared = shared_eig.map(|(values, vectors)| {
        let d = resolution.d_max;
        let cross = cross_block_means(&classes, &members);
        SharedOrientation {
            values: values.into_iter().take(d).collect(),
            vectors: vectors.into_iter().take(d).collect(),
            labels: labels.to_vec(),
            cross_block_means: cross,
        }
    });

    Ok(FittedModel {
        submodel: opts.submodel,
        classes,
        noise: resolution.noise,
        d_max: resolution.d_max,
        kernel: gram.spec.clone(),
        n_train: n,
        shared,
    })
}

/// Pooled matrix with entries `<phi(x_a) - mu_{z_a}, phi(x_b) - mu_{z_b}> / n`,
/// expanded through the kernel.
fn pooled_within_matrix(
    gram: &GramMatrix,
    labels: &[usize],
    centerings: &[ClassCentering],
    members: &[Vec<usize>],
) -> Result<SymMatrix> {
    let n = gram.n();
    let sizes: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();
    let k = members.len();
    let mut cross = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let s: f64 = members[j]
                .iter()
                .map(|&b| centerings[i].row_sums()[b])
                .sum();
            cross[i][j] = s / (sizes[i] * sizes[j]);
        }
    }
    Ok(SymMatrix::from_fn(n, |a, b| {
        let (za, zb) = (labels[a], labels[b]);
        let v = gram.entry(a, b) - centerings[zb].row_sums()[a] / sizes[zb]
            - centerings[za].row_sums()[b] / sizes[za]
            + cross[za][zb];
        v / n as f64
    }))
}

fn cross_block_means(classes: &[ClassModel], members: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let k = classes.len();
    let mut cross = vec![vec![0.0; k]; k];
    for i in 0..k {
        let n_i = classes[i].class_size() as f64;
        for j in 0..k {
            let n_j = members[j].len() as f64;
            let s: f64 = members[j].iter().map(|&b| classes[i].row_sums[b]).sum();
            cross[i][j] = s / (n_i * n_j);
        }
    }
    cross
}

impl FittedModel {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    /// Classification scores for a sample given as a kernel row; the
    /// prediction is the argmin.
    pub fn scores(&self, row: &KernelRow) -> Result<Vec<f64>> {
        if row.values.len() != self.n_train {
            return Err(Error::LengthMismatch {
                expected: self.n_train,
                got: row.values.len(),
            });
        }
        let fresh_sums: Vec<f64> = self
            .classes
            .iter()
            .map(|c| c.members.iter().map(|&m| row.values[m]).sum())
            .collect();
        let mut out = Vec::with_capacity(self.k());
        for (i, class) in self.classes.iter().enumerate() {
            let n_i = class.class_size() as f64;
            let rho_xx =
                row.self_eval - 2.0 * fresh_sums[i] / n_i + class.block_mean;
            let quad = if self.submodel.common_orientation() {
                self.shared_quad(i, row, &fresh_sums)?
            } else {
                self.class_quad(class, row, fresh_sums[i])
            };
            let logdet: f64 = class.model_eigenvalues.iter().map(|l| l.ln()).sum();
            let score = quad
                + rho_xx / self.noise
                + logdet
                + (self.d_max - class.dim) as f64 * self.noise.ln()
                - 2.0 * class.prior.ln();
            if !score.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite score for class {i}"
                )));
            }
            out.push(score);
        }
        Ok(out)
    }

    /// Quadratic term over the class's own axes.
    fn class_quad(&self, class: &ClassModel, row: &KernelRow, fresh_sum: f64) -> f64 {
        if class.dim == 0 || class.basis_vectors.is_empty() {
            return 0.0;
        }
        let n_i = class.class_size() as f64;
        let rho_vec: Vec<f64> = class
            .members
            .iter()
            .map(|&m| {
                row.values[m] - (fresh_sum + class.row_sums[m]) / n_i + class.block_mean
            })
            .collect();
        let mut quad = 0.0;
        for j in 0..class.dim {
            let raw = class.raw_eigenvalues[j];
            if raw <= 0.0 {
                continue;
            }
            let proj: f64 = class.basis_vectors[j]
                .iter()
                .zip(&rho_vec)
                .map(|(b, r)| b * r)
                .sum();
            let p2 = proj * proj / (n_i * raw);
            quad += (1.0 / class.model_eigenvalues[j] - 1.0 / self.noise) * p2;
        }
        quad
    }

    /// Quadratic term over the shared axes (M7/M8).
    fn shared_quad(&self, i: usize, row: &KernelRow, fresh_sums: &[f64]) -> Result<f64> {
        let shared = self
            .shared
            .as_ref()
            .ok_or_else(|| Error::Model("missing shared orientation block".into()))?;
        let class = &self.classes[i];
        let n = self.n_train as f64;
        let n_i = class.class_size() as f64;
        let g: Vec<f64> = (0..self.n_train)
            .map(|l| {
                let zl = shared.labels[l];
                let n_zl = self.classes[zl].class_size() as f64;
                row.values[l] - fresh_sums[zl] / n_zl - class.row_sums[l] / n_i
                    + shared.cross_block_means[i][zl]
            })
            .collect();
        let mut quad = 0.0;
        for j in 0..class.dim {
            let nu = shared.values[j];
            if nu <= 0.0 {
                continue;
            }
            let proj: f64 = shared.vectors[j].iter().zip(&g).map(|(b, v)| b * v).sum();
            let p2 = proj * proj / (n * nu);
            quad += (1.0 / class.model_eigenvalues[j] - 1.0 / self.noise) * p2;
        }
        Ok(quad)
    }

    /// Posterior class probabilities.
    pub fn posterior(&self, row: &KernelRow) -> Result<Vec<f64>> {
        Ok(softmin_neg_half(&self.scores(row)?))
    }

    /// Predicted class: argmin score, ties to the smaller index.
    pub fn predict(&self, row: &KernelRow) -> Result<usize> {
        let scores = self.scores(row)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Projection of the sample on axis `axis` of class `class`.
    pub fn project(&self, row: &KernelRow, class: usize, axis: usize) -> Result<f64> {
        let cm = self
            .classes
            .get(class)
            .ok_or_else(|| Error::Input(format!("class {class} out of range")))?;
        if axis >= cm.dim {
            return Err(Error::AxisOutOfRange { axis, dim: cm.dim });
        }
        if row.values.len() != self.n_train {
            return Err(Error::LengthMismatch {
                expected: self.n_train,
                got: row.values.len(),
            });
        }
        let fresh_sums: Vec<f64> = self
            .classes
            .iter()
            .map(|c| c.members.iter().map(|&m| row.values[m]).sum())
            .collect();
        if self.submodel.common_orientation() {
            let shared = self.shared.as_ref().expect("shared block");
            let nu = shared.values[axis];
            if nu <= 0.0 {
                return Ok(0.0);
            }
            let n = self.n_train as f64;
            let n_i = cm.class_size() as f64;
            let proj: f64 = (0..self.n_train)
                .map(|l| {
                    let zl = shared.labels[l];
                    let n_zl = self.classes[zl].class_size() as f64;
                    let g = row.values[l] - fresh_sums[zl] / n_zl - cm.row_sums[l] / n_i
                        + shared.cross_block_means[class][zl];
                    shared.vectors[axis][l] * g
                })
                .sum();
            return Ok(proj / (n * nu).sqrt());
        }
        let raw = cm.raw_eigenvalues[axis];
        if raw <= 0.0 {
            return Ok(0.0);
        }
        let n_i = cm.class_size() as f64;
        let proj: f64 = cm
            .members
            .iter()
            .zip(&cm.basis_vectors[axis])
            .map(|(&m, b)| {
                let r = row.values[m] - (fresh_sums[class] + cm.row_sums[m]) / n_i
                    + cm.block_mean;
                b * r
            })
            .sum();
        Ok(proj / (n_i * raw).sqrt())
    }

    /// All projections of a sample on the feature subspace of a class.
    pub fn project_class(&self, row: &KernelRow, class: usize) -> Result<Vec<f64>> {
        let dim = self
            .classes
            .get(class)
            .ok_or_else(|| Error::Input(format!("class {class} out of range")))?
            .dim;
        (0..dim).map(|j| self.project(row, class, j)).collect()
    }
}

/// Explicit input-space counterpart of [`fit`] for the linear kernel: class
/// covariance matrices are decomposed directly and scores follow the
/// quadratic-form expression. Exists as the equivalence oracle for tests.
#[derive(Debug, Clone)]
pub struct DirectModel {
    pub submodel: Submodel,
    pub means: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
    pub dims: Vec<usize>,
    pub model_eigenvalues: Vec<Vec<f64>>,
    /// Per class, per axis, input-space eigenvectors.
    pub eigenvectors: Vec<Vec<Vec<f64>>>,
    pub noise: f64,
    pub d_max: usize,
    /// Pooled within-class covariance eigenvectors for M7/M8.
    pub shared_vectors: Option<Vec<Vec<f64>>>,
}

pub fn fit_linear_direct(
    data: &[Vec<f64>],
    labels: &[usize],
    opts: &FitOptions,
) -> Result<DirectModel> {
    let n = data.len();
    if n == 0 || labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let p = data[0].len();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &z) in labels.iter().enumerate() {
        members[z].push(i);
    }
    if let Some(empty) = (0..k).find(|&i| members[i].is_empty()) {
        return Err(Error::EmptyClass(empty));
    }

    let mut means = Vec::with_capacity(k);
    let mut eigs = Vec::with_capacity(k);
    let mut spectral = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for mem in &members {
        let n_i = mem.len();
        let mean: Vec<f64> = (0..p)
            .map(|j| mem.iter().map(|&m| data[m][j]).sum::<f64>() / n_i as f64)
            .collect();
        let cov = SymMatrix::from_fn(p, |a, b| {
            mem.iter()
                .map(|&m| (data[m][a] - mean[a]) * (data[m][b] - mean[b]))
                .sum::<f64>()
                / n_i as f64
        });
        covariances.push(cov.clone());
        means.push(mean);
        if n_i == 1 {
            eigs.push(None);
            spectral.push(SpectralClass {
                spectrum: vec![0.0],
                rank: 1,
                prior: 1.0 / n as f64,
                can_model: false,
            });
            continue;
        }
        let eig = sym_eig(&cov)?;
        let spectrum = clamp_psd_spectrum(&eig.values);
        spectral.push(SpectralClass {
            spectrum,
            rank: n_i.min(p),
            prior: n_i as f64 / n as f64,
            can_model: true,
        });
        eigs.push(Some(eig));
    }

    let mut shared_eig = None;
    if opts.submodel.common_orientation() {
        let pooled = SymMatrix::from_fn(p, |a, b| {
            (0..k)
                .map(|i| spectral[i].prior * covariances[i].get(a, b))
                .sum()
        });
        let eig = sym_eig(&pooled)?;
        let values = clamp_psd_spectrum(&eig.values);
        shared_eig = Some((values, eig.vectors));
    }

    let resolution = resolve_spectra(
        &spectral,
        shared_eig.as_ref().map(|(v, _)| v.as_slice()),
        opts.submodel,
        &opts.scree,
        opts.auto_shrink,
        None,
    )?;

    let eigenvectors: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|i| match &eigs[i] {
            Some(eig) if !opts.submodel.common_orientation() => {
                eig.vectors.iter().take(resolution.dims[i]).cloned().collect()
            }
            _ => Vec::new(),
        })
        .collect();

    Ok(DirectModel {
        submodel: opts.submodel,
        means,
        priors: spectral.iter().map(|s| s.prior).collect(),
        dims: resolution.dims,
        model_eigenvalues: resolution.model_eigenvalues,
        eigenvectors,
        noise: resolution.noise,
        d_max: resolution.d_max,
        shared_vectors: shared_eig
            .map(|(_, vectors)| vectors.into_iter().take(resolution.d_max).collect()),
    })
}

impl DirectModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let k = self.means.len();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let centered: Vec<f64> = x
                .iter()
                .zip(&self.means[i])
                .map(|(a, b)| a - b)
                .collect();
            let sq_norm: f64 = centered.iter().map(|v| v * v).sum();
            let mut quad = 0.0;
            for j in 0..self.dims[i] {
                let q = match &self.shared_vectors {
                    Some(shared) => &shared[j],
                    None => &self.eigenvectors[i][j],
                };
                let proj: f64 = q.iter().zip(&centered).map(|(a, b)| a * b).sum();
                quad += (1.0 / self.model_eigenvalues[i][j] - 1.0 / self.noise) * proj * proj;
            }
            let logdet: f64 = self.model_eigenvalues[i].iter().map(|l| l.ln()).sum();
            out.push(
                quad + sq_norm / self.noise
                    + logdet
                    + (self.d_max - self.dims[i]) as f64 * self.noise.ln()
                    - 2.0 * self.priors[i].ln(),
            );
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let scores = self.scores(x);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::kernels::gram;

    fn numeric_dataset(rows: Vec<Vec<f64>>) -> Dataset {
        Dataset {
            ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            numeric: rows,
            ..Default::default()
        }
    }

    fn linear_gram(rows: Vec<Vec<f64>>) -> GramMatrix {
        gram(&KernelSpec::Linear, &numeric_dataset(rows)).unwrap()
    }

    #[test]
    fn class_matrix_of_identical_points_is_zero() {
        let g = linear_gram(vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![9.0, 9.0]]);
        let m = class_matrix(&g, &[0, 1]).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!(m.get(a, b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_matrix_trace_matches_centered_diagonal() {
        let g = linear_gram(vec![
            vec![0.3, 1.4],
            vec![2.0, -0.5],
            vec![1.1, 0.2],
            vec![-1.0, 3.0],
        ]);
        let members = vec![0, 1, 3];
        let m = class_matrix(&g, &members).unwrap();
        let c = ClassCentering::new(&g, &members).unwrap();
        let n_i = members.len() as f64;
        let want: f64 = members
            .iter()
            .map(|&x| {
                crate::kernels::rho(&g, &c, Probe::Train(x), Probe::Train(x)).unwrap() / n_i
            })
            .sum();
        assert!((m.trace() - want).abs() < 1e-12);
    }

    #[test]
    fn class_matrix_spectrum_matches_covariance() {
        // 5 points in 3 dimensions: nonzero spectrum of the centered kernel
        // matrix equals the covariance spectrum.
        let rows = vec![
            vec![0.2, 1.0, -0.3],
            vec![1.5, 0.1, 0.4],
            vec![-0.7, 0.8, 1.2],
            vec![0.0, -1.1, 0.5],
            vec![2.2, 0.3, -0.9],
        ];
        let members: Vec<usize> = (0..5).collect();
        let g = linear_gram(rows.clone());
        let m = class_matrix(&g, &members).unwrap();
        let spec_m = clamp_psd_spectrum(&sym_eig(&m).unwrap().values);

        let mean: Vec<f64> = (0..3)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 5.0)
            .collect();
        let cov = SymMatrix::from_fn(3, |a, b| {
            rows.iter()
                .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                .sum::<f64>()
                / 5.0
        });
        let spec_c = clamp_psd_spectrum(&sym_eig(&cov).unwrap().values);
        for j in 0..3 {
            assert!((spec_m[j] - spec_c[j]).abs() < 1e-10, "axis {j}");
        }
        for v in &spec_m[3..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn cattell_hand_case() {
        let d = cattell_dim(
            &[10.0, 5.0, 1.0, 0.9, 0.8],
            &ScreeParams::threshold(0.5),
            10,
        )
        .unwrap();
        assert_eq!(d, 2);
    }

    #[test]
    fn cattell_flat_spectrum_falls_back() {
        let d = cattell_dim(&[2.0, 2.0, 2.0], &ScreeParams::threshold(0.3), 10).unwrap();
        assert_eq!(d, 1);
    }

    #[test]
    fn cattell_tiny_threshold_keeps_everything() {
        let d = cattell_dim(
            &[5.0, 4.0, 3.0, 2.0, 1.0],
            &ScreeParams::threshold(1e-9),
            3,
        )
        .unwrap();
        assert_eq!(d, 3); // len - 1 = 4 capped by the rank bound
        let d = cattell_dim(
            &[5.0, 4.0, 3.0, 2.0, 1.0],
            &ScreeParams::threshold(1e-9),
            100,
        )
        .unwrap();
        assert_eq!(d, 4);
    }

    #[test]
    fn common_dimension_reduces_to_single_class() {
        let spectrum = [10.0, 5.0, 1.0, 0.9];
        let params = ScreeParams::threshold(0.5);
        let single = cattell_dim(&spectrum, &params, 3).unwrap();
        let common = common_dimension(&[&spectrum], &[1.0], &params, 3).unwrap();
        assert_eq!(single, common);
    }

    #[test]
    fn common_dimension_scaled_pair() {
        let a = [10.0, 5.0, 1.0, 0.9, 0.8];
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let d = common_dimension(&[&a, &b], &[0.5, 0.5], &ScreeParams::threshold(0.5), 4).unwrap();
        assert_eq!(d, 2);
    }

    #[test]
    fn fuse_identical_spectra_m0_equals_m4() {
        let retained = vec![vec![4.0, 2.0], vec![4.0, 2.0]];
        let free = fuse_spectra(&retained, &[0.5, 0.5], EigenPooling::Free).unwrap();
        let between = fuse_spectra(&retained, &[0.5, 0.5], EigenPooling::CommonBetween).unwrap();
        assert_eq!(free, between);
    }

    #[test]
    fn fuse_between_hand_case() {
        let retained = vec![vec![4.0, 2.0], vec![2.0, 2.0]];
        let fused = fuse_spectra(&retained, &[0.5, 0.5], EigenPooling::CommonBetween).unwrap();
        assert_eq!(fused[0], vec![3.0, 2.0]);
        assert_eq!(fused[1], vec![3.0, 2.0]);
    }

    #[test]
    fn fuse_grand_mean_hand_case() {
        let retained = vec![vec![4.0, 2.0], vec![2.0, 2.0]];
        let fused =
            fuse_spectra(&retained, &[0.5, 0.5], EigenPooling::CommonWithinBetween).unwrap();
        assert_eq!(fused[0], vec![2.5, 2.5]);
        assert_eq!(fused[1], vec![2.5, 2.5]);
    }

    #[test]
    fn noise_single_class_hand_case() {
        let noise = estimate_noise(&[vec![4.0, 1.0, 1.0, 0.0]], &[1], &[4], &[1.0]).unwrap();
        assert!((noise - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn noise_consumes_all_but_one() {
        let noise = estimate_noise(&[vec![4.0, 3.0, 0.5]], &[2], &[3], &[1.0]).unwrap();
        assert!((noise - 0.5).abs() < 1e-14);
    }

    #[test]
    fn noise_weighted_ratio() {
        let noise = estimate_noise(
            &[vec![9.0, 1.0, 1.0, 0.0], vec![5.0, 4.0]],
            &[1, 1],
            &[4, 2],
            &[0.5, 0.5],
        )
        .unwrap();
        assert!((noise - 1.5).abs() < 1e-14);
    }

    fn two_blob_gram() -> (GramMatrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let t = i as f64 * 0.13;
            rows.push(vec![t.sin() * 0.2, t.cos() * 0.2]);
            labels.push(0);
        }
        for i in 0..6 {
            let t = i as f64 * 0.17;
            rows.push(vec![10.0 + t.sin() * 0.2, 10.0 + t.cos() * 0.2]);
            labels.push(1);
        }
        (linear_gram(rows), labels)
    }

    #[test]
    fn fit_separable_blobs_is_perfect_on_training_data() {
        let (g, labels) = two_blob_gram();
        let model = fit(&g, &labels, &FitOptions::default()).unwrap();
        let all: Vec<usize> = (0..g.n()).collect();
        for i in 0..g.n() {
            let row = g.row_for(i, &all);
            assert_eq!(model.predict(&row).unwrap(), labels[i]);
            let post = model.posterior(&row).unwrap();
            assert!(post[labels[i]] >= 0.99);
        }
    }

    #[test]
    fn fit_is_invariant_under_sample_duplication() {
        let (g, labels) = two_blob_gram();
        let base = fit(&g, &labels, &FitOptions::default()).unwrap();

        let mut rows2 = Vec::new();
        let mut labels2 = Vec::new();
        let mut rows = Vec::new();
        for i in 0..6 {
            let t = i as f64 * 0.13;
            rows.push(vec![t.sin() * 0.2, t.cos() * 0.2]);
        }
        for i in 0..6 {
            let t = i as f64 * 0.17;
            rows.push(vec![10.0 + t.sin() * 0.2, 10.0 + t.cos() * 0.2]);
        }
        for (i, r) in rows.iter().enumerate() {
            rows2.push(r.clone());
            rows2.push(r.clone());
            labels2.push(if i < 6 { 0 } else { 1 });
            labels2.push(if i < 6 { 0 } else { 1 });
        }
        let g2 = linear_gram(rows2);
        let dup = fit(&g2, &labels2, &FitOptions::default()).unwrap();
        assert!((base.noise - dup.noise).abs() < 1e-10);
        for i in 0..2 {
            assert_eq!(base.classes[i].dim, dup.classes[i].dim);
            assert!((base.classes[i].prior - dup.classes[i].prior).abs() < 1e-12);
            for j in 0..base.classes[i].dim {
                assert!(
                    (base.classes[i].raw_eigenvalues[j] - dup.classes[i].raw_eigenvalues[j])
                        .abs()
                        < 1e-10
                );
            }
        }
    }

    #[test]
    fn mirror_symmetric_probe_scores_equal() {
        let rows = vec![
            vec![-2.0, 0.0],
            vec![-3.0, 1.0],
            vec![-3.0, -1.0],
            vec![2.0, 0.0],
            vec![3.0, 1.0],
            vec![3.0, -1.0],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let ds = numeric_dataset(rows.clone());
        let g = gram(&KernelSpec::Gaussian { sigma: 1.0 }, &ds).unwrap();
        let opts = FitOptions::new(Submodel::M0, ScreeParams::fixed(1));
        let model = fit(&g, &labels, &opts).unwrap();
        // Probe on the symmetry axis.
        use crate::kernels::Evaluator;
        let ev = Evaluator::from_dataset(KernelSpec::Gaussian { sigma: 1.0 }, &ds).unwrap();
        let row = ev
            .row(&crate::data::Sample {
                numeric: vec![0.0, 0.4],
                categorical: vec![],
                curve: None,
            })
            .unwrap();
        let scores = model.scores(&row).unwrap();
        assert!((scores[0] - scores[1]).abs() < 1e-10);
        let post = model.posterior(&row).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn exhausting_the_spectrum_is_a_degenerate_noise_error() {
        // Gaussian kernel, 3-point classes: retaining d = n_i - 1 axes
        // leaves no residual mass, so the noise estimate degenerates.
        let rows = vec![
            vec![-2.0, 0.0],
            vec![-3.0, 1.0],
            vec![-3.0, -1.0],
            vec![2.0, 0.0],
            vec![3.0, 1.0],
            vec![3.0, -1.0],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let ds = numeric_dataset(rows);
        let g = gram(&KernelSpec::Gaussian { sigma: 1.0 }, &ds).unwrap();
        let opts = FitOptions::new(Submodel::M0, ScreeParams::fixed(2));
        let err = fit(&g, &labels, &opts).unwrap_err();
        assert!(matches!(err, Error::DegenerateNoise { .. }), "{err}");
    }

    #[test]
    fn singleton_class_is_pure_noise() {
        let rows = vec![vec![0.0, 0.0], vec![0.2, 0.1], vec![0.1, -0.1], vec![5.0, 5.0]];
        let labels = vec![0, 0, 0, 1];
        let g = linear_gram(rows);
        let model = fit(&g, &labels, &FitOptions::default()).unwrap();
        assert_eq!(model.classes[1].dim, 0);
        let all: Vec<usize> = (0..4).collect();
        assert_eq!(model.predict(&g.row_for(3, &all)).unwrap(), 1);
    }

    #[test]
    fn zero_variance_class_fits_with_noise_from_other_class() {
        let rows = vec![
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![4.0, 2.0],
            vec![6.0, 1.0],
            vec![5.0, 3.0],
        ];
        let labels = vec![0, 0, 1, 1, 1];
        let g = linear_gram(rows);
        let model = fit(&g, &labels, &FitOptions::default()).unwrap();
        assert!(model.noise > 0.0);
        assert_eq!(model.classes[0].dim, 1);
        // Degenerate class carries the noise eigenvalue on its axis.
        assert!((model.classes[0].model_eigenvalues[0] - model.noise).abs() < 1e-12);
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(model.predict(&g.row_for(0, &all)).unwrap(), 0);
    }

    #[test]
    fn projection_of_training_member_matches_eigen_identity() {
        let rows = vec![
            vec![0.5, 0.1, 0.0],
            vec![1.2, -0.4, 0.3],
            vec![0.0, 0.8, -0.2],
            vec![-0.6, 0.2, 1.0],
            vec![0.9, 0.9, 0.5],
            vec![7.0, 7.0, 7.0],
            vec![8.0, 7.5, 6.5],
            vec![7.5, 8.0, 7.2],
        ];
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1];
        let g = linear_gram(rows);
        let model = fit(&g, &labels, &FitOptions::default()).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let class = &model.classes[0];
        for j in 0..class.dim {
            let lambda = class.raw_eigenvalues[j];
            let n_i = class.class_size() as f64;
            for (pos, &m) in class.members.iter().enumerate() {
                let row = g.row_for(m, &all);
                let got = model.project(&row, 0, j).unwrap();
                let want = (n_i * lambda).sqrt() * class.basis_vectors[j][pos];
                assert!((got - want).abs() < 1e-8, "member {m} axis {j}");
            }
        }
    }

    #[test]
    fn projection_moments() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.7).sin() + 0.1 * t, (t * 1.3).cos(), 0.05 * t * t]
            })
            .collect();
        let labels = vec![0; 12];
        let mut rows = rows;
        let mut labels = labels;
        for i in 0..10 {
            let t = i as f64;
            rows.push(vec![20.0 + t.sin(), 20.0 + (t * 0.4).cos(), 20.0 - 0.1 * t]);
            labels.push(1);
        }
        let g = linear_gram(rows);
        let model = fit(&g, &labels, &FitOptions::default()).unwrap();
        let all: Vec<usize> = (0..g.n()).collect();
        for (ci, class) in model.classes.iter().enumerate() {
            for j in 0..class.dim {
                let projections: Vec<f64> = class
                    .members
                    .iter()
                    .map(|&m| model.project(&g.row_for(m, &all), ci, j).unwrap())
                    .collect();
                let mean: f64 = projections.iter().sum::<f64>() / projections.len() as f64;
                assert!(mean.abs() < 1e-9, "class {ci} axis {j} mean {mean}");
                let second: f64 =
                    projections.iter().map(|p| p * p).sum::<f64>() / projections.len() as f64;
                let lambda = class.raw_eigenvalues[j];
                assert!(
                    (second - lambda).abs() <= 1e-8 * lambda.max(1.0),
                    "class {ci} axis {j}: {second} vs {lambda}"
                );
            }
        }
    }

    #[test]
    fn direct_fit_one_dimensional_hand_variances() {
        let data = vec![vec![0.0], vec![2.0], vec![10.0], vec![14.0]];
        let labels = vec![0, 0, 1, 1];
        // Population variances: 1 and 4; scree keeps d = 1 but the rank
        // bound forces d < r = 1, so expect a dimension error surfaced as
        // DimensionTooLarge.
        let err = fit_linear_direct(&data, &labels, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionTooLarge { .. }));
        // With 2-dimensional data the variances are retained directly.
        let data = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.1],
            vec![1.0, -0.1],
            vec![10.0, 5.0],
            vec![14.0, 5.2],
            vec![12.0, 4.8],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let model = fit_linear_direct(&data, &labels, &FitOptions::default()).unwrap();
        for i in 0..2 {
            assert!(model.dims[i] >= 1);
            assert!(model.model_eigenvalues[i][0] > 0.0);
        }
    }

    #[test]
    fn score_shift_leaves_posterior_unchanged() {
        let scores = vec![3.0, 1.0, 2.5];
        let p1 = softmin_neg_half(&scores);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let p2 = softmin_neg_half(&shifted);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn serialized_model_round_trips_scores() {
        let (g, labels) = two_blob_gram();
        let model = fit(&g, &labels, &FitOptions::default()).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: FittedModel = serde_json::from_str(&json).unwrap();
        let all: Vec<usize> = (0..g.n()).collect();
        for i in 0..g.n() {
            let row = g.row_for(i, &all);
            let a = model.scores(&row).unwrap();
            let b = back.scores(&row).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
