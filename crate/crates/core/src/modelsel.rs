//! Hyperparameter selection: stratified k-fold cross-validation over kernel
//! and model configurations, and repeated hold-out evaluation.
//!
//! Kernels whose Gram depends only on pairwise evaluations are computed once
//! per hyperparameter over the full data and sliced per fold, so folds and
//! replications are pure index games.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, KernelSpec};
use crate::pgpda::{fit, FitOptions, ScreeParams, Submodel};

/// Search space: the cross product of kernels, scree settings and submodels.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    pub kernels: Vec<KernelSpec>,
    pub scree: Vec<ScreeParams>,
    pub submodels: Vec<Submodel>,
    pub folds: usize,
    pub seed: u64,
}

impl SearchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.scree.is_empty() || self.submodels.is_empty() {
            return Err(Error::Config("every grid axis must be nonempty".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("fold count must be at least 2".into()));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        for s in &self.scree {
            s.validate()?;
        }
        Ok(())
    }

    /// Configurations in deterministic lexicographic order
    /// (kernel, submodel, scree).
    pub fn configurations(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for ki in 0..self.kernels.len() {
            for mi in 0..self.submodels.len() {
                for si in 0..self.scree.len() {
                    out.push((ki, mi, si));
                }
            }
        }
        out
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvEntry {
    pub kernel: KernelSpec,
    pub submodel: Submodel,
    pub scree: ScreeParams,
    /// Sample-weighted accuracy across folds.
    pub mean_accuracy: f64,
    /// Standard deviation of the per-fold accuracies.
    pub std_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub entries: Vec<CvEntry>,
    /// Index into `entries` of the winning configuration (ties go to the
    /// lexicographically first one).
    pub selected: usize,
    /// Held-out accuracies, filled by repeated hold-out evaluation.
    pub replication_accuracies: Vec<f64>,
}

impl CvReport {
    pub fn selected_entry(&self) -> &CvEntry {
        &self.entries[self.selected]
    }
}

/// Deterministic stratified folds: indices of each validation fold. Classes
/// smaller than the fold count simply appear in fewer folds (with a
/// warning), which merges their contribution into the remaining folds.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &z) in labels.iter().enumerate() {
        by_class[z].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for (z, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < folds {
            log::warn!(
                "class {z} has {} members for {folds} folds; it will be missing from some folds",
                idx.len()
            );
        }
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        for (pos, &i) in idx.iter().enumerate() {
            out[pos % folds].push(i);
        }
    }
    for fold in out.iter_mut() {
        fold.sort_unstable();
    }
    out
}

/// Relabel a label subset to dense codes `0..k'`, remembering the mapping
/// back to the full label set.
fn dense_labels(labels: &[usize], idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut present: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    let dense = idx
        .iter()
        .map(|&i| present.binary_search(&labels[i]).unwrap())
        .collect();
    (dense, present)
}

/// Fit on a subset of a full Gram matrix and count correct predictions on a
/// validation subset. A configuration that fails to fit scores zero.
fn evaluate_split(
    gram: &GramMatrix,
    labels: &[usize],
    train_idx: &[usize],
    test_idx: &[usize],
    opts: &FitOptions,
) -> usize {
    let sub = gram.slice(train_idx);
    let (dense, mapping) = dense_labels(labels, train_idx);
    let model = match fit(&sub, &dense, opts) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("configuration failed to fit: {e}");
            return 0;
        }
    };
    let mut correct = 0;
    for &j in test_idx {
        let row = gram.row_for(j, train_idx);
        match model.predict(&row) {
            Ok(pred) if mapping[pred] == labels[j] => correct += 1,
            Ok(_) => {}
            Err(e) => log::warn!("prediction failed for sample {j}: {e}"),
        }
    }
    correct
}

/// Stratified k-fold cross-validation of every grid configuration.
///
/// `factory` builds the full-data Gram matrix of one kernel configuration;
/// it runs once per kernel.
pub fn kfold_cv<F>(factory: F, labels: &[usize], grid: &SearchGrid) -> Result<CvReport>
where
    F: Fn(&KernelSpec) -> Result<GramMatrix> + Sync,
{
    grid.validate()?;
    let grams: Vec<GramMatrix> = grid
        .kernels
        .iter()
        .map(|k| factory(k))
        .collect::<Result<_>>()?;
    for g in &grams {
        if g.n() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: labels.len(),
                got: g.n(),
            });
        }
    }
    let folds = stratified_folds(labels, grid.folds, grid.seed);
    let all: Vec<usize> = (0..labels.len()).collect();
    let configs = grid.configurations();
    let entries: Vec<CvEntry> = configs
        .par_iter()
        .map(|&(ki, mi, si)| {
            let opts = FitOptions::new(grid.submodels[mi], grid.scree[si]);
            let mut fold_accuracies = Vec::with_capacity(folds.len());
            let mut correct_total = 0usize;
            let mut count_total = 0usize;
            for fold in &folds {
                let train: Vec<usize> =
                    all.iter().copied().filter(|i| !fold.contains(i)).collect();
                if fold.is_empty() || train.is_empty() {
                    continue;
                }
                let correct = evaluate_split(&grams[ki], labels, &train, fold, &opts);
                fold_accuracies.push(correct as f64 / fold.len() as f64);
                correct_total += correct;
                count_total += fold.len();
            }
            let mean = correct_total as f64 / count_total.max(1) as f64;
            let std = sample_std(&fold_accuracies);
            CvEntry {
                kernel: grid.kernels[ki].clone(),
                submodel: grid.submodels[mi],
                scree: grid.scree[si],
                mean_accuracy: mean,
                std_accuracy: std,
                fold_accuracies,
            }
        })
        .collect();
    let mut selected = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.mean_accuracy > entries[selected].mean_accuracy {
            selected = i;
        }
    }
    Ok(CvReport {
        entries,
        selected,
        replication_accuracies: Vec::new(),
    })
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
    let var: f64 =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Result of repeated hold-out evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub replication_accuracies: Vec<f64>,
    /// Selected configuration per replication as (kernel, submodel, scree).
    pub selections: Vec<(KernelSpec, Submodel, ScreeParams)>,
}

/// The full experimental protocol: split stratified at training ratio `hr`,
/// tune on the training part by k-fold cross-validation, evaluate the
/// winner on the held-out part; repeat and average.
pub fn holdout_replications<F>(
    factory: F,
    labels: &[usize],
    hr: f64,
    replications: usize,
    grid: &SearchGrid,
) -> Result<HoldoutReport>
where
    F: Fn(&KernelSpec) -> Result<GramMatrix> + Sync,
{
    if !(hr > 0.0 && hr < 1.0) {
        return Err(Error::Config(format!(
            "hold-out ratio must lie strictly between 0 and 1, got {hr}"
        )));
    }
    if replications < 1 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    grid.validate()?;
    let grams: Vec<GramMatrix> = grid
        .kernels
        .iter()
        .map(|k| factory(k))
        .collect::<Result<_>>()?;
    let n = labels.len();
    for g in &grams {
        if g.n() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: g.n(),
            });
        }
    }

    let results: Vec<Result<(f64, (KernelSpec, Submodel, ScreeParams))>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = grid.seed.wrapping_add(1 + rep as u64);
            let (train_idx, test_idx) = stratified_split(labels, hr, rep_seed);
            let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            let sub_grid = SearchGrid {
                seed: rep_seed,
                ..grid.clone()
            };
            // Tune on the training part only: slice each full Gram.
            let report = kfold_cv(
                |spec| {
                    let ki = grid
                        .kernels
                        .iter()
                        .position(|k| k == spec)
                        .expect("spec from this grid");
                    Ok(grams[ki].slice(&train_idx))
                },
                &train_labels,
                &sub_grid,
            )?;
            let best = report.selected_entry();
            let ki = grid
                .kernels
                .iter()
                .position(|k| *k == best.kernel)
                .expect("selected kernel from this grid");
            let opts = FitOptions::new(best.submodel, best.scree);
            let correct = evaluate_split(&grams[ki], labels, &train_idx, &test_idx, &opts);
            let acc = correct as f64 / test_idx.len().max(1) as f64;
            Ok((acc, (best.kernel.clone(), best.submodel, best.scree)))
        })
        .collect();

    let mut accuracies = Vec::with_capacity(replications);
    let mut selections = Vec::with_capacity(replications);
    for r in results {
        let (acc, sel) = r?;
        accuracies.push(acc);
        selections.push(sel);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(HoldoutReport {
        mean_accuracy: mean,
        std_accuracy: sample_std(&accuracies),
        replication_accuracies: accuracies,
        selections,
    })
}

/// Stratified split into (train, test) with training fraction `hr`.
fn stratified_split(labels: &[usize], hr: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &z) in labels.iter().enumerate() {
        by_class[z].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in by_class.iter_mut() {
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        // At least one training sample per class; the rest goes by ratio.
        let n_train = ((idx.len() as f64 * hr).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::kernels::gram;

    fn toy(n_per: usize, sep: f64) -> (Dataset, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_per {
            let t = i as f64;
            rows.push(vec![0.4 * (t * 0.9).sin(), 0.4 * (t * 0.7).cos()]);
            labels.push(0);
            rows.push(vec![sep + 0.4 * (t * 1.1).sin(), sep + 0.4 * (t * 0.8).cos()]);
            labels.push(1);
        }
        let ds = Dataset {
            ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            numeric: rows,
            ..Default::default()
        };
        (ds, labels)
    }

    fn grid(kernels: Vec<KernelSpec>) -> SearchGrid {
        SearchGrid {
            kernels,
            scree: vec![ScreeParams::fixed(1)],
            submodels: vec![Submodel::M0],
            folds: 5,
            seed: 9,
        }
    }

    #[test]
    fn folds_partition_the_index_set() {
        let labels: Vec<usize> = (0..23).map(|i| i % 3).collect();
        let folds = stratified_folds(&labels, 5, 1);
        let mut seen: Vec<usize> = folds.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn separable_data_reaches_perfect_accuracy() {
        let (ds, labels) = toy(10, 10.0);
        let g = grid(vec![KernelSpec::Linear]);
        let report = kfold_cv(|spec| gram(spec, &ds), &labels, &g).unwrap();
        assert_eq!(report.selected_entry().mean_accuracy, 1.0);
    }

    #[test]
    fn duplicate_configuration_tie_breaks_to_first() {
        let (ds, labels) = toy(10, 10.0);
        let g = grid(vec![KernelSpec::Linear, KernelSpec::Linear]);
        let report = kfold_cv(|spec| gram(spec, &ds), &labels, &g).unwrap();
        assert_eq!(report.selected, 0);
        assert_eq!(
            report.entries[0].mean_accuracy,
            report.entries[1].mean_accuracy
        );
    }

    #[test]
    fn selected_attains_the_maximum_mean() {
        let (ds, labels) = toy(8, 6.0);
        let g = SearchGrid {
            kernels: vec![
                KernelSpec::Linear,
                KernelSpec::Gaussian { sigma: 1.0 },
                KernelSpec::Gaussian { sigma: 0.1 },
            ],
            scree: vec![ScreeParams::fixed(1), ScreeParams::threshold(0.2)],
            submodels: vec![Submodel::M0, Submodel::M4],
            folds: 4,
            seed: 3,
        };
        let report = kfold_cv(|spec| gram(spec, &ds), &labels, &g).unwrap();
        let best = report.selected_entry().mean_accuracy;
        for e in &report.entries {
            assert!(e.mean_accuracy <= best + 1e-15);
        }
    }

    #[test]
    fn holdout_is_deterministic_for_a_seed() {
        let (ds, labels) = toy(8, 8.0);
        let g = grid(vec![KernelSpec::Linear]);
        let a = holdout_replications(|spec| gram(spec, &ds), &labels, 0.5, 3, &g).unwrap();
        let b = holdout_replications(|spec| gram(spec, &ds), &labels, 0.5, 3, &g).unwrap();
        assert_eq!(a.replication_accuracies, b.replication_accuracies);
    }

    #[test]
    fn single_test_point_per_class_accuracy_is_quantized() {
        // 5 points per class and hr = 0.8 leaves one test point per class.
        let (ds, labels) = toy(5, 9.0);
        let g = SearchGrid {
            folds: 2,
            ..grid(vec![KernelSpec::Linear])
        };
        let report =
            holdout_replications(|spec| gram(spec, &ds), &labels, 0.8, 1, &g).unwrap();
        let acc = report.replication_accuracies[0];
        assert!(
            [0.0, 0.5, 1.0].iter().any(|v| (acc - v).abs() < 1e-12),
            "accuracy {acc}"
        );
    }

    #[test]
    fn rejects_bad_holdout_ratio() {
        let (ds, labels) = toy(5, 9.0);
        let g = grid(vec![KernelSpec::Linear]);
        assert!(matches!(
            holdout_replications(|spec| gram(spec, &ds), &labels, 1.5, 1, &g),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_empty_grid_axis() {
        let (ds, labels) = toy(5, 9.0);
        let g = SearchGrid {
            kernels: vec![],
            scree: vec![ScreeParams::default()],
            submodels: vec![Submodel::M0],
            folds: 2,
            seed: 0,
        };
        assert!(matches!(
            kfold_cv(|spec| gram(spec, &ds), &labels, &g),
            Err(Error::Config(_))
        ));
    }
}
