//! K-fold estimation of the out-of-distribution risk from coarse-labeled
//! auxiliary data, plus the baseline selectors.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainDataset, LabelLevel};
use crate::error::{invalid, Error, Result};
use crate::hierarchy::HierarchyMap;
use crate::models::{Architecture, ModelBundle};
use crate::objective::{train, TrainConfig};

/// A `(t, lambda_after)` pair of the penalty schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub t_threshold: usize,
    pub lambda_after: f64,
}

impl fmt::Display for HyperPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, lambda_after={})", self.t_threshold, self.lambda_after)
    }
}

impl HyperPoint {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            t_threshold: self.t_threshold,
            lambda_after: self.lambda_after,
            ..base.clone()
        }
    }
}

/// Cartesian product in `t`-major order.
pub fn grid(thresholds: &[usize], lambdas: &[f64]) -> Vec<HyperPoint> {
    thresholds
        .iter()
        .flat_map(|&t| {
            lambdas.iter().map(move |&l| HyperPoint {
                t_threshold: t,
                lambda_after: l,
            })
        })
        .collect()
}

/// Fold index of every sample, one array per dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldAssignment {
    /// Indices of dataset `d` in fold `fold`, ascending.
    pub fn held_out(&self, d: usize, fold: usize) -> Vec<usize> {
        self.indices(d, |f| f == fold)
    }

    /// Indices of dataset `d` outside fold `fold`, ascending.
    pub fn complement(&self, d: usize, fold: usize) -> Vec<usize> {
        self.indices(d, |f| f != fold)
    }

    fn indices(&self, d: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.folds[d]
            .iter()
            .enumerate()
            .filter(|&(_, &f)| keep(f))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Uniformly random partition of each dataset into `k` folds whose sizes
/// differ by at most one.
pub fn kfold_split(sizes: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(invalid("K must be at least 2"));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n < k) {
        return Err(invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = sizes
        .iter()
        .map(|&n| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut fold = vec![0; n];
            for (pos, &i) in order.iter().enumerate() {
                fold[i] = pos % k;
            }
            fold
        })
        .collect();
    Ok(FoldAssignment { k, folds })
}

/// Fraction of samples labeled `z`.
pub fn coarse_prior(ad: &DomainDataset, z: usize) -> f64 {
    ad.labels.iter().filter(|&&l| l == z).count() as f64 / ad.len() as f64
}

pub fn coarse_priors(ad: &DomainDataset, coarse_count: usize) -> Vec<f64> {
    (0..coarse_count).map(|z| coarse_prior(ad, z)).collect()
}

/// Mean of `-log p(y | x, Y in g^-1(z))` under the target head over the
/// fine samples with `g(y) = z`.
pub fn correction_term(
    fine: &DomainDataset,
    bundle: &ModelBundle,
    hierarchy: &HierarchyMap,
    z: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..fine.len())
        .filter(|&i| hierarchy.table().get(fine.labels[i]) == Some(&z))
        .collect();
    if idx.is_empty() {
        return Err(Error::DegenerateFold { coarse: z });
    }
    let lp = bundle.target_log_probs_batch(&fine.inputs.select_rows(&idx))?;
    let total: f64 = idx
        .iter()
        .enumerate()
        .map(|(r, &i)| -hierarchy.renormalized_log_prob(lp.row(r), fine.labels[i]))
        .sum();
    Ok(total / idx.len() as f64)
}

/// Coarse risk of the target head, its fine probabilities summed over each
/// preimage of `g`.
pub fn coarse_risk_via_target(
    coarse: &DomainDataset,
    bundle: &ModelBundle,
    hierarchy: &HierarchyMap,
) -> Result<f64> {
    coarse.check_labels(hierarchy.coarse_count())?;
    let lp = bundle.target_log_probs_batch(&coarse.inputs)?;
    let total: f64 = (0..coarse.len())
        .map(|i| -hierarchy.coarsen_log_probs(lp.row(i))[coarse.labels[i]])
        .sum();
    Ok(total / coarse.len() as f64)
}

pub fn fine_risk(fine: &DomainDataset, bundle: &ModelBundle) -> Result<f64> {
    crate::objective::empirical_risk(fine, |x| bundle.target_log_probs_batch(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Coarse validation risks used as they are.
    I,
    /// Coarse validation risks plus the prior-weighted correction terms.
    II,
}

/// Out-of-distribution estimate for one fold together with the per-domain
/// entries it maximizes over (auxiliary domains first, target last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub value: f64,
    pub per_domain: Vec<f64>,
}

/// Inputs for one fold's estimate. `priors[e][z]` is the coarse prior of
/// auxiliary domain `e` from its full dataset.
pub struct FoldView<'a> {
    pub target: &'a DomainDataset,
    pub ad: &'a [DomainDataset],
    pub priors: &'a [Vec<f64>],
    pub hierarchy: &'a HierarchyMap,
    /// Used for the correction of a coarse label absent from `target`.
    pub full_target: &'a DomainDataset,
}

pub fn fold_ood_estimate(
    bundle: &ModelBundle,
    method: Method,
    view: &FoldView<'_>,
    warnings: &mut Vec<String>,
) -> Result<FoldEstimate> {
    let h = view.hierarchy;
    let corrections: Vec<(usize, f64)> = match method {
        Method::I => Vec::new(),
        Method::II => h
            .ambiguous_labels()
            .into_iter()
            .map(|z| match correction_term(view.target, bundle, h, z) {
                Err(Error::DegenerateFold { .. }) => {
                    warnings.push(format!(
                        "validation part of `{}` has no sample with coarse label {z}; \
                         correction taken from the full dataset",
                        view.target.domain
                    ));
                    correction_term(view.full_target, bundle, h, z).map(|c| (z, c))
                }
                other => other.map(|c| (z, c)),
            })
            .collect::<Result<_>>()?,
    };
    let mut per_domain = Vec::with_capacity(view.ad.len() + 1);
    for (e, ad) in view.ad.iter().enumerate() {
        let mut r = coarse_risk_via_target(ad, bundle, h)?;
        for &(z, c) in &corrections {
            r += view.priors[e][z] * c;
        }
        per_domain.push(r);
    }
    per_domain.push(fine_risk(view.target, bundle)?);
    let value = per_domain.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FoldEstimate { value, per_domain })
}

/// Data shared by every selector: the fine target domain and the coarse
/// auxiliary domains.
pub struct CvData<'a> {
    pub target: &'a DomainDataset,
    pub ad: &'a [DomainDataset],
    pub hierarchy: &'a HierarchyMap,
}

impl CvData<'_> {
    fn validate(&self) -> Result<()> {
        if self.target.level != LabelLevel::Fine {
            return Err(invalid("target domain must carry fine labels"));
        }
        self.target.check_labels(self.hierarchy.fine_count())?;
        for d in self.ad {
            if d.level != LabelLevel::Coarse {
                return Err(invalid(format!("domain `{}` must be coarse", d.domain)));
            }
            d.check_labels(self.hierarchy.coarse_count())?;
        }
        Ok(())
    }

    fn domain_names(&self) -> Vec<String> {
        self.ad
            .iter()
            .chain(std::iter::once(self.target))
            .map(|d| d.domain.clone())
            .collect()
    }
}

/// Training setup shared by all grid points; the grid only overrides the
/// schedule fields of `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSetup {
    pub arch: Architecture,
    pub base: TrainConfig,
    pub k: usize,
    pub fold_seed: u64,
}

/// Bundles trained on the complement of each fold: `models[g][k]`.
pub struct FoldModels {
    pub assignment: FoldAssignment,
    pub models: Vec<Vec<Result<ModelBundle>>>,
}

fn train_point(
    target: &DomainDataset,
    ad: &[DomainDataset],
    setup: &CvSetup,
    point: &HyperPoint,
) -> Result<ModelBundle> {
    let refs: Vec<&DomainDataset> = ad.iter().collect();
    train(target, &refs, &setup.arch, &point.apply(&setup.base))
}

/// Trains one bundle per grid point and fold on the complement of the fold
/// in every dataset. Units run on the current rayon pool.
pub fn train_fold_models(
    grid: &[HyperPoint],
    data: &CvData<'_>,
    setup: &CvSetup,
) -> Result<FoldModels> {
    data.validate()?;
    let sizes: Vec<usize> = std::iter::once(data.target.len())
        .chain(data.ad.iter().map(DomainDataset::len))
        .collect();
    let assignment = kfold_split(&sizes, setup.k, setup.fold_seed)?;
    let units: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..setup.k).map(move |k| (g, k)))
        .collect();
    let mut flat: Vec<Result<ModelBundle>> = units
        .par_iter()
        .map(|&(g, k)| {
            let target = data.target.subset(&assignment.complement(0, k));
            let ad: Vec<DomainDataset> = data
                .ad
                .iter()
                .enumerate()
                .map(|(e, d)| d.subset(&assignment.complement(e + 1, k)))
                .collect();
            train_point(&target, &ad, setup, &grid[g])
        })
        .collect();
    let mut models = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        models.push(flat.drain(..setup.k).collect());
    }
    Ok(FoldModels { assignment, models })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectorKind {
    #[serde(rename = "CV-I")]
    CvI,
    #[serde(rename = "CV-II")]
    CvII,
    #[serde(rename = "Tr-CV")]
    TrCv,
    #[serde(rename = "LOD-CV")]
    LodCv,
    #[serde(rename = "TDV")]
    Tdv,
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectorKind::CvI => "CV-I",
            SelectorKind::CvII => "CV-II",
            SelectorKind::TrCv => "Tr-CV",
            SelectorKind::LodCv => "LOD-CV",
            SelectorKind::Tdv => "TDV",
        })
    }
}

/// Scores of every grid point and the selected one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: SelectorKind,
    pub grid: Vec<HyperPoint>,
    /// `None` for grid points whose training or scoring failed.
    pub scores: Vec<Option<f64>>,
    /// Names of the columns of `fold_risks`.
    pub domains: Vec<String>,
    /// `fold_risks[g][k][d]`: per-domain entry of fold `k` for grid point `g`.
    pub fold_risks: Vec<Vec<Vec<f64>>>,
    pub selected: usize,
    pub selected_point: HyperPoint,
    pub oracle_selection: bool,
    pub warnings: Vec<String>,
}

/// Index of the smallest score; ties go to the earliest grid point.
pub fn argmin_first(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = s.filter(|v| !v.is_nan()) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn finish(
    kind: SelectorKind,
    grid: &[HyperPoint],
    scores: Vec<Option<f64>>,
    domains: Vec<String>,
    fold_risks: Vec<Vec<Vec<f64>>>,
    mut warnings: Vec<String>,
) -> Result<CvReport> {
    for (p, s) in grid.iter().zip(&scores) {
        if s.is_none() && !warnings.iter().any(|w| w.contains(&p.to_string())) {
            warnings.push(format!("grid point {p} excluded"));
        }
    }
    let selected = argmin_first(&scores)
        .ok_or_else(|| invalid(format!("{kind}: every grid point failed")))?;
    for w in &warnings {
        log::warn!("{kind}: {w}");
    }
    Ok(CvReport {
        kind,
        grid: grid.to_vec(),
        scores,
        domains,
        fold_risks,
        selected,
        selected_point: grid[selected],
        oracle_selection: kind == SelectorKind::Tdv,
        warnings,
    })
}

/// Scores fold models with CV-I, CV-II or Tr-CV. Tr-CV averages the fine
/// validation risk on the target folds only.
pub fn score_fold_models(
    kind: SelectorKind,
    grid: &[HyperPoint],
    data: &CvData<'_>,
    fm: &FoldModels,
) -> Result<CvReport> {
    let method = match kind {
        SelectorKind::CvI => Some(Method::I),
        SelectorKind::CvII => Some(Method::II),
        SelectorKind::TrCv => None,
        _ => return Err(invalid(format!("{kind} does not use fold models"))),
    };
    let coarse_count = data.hierarchy.coarse_count();
    let priors: Vec<Vec<f64>> = data
        .ad
        .iter()
        .map(|d| coarse_priors(d, coarse_count))
        .collect();
    let k = fm.assignment.k;
    let target_folds: Vec<DomainDataset> = (0..k)
        .map(|f| data.target.subset(&fm.assignment.held_out(0, f)))
        .collect();
    let ad_folds: Vec<Vec<DomainDataset>> = (0..k)
        .map(|f| {
            data.ad
                .iter()
                .enumerate()
                .map(|(e, d)| d.subset(&fm.assignment.held_out(e + 1, f)))
                .collect()
        })
        .collect();
    let mut warnings = Vec::new();
    let mut scores = Vec::with_capacity(grid.len());
    let mut fold_risks = Vec::with_capacity(grid.len());
    for (g, point) in grid.iter().enumerate() {
        let mut rows = Vec::with_capacity(k);
        let mut failure = None;
        for f in 0..k {
            let bundle = match &fm.models[g][f] {
                Ok(b) => b,
                Err(e) => {
                    failure = Some(format!("grid point {point} failed in fold {f}: {e}"));
                    break;
                }
            };
            let row = match method {
                Some(m) => {
                    let view = FoldView {
                        target: &target_folds[f],
                        ad: &ad_folds[f],
                        priors: &priors,
                        hierarchy: data.hierarchy,
                        full_target: data.target,
                    };
                    let mut w = Vec::new();
                    let est = fold_ood_estimate(bundle, m, &view, &mut w);
                    warnings.extend(w.into_iter().map(|m| format!("fold {f}: {m}")));
                    est.map(|e| (e.value, e.per_domain))
                }
                None => fine_risk(&target_folds[f], bundle).map(|r| (r, vec![r])),
            };
            match row {
                Ok((v, per)) if v.is_finite() => rows.push((v, per)),
                Ok(_) => {
                    failure = Some(format!("grid point {point} has non-finite risk in fold {f}"));
                    break;
                }
                Err(e) => {
                    failure = Some(format!("grid point {point} failed in fold {f}: {e}"));
                    break;
                }
            }
        }
        match failure {
            Some(msg) => {
                warnings.push(msg);
                scores.push(None);
                fold_risks.push(Vec::new());
            }
            None => {
                scores.push(Some(rows.iter().map(|r| r.0).sum::<f64>() / k as f64));
                fold_risks.push(rows.into_iter().map(|r| r.1).collect());
            }
        }
    }
    let domains = match method {
        Some(_) => data.domain_names(),
        None => vec![data.target.domain.clone()],
    };
    finish(kind, grid, scores, domains, fold_risks, warnings)
}

/// CV-I or CV-II selection with fresh fold models.
pub fn select_hyperparams(
    grid: &[HyperPoint],
    data: &CvData<'_>,
    setup: &CvSetup,
    method: Method,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(invalid("hyperparameter grid is empty"));
    }
    let fm = train_fold_models(grid, data, setup)?;
    let kind = match method {
        Method::I => SelectorKind::CvI,
        Method::II => SelectorKind::CvII,
    };
    score_fold_models(kind, grid, data, &fm)
}

/// Leave-one-domain-out: for each auxiliary domain, train on the target and
/// the remaining auxiliary domains, then score the coarse risk of the target
/// head on the held-out domain. Scores average over held-out domains.
pub fn lodcv_select(grid: &[HyperPoint], data: &CvData<'_>, setup: &CvSetup) -> Result<CvReport> {
    data.validate()?;
    if grid.is_empty() {
        return Err(invalid("hyperparameter grid is empty"));
    }
    if data.ad.len() < 2 {
        return Err(invalid("LOD-CV needs at least two auxiliary domains"));
    }
    let m = data.ad.len();
    let units: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..m).map(move |e| (g, e)))
        .collect();
    let results: Vec<Result<f64>> = units
        .par_iter()
        .map(|&(g, e)| {
            let rest: Vec<DomainDataset> = data
                .ad
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != e)
                .map(|(_, d)| d.clone())
                .collect();
            let bundle = train_point(data.target, &rest, setup, &grid[g])?;
            coarse_risk_via_target(&data.ad[e], &bundle, data.hierarchy)
        })
        .collect();
    let mut warnings = Vec::new();
    let mut scores = Vec::new();
    let mut fold_risks = Vec::new();
    for (g, chunk) in results.chunks(m).enumerate() {
        let mut per = Vec::with_capacity(m);
        for (e, r) in chunk.iter().enumerate() {
            match r {
                Ok(v) if v.is_finite() => per.push(*v),
                Ok(_) => warnings.push(format!(
                    "grid point {} has non-finite risk on `{}`",
                    grid[g], data.ad[e].domain
                )),
                Err(err) => warnings.push(format!(
                    "grid point {} failed leaving out `{}`: {err}",
                    grid[g], data.ad[e].domain
                )),
            }
        }
        if per.len() == m {
            scores.push(Some(per.iter().sum::<f64>() / m as f64));
            fold_risks.push(vec![per]);
        } else {
            scores.push(None);
            fold_risks.push(Vec::new());
        }
    }
    let domains = data.ad.iter().map(|d| d.domain.clone()).collect();
    finish(SelectorKind::LodCv, grid, scores, domains, fold_risks, warnings)
}

/// Test-domain validation: picks the grid point whose full-data model has the
/// highest accuracy on the labeled test domain (ties to the earliest point).
/// Uses information unavailable at deployment; the report is flagged.
pub fn tdv_select(
    grid: &[HyperPoint],
    full_models: &[Result<ModelBundle>],
    test: &DomainDataset,
) -> Result<CvReport> {
    if grid.is_empty() || grid.len() != full_models.len() {
        return Err(invalid("TDV needs one full-data model per grid point"));
    }
    let mut warnings = Vec::new();
    let mut scores = Vec::new();
    let mut fold_risks = Vec::new();
    for (p, m) in grid.iter().zip(full_models) {
        let acc = m
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|b| accuracy(b, test).map_err(|e| e.to_string()));
        match acc {
            Ok(a) => {
                scores.push(Some(1.0 - a));
                fold_risks.push(vec![vec![1.0 - a]]);
            }
            Err(e) => {
                warnings.push(format!("grid point {p} failed: {e}"));
                scores.push(None);
                fold_risks.push(Vec::new());
            }
        }
    }
    finish(
        SelectorKind::Tdv,
        grid,
        scores,
        vec![test.domain.clone()],
        fold_risks,
        warnings,
    )
}

/// Fraction of samples whose argmax prediction equals the fine label.
pub fn accuracy(bundle: &ModelBundle, fine: &DomainDataset) -> Result<f64> {
    let pred = bundle.predict(&fine.inputs)?;
    let hits = pred.iter().zip(&fine.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / fine.len() as f64)
}

/// Trains one bundle per grid point on the full target and auxiliary data.
pub fn train_full_models(
    grid: &[HyperPoint],
    data: &CvData<'_>,
    setup: &CvSetup,
) -> Vec<Result<ModelBundle>> {
    grid.par_iter()
        .map(|p| train_point(data.target, data.ad, setup, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn kfold_examples() {
        let a = kfold_split(&[10], 10, 1).unwrap();
        let mut seen = a.folds[0].clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let b = kfold_split(&[10, 7], 2, 1).unwrap();
        assert_eq!(b.held_out(0, 0).len(), 5);
        assert_eq!(b.held_out(0, 1).len(), 5);
        assert!(b.held_out(1, 0).len().abs_diff(b.held_out(1, 1).len()) <= 1);
        assert_eq!(kfold_split(&[10, 7], 2, 1).unwrap(), b);
        assert!(kfold_split(&[3], 4, 0).is_err());
        assert!(kfold_split(&[3], 1, 0).is_err());
    }

    fn coarse_ds(labels: Vec<usize>) -> DomainDataset {
        let n = labels.len();
        DomainDataset::new("a", LabelLevel::Coarse, Tensor::zeros(n, 1), labels).unwrap()
    }

    #[test]
    fn prior_examples() {
        assert_eq!(coarse_prior(&coarse_ds(vec![1, 1, 1]), 1), 1.0);
        assert_eq!(coarse_prior(&coarse_ds(vec![0, 1, 0, 1]), 0), 0.5);
        let mut l = vec![0; 10];
        l[..3].fill(1);
        assert!((coarse_prior(&coarse_ds(l), 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn argmin_ties_and_failures() {
        assert_eq!(argmin_first(&[Some(1.0), Some(0.5), Some(0.5)]), Some(1));
        assert_eq!(argmin_first(&[None, Some(2.0)]), Some(1));
        assert_eq!(argmin_first(&[None, Some(f64::NAN)]), None);
    }

    #[test]
    fn grid_is_t_major() {
        let g = grid(&[0, 100], &[1.0, 10.0]);
        assert_eq!(g.len(), 4);
        assert_eq!(g[1].t_threshold, 0);
        assert_eq!(g[1].lambda_after, 10.0);
        assert_eq!(g[2].t_threshold, 100);
    }
}
