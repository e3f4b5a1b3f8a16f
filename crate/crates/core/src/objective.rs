//! Empirical risks, the invariance penalty, and the Adam training loop.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{self, Segment, Weights};
use crate::dataset::{DomainDataset, LabelLevel};
use crate::diffcore::{grad_norm_sq, DiffError, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::models::{feature_map, log_probs, Architecture, BundleVars, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Full,
    /// Every dataset is split into `parts` near-equal parts each epoch; one
    /// optimizer step consumes one part from every dataset.
    Minibatch { parts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_coef: f64,
    pub max_epoch: usize,
    pub t_threshold: usize,
    pub lambda_after: f64,
    pub batch_mode: BatchMode,
    pub seed: u64,
    /// Weight of the summed coarse risks of the auxiliary domains. Zero
    /// keeps the objective to fine risk plus penalty.
    #[serde(default)]
    pub aux_coarse_weight: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.max_epoch == 0 {
            return Err(invalid("max_epoch must be at least 1"));
        }
        if !(self.lambda_after >= 0.0 && self.lambda_after.is_finite()) {
            return Err(invalid("lambda_after must be non-negative"));
        }
        if !(self.l2_coef >= 0.0 && self.aux_coarse_weight >= 0.0) {
            return Err(invalid("l2_coef and aux_coarse_weight must be non-negative"));
        }
        if let BatchMode::Minibatch { parts: 0 } = self.batch_mode {
            return Err(invalid("minibatch part count must be positive"));
        }
        Ok(())
    }
}

/// Penalty weight used during `epoch`: 1 before the threshold, `lambda_after`
/// from the threshold on.
pub fn lambda_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.t_threshold {
        1.0
    } else {
        config.lambda_after
    }
}

/// Mean negative log-likelihood of the dataset labels under `predictor`,
/// which maps an input matrix to per-row log-probabilities.
pub fn empirical_risk<F>(dataset: &DomainDataset, predictor: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if dataset.is_empty() {
        return Err(invalid("empirical risk of an empty dataset"));
    }
    let lp = predictor(&dataset.inputs)?;
    dataset.check_labels(lp.cols())?;
    let total: f64 = dataset
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -lp.get(i, y))
        .sum();
    Ok(total / dataset.len() as f64)
}

fn require_coarse(ad: &[&DomainDataset]) -> Result<()> {
    match ad.iter().find(|d| d.level != LabelLevel::Coarse) {
        Some(d) => Err(invalid(format!(
            "auxiliary domain `{}` must carry coarse labels",
            d.domain
        ))),
        None => Ok(()),
    }
}

/// `sum_e ||grad_{theta_ad} R^e_coarse||^2` at the bundle's current `theta_ad`.
pub fn irm_penalty(ad_datasets: &[&DomainDataset], bundle: &ModelBundle) -> Result<f64> {
    require_coarse(ad_datasets)?;
    let batches = ad_datasets
        .iter()
        .map(|d| Batch::whole(d))
        .collect::<Vec<_>>();
    let mut tape = Tape::new();
    let vars = bundle.register(&mut tape);
    let penalty = penalty_graph(&mut tape, &vars, &batches, bundle.arch.feature_dim.is_some());
    tape.check()?;
    Ok(penalty.map_or(0.0, |p| tape.scalar(p)))
}

/// Fine risk on `target` plus `lambda` times the penalty.
pub fn total_objective(
    target: &DomainDataset,
    ad_datasets: &[&DomainDataset],
    bundle: &ModelBundle,
    lambda: f64,
) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(invalid("lambda must be non-negative"));
    }
    let risk = empirical_risk(target, |x| bundle.target_log_probs_batch(x))?;
    let penalty = irm_penalty(ad_datasets, bundle)?;
    Ok(risk + lambda * penalty)
}

#[derive(Clone)]
pub(crate) struct Batch {
    inputs: Tensor,
    labels: Rc<[usize]>,
}

impl Batch {
    pub(crate) fn whole(d: &DomainDataset) -> Self {
        Self {
            inputs: d.inputs.clone(),
            labels: d.labels_rc(),
        }
    }

    fn rows(d: &DomainDataset, idx: &[usize]) -> Self {
        Self {
            inputs: d.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| d.labels[i]).collect(),
        }
    }
}

fn nll(tape: &mut Tape, lp: Var, labels: &Rc<[usize]>) -> Var {
    let picked = tape.pick(lp, labels.clone());
    let m = tape.mean(picked);
    tape.scale(m, -1.0)
}

fn coarse_risk(tape: &mut Tape, vars: &BundleVars, batch: &Batch, linear_last: bool) -> Var {
    let x = tape.constant(batch.inputs.clone());
    let h = feature_map(tape, &vars.phi, x, linear_last);
    let lp = log_probs(tape, &vars.theta_ad, h);
    nll(tape, lp, &batch.labels)
}

fn penalty_graph(
    tape: &mut Tape,
    vars: &BundleVars,
    ad: &[Batch],
    linear_last: bool,
) -> Option<Var> {
    let mut total: Option<Var> = None;
    for batch in ad {
        let risk = coarse_risk(tape, vars, batch, linear_last);
        let g = tape.grad(risk, &vars.theta_ad);
        let p = grad_norm_sq(tape, &g);
        total = Some(match total {
            None => p,
            Some(t) => tape.add(t, p),
        });
    }
    total
}

/// Which parameter groups the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Trainable {
    pub phi: bool,
    pub theta: bool,
    pub theta_ad: bool,
}

impl Trainable {
    pub(crate) const ALL: Self = Self {
        phi: true,
        theta: true,
        theta_ad: true,
    };
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Loss graph of the full objective on `tape`.
fn objective_graph(
    tape: &mut Tape,
    vars: &BundleVars,
    target: Option<&Batch>,
    ad: &[Batch],
    lambda: f64,
    config: &TrainConfig,
    linear_last: bool,
) -> Var {
    let mut terms = Vec::new();
    if let Some(batch) = target {
        let x = tape.constant(batch.inputs.clone());
        let h = feature_map(tape, &vars.phi, x, linear_last);
        let lp = log_probs(tape, &vars.theta, h);
        terms.push(nll(tape, lp, &batch.labels));
    }
    if lambda > 0.0 {
        if let Some(p) = penalty_graph(tape, vars, ad, linear_last) {
            terms.push(tape.scale(p, lambda));
        }
    }
    if config.aux_coarse_weight > 0.0 {
        for batch in ad {
            let r = coarse_risk(tape, vars, batch, linear_last);
            terms.push(tape.scale(r, config.aux_coarse_weight));
        }
    }
    if config.l2_coef > 0.0 {
        let all = vars.all();
        let sq = grad_norm_sq(tape, &all);
        terms.push(tape.scale(sq, config.l2_coef));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t);
    }
    total
}

/// Training objective at `bundle` with penalty weight `lambda` and the
/// `l2_coef` and `aux_coarse_weight` of `config`, with its gradient over all
/// parameters (`phi`, `theta`, `theta_ad` blocks, flattened). Uses the
/// closed-form gradient that training runs on.
pub fn objective_gradient(
    bundle: &ModelBundle,
    target: Option<&DomainDataset>,
    ad: &[&DomainDataset],
    lambda: f64,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    require_coarse(ad)?;
    let tb = target.map(Batch::whole);
    let ab: Vec<Batch> = ad.iter().map(|d| Batch::whole(d)).collect();
    let weights = Weights {
        lambda,
        aux: config.aux_coarse_weight,
        l2: config.l2_coef,
    };
    let ev = evaluate_batches(bundle, tb.as_ref(), &ab, weights);
    if let Some(term) = ev.terms.first_non_finite() {
        return Err(invalid(format!("non-finite {term}")));
    }
    Ok((ev.value, ev.grad))
}

/// Same quantity as [`objective_gradient`], differentiated by the tape.
pub fn objective_gradient_tape(
    bundle: &ModelBundle,
    target: Option<&DomainDataset>,
    ad: &[&DomainDataset],
    lambda: f64,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    require_coarse(ad)?;
    let tb = target.map(Batch::whole);
    let ab: Vec<Batch> = ad.iter().map(|d| Batch::whole(d)).collect();
    let mut tape = Tape::new();
    let vars = bundle.register(&mut tape);
    let linear_last = bundle.arch.feature_dim.is_some();
    let loss = objective_graph(&mut tape, &vars, tb.as_ref(), &ab, lambda, config, linear_last);
    let wrt = vars.all();
    let grads = tape.grad(loss, &wrt);
    tape.check()?;
    let mut flat = Vec::with_capacity(bundle.param_count());
    for g in &grads {
        flat.extend_from_slice(tape.value(*g).data());
    }
    Ok((tape.scalar(loss), flat))
}

fn evaluate_batches(
    bundle: &ModelBundle,
    target: Option<&Batch>,
    ad: &[Batch],
    weights: Weights,
) -> analytic::Evaluation {
    let use_ad = weights.lambda > 0.0 || weights.aux > 0.0;
    let mut parts: Vec<&Tensor> = target.iter().map(|b| &b.inputs).collect();
    if use_ad {
        parts.extend(ad.iter().map(|b| &b.inputs));
    }
    let cols = bundle.arch.input_dim;
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
    for t in &parts {
        data.extend_from_slice(t.data());
    }
    let inputs = Tensor::from_vec(data.len() / cols, cols, data);
    let segs: Vec<Segment<'_>> = ad.iter().map(|b| Segment { labels: &b.labels }).collect();
    analytic::evaluate(
        bundle,
        &inputs,
        target.map(|b| Segment { labels: &b.labels }),
        if use_ad { &segs } else { &[] },
        weights,
    )
}

/// Splits `0..n` into `parts` shuffled chunks whose sizes differ by at most one.
fn shuffled_parts(n: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

fn check_inputs(
    arch: &Architecture,
    target: Option<&DomainDataset>,
    ad: &[&DomainDataset],
) -> Result<()> {
    require_coarse(ad)?;
    if let Some(t) = target {
        if t.level != LabelLevel::Fine {
            return Err(invalid("target domain must carry fine labels"));
        }
        t.check_labels(arch.fine_count)?;
    }
    for d in target.into_iter().chain(ad.iter().copied()) {
        if d.dim() != arch.input_dim {
            return Err(invalid(format!(
                "domain `{}` has dimension {}, architecture expects {}",
                d.domain,
                d.dim(),
                arch.input_dim
            )));
        }
    }
    for d in ad {
        d.check_labels(arch.coarse_count)?;
    }
    Ok(())
}

/// Runs Adam on the configured objective starting from `bundle`, updating
/// only the `trainable` groups. A fresh optimizer state is used.
pub(crate) fn fit(
    mut bundle: ModelBundle,
    target: Option<&DomainDataset>,
    ad: &[&DomainDataset],
    config: &TrainConfig,
    trainable: Trainable,
) -> Result<ModelBundle> {
    config.validate()?;
    check_inputs(&bundle.arch, target, ad)?;
    let sizes = [bundle.phi.len(), bundle.theta.len(), bundle.theta_ad.len()];
    let (p_end, t_end) = (sizes[0], sizes[0] + sizes[1]);
    let frozen: Vec<bool> = (0..sizes.iter().sum::<usize>())
        .map(|i| {
            !(if i < p_end {
                trainable.phi
            } else if i < t_end {
                trainable.theta
            } else {
                trainable.theta_ad
            })
        })
        .collect();
    let mut adam = Adam::new(frozen.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let whole_target = target.map(Batch::whole);
    let whole_ad: Vec<Batch> = ad.iter().map(|d| Batch::whole(d)).collect();
    let mut values: Vec<f64> = bundle
        .phi
        .values()
        .iter()
        .chain(bundle.theta.values())
        .chain(bundle.theta_ad.values())
        .copied()
        .collect();

    for epoch in 0..config.max_epoch {
        let weights = Weights {
            lambda: lambda_schedule(epoch, config),
            aux: config.aux_coarse_weight,
            l2: config.l2_coef,
        };
        let steps: Vec<(Option<Batch>, Vec<Batch>)> = match config.batch_mode {
            BatchMode::Full => vec![(whole_target.clone(), whole_ad.clone())],
            BatchMode::Minibatch { parts } => {
                let t_parts = target.map(|t| shuffled_parts(t.len(), parts, &mut shuffle_rng));
                let ad_parts: Vec<_> = ad
                    .iter()
                    .map(|d| shuffled_parts(d.len(), parts, &mut shuffle_rng))
                    .collect();
                (0..parts)
                    .map(|p| {
                        let tb = target
                            .zip(t_parts.as_ref())
                            .map(|(t, tp)| Batch::rows(t, &tp[p]));
                        let ab = ad
                            .iter()
                            .zip(&ad_parts)
                            .map(|(d, dp)| Batch::rows(d, &dp[p]))
                            .collect();
                        (tb, ab)
                    })
                    .collect()
            }
        };
        for (tb, ab) in steps {
            if tb.as_ref().is_some_and(|b| b.labels.is_empty())
                || ab.iter().any(|b| b.labels.is_empty())
            {
                continue;
            }
            let mut ev = evaluate_batches(&bundle, tb.as_ref(), &ab, weights);
            let failed = ev
                .terms
                .first_non_finite()
                .or_else(|| ev.grad.iter().any(|g| !g.is_finite()).then_some("gradient"));
            if let Some(term) = failed {
                return Err(Error::Training {
                    epoch,
                    term,
                    source: DiffError::InvalidParams(format!("non-finite {term}")),
                });
            }
            for (g, &f) in ev.grad.iter_mut().zip(&frozen) {
                if f {
                    *g = 0.0;
                }
            }
            let before = values.clone();
            adam.update(&mut values, &ev.grad, config.learning_rate);
            // Frozen groups must stay bit-identical, so restore them.
            for ((v, b), &f) in values.iter_mut().zip(&before).zip(&frozen) {
                if f {
                    *v = *b;
                }
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    term: "parameter update",
                    source: DiffError::InvalidParams("non-finite parameter after update".into()),
                });
            }
            bundle.phi.values_mut().copy_from_slice(&values[..p_end]);
            bundle.theta.values_mut().copy_from_slice(&values[p_end..t_end]);
            bundle.theta_ad.values_mut().copy_from_slice(&values[t_end..]);
        }
    }
    Ok(bundle)
}

/// Trains a freshly initialized bundle (seeded by `config.seed`) on fine
/// risk of `target` plus the scheduled penalty over `ad_datasets`.
pub fn train(
    target: &DomainDataset,
    ad_datasets: &[&DomainDataset],
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    let bundle = ModelBundle::init(arch.clone(), config.seed);
    fit(bundle, Some(target), ad_datasets, config, Trainable::ALL)
}
