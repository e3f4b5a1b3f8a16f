//! Exact verification of the cross-validation guarantees on finite
//! variable-selection instances.
//!
//! Inputs are `X = X1 x X2` with one finite variable on each side and a
//! finite label space. A feature map is a coordinate projection that keeps
//! `X1`, `X2`, both or neither. The out-of-distribution risk maximizes over
//! every joint law sharing the reference `P(X1, Y)`; it is linear in the
//! adversary's `P(X2 | X1, Y)`, so the maximum sits on a Dirac conditional
//! and can be computed exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crossval::Method;
use crate::dataset::LabelLevel;
use crate::error::{invalid, Result};
use crate::hierarchy::HierarchyMap;

/// Tolerance on the total mass of a probability table.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Default slack in the condition inequalities.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Two risks closer than this count as tied when forming argmin sets.
pub const ARGMIN_TOLERANCE: f64 = 1e-10;

/// Joint probability table over `X1 x X2 x Y`, stored at
/// `(x1 * x2_size + x2) * y_size + y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEnv", into = "RawEnv")]
pub struct DiscreteEnv {
    x1_size: usize,
    x2_size: usize,
    y_size: usize,
    pmf: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawEnv {
    x1_size: usize,
    x2_size: usize,
    y_size: usize,
    pmf: Vec<f64>,
}

impl TryFrom<RawEnv> for DiscreteEnv {
    type Error = crate::Error;

    fn try_from(r: RawEnv) -> Result<Self> {
        Self::new(r.x1_size, r.x2_size, r.y_size, r.pmf)
    }
}

impl From<DiscreteEnv> for RawEnv {
    fn from(e: DiscreteEnv) -> Self {
        RawEnv {
            x1_size: e.x1_size,
            x2_size: e.x2_size,
            y_size: e.y_size,
            pmf: e.pmf,
        }
    }
}

impl DiscreteEnv {
    pub fn new(x1_size: usize, x2_size: usize, y_size: usize, pmf: Vec<f64>) -> Result<Self> {
        if x1_size == 0 || x2_size == 0 || y_size == 0 {
            return Err(invalid("every cardinality must be positive"));
        }
        if pmf.len() != x1_size * x2_size * y_size {
            return Err(invalid(format!(
                "pmf has {} entries, expected {x1_size}x{x2_size}x{y_size}",
                pmf.len()
            )));
        }
        if let Some(v) = pmf.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("pmf entry {v} is not a probability")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(invalid(format!("pmf sums to {total}, expected 1")));
        }
        Ok(Self {
            x1_size,
            x2_size,
            y_size,
            pmf,
        })
    }

    /// Joint table built from `P(X1, Y)` (indexed `x1 * y_size + y`) and a
    /// conditional `P(X2 | X1, Y)` given as a closure.
    pub fn from_parts(
        x1_size: usize,
        x2_size: usize,
        y_size: usize,
        x1y: &[f64],
        cond_x2: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pmf = vec![0.0; x1_size * x2_size * y_size];
        for a in 0..x1_size {
            for y in 0..y_size {
                for c in 0..x2_size {
                    pmf[(a * x2_size + c) * y_size + y] = x1y[a * y_size + y] * cond_x2(a, y, c);
                }
            }
        }
        Self::new(x1_size, x2_size, y_size, pmf)
    }

    pub fn x1_size(&self) -> usize {
        self.x1_size
    }

    pub fn x2_size(&self) -> usize {
        self.x2_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    #[inline]
    pub fn p(&self, x1: usize, x2: usize, y: usize) -> f64 {
        self.pmf[(x1 * self.x2_size + x2) * self.y_size + y]
    }

    /// `P(X1, Y)` indexed `x1 * y_size + y`.
    pub fn marginal_x1y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.x1_size * self.y_size];
        for a in 0..self.x1_size {
            for c in 0..self.x2_size {
                for y in 0..self.y_size {
                    out[a * self.y_size + y] += self.p(a, c, y);
                }
            }
        }
        out
    }

    pub fn label_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.y_size];
        for (i, v) in self.pmf.iter().enumerate() {
            out[i % self.y_size] += v;
        }
        out
    }

    /// Support points `(x1, x2, y)` with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.pmf.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(i, _)| {
            let y = i % self.y_size;
            let rest = i / self.y_size;
            (rest / self.x2_size, rest % self.x2_size, y)
        })
    }

    fn check_labels(&self, h: &HierarchyMap) -> Result<()> {
        if h.fine_count() != self.y_size {
            return Err(invalid(format!(
                "hierarchy has {} fine labels, environment has {}",
                h.fine_count(),
                self.y_size
            )));
        }
        Ok(())
    }
}

/// Coordinate projection of `X1 x X2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Projection {
    pub use_x1: bool,
    pub use_x2: bool,
}

impl Projection {
    /// The invariant projection onto `X1` alone.
    pub const X1: Self = Self {
        use_x1: true,
        use_x2: false,
    };

    /// All four projections, the invariant one first.
    pub fn all() -> Vec<Self> {
        vec![
            Self::X1,
            Self {
                use_x1: false,
                use_x2: true,
            },
            Self {
                use_x1: true,
                use_x2: true,
            },
            Self {
                use_x1: false,
                use_x2: false,
            },
        ]
    }

    /// Whether the image has an `X2` component.
    pub fn has_x2(&self) -> bool {
        self.use_x2
    }

    fn cell(&self, x1: usize, x2: usize) -> (usize, usize) {
        (
            if self.use_x1 { x1 } else { 0 },
            if self.use_x2 { x2 } else { 0 },
        )
    }
}

/// Conditional label distributions for every input `(x1, x2)`, stored
/// row-wise at `(x1 * x2_size + x2) * y_size`. Rows for inputs whose
/// feature value has no reference mass are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    x1_size: usize,
    x2_size: usize,
    y_size: usize,
    probs: Vec<f64>,
}

impl Predictor {
    /// Builds a predictor from a function of `(x1, x2)` returning a
    /// distribution over labels.
    pub fn from_fn(
        x1_size: usize,
        x2_size: usize,
        y_size: usize,
        f: impl Fn(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut probs = Vec::with_capacity(x1_size * x2_size * y_size);
        for a in 0..x1_size {
            for c in 0..x2_size {
                let row = f(a, c);
                assert_eq!(row.len(), y_size, "predictor row has the wrong length");
                probs.extend(row);
            }
        }
        Self {
            x1_size,
            x2_size,
            y_size,
            probs,
        }
    }

    pub fn row(&self, x1: usize, x2: usize) -> &[f64] {
        let start = (x1 * self.x2_size + x2) * self.y_size;
        &self.probs[start..start + self.y_size]
    }

    pub fn is_defined(&self, x1: usize, x2: usize) -> bool {
        !self.row(x1, x2)[0].is_nan()
    }

    /// Probability of the coarse label `z` at `(x1, x2)`.
    pub fn coarse_prob(&self, x1: usize, x2: usize, z: usize, h: &HierarchyMap) -> f64 {
        let row = self.row(x1, x2);
        h.preimage(z).iter().map(|&y| row[y]).sum()
    }

    fn check_env(&self, env: &DiscreteEnv) -> Result<()> {
        if (self.x1_size, self.x2_size, self.y_size) != (env.x1_size, env.x2_size, env.y_size) {
            return Err(invalid("predictor and environment shapes differ"));
        }
        Ok(())
    }
}

/// The Bayes conditional `P(Y | proj(X))` of `env`, expanded to every input.
pub fn exact_conditional(env: &DiscreteEnv, proj: Projection) -> Predictor {
    let n1 = if proj.use_x1 { env.x1_size } else { 1 };
    let n2 = if proj.use_x2 { env.x2_size } else { 1 };
    let ys = env.y_size;
    let mut joint = vec![0.0; n1 * n2 * ys];
    for a in 0..env.x1_size {
        for c in 0..env.x2_size {
            let (fa, fc) = proj.cell(a, c);
            for y in 0..ys {
                joint[(fa * n2 + fc) * ys + y] += env.p(a, c, y);
            }
        }
    }
    let mut cells = joint;
    for row in cells.chunks_mut(ys) {
        let mass: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v = if mass > 0.0 { *v / mass } else { f64::NAN };
        }
    }
    Predictor::from_fn(env.x1_size, env.x2_size, ys, |a, c| {
        let (fa, fc) = proj.cell(a, c);
        cells[(fa * n2 + fc) * ys..(fa * n2 + fc + 1) * ys].to_vec()
    })
}

/// `-log` of the probability a predictor gives to `y` (fine) or to `g(y)`
/// (coarse); infinite for zero or undefined probability.
fn point_loss(pred: &Predictor, a: usize, c: usize, y: usize, level: LabelLevel, h: &HierarchyMap) -> f64 {
    if !pred.is_defined(a, c) {
        return f64::INFINITY;
    }
    let p = match level {
        LabelLevel::Fine => pred.row(a, c)[y],
        LabelLevel::Coarse => pred.coarse_prob(a, c, h.table()[y], h),
    };
    if p > 0.0 {
        -p.ln()
    } else {
        f64::INFINITY
    }
}

/// Expected cross-entropy of `pred` on `env`. Zero predicted probability on
/// the support gives `f64::INFINITY`.
pub fn exact_risk(env: &DiscreteEnv, pred: &Predictor, level: LabelLevel, h: &HierarchyMap) -> Result<f64> {
    env.check_labels(h)?;
    pred.check_env(env)?;
    Ok(env
        .support()
        .map(|(a, c, y)| env.p(a, c, y) * point_loss(pred, a, c, y, level, h))
        .sum())
}

/// Per ambiguous coarse label `z`: `(P(g(Y) = z), E[-log p(Y | x, g^-1(z)) | g(Y) = z])`.
pub fn correction_terms(env: &DiscreteEnv, pred: &Predictor, h: &HierarchyMap) -> Result<Vec<(usize, f64, f64)>> {
    env.check_labels(h)?;
    pred.check_env(env)?;
    let prior = coarse_prior(env, h);
    let mut out = Vec::new();
    for z in h.ambiguous_labels() {
        let mut acc = 0.0;
        for (a, c, y) in env.support() {
            if h.table()[y] != z {
                continue;
            }
            let fine = point_loss(pred, a, c, y, LabelLevel::Fine, h);
            let coarse = point_loss(pred, a, c, y, LabelLevel::Coarse, h);
            let renorm = if coarse.is_infinite() { f64::INFINITY } else { fine - coarse };
            acc += env.p(a, c, y) * renorm;
        }
        let term = if prior[z] > 0.0 { acc / prior[z] } else { 0.0 };
        out.push((z, prior[z], term));
    }
    Ok(out)
}

/// `sum_z P(g(Y) = z) * C(z)` over ambiguous `z`, the gap between the fine and
/// the coarse risk.
pub fn exact_correction(env: &DiscreteEnv, pred: &Predictor, h: &HierarchyMap) -> Result<f64> {
    Ok(correction_terms(env, pred, h)?
        .into_iter()
        .map(|(_, p, c)| if p > 0.0 { p * c } else { 0.0 })
        .sum())
}

pub fn coarse_prior(env: &DiscreteEnv, h: &HierarchyMap) -> Vec<f64> {
    let mut out = vec![0.0; h.coarse_count()];
    for (y, p) in env.label_marginal().into_iter().enumerate() {
        out[h.table()[y]] += p;
    }
    out
}

/// Conditional entropy `H(Y | X1)` of an environment.
pub fn conditional_entropy_x1(env: &DiscreteEnv) -> f64 {
    let joint = env.marginal_x1y();
    let mut h = 0.0;
    for row in joint.chunks(env.y_size) {
        let mass: f64 = row.iter().sum();
        for &p in row {
            if p > 0.0 {
                h -= p * (p / mass).ln();
            }
        }
    }
    h
}

/// A reference environment and auxiliary environments sharing its `P(X1, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFamily {
    pub reference: DiscreteEnv,
    pub ad: Vec<DiscreteEnv>,
}

impl EnvFamily {
    pub fn new(reference: DiscreteEnv, ad: Vec<DiscreteEnv>) -> Result<Self> {
        let family = Self { reference, ad };
        family.validate()?;
        Ok(family)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = (self.reference.x1_size, self.reference.x2_size, self.reference.y_size);
        let marginal = self.reference.marginal_x1y();
        for (i, env) in self.ad.iter().enumerate() {
            if (env.x1_size, env.x2_size, env.y_size) != shape {
                return Err(invalid(format!("auxiliary environment {i} has a different shape")));
            }
            let gap = env
                .marginal_x1y()
                .iter()
                .zip(&marginal)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap > MASS_TOLERANCE {
                return Err(invalid(format!(
                    "auxiliary environment {i} changes P(X1, Y) by {gap:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn p_star(&self, proj: Projection) -> Predictor {
        exact_conditional(&self.reference, proj)
    }
}

/// Worst-case fine risk of `pred` over every law sharing the reference
/// `P(X1, Y)`: each `(x1, y)` puts its mass on the `x2` with the largest loss.
pub fn r_ood_exact(family: &EnvFamily, pred: &Predictor) -> f64 {
    let env = &family.reference;
    let joint = env.marginal_x1y();
    let mut total = 0.0;
    for a in 0..env.x1_size {
        for y in 0..env.y_size {
            let p = joint[a * env.y_size + y];
            if p == 0.0 {
                continue;
            }
            let worst = (0..env.x2_size)
                .map(|c| fine_loss(pred, a, c, y))
                .fold(f64::NEG_INFINITY, f64::max);
            total += p * worst;
        }
    }
    total
}

fn fine_loss(pred: &Predictor, a: usize, c: usize, y: usize) -> f64 {
    if !pred.is_defined(a, c) {
        return f64::INFINITY;
    }
    let p = pred.row(a, c)[y];
    if p > 0.0 {
        -p.ln()
    } else {
        f64::INFINITY
    }
}

/// The risk the cross-validation methods approximate.
///
/// Method I takes the larger of the worst auxiliary coarse risk and the
/// reference fine risk. Method II maximizes, over the auxiliary environments
/// and the reference, the coarse risk plus the environment's coarse prior
/// times the correction measured on the reference.
pub fn r_cv_exact(family: &EnvFamily, pred: &Predictor, method: Method, h: &HierarchyMap) -> Result<f64> {
    if family.ad.is_empty() {
        return Err(invalid("no auxiliary environment"));
    }
    let mut best = f64::NEG_INFINITY;
    match method {
        Method::I => {
            for env in &family.ad {
                best = best.max(exact_risk(env, pred, LabelLevel::Coarse, h)?);
            }
            best = best.max(exact_risk(&family.reference, pred, LabelLevel::Fine, h)?);
        }
        Method::II => {
            let terms = correction_terms(&family.reference, pred, h)?;
            for env in family.ad.iter().chain([&family.reference]) {
                let prior = coarse_prior(env, h);
                let correction: f64 = terms
                    .iter()
                    .filter(|(z, _, _)| prior[*z] > 0.0)
                    .map(|&(z, _, c)| prior[z] * c)
                    .sum();
                best = best.max(exact_risk(env, pred, LabelLevel::Coarse, h)? + correction);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beta {
    /// `H(Y* | X1*)`.
    pub beta: f64,
    /// `beta` minus the reference correction of the projection's predictor.
    pub beta_lambda: f64,
}

pub fn beta_values(family: &EnvFamily, pred: &Predictor, h: &HierarchyMap) -> Result<Beta> {
    let beta = conditional_entropy_x1(&family.reference);
    let correction = exact_correction(&family.reference, pred, h)?;
    Ok(Beta {
        beta,
        beta_lambda: beta - correction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Some auxiliary environment contradicts the reference coarse labels
    /// below `exp(-beta) - eps`.
    D,
    /// As `D` with `exp(-beta_lambda) - eps`.
    DPrime,
    /// Every label can be forced above `1 - exp(-beta) + eps` by some `x2`.
    A,
    /// As `A` with `1 - exp(-beta_lambda) + eps`.
    APrime,
}

/// A point explaining a condition verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    /// Auxiliary environment `env` satisfies the inequality on its support.
    Env { env: usize },
    /// A support point of auxiliary environment `env` where it fails.
    SupportPoint { env: usize, x1: usize, x2: usize, y: usize },
    /// No `x2` lifts label `y` at `x1` above the threshold.
    Cell { x1: usize, y: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ConditionVerdict {
    /// The projection has no `X2` component.
    NotApplicable,
    Holds { threshold: f64, witness: Option<Witness> },
    /// For the `D` conditions, one failing point per auxiliary environment.
    Fails { threshold: f64, witnesses: Vec<Witness> },
}

impl ConditionVerdict {
    /// True unless the condition fails.
    pub fn satisfied(&self) -> bool {
        !matches!(self, Self::Fails { .. })
    }
}

/// Evaluates a condition for every projection of `grid`.
pub fn check_condition(
    family: &EnvFamily,
    grid: &[Projection],
    h: &HierarchyMap,
    which: Condition,
    epsilon: f64,
) -> Result<Vec<ConditionVerdict>> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    family.reference.check_labels(h)?;
    grid.iter()
        .map(|&proj| {
            if !proj.has_x2() {
                return Ok(ConditionVerdict::NotApplicable);
            }
            let pred = family.p_star(proj);
            let b = beta_values(family, &pred, h)?;
            Ok(match which {
                Condition::D => check_d(family, &pred, h, (-b.beta).exp() - epsilon),
                Condition::DPrime => check_d(family, &pred, h, (-b.beta_lambda).exp() - epsilon),
                Condition::A => check_a(family, &pred, 1.0 - (-b.beta).exp() + epsilon),
                Condition::APrime => check_a(family, &pred, 1.0 - (-b.beta_lambda).exp() + epsilon),
            })
        })
        .collect()
}

fn check_d(family: &EnvFamily, pred: &Predictor, h: &HierarchyMap, threshold: f64) -> ConditionVerdict {
    let mut witnesses = Vec::new();
    for (i, env) in family.ad.iter().enumerate() {
        let failing = env.support().find(|&(a, c, y)| {
            let p = pred.coarse_prob(a, c, h.table()[y], h);
            // An undefined reference conditional cannot certify the bound.
            !(p <= threshold)
        });
        match failing {
            None => {
                return ConditionVerdict::Holds {
                    threshold,
                    witness: Some(Witness::Env { env: i }),
                }
            }
            Some((x1, x2, y)) => witnesses.push(Witness::SupportPoint { env: i, x1, x2, y }),
        }
    }
    ConditionVerdict::Fails { threshold, witnesses }
}

fn check_a(family: &EnvFamily, pred: &Predictor, threshold: f64) -> ConditionVerdict {
    let env = &family.reference;
    for a in 0..env.x1_size {
        for y in 0..env.y_size {
            let reachable = (0..env.x2_size).any(|c| pred.row(a, c)[y] >= threshold);
            if !reachable {
                return ConditionVerdict::Fails {
                    threshold,
                    witnesses: vec![Witness::Cell { x1: a, y }],
                };
            }
        }
    }
    ConditionVerdict::Holds {
        threshold,
        witness: None,
    }
}

/// For each `(x1, y)`, the `x2` minimizing the reference probability of the
/// coarse label `g(y)` under the projection; the smallest index among ties.
fn adversarial_x2(pred: &Predictor, h: &HierarchyMap, a: usize, y: usize) -> usize {
    let z = h.table()[y];
    let n2 = pred.x2_size;
    let values: Vec<f64> = (0..n2)
        .map(|c| {
            let p = pred.coarse_prob(a, c, z, h);
            if p.is_nan() {
                f64::INFINITY
            } else {
                p
            }
        })
        .collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    values
        .iter()
        .position(|&v| v <= min + MASS_TOLERANCE)
        .unwrap_or(0)
}

/// The member of the family's law class whose `X2 | X1, Y` is a Dirac mass
/// at the `x2` that makes the reference least confident in `g(y)`.
pub fn construct_adversarial_env(family: &EnvFamily, proj: Projection, h: &HierarchyMap) -> Result<DiscreteEnv> {
    if !proj.has_x2() {
        return Err(invalid("projection has no X2 component"));
    }
    let env = &family.reference;
    env.check_labels(h)?;
    let pred = family.p_star(proj);
    let joint = env.marginal_x1y();
    let mut chosen = vec![0; env.x1_size * env.y_size];
    for a in 0..env.x1_size {
        for y in 0..env.y_size {
            chosen[a * env.y_size + y] = adversarial_x2(&pred, h, a, y);
        }
    }
    DiscreteEnv::from_parts(env.x1_size, env.x2_size, env.y_size, &joint, |a, y, c| {
        if chosen[a * env.y_size + y] == c {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InclusionVerdict {
    Holds,
    Violated,
    /// Inclusion fails but the method's condition does not hold either, so
    /// the guarantee does not apply.
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub method: Method,
    pub verdict: InclusionVerdict,
    /// Whether the method's condition (`D` for Method I, `DPrime` for
    /// Method II) holds at every projection with an `X2` component.
    pub condition_holds: bool,
    pub r_cv: Vec<f64>,
    pub r_ood: Vec<f64>,
    pub argmin_cv: Vec<usize>,
    pub argmin_ood: Vec<usize>,
    /// Grid index selected by the cross-validation risk but not optimal out
    /// of distribution.
    pub witness: Option<usize>,
    pub conditions: Vec<ConditionVerdict>,
}

/// Indices within `ARGMIN_TOLERANCE` of the minimum.
pub fn argmin_set(values: &[f64]) -> Vec<usize> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= min + ARGMIN_TOLERANCE || (min.is_infinite() && **v == min))
        .map(|(i, _)| i)
        .collect()
}

/// Checks `argmin R^cv ⊆ argmin R^ood` over a projection grid.
pub fn verify_argmin_inclusion(
    family: &EnvFamily,
    grid: &[Projection],
    method: Method,
    h: &HierarchyMap,
    epsilon: f64,
) -> Result<InclusionReport> {
    if grid.is_empty() {
        return Err(invalid("empty projection grid"));
    }
    let mut r_cv = Vec::with_capacity(grid.len());
    let mut r_ood = Vec::with_capacity(grid.len());
    for &proj in grid {
        let pred = family.p_star(proj);
        r_cv.push(r_cv_exact(family, &pred, method, h)?);
        r_ood.push(r_ood_exact(family, &pred));
    }
    let which = match method {
        Method::I => Condition::D,
        Method::II => Condition::DPrime,
    };
    let conditions = check_condition(family, grid, h, which, epsilon)?;
    let condition_holds = conditions.iter().all(ConditionVerdict::satisfied);
    let argmin_cv = argmin_set(&r_cv);
    let argmin_ood = argmin_set(&r_ood);
    let witness = argmin_cv.iter().copied().find(|i| !argmin_ood.contains(i));
    let verdict = match (witness, condition_holds) {
        (None, _) => InclusionVerdict::Holds,
        (Some(_), true) => InclusionVerdict::Violated,
        (Some(_), false) => InclusionVerdict::Unconstrained,
    };
    Ok(InclusionReport {
        method,
        verdict,
        condition_holds,
        r_cv,
        r_ood,
        argmin_cv,
        argmin_ood,
        witness,
        conditions,
    })
}

/// A verification problem as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub hierarchy: HierarchyMap,
    pub reference: DiscreteEnv,
    pub ad: Vec<DiscreteEnv>,
    #[serde(default = "Projection::all")]
    pub grid: Vec<Projection>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryVerdict {
    pub beta: f64,
    pub grid: Vec<Projection>,
    pub beta_lambda: Vec<f64>,
    pub condition_a: Vec<ConditionVerdict>,
    pub condition_a_prime: Vec<ConditionVerdict>,
    pub method_i: InclusionReport,
    pub method_ii: InclusionReport,
}

impl TheoryInstance {
    pub fn family(&self) -> Result<EnvFamily> {
        EnvFamily::new(self.reference.clone(), self.ad.clone())
    }

    pub fn verify(&self) -> Result<TheoryVerdict> {
        let family = self.family()?;
        let h = &self.hierarchy;
        let mut beta = 0.0;
        let mut beta_lambda = Vec::with_capacity(self.grid.len());
        for &proj in &self.grid {
            let b = beta_values(&family, &family.p_star(proj), h)?;
            beta = b.beta;
            beta_lambda.push(b.beta_lambda);
        }
        Ok(TheoryVerdict {
            beta,
            grid: self.grid.clone(),
            beta_lambda,
            condition_a: check_condition(&family, &self.grid, h, Condition::A, self.epsilon)?,
            condition_a_prime: check_condition(&family, &self.grid, h, Condition::APrime, self.epsilon)?,
            method_i: verify_argmin_inclusion(&family, &self.grid, Method::I, h, self.epsilon)?,
            method_ii: verify_argmin_inclusion(&family, &self.grid, Method::II, h, self.epsilon)?,
        })
    }
}

/// A random surjective coarsening of `fine` labels onto `coarse` labels.
pub fn random_hierarchy(rng: &mut impl Rng, fine: usize, coarse: usize) -> HierarchyMap {
    assert!(fine >= coarse && coarse >= 2, "need fine >= coarse >= 2");
    let mut table: Vec<usize> = (0..fine).map(|y| if y < coarse { y } else { rng.random_range(0..coarse) }).collect();
    for i in (1..fine).rev() {
        table.swap(i, rng.random_range(0..=i));
    }
    HierarchyMap::new(table).expect("every coarse label has a preimage")
}

fn random_simplex(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// A random environment with full support.
pub fn random_env(rng: &mut impl Rng, x1_size: usize, x2_size: usize, y_size: usize) -> DiscreteEnv {
    let pmf = random_simplex(rng, x1_size * x2_size * y_size, 0.05);
    normalized(x1_size, x2_size, y_size, pmf)
}

fn normalized(x1_size: usize, x2_size: usize, y_size: usize, mut pmf: Vec<f64>) -> DiscreteEnv {
    // Re-summing keeps the total within rounding of 1.
    let total: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|v| *v /= total);
    DiscreteEnv::new(x1_size, x2_size, y_size, pmf).expect("normalized table")
}

/// A random family whose reference lets `X2` steer the labels: given
/// `(x1, y)`, `X2` equals a random code of `y` with probability `1 - noise`.
/// The auxiliary environments are the adversarial constructions for every
/// projection with an `X2` component plus one random member of the class.
pub fn random_family(rng: &mut impl Rng, h: &HierarchyMap, x1_size: usize, x2_size: usize) -> EnvFamily {
    let y_size = h.fine_count();
    let x1y = random_simplex(rng, x1_size * y_size, 0.02);
    let code: Vec<usize> = (0..y_size).map(|_| rng.random_range(0..x2_size)).collect();
    let noise = rng.random_range(0.0..0.6);
    let spread: Vec<Vec<f64>> = (0..x1_size * y_size).map(|_| random_simplex(rng, x2_size, 0.01)).collect();
    let reference = DiscreteEnv::from_parts(x1_size, x2_size, y_size, &x1y, |a, y, c| {
        let hit = if code[y] == c { 1.0 } else { 0.0 };
        (1.0 - noise) * hit + noise * spread[a * y_size + y][c]
    })
    .expect("conditionals sum to one");
    let mut family = EnvFamily {
        reference,
        ad: Vec::new(),
    };
    let joint = family.reference.marginal_x1y();
    let shuffle: Vec<Vec<f64>> = (0..x1_size * y_size).map(|_| random_simplex(rng, x2_size, 0.01)).collect();
    let random_member =
        DiscreteEnv::from_parts(x1_size, x2_size, y_size, &joint, |a, y, c| shuffle[a * y_size + y][c]);
    for proj in Projection::all().into_iter().filter(Projection::has_x2) {
        let env = construct_adversarial_env(&family, proj, h).expect("projection uses X2");
        family.ad.push(env);
    }
    if let Ok(env) = random_member {
        family.ad.push(env);
    }
    family
}

/// Draws random families until one satisfies `which` at every projection
/// (and, with `exclude`, fails `exclude` at some projection).
pub fn sample_family_with(
    rng: &mut impl Rng,
    h: &HierarchyMap,
    x1_size: usize,
    x2_size: usize,
    which: Condition,
    exclude: Option<Condition>,
    epsilon: f64,
    max_attempts: usize,
) -> Result<Option<EnvFamily>> {
    let grid = Projection::all();
    for _ in 0..max_attempts {
        let family = random_family(rng, h, x1_size, x2_size);
        let ok = check_condition(&family, &grid, h, which, epsilon)?
            .iter()
            .all(ConditionVerdict::satisfied);
        if !ok {
            continue;
        }
        if let Some(other) = exclude {
            let fails = !check_condition(&family, &grid, h, other, epsilon)?
                .iter()
                .all(ConditionVerdict::satisfied);
            if !fails {
                continue;
            }
        }
        return Ok(Some(family));
    }
    Ok(None)
}
