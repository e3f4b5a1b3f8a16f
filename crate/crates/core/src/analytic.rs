//! Closed-form value and gradient of the training objective for the MLP
//! bundle. The penalty gradient is `2 J^T g` with `g` the coarse-head
//! gradient, written out for softmax and logistic heads.
//!
//! All rows (target first, then each auxiliary domain) go through the
//! feature map as one matrix, so a step costs one forward and one backward
//! pass regardless of the number of terms.

use crate::diffcore::Tensor;
use crate::models::ModelBundle;

/// Rows of one dataset inside the stacked input.
pub(crate) struct Segment<'a> {
    pub labels: &'a [usize],
}

/// Objective weights of one step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Weights {
    pub lambda: f64,
    pub aux: f64,
    pub l2: f64,
}

/// Term values in evaluation order, for diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Terms {
    pub target_risk: f64,
    pub penalty: f64,
    pub aux_risk: f64,
    pub l2: f64,
}

impl Terms {
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.target_risk, "target risk"),
            (self.penalty, "penalty"),
            (self.aux_risk, "auxiliary coarse risk"),
            (self.l2, "l2"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, n)| n)
    }
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub terms: Terms,
    /// Gradient blocks in `phi`, `theta`, `theta_ad` order, flattened.
    pub grad: Vec<f64>,
}

fn add_into(acc: &mut Tensor, t: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += b;
    }
}

fn add_scaled(acc: &mut Tensor, t: &Tensor, s: f64) {
    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += s * b;
    }
}

fn add_bias(z: &mut Tensor, b: &Tensor) {
    let c = z.cols();
    for row in z.data_mut().chunks_mut(c) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.cols();
    Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec())
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(s))` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Per-row residual `a = p - onehot(z)` of a head, the mean NLL, and the
/// probabilities needed for the Jacobian. A single score column is logistic.
struct HeadOut {
    residual: Tensor,
    probs: Tensor,
    nll: f64,
}

fn head_forward(scores: &Tensor, labels: &[usize]) -> HeadOut {
    let n = scores.rows();
    if scores.cols() == 1 {
        let mut residual = Tensor::zeros(n, 1);
        let mut probs = Tensor::zeros(n, 1);
        let mut nll = 0.0;
        for i in 0..n {
            let s = scores.get(i, 0);
            let p = sigmoid(s);
            let z = labels[i] as f64;
            probs.set(i, 0, p);
            residual.set(i, 0, p - z);
            nll += if labels[i] == 1 { softplus(-s) } else { softplus(s) };
        }
        HeadOut {
            residual,
            probs,
            nll: nll / n as f64,
        }
    } else {
        let lp = scores.log_softmax_rows();
        let probs = lp.map(f64::exp);
        let mut residual = probs.clone();
        let mut nll = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            residual.set(i, y, residual.get(i, y) - 1.0);
            nll -= lp.get(i, y);
        }
        HeadOut {
            residual,
            probs,
            nll: nll / n as f64,
        }
    }
}

/// Applies the transpose Jacobian of the residual w.r.t. the scores to `u`.
fn head_jacobian_t(probs: &Tensor, u: &Tensor) -> Tensor {
    if probs.cols() == 1 {
        probs.zip_map(u, |p, v| p * (1.0 - p) * v)
    } else {
        let c = probs.cols();
        let mut out = Tensor::zeros(probs.rows(), c);
        for i in 0..probs.rows() {
            let p = probs.row(i);
            let ur = u.row(i);
            let dot: f64 = p.iter().zip(ur).map(|(a, b)| a * b).sum();
            for j in 0..c {
                out.set(i, j, p[j] * (ur[j] - dot));
            }
        }
        out
    }
}

/// Value and gradient of
/// `target_risk + lambda * penalty + aux * sum_e coarse_risk_e + l2 * ||params||^2`.
///
/// `inputs` stacks the target rows (if `target` is given) followed by the
/// rows of every segment in `ad`.
pub(crate) fn evaluate(
    bundle: &ModelBundle,
    inputs: &Tensor,
    target: Option<Segment<'_>>,
    ad: &[Segment<'_>],
    w: Weights,
) -> Evaluation {
    let linear_last = bundle.arch.feature_dim.is_some();
    let phi = bundle.phi.blocks();
    let theta = bundle.theta.blocks();
    let theta_ad = bundle.theta_ad.blocks();
    let layers = phi.len() / 2;

    // Forward pass, keeping every layer input and ReLU mask.
    let mut acts = vec![inputs.clone()];
    let mut masks: Vec<Option<Tensor>> = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut z = acts[l].matmul(&phi[2 * l]);
        add_bias(&mut z, &phi[2 * l + 1]);
        if linear_last && l + 1 == layers {
            masks.push(None);
        } else {
            let mask = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            z = z.map(|v| v.max(0.0));
            masks.push(Some(mask));
        }
        acts.push(z);
    }
    let h = acts.last().expect("at least the input").clone();
    let feat = h.cols();
    let mut dh = Tensor::zeros(h.rows(), feat);
    let mut g_theta = [Tensor::zeros(feat, theta[0].cols()), Tensor::zeros(1, theta[0].cols())];
    let mut g_ad = [
        Tensor::zeros(feat, theta_ad[0].cols()),
        Tensor::zeros(1, theta_ad[0].cols()),
    ];
    let mut terms = Terms::default();
    let mut offset = 0;

    if let Some(seg) = target {
        let n = seg.labels.len();
        let ht = rows(&h, offset, n);
        let mut s = ht.matmul(&theta[0]);
        add_bias(&mut s, &theta[1]);
        let out = head_forward(&s, seg.labels);
        terms.target_risk = out.nll;
        let ds = out.residual.map(|v| v / n as f64);
        g_theta[0] = ht.t_matmul(&ds);
        g_theta[1] = ds.col_sums();
        let dht = ds.matmul_t(&theta[0]);
        dh.data_mut()[offset * feat..(offset + n) * feat].copy_from_slice(dht.data());
        offset += n;
    }

    if w.lambda > 0.0 || w.aux > 0.0 {
        for seg in ad {
            let n = seg.labels.len();
            let nf = n as f64;
            let he = rows(&h, offset, n);
            let mut s = he.matmul(&theta_ad[0]);
            add_bias(&mut s, &theta_ad[1]);
            let out = head_forward(&s, seg.labels);
            let mut dhe = Tensor::zeros(n, feat);
            let mut ds = Tensor::zeros(n, s.cols());
            if w.lambda > 0.0 {
                let gw = he.t_matmul(&out.residual).map(|v| v / nf);
                let gb = out.residual.col_sums().map(|v| v / nf);
                terms.penalty += gw.sq_norm() + gb.sq_norm();
                let c = 2.0 * w.lambda / nf;
                // Explicit dependence of the head gradient on the features.
                add_scaled(&mut dhe, &out.residual.matmul_t(&gw), c);
                // Dependence through the residuals.
                let mut u = he.matmul(&gw);
                add_bias(&mut u, &gb);
                let dsp = head_jacobian_t(&out.probs, &u);
                add_scaled(&mut ds, &dsp, c);
            }
            if w.aux > 0.0 {
                terms.aux_risk += out.nll;
                add_scaled(&mut ds, &out.residual, w.aux / nf);
            }
            add_into(&mut g_ad[0], &he.t_matmul(&ds));
            add_into(&mut g_ad[1], &ds.col_sums());
            add_into(&mut dhe, &ds.matmul_t(&theta_ad[0]));
            dh.data_mut()[offset * feat..(offset + n) * feat].copy_from_slice(dhe.data());
            offset += n;
        }
    }

    // Backward through the feature map.
    let mut g_phi: Vec<Tensor> = Vec::with_capacity(phi.len());
    let mut upstream = dh;
    for l in (0..layers).rev() {
        let dz = match &masks[l] {
            Some(m) => upstream.zip_map(m, |g, m| g * m),
            None => upstream,
        };
        let gw = acts[l].t_matmul(&dz);
        let gb = dz.col_sums();
        if l > 0 {
            upstream = dz.matmul_t(&phi[2 * l]);
        } else {
            upstream = Tensor::zeros(0, 0);
        }
        g_phi.push(gb);
        g_phi.push(gw);
    }
    g_phi.reverse();

    let mut grad = Vec::with_capacity(bundle.param_count());
    for t in g_phi.iter().chain(&g_theta).chain(&g_ad) {
        grad.extend_from_slice(t.data());
    }
    if w.l2 > 0.0 {
        let sq = bundle.phi.sq_norm() + bundle.theta.sq_norm() + bundle.theta_ad.sq_norm();
        terms.l2 = w.l2 * sq;
        let params = bundle
            .phi
            .values()
            .iter()
            .chain(bundle.theta.values())
            .chain(bundle.theta_ad.values());
        for (g, p) in grad.iter_mut().zip(params) {
            *g += 2.0 * w.l2 * p;
        }
    }
    let value = terms.target_risk + w.lambda * terms.penalty + w.aux * terms.aux_risk + terms.l2;
    Evaluation { value, terms, grad }
}
