use std::rc::Rc;

use hilearn::diffcore::{
    finite_diff_check, grad, grad_norm_sq, grad_norm_sq_grad, value, ParamVector, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

fn softmax_ce(x: Tensor, labels: Rc<[usize]>) -> impl Fn(&mut Tape, &[Var]) -> Var {
    move |tape, p| {
        let xv = tape.constant(x.clone());
        let z = tape.matmul(xv, p[0]);
        let z = tape.add_row(z, p[1]);
        let lp = tape.log_softmax(z);
        let picked = tape.pick(lp, labels.clone());
        let m = tape.mean(picked);
        tape.scale(m, -1.0)
    }
}

#[test]
fn softmax_cross_entropy_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, 4, 2);
    let labels: Rc<[usize]> = vec![0, 2, 1, 2].into();
    let params = ParamVector::from_blocks(&[random_tensor(&mut rng, 2, 3), random_tensor(&mut rng, 1, 3)]);
    let err = finite_diff_check(softmax_ce(x, labels), &params, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn two_layer_mlp_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, 6, 3);
    let labels: Rc<[usize]> = vec![0, 1, 1, 0, 1, 0].into();
    let params = ParamVector::from_blocks(&[
        random_tensor(&mut rng, 3, 5),
        random_tensor(&mut rng, 1, 5),
        random_tensor(&mut rng, 5, 2),
        random_tensor(&mut rng, 1, 2),
    ]);
    let loss = move |tape: &mut Tape, p: &[Var]| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, p[0]);
        let h = tape.add_row(h, p[1]);
        let h = tape.relu(h);
        let z = tape.matmul(h, p[2]);
        let z = tape.add_row(z, p[3]);
        let lp = tape.log_softmax(z);
        let picked = tape.pick(lp, labels.clone());
        let m = tape.mean(picked);
        tape.scale(m, -1.0)
    };
    let err = finite_diff_check(loss, &params, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

/// Logistic coarse risk of a head `(w, b)` on scalar features `h = x * v`,
/// where `v` is the outer parameter.
fn logistic_inner(x: Tensor, z: Rc<[usize]>) -> impl Fn(&mut Tape, &[Var], &[Var]) -> Var {
    move |tape, inner, outer| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, outer[0]);
        let s = tape.matmul(h, inner[0]);
        let s = tape.add_row(s, inner[1]);
        let logits = tape.scatter(s, vec![1; x.rows()].into(), 2);
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, z.clone());
        let m = tape.mean(picked);
        tape.scale(m, -1.0)
    }
}

#[test]
fn penalty_gradient_matches_finite_differences_on_six_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, 6, 2);
    let z: Rc<[usize]> = vec![0, 1, 1, 0, 1, 0].into();
    let inner = ParamVector::from_blocks(&[random_tensor(&mut rng, 1, 1), random_tensor(&mut rng, 1, 1)]);
    let outer = ParamVector::from_blocks(&[random_tensor(&mut rng, 2, 1)]);
    let inner_loss = logistic_inner(x, z);
    let analytic = grad_norm_sq_grad(&inner_loss, &inner, &outer).unwrap();

    let penalty = |o: &ParamVector| {
        let mut tape = Tape::new();
        let iv = inner.leaves(&mut tape);
        let ov = o.leaves(&mut tape);
        let l = inner_loss(&mut tape, &iv, &ov);
        let g = tape.grad(l, &iv);
        let p = grad_norm_sq(&mut tape, &g);
        tape.scalar(p)
    };
    let step = 1e-5;
    for i in 0..outer.len() {
        let mut up = outer.clone();
        up.values_mut()[i] += step;
        let mut down = outer.clone();
        down.values_mut()[i] -= step;
        let numeric = (penalty(&up) - penalty(&down)) / (2.0 * step);
        let a = analytic.values()[i];
        assert!((a - numeric).abs() / (a.abs() + step) < 1e-4, "coordinate {i}: {a} vs {numeric}");
    }
}

fn unary(op: &'static str) -> impl Fn(&mut Tape, Var) -> Var {
    move |tape, v| match op {
        "relu" => tape.relu(v),
        "exp" => tape.exp(v),
        "log_softmax" => tape.log_softmax(v),
        "row_sum" => {
            let r = tape.row_sum(v);
            tape.broadcast_cols(r, 3)
        }
        "col_sum" => {
            let c = tape.col_sum(v);
            tape.broadcast_rows(c, 2)
        }
        "square" => tape.mul(v, v),
        "scale" => tape.scale(v, -2.5),
        _ => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn unary_primitives_agree_with_central_differences(
        vals in prop::collection::vec(0.05f64..1.5, 6),
        signs in prop::collection::vec(any::<bool>(), 6),
        weights in prop::collection::vec(-1.0f64..1.0, 6),
        op in prop::sample::select(vec!["relu", "exp", "log_softmax", "row_sum", "col_sum", "square", "scale"]),
    ) {
        // Magnitudes are bounded away from zero so the ReLU kink is never
        // inside the difference stencil.
        let x: Vec<f64> = vals.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -v }).collect();
        let params = ParamVector::from_blocks(&[Tensor::from_vec(2, 3, x)]);
        let w = Tensor::from_vec(2, 3, weights);
        let f = unary(op);
        let loss = move |tape: &mut Tape, p: &[Var]| {
            let y = f(tape, p[0]);
            let c = tape.constant(w.clone());
            let prod = tape.mul(y, c);
            tape.sum_all(prod)
        };
        let err = finite_diff_check(loss, &params, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{op}: {err}");
    }

    #[test]
    fn binary_primitives_agree_with_central_differences(
        a in prop::collection::vec(-1.5f64..1.5, 6),
        b in prop::collection::vec(-1.5f64..1.5, 6),
        op in 0usize..6,
    ) {
        let params = ParamVector::from_blocks(&[Tensor::from_vec(2, 3, a), Tensor::from_vec(2, 3, b)]);
        let loss = move |tape: &mut Tape, p: &[Var]| {
            let out = match op {
                0 => tape.add(p[0], p[1]),
                1 => tape.sub(p[0], p[1]),
                2 => tape.mul(p[0], p[1]),
                3 => tape.matmul_t(p[0], p[1]),
                4 => tape.t_matmul(p[0], p[1]),
                _ => {
                    let row = tape.col_sum(p[1]);
                    tape.add_row(p[0], row)
                }
            };
            let sq = tape.sum_sq(out);
            tape.scale(sq, 0.5)
        };
        let err = finite_diff_check(loss, &params, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "op {op}: {err}");
    }

    #[test]
    fn grad_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 4),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let params = ParamVector::from_blocks(&[Tensor::from_vec(2, 2, x)]);
        let f = |tape: &mut Tape, v: Var| {
            let e = tape.exp(v);
            tape.sum_all(e)
        };
        let g = |tape: &mut Tape, v: Var| {
            let lp = tape.log_softmax(v);
            let m = tape.matmul(lp, v);
            tape.sum_all(m)
        };
        let combined = move |tape: &mut Tape, p: &[Var]| {
            let fv = f(tape, p[0]);
            let gv = g(tape, p[0]);
            let fa = tape.scale(fv, a);
            let gb = tape.scale(gv, b);
            tape.add(fa, gb)
        };
        let gc = grad(combined, &params).unwrap();
        let gf = grad(|t: &mut Tape, p: &[Var]| f(t, p[0]), &params).unwrap();
        let gg = grad(|t: &mut Tape, p: &[Var]| g(t, p[0]), &params).unwrap();
        for i in 0..4 {
            let expect = a * gf.values()[i] + b * gg.values()[i];
            prop_assert!((gc.values()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn random_logistic_penalty_gradients_match_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..9);
        let x = random_tensor(&mut rng, n, 2);
        let z: Rc<[usize]> = (0..n).map(|_| rng.random_range(0..2)).collect::<Vec<_>>().into();
        let inner = ParamVector::from_blocks(&[random_tensor(&mut rng, 1, 1), random_tensor(&mut rng, 1, 1)]);
        let outer = ParamVector::from_blocks(&[random_tensor(&mut rng, 2, 1)]);
        let inner_loss = logistic_inner(x, z);
        let analytic = grad_norm_sq_grad(&inner_loss, &inner, &outer).unwrap();
        // The penalty as a function of the outer block alone.
        let penalty = |tape: &mut Tape, p: &[Var]| {
            let iv = inner.leaves(tape);
            let l = inner_loss(tape, &iv, p);
            let g = tape.grad(l, &iv);
            grad_norm_sq(tape, &g)
        };
        let step = 1e-5;
        for i in 0..outer.len() {
            let mut up = outer.clone();
            up.values_mut()[i] += step;
            let mut down = outer.clone();
            down.values_mut()[i] -= step;
            let numeric = (value(penalty, &up).unwrap() - value(penalty, &down).unwrap()) / (2.0 * step);
            let a = analytic.values()[i];
            prop_assert!((a - numeric).abs() / (a.abs() + step) < 1e-4);
        }
    }
}
