//! Tape-level behavior: forward values, gradients against independent
//! oracles, and the algebraic invariants the rest of the crate leans on.

use infodesign_core::ad::{grad_check, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_square() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    assert_eq!(tape.value(y).item(), 9.0);
}

#[test]
fn forward_logsumexp_of_two_zeros() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
    let y = tape.logsumexp_rows(x);
    assert!((tape.value(y).data()[0] - 2.0_f64.ln()).abs() < 1e-12);
}

/// Two-layer tanh network checked against a straight-line reimplementation
/// of the same arithmetic.
#[test]
fn forward_two_layer_tanh_matches_straightline() {
    let w1 = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]; // [2,3]
    let b1 = vec![0.05, -0.1, 0.2];
    let w2 = vec![0.6, -0.3, 0.2]; // [3,1]
    let b2 = vec![-0.07];
    let x = [1.2, -0.8];

    let mut tape = Tape::new();
    let xin = tape.constant(Tensor::matrix(1, 2, x.to_vec()));
    let w1v = tape.constant(Tensor::matrix(2, 3, w1.clone()));
    let b1v = tape.constant(Tensor::vector(b1.clone()));
    let w2v = tape.constant(Tensor::matrix(3, 1, w2.clone()));
    let b2v = tape.constant(Tensor::vector(b2.clone()));
    let h = tape.matmul(xin, w1v);
    let h = tape.add_row(h, b1v);
    let h = tape.tanh(h);
    let o = tape.matmul(h, w2v);
    let o = tape.add_row(o, b2v);
    let got = tape.value(o).data()[0];

    // Independent evaluation, no tensors involved.
    let mut hidden = [0.0f64; 3];
    for j in 0..3 {
        hidden[j] = (x[0] * w1[j] + x[1] * w1[3 + j] + b1[j]).tanh();
    }
    let want = hidden[0] * w2[0] + hidden[1] * w2[1] + hidden[2] * w2[2] + b2[0];

    assert!((got - want).abs() < 1e-14, "{got} vs {want}");
}

#[test]
fn backward_square_at_three() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.backward(y).wrt(x);
    assert_eq!(g.item(), 6.0);
}

#[test]
fn backward_softplus_at_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.softplus(x);
    let g = tape.backward(y).wrt(x);
    assert!((g.item() - 0.5).abs() < 1e-15);
}

fn three_layer_net(tape: &mut Tape, params: Var) -> Var {
    // params: flattened [4*3 + 3 + 3*3 + 3 + 3*1 + 1] = 31 values.
    let x = tape.constant(Tensor::matrix(2, 4, vec![0.5, -1.0, 0.25, 0.8, -0.3, 0.9, -0.6, 0.1]));
    let m = tape.reshape(params, &[1, 31]);
    let mut off = 0usize;
    let mut slice = |tape: &mut Tape, n: usize, shape: &[usize]| {
        let s = tape.slice_cols(m, off, off + n);
        off += n;
        tape.reshape(s, shape)
    };
    let w1 = slice(tape, 12, &[4, 3]);
    let b1 = slice(tape, 3, &[3]);
    let w2 = slice(tape, 9, &[3, 3]);
    let b2 = slice(tape, 3, &[3]);
    let w3 = slice(tape, 3, &[3, 1]);
    let b3 = slice(tape, 1, &[1]);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.tanh(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    let h = tape.sigmoid(h);
    let o = tape.matmul(h, w3);
    let o = tape.add_row(o, b3);
    tape.mean(o)
}

#[test]
fn backward_three_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point: Vec<f64> = (0..31).map(|_| rng.random_range(-0.8..0.8)).collect();
    let report = grad_check(three_layer_net, &point, 1e-5);
    assert!(
        report.max_rel_error < 1e-4,
        "worst coord {}: analytic {} numeric {}",
        report.worst_index,
        report.analytic,
        report.numeric
    );
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let point: Vec<f64> = (0..31).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(point));
        let out = three_layer_net(&mut tape, p);
        let value = tape.value(out).item();
        (value, tape.backward(out).wrt(p).into_data())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn unused_parameters_get_exact_zero_gradients() {
    let mut tape = Tape::new();
    let used = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![5.0, -5.0, 3.0]));
    let s = tape.sum(used);
    let grads = tape.backward(s);
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    assert!(grads.try_wrt(unused).is_none());
}

/// backward(a*f + b*g) == a*backward(f) + b*backward(g), elementwise.
#[test]
fn backward_is_linear_in_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(-2.0..2.0);
        let point: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.5)).collect();

        let f = |tape: &mut Tape, x: Var| -> Var {
            let e = tape.exp(x);
            tape.sum(e)
        };
        let g = |tape: &mut Tape, x: Var| -> Var {
            let l = tape.log(x);
            let sq = tape.square(l);
            tape.sum(sq)
        };

        let grad_of = |builder: &dyn Fn(&mut Tape, Var) -> Var| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::vector(point.clone()));
            let out = builder(&mut tape, x);
            tape.backward(out).wrt(x).into_data()
        };

        let gf = grad_of(&f);
        let gg = grad_of(&g);
        let combined = grad_of(&|tape: &mut Tape, x: Var| {
            let fx = f(tape, x);
            let gx = g(tape, x);
            let af = tape.scale(fx, a);
            let bg = tape.scale(gx, b);
            tape.add(af, bg)
        });

        for i in 0..point.len() {
            let want = a * gf[i] + b * gg[i];
            assert!(
                (combined[i] - want).abs() <= 1e-10 * (1.0 + want.abs()),
                "coord {i}: {} vs {}",
                combined[i],
                want
            );
        }
    }
}

#[test]
fn backward_seeded_weights_rows() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.square(x);
    let grads = tape.backward_seeded(y, Tensor::vector(vec![1.0, 0.0, 10.0]));
    assert_eq!(grads.wrt(x).data(), &[2.0, 0.0, 60.0]);
}

/// Every op kind in the set passes a finite-difference check at random
/// points away from any kink.
#[test]
fn grad_check_every_op_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    type BuildFn = fn(&mut Tape, Var) -> Var;
    // Each entry: (name, builder over a 6-element positive-safe input).
    let cases: Vec<(&str, BuildFn)> = vec![
        ("add", |t, x| {
            let c = t.constant(Tensor::vector(vec![0.3; 6]));
            let v = t.add(x, c);
            t.sum(v)
        }),
        ("sub", |t, x| {
            let c = t.constant(Tensor::vector(vec![0.3; 6]));
            let v = t.sub(x, c);
            t.sum(v)
        }),
        ("mul", |t, x| {
            let y = t.offset(x, 0.5);
            let v = t.mul(x, y);
            t.sum(v)
        }),
        ("div", |t, x| {
            let y = t.offset(x, 4.0);
            let v = t.div(x, y);
            t.sum(v)
        }),
        ("neg", |t, x| {
            let v = t.neg(x);
            t.sum(v)
        }),
        ("matmul", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let w = t.constant(Tensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.9, -0.3, 0.4]));
            let o = t.matmul(m, w);
            t.sum(o)
        }),
        ("tanh", |t, x| {
            let v = t.tanh(x);
            t.sum(v)
        }),
        ("sigmoid", |t, x| {
            let v = t.sigmoid(x);
            t.sum(v)
        }),
        ("softplus", |t, x| {
            let v = t.softplus(x);
            t.sum(v)
        }),
        ("exp", |t, x| {
            let v = t.exp(x);
            t.sum(v)
        }),
        ("log", |t, x| {
            let s = t.offset(x, 3.2);
            let v = t.log(s);
            t.sum(v)
        }),
        ("sqrt", |t, x| {
            let s = t.offset(x, 3.2);
            let v = t.sqrt(s);
            t.sum(v)
        }),
        ("square", |t, x| {
            let v = t.square(x);
            t.sum(v)
        }),
        ("sum", |t, x| t.sum(x)),
        ("mean", |t, x| t.mean(x)),
        ("sum_rows", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let r = t.sum_rows(m);
            t.sum(r)
        }),
        ("logsumexp_rows", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let r = t.logsumexp_rows(m);
            t.sum(r)
        }),
        ("cumsum_rows", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let c = t.cumsum_rows(m);
            let w = t.constant(Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 0.25, 1.5, -1.0]));
            let v = t.mul(c, w);
            t.sum(v)
        }),
        ("gather_rows", |t, x| {
            let m = t.reshape(x, &[3, 2]);
            let gathered = t.gather_rows(m, &[2, 0, 2, 1]);
            let w = t.constant(Tensor::matrix(4, 2, vec![1.0, 2.0, -1.0, 0.5, 0.7, 0.7, 2.0, -2.0]));
            let v = t.mul(gathered, w);
            t.sum(v)
        }),
        ("take_per_row", |t, x| {
            let m = t.reshape(x, &[3, 2]);
            let taken = t.take_per_row(m, &[1, 0, 1]);
            let sq = t.square(taken);
            t.sum(sq)
        }),
        ("concat_cols", |t, x| {
            let m = t.reshape(x, &[3, 2]);
            let a = t.slice_cols(m, 0, 1);
            let b = t.slice_cols(m, 1, 2);
            let c = t.concat_cols(b, a);
            let sq = t.square(c);
            t.sum(sq)
        }),
        ("concat_rows", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let c = t.concat_rows(m, m);
            let e = t.exp(c);
            t.sum(e)
        }),
        ("permute_cols", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let p = t.permute_cols(m, &[2, 0, 1]);
            let w = t.constant(Tensor::matrix(2, 3, vec![0.1, 0.9, -0.4, 1.1, 0.6, -0.2]));
            let v = t.mul(p, w);
            t.sum(v)
        }),
        ("broadcast_row_col", |t, x| {
            let m = t.reshape(x, &[2, 3]);
            let row = t.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
            let col = t.constant(Tensor::vector(vec![1.5, -0.5]));
            let a = t.mul_row(m, row);
            let b = t.add_col(a, col);
            let r = t.logsumexp_rows(b);
            t.mean(r)
        }),
        ("clamp_inactive", |t, x| {
            let v = t.clamp(x, -50.0, 50.0);
            let sq = t.square(v);
            t.sum(sq)
        }),
        ("normal_cdf", |t, x| {
            let v = t.normal_cdf(x);
            t.sum(v)
        }),
        ("normal_icdf", |t, x| {
            let s = t.sigmoid(x); // map into (0,1)
            let v = t.normal_icdf(s);
            t.sum(v)
        }),
    ];

    for (name, build) in cases {
        for trial in 0..100 {
            let point: Vec<f64> = (0..6).map(|_| rng.random_range(-1.2..1.2)).collect();
            let report = grad_check(build, &point, 1e-5);
            assert!(
                report.max_rel_error < 1e-4,
                "{name} trial {trial}: rel err {} at coord {} (analytic {}, numeric {})",
                report.max_rel_error,
                report.worst_index,
                report.analytic,
                report.numeric
            );
        }
    }
}

#[test]
fn check_finite_reports_offending_node() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
    let l = tape.log(x); // log(-1) = NaN
    assert!(tape.check_finite(l).is_err());
    assert_eq!(tape.first_nonfinite_node(), Some(l.index()));
    let err = tape.check_finite(l).unwrap_err();
    assert!(err.to_string().contains(&format!("node {}", l.index())));
}
