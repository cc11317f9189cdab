//! Finite-difference checks for every primitive and the algebraic
//! properties of the tape.

use numcore::{grad_check, Result, Tape, Tape64, Tensor, Tensor64, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so that no gradient component cancels by symmetry.
fn weighted_sum(tape: &mut Tape64, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn check_many(name: &str, shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Tape64, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..10 {
        let x = random(&mut rng, shape, lo, hi);
        let err = grad_check(|t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, trial)
        }, &x, EPS)
        .unwrap();
        assert!(err < TOL, "{name}: trial {trial} relative error {err}");
    }
}

#[test]
fn unary_primitives() {
    check_many("exp", &[7], -2.0, 2.0, |t, x| Ok(t.exp(x)));
    check_many("log", &[7], 0.2, 3.0, |t, x| Ok(t.log(x)));
    check_many("sin", &[7], -3.0, 3.0, |t, x| Ok(t.sin(x)));
    check_many("cos", &[7], -3.0, 3.0, |t, x| Ok(t.cos(x)));
    check_many("tanh", &[7], -2.0, 2.0, |t, x| Ok(t.tanh(x)));
    check_many("sqrt", &[7], 0.2, 3.0, |t, x| Ok(t.sqrt(x)));
    check_many("abs", &[7], 0.1, 3.0, |t, x| {
        let n = t.neg(x);
        Ok(t.abs(n))
    });
    check_many("square", &[7], -2.0, 2.0, |t, x| Ok(t.square(x)));
    check_many("powf", &[7], 0.2, 2.0, |t, x| Ok(t.powf(x, 2.7)));
    check_many("sigmoid", &[7], -4.0, 4.0, |t, x| Ok(t.sigmoid(x)));
    check_many("softplus", &[7], -4.0, 4.0, |t, x| Ok(t.softplus(x)));
    check_many("gelu", &[7], -3.0, 3.0, |t, x| Ok(t.gelu(x)));
    check_many("scalar ops", &[7], -2.0, 2.0, |t, x| {
        let y = t.mul_scalar(x, 3.5);
        Ok(t.add_scalar(y, -1.0))
    });
}

#[test]
fn rotation_coefficients_both_branches() {
    use numcore::Unary;
    for (lo, hi) in [(1e-6, 9e-3), (2e-2, 9.0)] {
        check_many("sin_sqrt_ratio", &[6], lo, hi, |t, x| Ok(t.unary(x, Unary::SinSqrtRatio)));
        check_many("vers_sqrt_ratio", &[6], lo, hi, |t, x| Ok(t.unary(x, Unary::VersSqrtRatio)));
    }
}

#[test]
fn broadcasting_binary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let other = random(&mut rng, &[1, 4], 0.5, 1.5);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let o = other.clone();
        check_many(name, &[3, 4], -2.0, 2.0, move |t, x| {
            let c = t.param(o.clone());
            match op {
                0 => t.add(x, c),
                1 => t.sub(c, x),
                2 => t.mul(x, c),
                _ => {
                    let d = t.div(c, x)?;
                    t.div(d, c)
                }
            }
        });
        // gradient w.r.t. the broadcast operand
        let big = random(&mut rng, &[3, 4], 0.5, 1.5);
        check_many(name, &[1, 4], 0.5, 1.5, move |t, x| {
            let c = t.constant(big.clone());
            match op {
                0 => t.add(c, x),
                1 => t.sub(c, x),
                2 => t.mul(c, x),
                _ => t.div(c, x),
            }
        });
    }
}

#[test]
fn reduction_and_normalization_primitives() {
    check_many("sum_axes", &[2, 3, 4], -1.0, 1.0, |t, x| t.sum_axes(x, &[0, 2], false));
    check_many("mean_axes", &[2, 3, 4], -1.0, 1.0, |t, x| t.mean_axes(x, &[1], true));
    check_many("mean_pool", &[2, 3, 2, 4], -1.0, 1.0, |t, x| t.mean_pool_spatial(x));
    check_many("softmax", &[3, 5], -2.0, 2.0, |t, x| t.softmax(x));
    check_many("log_softmax", &[3, 5], -2.0, 2.0, |t, x| t.log_softmax(x));
    check_many("layer_norm", &[3, 6], -2.0, 2.0, |t, x| t.layer_norm(x, 1e-5));
}

#[test]
fn linear_algebra_and_indexing_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&mut rng, &[4, 3], -1.0, 1.0);
    let wc = w.clone();
    check_many("matmul lhs", &[2, 5, 4], -1.0, 1.0, move |t, x| {
        let w = t.constant(wc.clone());
        t.matmul(x, w)
    });
    let a = random(&mut rng, &[2, 5, 4], -1.0, 1.0);
    check_many("matmul shared rhs", &[4, 3], -1.0, 1.0, move |t, x| {
        let a = t.constant(a.clone());
        t.matmul(a, x)
    });
    let bm = random(&mut rng, &[2, 4, 3], -1.0, 1.0);
    check_many("batched matmul", &[2, 5, 4], -1.0, 1.0, move |t, x| {
        let b = t.param(bm.clone());
        let p = t.matmul(x, b)?;
        let xt = t.transpose(x)?;
        let q = t.matmul(xt, p)?; // x appears twice
        t.reshape(q, &[2, 12])
    });
    check_many("index_select", &[4, 3], -1.0, 1.0, |t, x| t.index_select(x, 0, &[3, 0, 3, 1]));
    check_many("gather_last", &[3, 4], -1.0, 1.0, |t, x| t.gather_last(x, &[1, 3, 1]));
    check_many("concat", &[2, 3], -1.0, 1.0, |t, x| {
        let s = t.square(x);
        t.concat(&[x, s, x], 1)
    });
    check_many("permute", &[2, 3, 4], -1.0, 1.0, |t, x| {
        let p = t.permute(x, &[2, 0, 1])?;
        let s = t.square(p);
        t.reshape(s, &[24])
    });
}

#[test]
fn bilinear_sampling_gradients() {
    // w.r.t. the map
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let coords = random(&mut rng, &[2, 6, 2], 0.1, 3.9);
    check_many("bilinear map", &[2, 5, 5, 3], -1.0, 1.0, move |t, m| {
        let c = t.constant(coords.clone());
        t.bilinear_sample(m, c)
    });
    // w.r.t. fractional sample coordinates (kept off the integer grid lines)
    let map = random(&mut rng, &[2, 5, 5, 3], -1.0, 1.0);
    let mut rng2 = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..10 {
        let c = Tensor::from_fn(&[2, 6, 2], |_| {
            rng2.random_range(0..4) as f64 + rng2.random_range(0.05..0.95)
        });
        let m = map.clone();
        let err = grad_check(
            |t, x| {
                let mv = t.constant(m.clone());
                let y = t.bilinear_sample(mv, x)?;
                weighted_sum(t, y, trial)
            },
            &c,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "bilinear coords trial {trial}: {err}");
    }
}

#[test]
fn sin_sum_and_layernorm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[8], -3.0, 3.0);
    let err = grad_check(|t, v| {
        let s = t.sin(v);
        Ok(t.sum_all(s))
    }, &x, 1e-5)
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let x = random(&mut rng, &[2, 6], -2.0, 2.0);
    let err = grad_check(
        |t, v| {
            let n = t.layer_norm(v, 1e-5)?;
            let w = t.constant(Tensor::from_fn(&[6], |i| 0.3 + i as f64));
            let p = t.mul(n, w)?;
            Ok(t.sum_all(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut tape = Tape64::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let z = tape.mul_scalar(x, 0.0);
    let c = tape.scalar(4.0);
    let s = tape.sum_all(z);
    let y = tape.add(s, c).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape64::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let s = tape.square(x);
    let l = tape.sum_all(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

fn run_graph(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape64::new();
    let x = tape.param(random(&mut rng, &[4, 6], -1.0, 1.0));
    let w = tape.param(random(&mut rng, &[6, 5], -1.0, 1.0));
    let h = tape.matmul(x, w).unwrap();
    let h = tape.gelu(h);
    let n = tape.layer_norm(h, 1e-5).unwrap();
    let p = tape.softmax(n).unwrap();
    let l = tape.log(p);
    let loss = tape.mean_all(l);
    tape.backward(loss).unwrap();
    let mut g = tape.grad(x).unwrap().into_data();
    g.extend(tape.grad(w).unwrap().into_data());
    (tape.value(p).data().to_vec(), g)
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let (f1, g1) = run_graph(99);
    let (f2, g2) = run_graph(99);
    assert_eq!(f1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn f32_tape_matches_f64_closely() {
    let mut t32 = Tape::<f32>::new();
    let x = t32.param(Tensor::from_vec(vec![0.5f32, -1.0, 2.0]));
    let e = t32.exp(x);
    let l = t32.sum_all(e);
    t32.backward(l).unwrap();
    let g = t32.grad(x).unwrap();
    for (a, b) in g.data().iter().zip([0.5f64.exp(), (-1.0f64).exp(), 2.0f64.exp()]) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The gradient reaching a broadcast operand is exactly the sum of the
    /// upstream gradient over the expanded axes.
    #[test]
    fn broadcast_backward_is_sum_reduction(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big = random(&mut rng, &[rows, cols], -1.0, 1.0);
        let small = random(&mut rng, &[1, cols], -1.0, 1.0);
        let upstream = random(&mut rng, &[rows, cols], -1.0, 1.0);
        let mut tape = Tape64::new();
        let a = tape.constant(big);
        let b = tape.param(small);
        let c = tape.add(a, b).unwrap();
        let u = tape.constant(upstream.clone());
        let p = tape.mul(c, u).unwrap();
        let l = tape.sum_all(p);
        tape.backward(l).unwrap();
        let g = tape.grad(b).unwrap();
        for j in 0..cols {
            let mut expect = 0.0;
            for i in 0..rows {
                expect += upstream.data()[i * cols + j];
            }
            prop_assert_eq!(g.data()[j], expect);
        }
    }

    #[test]
    fn reshape_preserves_data(n in 1usize..6, m in 1usize..6) {
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor::from_fn(&[n, m], |i| i as f64));
        let y = tape.reshape(x, &[m * n]).unwrap();
        prop_assert_eq!(tape.value(y).data(), tape.value(x).data());
    }
}
