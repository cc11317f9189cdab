use std::time::Instant;

use genhmr::inference::{refine_objective, ObjectiveTargets};
use numcore::{grad_check, Result, Tape64, Tensor, Tensor64, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fixtures::{random_tensor, small_setup};
use crate::Checks;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const BUDGET_S: f64 = 120.0;
const TRIALS: u64 = 10;

type Op = Box<dyn Fn(&mut Tape64, Var) -> Result<Var>>;

/// Contracts an output of any shape with fixed random weights.
fn weighted_sum(tape: &mut Tape64, y: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(seed, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    range: (f64, f64),
    op: Op,
}

fn case(name: &'static str, shape: &[usize], range: (f64, f64), op: impl Fn(&mut Tape64, Var) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shape: shape.to_vec(),
        range,
        op: Box::new(op),
    }
}

fn unary(name: &'static str, range: (f64, f64), kind: Unary<f64>) -> Case {
    case(name, &[7], range, move |t, x| Ok(t.unary(x, kind)))
}

fn primitives() -> Vec<Case> {
    let w = random_tensor(1, &[4, 3], -1.0, 1.0);
    let a = random_tensor(2, &[2, 5, 4], -1.0, 1.0);
    let bm = random_tensor(3, &[2, 4, 3], -1.0, 1.0);
    let row = random_tensor(4, &[1, 4], 0.5, 1.5);
    let grid = random_tensor(5, &[3, 4], 0.5, 1.5);
    let coords = random_tensor(6, &[2, 6, 2], 0.1, 3.9);
    let map = random_tensor(7, &[2, 5, 5, 3], -1.0, 1.0);
    let mut cases = vec![
        unary("neg", (-2.0, 2.0), Unary::Neg),
        unary("exp", (-2.0, 2.0), Unary::Exp),
        unary("log", (0.2, 3.0), Unary::Log),
        unary("sin", (-3.0, 3.0), Unary::Sin),
        unary("cos", (-3.0, 3.0), Unary::Cos),
        unary("tanh", (-2.0, 2.0), Unary::Tanh),
        unary("sqrt", (0.2, 3.0), Unary::Sqrt),
        unary("abs", (0.1, 3.0), Unary::Abs),
        unary("abs (negative side)", (-3.0, -0.1), Unary::Abs),
        unary("square", (-2.0, 2.0), Unary::Square),
        unary("relu (active)", (0.1, 2.0), Unary::Relu),
        unary("relu (inactive)", (-2.0, -0.1), Unary::Relu),
        unary("sigmoid", (-4.0, 4.0), Unary::Sigmoid),
        unary("softplus", (-4.0, 4.0), Unary::Softplus),
        unary("gelu", (-3.0, 3.0), Unary::Gelu),
        unary("powf", (0.2, 2.0), Unary::Powf(2.7)),
        unary("sin_sqrt_ratio (series)", (1e-6, 9e-3), Unary::SinSqrtRatio),
        unary("sin_sqrt_ratio (closed form)", (2e-2, 9.0), Unary::SinSqrtRatio),
        unary("vers_sqrt_ratio (series)", (1e-6, 9e-3), Unary::VersSqrtRatio),
        unary("vers_sqrt_ratio (closed form)", (2e-2, 9.0), Unary::VersSqrtRatio),
        case("add_scalar/mul_scalar", &[7], (-2.0, 2.0), |t, x| {
            let y = t.mul_scalar(x, 3.5);
            Ok(t.add_scalar(y, -1.0))
        }),
        case("sum_all", &[3, 4], (-1.0, 1.0), |t, x| {
            let s = t.square(x);
            Ok(t.sum_all(s))
        }),
        case("mean_all", &[3, 4], (-1.0, 1.0), |t, x| {
            let s = t.square(x);
            Ok(t.mean_all(s))
        }),
        case("sum_axis", &[2, 3, 4], (-1.0, 1.0), |t, x| t.sum_axis(x, 1, false)),
        case("mean_axis", &[2, 3, 4], (-1.0, 1.0), |t, x| t.mean_axis(x, 2, true)),
        case("sum_axes", &[2, 3, 4], (-1.0, 1.0), |t, x| t.sum_axes(x, &[0, 2], false)),
        case("mean_axes", &[2, 3, 4], (-1.0, 1.0), |t, x| t.mean_axes(x, &[1], true)),
        case("mean_pool_spatial", &[2, 3, 2, 4], (-1.0, 1.0), |t, x| t.mean_pool_spatial(x)),
        case("softmax", &[3, 5], (-2.0, 2.0), |t, x| t.softmax(x)),
        case("log_softmax", &[3, 5], (-2.0, 2.0), |t, x| t.log_softmax(x)),
        case("layer_norm", &[3, 6], (-2.0, 2.0), |t, x| t.layer_norm(x, 1e-5)),
        case("reshape", &[2, 6], (-1.0, 1.0), |t, x| {
            let s = t.square(x);
            t.reshape(s, &[3, 4])
        }),
        case("transpose", &[2, 3, 4], (-1.0, 1.0), |t, x| {
            let s = t.square(x);
            t.transpose(s)
        }),
        case("permute", &[2, 3, 4], (-1.0, 1.0), |t, x| {
            let p = t.permute(x, &[2, 0, 1])?;
            Ok(t.square(p))
        }),
        case("index_select", &[4, 3], (-1.0, 1.0), |t, x| t.index_select(x, 0, &[3, 0, 3, 1])),
        case("slice", &[3, 5], (-1.0, 1.0), |t, x| {
            let s = t.square(x);
            t.slice(s, 1, 1, 3)
        }),
        case("gather_last", &[3, 4], (-1.0, 1.0), |t, x| t.gather_last(x, &[1, 3, 1])),
        case("concat", &[2, 3], (-1.0, 1.0), |t, x| {
            let s = t.square(x);
            t.concat(&[x, s, x], 1)
        }),
        case("matmul (lhs)", &[2, 5, 4], (-1.0, 1.0), move |t, x| {
            let w = t.constant(w.clone());
            t.matmul(x, w)
        }),
        case("matmul (shared rhs)", &[4, 3], (-1.0, 1.0), move |t, x| {
            let a = t.constant(a.clone());
            t.matmul(a, x)
        }),
        case("matmul (batched, operand reused)", &[2, 5, 4], (-1.0, 1.0), move |t, x| {
            let b = t.constant(bm.clone());
            let p = t.matmul(x, b)?;
            let xt = t.transpose(x)?;
            t.matmul(xt, p)
        }),
        case("bilinear_sample (map)", &[2, 5, 5, 3], (-1.0, 1.0), move |t, m| {
            let c = t.constant(coords.clone());
            t.bilinear_sample(m, c)
        }),
    ];
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let (r, g) = (row.clone(), grid.clone());
        cases.push(case(name, &[3, 4], (-2.0, 2.0), move |t, x| {
            let c = t.constant(r.clone());
            match op {
                0 => t.add(x, c),
                1 => t.sub(c, x),
                2 => t.mul(x, c),
                _ => {
                    let d = t.div(c, x)?;
                    t.div(d, c)
                }
            }
        }));
        let broadcast = match name {
            "add" => "add (broadcast operand)",
            "sub" => "sub (broadcast operand)",
            "mul" => "mul (broadcast operand)",
            _ => "div (broadcast operand)",
        };
        cases.push(case(broadcast, &[1, 4], (0.5, 1.5), move |t, x| {
            let c = t.constant(g.clone());
            match op {
                0 => t.add(c, x),
                1 => t.sub(c, x),
                2 => t.mul(c, x),
                _ => t.div(c, x),
            }
        }));
    }
    cases.push(case("bilinear_sample (coords)", &[2, 6, 2], (0.0, 1.0), move |t, x| {
        // keep samples off integer grid lines where the map is not differentiable
        let shift = Tensor::from_fn(&[2, 6, 2], |i| (i % 4) as f64 + 0.05);
        let s = t.constant(shift);
        let scaled = t.mul_scalar(x, 0.9);
        let c = t.add(scaled, s)?;
        let m = t.constant(map.clone());
        t.bilinear_sample(m, c)
    }));
    cases
}

fn worst_primitive(checks: &mut Checks) -> (f64, &'static str) {
    let mut worst = (0.0, "");
    for (i, c) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for trial in 0..TRIALS {
            let x = Tensor::from_fn(&c.shape, |_| rng.random_range(c.range.0..c.range.1));
            let err = grad_check(
                |t, v| {
                    let y = (c.op)(t, v)?;
                    weighted_sum(t, y, trial)
                },
                &x,
                EPS,
            );
            match err {
                Ok(e) if e < TOL => {
                    if e > worst.0 {
                        worst = (e, c.name);
                    }
                }
                Ok(e) => checks.expect(false, format!("{} trial {trial}: {e:.2e}", c.name)),
                Err(e) => checks.expect(false, format!("{}: {e}", c.name)),
            }
        }
    }
    worst
}

pub fn criterion(checks: &mut Checks) {
    let start = Instant::now();
    let (worst, name) = worst_primitive(checks);
    checks.expect(worst < TOL, format!("{} primitives, worst {worst:.1e} ({name})", primitives().len()));

    let s = small_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta = Tensor64::from_fn(&[1, 24, 3], |_| rng.random_range(-0.8..0.8));
    let beta = Tensor64::from_fn(&[1, 10], |_| rng.random_range(-1.0..1.0));
    let mesh_2d = genhmr::grad_check(
        |t, x| {
            let b = t.constant(beta.clone());
            let tr = t.constant(Tensor64::new(vec![1, 3], vec![0.02, -0.17, 11.0])?);
            let mesh = s.body.forward(t, x, b)?;
            let uv = s.body.project(t, mesh.joints, tr)?;
            Ok(t.sum_all(uv))
        },
        &theta,
        1e-6,
    )
    .unwrap();
    checks.expect(mesh_2d < TOL, format!("pose to 2D {mesh_2d:.1e}"));

    let img = s.data.select(&[0]).unwrap().images;
    let slots = [1, s.cfg.n_codes, 3, s.cfg.n_codes, 0, 2];
    let logits = genhmr::grad_check(
        |t, x| {
            let p = s.model.params.bind(t, false);
            let f = s.model.features(t, &p, x)?;
            let y = s.model.logits(t, &p, &slots, &f)?;
            Ok(t.sum_all(y))
        },
        &img,
        1e-5,
    )
    .unwrap();
    checks.expect(logits < TOL, format!("transformer logits {logits:.1e}"));

    let b = s.data.select(&[2]).unwrap();
    let latents = s.tokenizer.embed_tokens(&b.tokens).unwrap();
    let theta0 = s.tokenizer.decode_values(&latents).unwrap();
    let kp = random_tensor(10, &[1, 24, 2], 1.0, 7.0);
    let y0 = Tensor::from_fn(latents.shape(), |i| latents.data()[i] + 0.01 * (i as f64).sin());
    let objective = genhmr::grad_check(
        |t, y| {
            let tp = s.tokenizer.params.bind(t, false);
            let targets = ObjectiveTargets {
                keypoints: t.constant(kp.clone()),
                visibility: t.constant(Tensor::full(&[1, 24, 1], 1.0)),
                theta_init: t.constant(theta0.clone()),
            };
            let beta = t.constant(b.beta.clone());
            let cam = t.constant(Tensor64::new(vec![1, 3], vec![0.05, -0.15, 11.0])?);
            refine_objective(t, &s.tokenizer, &tp, &s.body, y, beta, cam, &targets, 1e-3, s.cfg.image_size)
        },
        &y0,
        1e-6,
    )
    .unwrap();
    checks.expect(objective < TOL, format!("refinement objective {objective:.1e}"));
    checks.within("runtime", start.elapsed().as_secs_f64(), BUDGET_S);
}
