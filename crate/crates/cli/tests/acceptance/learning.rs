use genhmr::inference::InferConfig;
use genhmr::pipeline::{evaluate, Evaluation};
use genhmr::training::{gen_synthetic_dataset, Dataset};
use genhmr::{Model64, Tokenizer64};

use crate::fixtures::{bodies, model_run, tokenizer_run, toy_config, MAX_MODEL_STEPS};
use crate::Checks;

const HELD_OUT: usize = 100;
const HELD_OUT_SEED: u64 = 3;

pub fn tokenizer_learning(checks: &mut Checks) {
    let run = tokenizer_run();
    checks.expect(
        run.mpjpe <= 0.5 * run.untrained_mpjpe,
        format!("held-out MPJPE {:.2} mm vs untrained {:.2} mm", run.mpjpe, run.untrained_mpjpe),
    );
    checks.expect(run.mpjpe < 30.0, format!("MPJPE {:.2} mm < 30 mm after {} steps", run.mpjpe, run.steps));
    checks.expect(run.dead_fraction < 0.1, format!("dead codes {:.1}%", 100.0 * run.dead_fraction));
    checks.within("training", run.seconds, 900.0);
}

pub fn masked_model_overfit(checks: &mut Checks) {
    let run = model_run();
    let last = run.trace.last().expect("at least one evaluation");
    checks.expect(
        last.token_recovery >= 0.95,
        format!("fully masked greedy decoding recovers {:.1}% of tokens", 100.0 * last.token_recovery),
    );
    checks.expect(
        last.mpjpe < 20.0 && last.step <= MAX_MODEL_STEPS,
        format!("end-to-end MPJPE {:.2} mm at step {}", last.mpjpe, last.step),
    );
    checks.within("training", run.seconds, 1800.0);
}

struct Trained {
    model: Model64,
    tokenizer: Tokenizer64,
    held_out: Dataset,
}

fn trained() -> Trained {
    let cfg = toy_config();
    Trained {
        model: model_run().model.cast::<f64>(),
        tokenizer: tokenizer_run().tokenizer.cast::<f64>(),
        held_out: gen_synthetic_dataset(HELD_OUT, HELD_OUT_SEED, &bodies().f64, &cfg, true).unwrap(),
    }
}

fn run_eval(t: &Trained, iters: usize, refine: usize) -> Evaluation {
    let mut cfg = toy_config();
    cfg.iters = iters;
    cfg.refine_iters = refine;
    let icfg = InferConfig::from_config(&cfg);
    evaluate(&t.model, &t.tokenizer, &bodies().f64, &t.held_out, &icfg, refine > 0, cfg.seed).unwrap()
}

fn mean(ev: &Evaluation, f: impl Fn(&genhmr::pipeline::SampleEval) -> f64) -> f64 {
    ev.samples.iter().map(f).sum::<f64>() / ev.samples.len() as f64
}

pub fn refinement_efficacy(checks: &mut Checks) {
    let t = trained();
    let iters = toy_config().iters;
    let runs: Vec<(usize, Evaluation)> = [0, 1, 5, 10].into_iter().map(|p| (p, run_eval(&t, iters, p))).collect();
    let mpjpe: Vec<f64> = runs.iter().map(|(_, e)| e.report.mpjpe_mm).collect();
    let l2d: Vec<f64> = runs.iter().map(|(_, e)| mean(e, |s| s.l2d)).collect();

    checks.expect(l2d[3] < l2d[0], format!("mean 2D loss {:.6} -> {:.6} at P=10", l2d[0], l2d[3]));
    checks.expect(
        mpjpe.windows(2).all(|w| w[1] < w[0]),
        format!(
            "MPJPE over P=0,1,5,10: {}",
            mpjpe.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ),
    );
    let (d15, d510) = (mpjpe[1] - mpjpe[2], mpjpe[2] - mpjpe[3]);
    checks.expect(d510 < d15, format!("gain P5->10 {d510:.4} mm < gain P1->5 {d15:.4} mm"));

    let full = &runs[3].1;
    let monotone = full
        .samples
        .iter()
        .filter(|s| s.refine_trace.windows(2).all(|w| w[1] <= w[0]))
        .count();
    let n = full.samples.len();
    checks.expect(
        monotone as f64 >= 0.9 * n as f64,
        format!("objective trace non-increasing in {monotone}/{n} cases"),
    );
}

/// Best-of-three single-threaded AITI in seconds.
fn aiti(t: &Trained, iters: usize, refine: usize) -> f64 {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    (0..3)
        .map(|_| pool.install(|| run_eval(t, iters, refine)).report.aiti_seconds.total)
        .fold(f64::INFINITY, f64::min)
}

pub fn timing_direction(checks: &mut Checks) {
    let mut t = trained();
    t.held_out = t.held_out.subset(&(0..32).collect::<Vec<_>>());
    let by_iters: Vec<f64> = [1, 5, 10].into_iter().map(|it| aiti(&t, it, 0)).collect();
    let iters = toy_config().iters;
    let by_refine: Vec<f64> = [0, 5, 10].into_iter().map(|p| aiti(&t, iters, p)).collect();
    let fmt = |v: &[f64]| v.iter().map(|s| format!("{:.2}ms", 1e3 * s)).collect::<Vec<_>>().join(", ");
    checks.expect(by_iters.windows(2).all(|w| w[1] > w[0]), format!("AITI over T=1,5,10: {}", fmt(&by_iters)));
    checks.expect(
        by_refine.windows(2).all(|w| w[1] > w[0]),
        format!("AITI over P=0,5,10: {}", fmt(&by_refine)),
    );
}
