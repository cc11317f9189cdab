//! Command-line front end: data generation, two-stage training, inference,
//! evaluation and ablation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use genhmr::ablation::{run_study, AblationContext, Study};
use genhmr::body::NUM_JOINTS;
use genhmr::config::{Config, ScheduleKind};
use genhmr::inference::{infer, InferConfig};
use genhmr::io::*;
use genhmr::pipeline::{body_model, evaluate, fit_model, fit_tokenizer, score_prediction};
use genhmr::rng::{stream, Stream};
use genhmr::training::{check_invariants, gen_synthetic_dataset, Dataset};

#[derive(Parser)]
#[command(name = "genhmr", version, about = "Generative human mesh recovery on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSONL plus a heatmap sidecar).
    GenData(GenData),
    /// Train the pose tokenizer.
    TrainTokenizer(TrainTokenizer),
    /// Train the masked transformer against a frozen tokenizer.
    TrainModel(TrainModel),
    /// Reconstruct a mesh for one sample.
    Infer(Infer),
    /// Score a checkpoint on a dataset.
    Eval(Eval),
    /// Sweep one knob and tabulate accuracy and timings.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip heatmap rendering.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct TrainTokenizer {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for periodic evaluation; defaults to the training set.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Steps to run now; defaults to the configured total minus steps done.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from this checkpoint, keeping its config and step counter.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainModel {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Trained tokenizer checkpoint; not needed when resuming.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct InferKnobs {
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    /// Refinement iterations.
    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Sampling seed; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl InferKnobs {
    fn apply(&self, cfg: &Config) -> anyhow::Result<(InferConfig, u64)> {
        let mut c = cfg.clone();
        if let Some(s) = self.schedule {
            c.schedule = s;
        }
        c.iters = self.iters.unwrap_or(c.iters);
        c.topk = self.topk.unwrap_or(c.topk);
        c.refine_iters = self.refine.unwrap_or(c.refine_iters);
        c.refine_eta = self.eta.unwrap_or(c.refine_eta);
        c.validate().map_err(usage)?;
        Ok((InferConfig::from_config(&c), self.seed.unwrap_or(c.seed)))
    }
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file holding the input image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// 2D keypoints CSV (joint_id,u,v[,visible]); required when refining.
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[command(flatten)]
    knobs: InferKnobs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    knobs: InferKnobs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    /// One of schedule, topk, iters, masking-ratio, layers, codebook, or all.
    #[arg(long)]
    study: String,
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation set.
    #[arg(long)]
    data: PathBuf,
    /// Training set for studies that retrain.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    tokenizer_steps: Option<usize>,
    #[arg(long)]
    model_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Errors caused by how the tool was invoked rather than by its inputs' contents.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p).map_err(usage),
        None => Ok(Config::default()),
    }
}

fn load_data(path: &Path, cfg: &Config) -> anyhow::Result<Dataset> {
    Ok(read_dataset(path, cfg.image_size)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes this run's log rows after those logged alongside the resumed checkpoint.
fn write_log<T: Serialize>(path: &Path, rows: &[T], resumed: Option<&Path>) -> anyhow::Result<()> {
    let earlier = resumed
        .and_then(|p| std::fs::read_to_string(sibling(p, "metrics.csv")).ok())
        .unwrap_or_default();
    write_records(path, rows)?;
    if earlier.is_empty() {
        return Ok(());
    }
    let fresh = std::fs::read_to_string(path)?;
    let body = fresh.split_once('\n').map_or("", |(_, rest)| rest);
    std::fs::write(path, earlier + body)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainTimings {
    steps: usize,
    seconds: f64,
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let body = body_model::<f64>(&cfg)?;
    let data = gen_synthetic_dataset(a.n, a.seed, &body, &cfg, !a.no_images)?;
    let check = check_invariants(&data, &body)?;
    write_dataset(&a.out, &data)?;
    println!(
        "wrote {} samples to {}; projection violations {}, heatmap violations {}",
        check.samples,
        a.out.display(),
        check.projection_violations,
        check.heatmap_violations
    );
    if check.projection_violations + check.heatmap_violations > 0 {
        bail!("generated data breaks its invariants: {check:?}");
    }
    Ok(())
}

fn train_tokenizer(a: &TrainTokenizer) -> anyhow::Result<()> {
    let (cfg, state) = match &a.resume {
        Some(p) => {
            if a.config.is_some() {
                return Err(usage("--config cannot be combined with --resume"));
            }
            let ckpt = Checkpoint::load(p)?;
            let state = tokenizer_state::<f32>(&ckpt)?;
            (ckpt.config, Some(state))
        }
        None => (load_config(a.config.as_deref())?, None),
    };
    let train = load_data(&a.data, &cfg)?;
    let eval = match &a.eval {
        Some(p) => load_data(p, &cfg)?,
        None => train.clone(),
    };
    let done = state.as_ref().map_or(0, |s| s.step);
    let steps = a.steps.unwrap_or(cfg.tokenizer_steps.saturating_sub(done));
    let body = body_model::<f32>(&cfg)?;
    let start = Instant::now();
    let (state, log) = fit_tokenizer(&cfg, &body, state, &train, &eval, steps)?;
    let seconds = start.elapsed().as_secs_f64();
    tokenizer_checkpoint(&cfg, &state).save(&a.out)?;
    write_log(&sibling(&a.out, "metrics.csv"), &log, a.resume.as_deref())?;
    write_json(&sibling(&a.out, "timings.json"), &TrainTimings { steps, seconds })?;
    if let Some(last) = log.last() {
        println!(
            "step {}: MPJPE {:.2} mm, dead codes {:.1}%",
            last.step,
            last.mpjpe_mm,
            100.0 * last.dead_fraction
        );
    }
    Ok(())
}

fn train_model(a: &TrainModel) -> anyhow::Result<()> {
    let (cfg, tokenizer, state, train) = match &a.resume {
        Some(p) => {
            if a.config.is_some() || a.tokenizer.is_some() {
                return Err(usage("--config and --tokenizer cannot be combined with --resume"));
            }
            let ckpt = Checkpoint::load(p)?;
            let train = load_data(&a.data, &ckpt.config)?;
            let (state, tok) = model_state::<f32>(&ckpt, train.image_shape[2])?;
            (ckpt.config, tok, Some(state), train)
        }
        None => {
            let Some(tp) = &a.tokenizer else {
                return Err(usage("--tokenizer is required unless resuming"));
            };
            let cfg = load_config(a.config.as_deref())?;
            let tok = tokenizer_from::<f32>(&Checkpoint::load(tp)?)?;
            let want = (cfg.n_codes, cfg.code_dim, cfg.n_tokens);
            let have = (tok.dims.n_codes, tok.dims.code_dim, tok.dims.n_tokens);
            if want != have {
                return Err(usage(format!(
                    "tokenizer has (codes, code_dim, tokens) {have:?} but the config asks for {want:?}"
                )));
            }
            let train = load_data(&a.data, &cfg)?;
            (cfg, tok, None, train)
        }
    };
    let eval = match &a.eval {
        Some(p) => load_data(p, &cfg)?,
        None => train.clone(),
    };
    let done = state.as_ref().map_or(0, |s| s.step);
    let steps = a.steps.unwrap_or(cfg.steps.saturating_sub(done));
    let body = body_model::<f32>(&cfg)?;
    let start = Instant::now();
    let (state, log) = fit_model(&cfg, &tokenizer, &body, state, &train, &eval, steps)?;
    let seconds = start.elapsed().as_secs_f64();
    model_checkpoint(&cfg, &state, &tokenizer).save(&a.out)?;
    write_log(&sibling(&a.out, "metrics.csv"), &log, a.resume.as_deref())?;
    write_json(&sibling(&a.out, "timings.json"), &TrainTimings { steps, seconds })?;
    if let Some(last) = log.last() {
        println!("step {}: loss {:.4}, token accuracy {:.3}", last.step, last.loss, last.token_accuracy);
    }
    Ok(())
}

#[derive(Serialize)]
struct IterationOut {
    masked: usize,
    newly_frozen: Vec<usize>,
    confidences: Vec<f64>,
}

#[derive(Serialize)]
struct InferReport {
    index: usize,
    tokens: Vec<usize>,
    confidences: Vec<f64>,
    iterations: Vec<IterationOut>,
    refine_objective: Vec<f64>,
    theta: Vec<[f64; 3]>,
    beta: Vec<f64>,
    cam_t: [f64; 3],
    mpjpe_mm: f64,
    pa_mpjpe_mm: f64,
    mve_mm: f64,
}

fn run_infer(a: &Infer) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (icfg, seed) = a.knobs.apply(&ckpt.config)?;
    let keypoints = match &a.keypoints {
        Some(p) => Some(read_keypoints(p, NUM_JOINTS)?),
        None if icfg.refine.iters > 0 => {
            return Err(usage("refinement needs --keypoints (or pass --refine 0)"));
        }
        None => None,
    };
    let data = load_data(&a.input, &ckpt.config)?;
    if a.index >= data.len() {
        return Err(usage(format!("--index {} out of range for {} samples", a.index, data.len())));
    }
    let (state, tok) = model_state::<f64>(&ckpt, data.image_shape[2])?;
    let body = body_model::<f64>(&ckpt.config)?;
    let image = data.image_batch::<f64>(&[a.index])?;
    let mut rng = stream(seed, Stream::Sampling);
    let pred = infer(&state.model, &tok, &body, &image, keypoints.as_ref(), &icfg, &mut rng)?;
    let score = score_prediction(&pred, &body, &data, a.index, None)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_obj(&a.out.join("mesh.obj"), &pred.vertices)?;
    write_joints2d(&a.out.join("joints2d.csv"), &pred.joints2d)?;
    write_joints3d(&a.out.join("joints3d.csv"), &pred.joints3d)?;
    let report = InferReport {
        index: a.index,
        tokens: pred.decode.tokens.clone(),
        confidences: pred.decode.confidences.clone(),
        iterations: pred
            .decode
            .iterations
            .iter()
            .map(|it| IterationOut {
                masked: it.masked,
                newly_frozen: it.newly_frozen.clone(),
                confidences: it.confidences.clone(),
            })
            .collect(),
        refine_objective: pred.refine_trace.clone(),
        theta: pred.theta.clone(),
        beta: pred.beta.clone(),
        cam_t: pred.cam_t,
        mpjpe_mm: score.mpjpe_mm,
        pa_mpjpe_mm: score.pa_mpjpe_mm,
        mve_mm: score.mve_mm,
    };
    write_json(&a.out.join("report.json"), &report)?;
    write_json(&a.out.join("timings.json"), &pred.timings)?;
    println!("MPJPE {:.2} mm, PA-MPJPE {:.2} mm", score.mpjpe_mm, score.pa_mpjpe_mm);
    Ok(())
}

#[derive(Serialize)]
struct AccuracyReport {
    n_samples: usize,
    mpjpe_mm: f64,
    pa_mpjpe_mm: f64,
    mve_mm: f64,
    token_accuracy: f64,
}

fn run_eval(a: &Eval) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (icfg, seed) = a.knobs.apply(&ckpt.config)?;
    let data = load_data(&a.data, &ckpt.config)?;
    let (state, tok) = model_state::<f64>(&ckpt, data.image_shape[2])?;
    let body = body_model::<f64>(&ckpt.config)?;
    let ev = evaluate(&state.model, &tok, &body, &data, &icfg, icfg.refine.iters > 0, seed)?;
    let r = &ev.report;
    let token_accuracy = ev.samples.iter().map(|s| s.token_accuracy).sum::<f64>() / ev.samples.len() as f64;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(
        &a.out.join("report.json"),
        &AccuracyReport {
            n_samples: r.n_samples,
            mpjpe_mm: r.mpjpe_mm,
            pa_mpjpe_mm: r.pa_mpjpe_mm,
            mve_mm: r.mve_mm,
            token_accuracy,
        },
    )?;
    write_records(&a.out.join("samples.csv"), &ev.samples)?;
    write_json(&a.out.join("timings.json"), &r.aiti_seconds)?;
    println!(
        "{} samples: MPJPE {:.2} mm, PA-MPJPE {:.2} mm, MVE {:.2} mm, AITI {:.4} s",
        r.n_samples, r.mpjpe_mm, r.pa_mpjpe_mm, r.mve_mm, r.aiti_seconds.total
    );
    Ok(())
}

fn run_ablate(a: &Ablate) -> anyhow::Result<()> {
    let studies: Vec<Study> = if a.study == "all" {
        Study::ALL.to_vec()
    } else {
        vec![a.study.parse().map_err(usage)?]
    };
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let cfg = ckpt.config.clone();
    let eval = load_data(&a.data, &cfg)?;
    let train = match &a.train {
        Some(p) => Some(load_data(p, &cfg)?),
        None if studies.iter().any(|s| s.trains()) => {
            return Err(usage("training studies need --train"));
        }
        None => None,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let tokenizer_steps = a.tokenizer_steps.unwrap_or(cfg.tokenizer_steps);
    let model_steps = a.model_steps.unwrap_or(cfg.steps);
    for study in studies {
        let table = if study.trains() {
            let (_, tok) = model_state::<f32>(&ckpt, eval.image_shape[2])?;
            let body = body_model::<f32>(&cfg)?;
            run_study(
                study,
                &AblationContext {
                    cfg: &cfg,
                    body: &body,
                    tokenizer: Some(&tok),
                    model: None,
                    train: train.as_ref(),
                    eval: &eval,
                    tokenizer_steps,
                    model_steps,
                },
            )?
        } else {
            let (state, tok) = model_state::<f64>(&ckpt, eval.image_shape[2])?;
            let body = body_model::<f64>(&cfg)?;
            run_study(
                study,
                &AblationContext {
                    cfg: &cfg,
                    body: &body,
                    tokenizer: Some(&tok),
                    model: Some(&state.model),
                    train: train.as_ref(),
                    eval: &eval,
                    tokenizer_steps,
                    model_steps,
                },
            )?
        };
        let (header, rows) = table.metrics_csv();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&a.out.join(format!("{}.csv", study.name())), &header, &rows)?;
        let (theader, trows) = table.timings_csv();
        let theader: Vec<&str> = theader.iter().map(String::as_str).collect();
        write_csv(&a.out.join(format!("{}.timings.csv", study.name())), &theader, &trows)?;
        println!("{}: {} rows", study.name(), rows.len());
    }
    Ok(())
}

fn thread_count(value: &str) -> anyhow::Result<usize> {
    value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("GHMR_THREADS must be a positive integer, got `{value}`")))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("GHMR_THREADS") else {
        return Ok(());
    };
    rayon::ThreadPoolBuilder::new().num_threads(thread_count(&value)?).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::TrainModel(a) => train_model(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

/// The error and its distinct causes on one line.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1).map(|c| c.to_string()) {
        if !msg.contains(&cause) {
            msg = format!("{msg}: {cause}");
        }
    }
    msg
}

/// 1 for invocation and configuration mistakes, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.is::<Usage>() || matches!(e.downcast_ref::<genhmr::Error>(), Some(genhmr::Error::Config(_)));
    if is_usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
