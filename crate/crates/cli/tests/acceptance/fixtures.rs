use std::sync::OnceLock;
use std::time::Instant;

use genhmr::body::{make_synthetic_template, BodyModel, Intrinsics};
use genhmr::config::Config;
use genhmr::pipeline::body_model;
use genhmr::rng::{stream, Stream};
use genhmr::tokenizer::{PoseTokenizer, TokenizerDims};
use genhmr::training::{gen_synthetic_dataset, Stage2Data};
use genhmr::transformer::{MaskedTransformer, ModelDims};
use genhmr::{Body32, Body64, Model32, Tokenizer32};
use numcore::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor64::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Randomly initialised miniature models on 8x8 heatmaps, in f64.
pub struct SmallSetup {
    pub cfg: Config,
    pub body: BodyModel<f64>,
    pub tokenizer: PoseTokenizer<f64>,
    pub model: MaskedTransformer<f64>,
    pub data: Stage2Data<f64>,
}

pub fn small_config() -> Config {
    let mut cfg = Config::tiny();
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.focal = 1000.0 * 8.0 / 224.0;
    cfg.levels = vec![1, 2];
    cfg.model_dim = 8;
    cfg.n_heads = 2;
    cfg.n_points = 2;
    cfg.n_layers = 1;
    cfg.ffn_dim = 8;
    cfg.head_hidden = 6;
    cfg.n_codes = 6;
    cfg.code_dim = 4;
    cfg.n_tokens = 6;
    cfg.tokenizer_width = 8;
    cfg.n_vertices = 48;
    cfg
}

pub fn small_model(cfg: &Config, seed: u64, jitter: f64) -> MaskedTransformer<f64> {
    let mut rng = stream(seed, Stream::ModelInit);
    let mut m = MaskedTransformer::new(ModelDims::from_config(cfg, 24), [0.0, -0.17, 11.5], &mut rng).unwrap();
    for v in m.params.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-jitter..jitter));
    }
    m
}

pub fn small_setup() -> SmallSetup {
    let cfg = small_config();
    let tmpl = make_synthetic_template(cfg.n_vertices, cfg.template_seed).unwrap();
    let body = BodyModel::new(tmpl, Intrinsics::from_config(&cfg));
    let dataset = gen_synthetic_dataset(5, 3, &body, &cfg, true).unwrap();
    let tokenizer = PoseTokenizer::new(TokenizerDims::from_config(&cfg), &mut stream(cfg.seed, Stream::Init)).unwrap();
    let model = small_model(&cfg, 1, 0.2);
    let data = Stage2Data::build(&dataset, &tokenizer).unwrap();
    SmallSetup {
        cfg,
        body,
        tokenizer,
        model,
        data,
    }
}

/// Desk-scale configuration used by the learning criteria.
pub fn toy_config() -> Config {
    let mut cfg = Config::tiny();
    cfg.eval_every = 0;
    cfg
}

pub struct Bodies {
    pub f32: Body32,
    pub f64: Body64,
}

pub fn bodies() -> &'static Bodies {
    static CELL: OnceLock<Bodies> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = toy_config();
        Bodies {
            f32: body_model(&cfg).unwrap(),
            f64: body_model(&cfg).unwrap(),
        }
    })
}

pub struct TokenizerRun {
    pub tokenizer: Tokenizer32,
    pub untrained_mpjpe: f64,
    pub mpjpe: f64,
    pub dead_fraction: f64,
    pub steps: usize,
    pub seconds: f64,
}

pub const TOKENIZER_TRAIN: usize = 5000;
pub const TOKENIZER_HELD_OUT: usize = 500;

/// Tokenizer trained on 5k synthetic poses and scored on a held-out set.
pub fn tokenizer_run() -> &'static TokenizerRun {
    static CELL: OnceLock<TokenizerRun> = OnceLock::new();
    CELL.get_or_init(|| {
        use genhmr::pipeline::{fit_tokenizer, new_tokenizer};
        use genhmr::training::{evaluate_tokenizer, PoseTargets};
        let cfg = toy_config();
        let start = Instant::now();
        let b = bodies();
        let train = gen_synthetic_dataset(TOKENIZER_TRAIN, 1, &b.f64, &cfg, false).unwrap();
        let held = gen_synthetic_dataset(TOKENIZER_HELD_OUT, 11, &b.f64, &cfg, false).unwrap();
        let targets = PoseTargets::build(&held, &b.f32).unwrap();
        let untrained = evaluate_tokenizer(&new_tokenizer::<f32>(&cfg).unwrap(), &b.f32, &targets).unwrap();
        let (state, _) = fit_tokenizer(&cfg, &b.f32, None, &train, &held, cfg.tokenizer_steps).unwrap();
        let seconds = start.elapsed().as_secs_f64();
        let trained = evaluate_tokenizer(&state.tokenizer, &b.f32, &targets).unwrap();
        TokenizerRun {
            tokenizer: state.tokenizer,
            untrained_mpjpe: untrained.mpjpe_mm,
            mpjpe: trained.mpjpe_mm,
            dead_fraction: trained.dead_fraction,
            steps: state.step,
            seconds,
        }
    })
}

/// One evaluation point during masked-model training.
pub struct OverfitPoint {
    pub step: usize,
    pub token_recovery: f64,
    pub mpjpe: f64,
}

pub struct ModelRun {
    pub model: Model32,
    pub trace: Vec<OverfitPoint>,
    pub seconds: f64,
}

pub const OVERFIT_SAMPLES: usize = 32;
pub const MAX_MODEL_STEPS: usize = 10_000;
pub const CHUNK_STEPS: usize = 250;

/// Masked transformer trained on 32 samples until fully masked greedy
/// decoding recovers the training tokens and poses, or the step cap.
pub fn model_run() -> &'static ModelRun {
    static CELL: OnceLock<ModelRun> = OnceLock::new();
    CELL.get_or_init(|| {
        use genhmr::inference::InferConfig;
        use genhmr::pipeline::{evaluate, fit_model};
        let cfg = toy_config();
        let b = bodies();
        let tok = &tokenizer_run().tokenizer;
        let tok64 = tok.cast::<f64>();
        let start = Instant::now();
        let train = gen_synthetic_dataset(OVERFIT_SAMPLES, 2, &b.f64, &cfg, true).unwrap();
        let icfg = InferConfig::from_config(&cfg);
        let mut state = None;
        let mut trace = Vec::new();
        loop {
            let (st, _) = fit_model(&cfg, tok, &b.f32, state.take(), &train, &train, CHUNK_STEPS).unwrap();
            let ev = evaluate(&st.model.cast::<f64>(), &tok64, &b.f64, &train, &icfg, false, cfg.seed).unwrap();
            let recovery = ev.samples.iter().map(|s| s.token_accuracy).sum::<f64>() / ev.samples.len() as f64;
            trace.push(OverfitPoint {
                step: st.step,
                token_recovery: recovery,
                mpjpe: ev.report.mpjpe_mm,
            });
            let done = recovery >= 0.95 && ev.report.mpjpe_mm < 20.0;
            let step = st.step;
            state = Some(st);
            if done || step >= MAX_MODEL_STEPS {
                break;
            }
        }
        ModelRun {
            model: state.unwrap().model,
            trace,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}
