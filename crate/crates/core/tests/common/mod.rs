#![allow(dead_code)]

use genhmr::body::{make_synthetic_template, BodyModel, Intrinsics};
use genhmr::config::Config;
use genhmr::rng::{stream, Stream};
use genhmr::tokenizer::{PoseTokenizer, TokenizerDims};
use genhmr::training::{gen_synthetic_dataset, Dataset, Stage2Data};
use genhmr::transformer::{MaskedTransformer, ModelDims};

pub struct Setup {
    pub cfg: Config,
    pub body: BodyModel<f64>,
    pub tokenizer: PoseTokenizer<f64>,
    pub model: MaskedTransformer<f64>,
    pub data: Stage2Data<f64>,
    pub dataset: Dataset,
}

pub fn setup() -> Setup {
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
    cfg.batch = 3;
    cfg.steps = 4;
    cfg.eval_every = 2;
    let tmpl = make_synthetic_template(cfg.n_vertices, cfg.template_seed).unwrap();
    let body = BodyModel::new(tmpl, Intrinsics::for_image(cfg.image_size));
    let dataset = gen_synthetic_dataset(5, 3, &body, &cfg, true).unwrap();
    let mut rng = stream(cfg.seed, Stream::Init);
    let tokenizer = PoseTokenizer::new(TokenizerDims::from_config(&cfg), &mut rng).unwrap();
    let model = MaskedTransformer::new(ModelDims::from_config(&cfg, 24), [0.0, -0.17, 11.5], &mut rng).unwrap();
    let data = Stage2Data::build(&dataset, &tokenizer).unwrap();
    Setup {
        cfg,
        body,
        tokenizer,
        model,
        data,
        dataset,
    }
}

