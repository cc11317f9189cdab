//! Flat `key = value` run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mask schedule used during iterative decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Cubic,
    Sqrt,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [Self::Cosine, Self::Linear, Self::Cubic, Self::Sqrt];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
            Self::Cubic => "cubic",
            Self::Sqrt => "sqrt",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule `{s}` (cosine, linear, cubic, sqrt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    // body and rendering
    pub n_vertices: usize,
    pub template_seed: u64,
    pub image_size: usize,
    pub focal: f64,
    pub heatmap_sigma: f64,

    // synthetic poses
    pub pose_noise: f64,
    pub max_yaw: f64,
    pub yaw_steps: usize,
    pub max_tilt: f64,
    pub beta_range: f64,
    pub depth_min: f64,
    pub depth_max: f64,

    // tokenizer
    pub n_codes: usize,
    pub code_dim: usize,
    pub n_tokens: usize,
    pub tokenizer_width: usize,
    pub tokenizer_lr: f64,
    pub tokenizer_steps: usize,
    pub tokenizer_batch: usize,
    pub lambda_re: f64,
    pub lambda_embed: f64,
    pub lambda_commit: f64,
    pub lambda_rot: f64,
    pub lambda_vertices: f64,
    pub lambda_joints: f64,
    pub ema_decay: f64,
    pub codebook_reset: bool,
    pub reset_every: usize,
    pub reset_threshold: u64,

    // transformer
    pub patch_size: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_points: usize,
    pub levels: Vec<usize>,
    pub ffn_dim: usize,
    pub head_hidden: usize,

    // masked-model training
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub mask_max_ratio_time: f64,
    pub masked_only_loss: bool,
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_fraction: f64,
    pub lambda_mask: f64,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub stop_token_accuracy: f64,

    // inference
    pub schedule: ScheduleKind,
    pub iters: usize,
    pub topk: usize,
    pub refine_iters: usize,
    pub refine_eta: f64,
    pub refine_lambda: f64,
    pub refine_camera: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            n_vertices: 128,
            template_seed: 0,
            image_size: 224,
            focal: 1000.0,
            heatmap_sigma: 4.0,
            pose_noise: 0.03,
            max_yaw: 0.6,
            yaw_steps: 5,
            max_tilt: 0.05,
            beta_range: 1.0,
            depth_min: 10.0,
            depth_max: 13.0,
            n_codes: 64,
            code_dim: 32,
            n_tokens: 12,
            tokenizer_width: 64,
            tokenizer_lr: 1e-3,
            tokenizer_steps: 5000,
            tokenizer_batch: 64,
            lambda_re: 1.0,
            lambda_embed: 0.02,
            lambda_commit: 0.02,
            lambda_rot: 1.0,
            lambda_vertices: 0.5,
            lambda_joints: 0.3,
            ema_decay: 0.99,
            codebook_reset: true,
            reset_every: 256,
            reset_threshold: 1,
            patch_size: 16,
            model_dim: 64,
            n_heads: 4,
            n_layers: 4,
            n_points: 4,
            levels: vec![1, 4, 8],
            ffn_dim: 128,
            head_hidden: 64,
            lr: 1e-3,
            steps: 10_000,
            batch: 16,
            mask_max_ratio_time: 1.0,
            masked_only_loss: false,
            tau_start: 1.0,
            tau_end: 0.01,
            anneal_fraction: 0.5,
            lambda_mask: 1.0,
            lambda_theta: 1e-3,
            lambda_beta: 5e-4,
            lambda_3d: 5e-2,
            lambda_2d: 1e-2,
            eval_every: 250,
            eval_samples: 32,
            stop_token_accuracy: 0.0,
            schedule: ScheduleKind::Cosine,
            iters: 5,
            topk: 1,
            refine_iters: 10,
            refine_eta: 1e-2,
            refine_lambda: 1e-3,
            refine_camera: false,
        }
    }
}

impl Config {
    /// Every accepted key, in declaration order.
    pub fn keys() -> Vec<String> {
        let value = toml::Value::try_from(Config::default()).expect("serializable defaults");
        let table = value.as_table().expect("table");
        let text = toml::to_string(&Config::default()).expect("serializable defaults");
        let mut keys: Vec<String> = text
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
            .filter(|k| table.contains_key(k))
            .collect();
        keys.dedup();
        keys
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let valid = Self::keys();
        for (key, value) in &table {
            if !valid.iter().any(|k| k == key) {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    valid.join(", ")
                )));
            }
            if value.is_table() {
                return Err(Error::Config(format!("`{key}` must be a plain value, not a table")));
            }
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_vertices < 24 {
            return fail("n_vertices must be at least 24");
        }
        if self.n_codes == 0 || self.code_dim == 0 || self.n_tokens == 0 {
            return fail("n_codes, code_dim and n_tokens must be positive");
        }
        if self.n_tokens % 24 != 0 && 24 % self.n_tokens != 0 {
            return fail("n_tokens must divide 24 or be a multiple of 24");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail("image_size must be a multiple of patch_size");
        }
        if self.model_dim % self.n_heads != 0 {
            return fail("model_dim must be divisible by n_heads");
        }
        if self.levels.is_empty() || self.levels[0] != 1 || self.levels.windows(2).any(|w| w[1] % w[0] != 0 || w[1] <= w[0]) {
            return fail("levels must start at 1 and increase by integer factors");
        }
        if !(self.tau_start > self.tau_end && self.tau_end > 0.0) {
            return fail("need tau_start > tau_end > 0");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail("ema_decay must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mask_max_ratio_time) {
            return fail("mask_max_ratio_time must lie in [0, 1]");
        }
        if self.topk == 0 || self.topk > self.n_codes {
            return fail("topk must lie in [1, n_codes]");
        }
        if self.iters == 0 {
            return fail("iters must be at least 1");
        }
        if self.refine_eta <= 0.0 {
            return fail("refine_eta must be positive");
        }
        if self.depth_min <= 0.0 || self.depth_max < self.depth_min {
            return fail("need 0 < depth_min <= depth_max");
        }
        Ok(())
    }

    /// Small configuration used by tests and quick runs: 32 px images with
    /// 8 px patches and shorter schedules.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            focal: 1000.0 * 32.0 / 224.0,
            heatmap_sigma: 1.0,
            n_layers: 2,
            ..Self::default()
        }
    }
}
