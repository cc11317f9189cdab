//! Single-file binary container for trained weights and optimizer state.
//!
//! Layout, all integers little-endian:
//! `"GHMR" | u32 version | u8 stage | u64 step | u32 len | config TOML |
//! u32 n_sections | sections... | u32 crc32` where each section is
//! `u32 len | name | u32 ndim | u64 dims... | f32 values...`.

use std::path::Path;

use numcore::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tokenizer::{Codebook, PoseTokenizer, TokenizerDims};
use crate::training::{GenHmrTrainer, TokenizerTrainer};
use crate::transformer::{MaskedTransformer, ModelDims};

pub const MAGIC: &[u8; 4] = b"GHMR";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tokenizer = 1,
    Model = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Section {
    fn from_tensor<S: Real>(name: impl Into<String>, t: &Tensor<S>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    fn from_slice<S: Real>(name: impl Into<String>, v: &[S]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            values: v.iter().map(|x| x.to_f64_lossy() as f32).collect(),
        }
    }

    fn tensor<S: Real>(&self) -> Result<Tensor<S>> {
        Ok(Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| S::lit(v as f64)).collect(),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub config: Config,
    pub sections: Vec<Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch; file is corrupted".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stage = match r.u8()? {
            1 => Stage::Tokenizer,
            2 => Stage::Model,
            other => return Err(Error::Checkpoint(format!("unknown stage {other}"))),
        };
        let step = r.u64()?;
        let config = Config::from_toml(&r.string()?)?;
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("section {name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            sections.push(Section { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after sections".into()));
        }
        Ok(Self {
            stage,
            step,
            config,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    fn tensor<S: Real>(&self, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
        let s = self.section(name)?;
        if s.shape != shape {
            return Err(Error::Checkpoint(format!(
                "section `{name}` has shape {:?}, expected {shape:?}",
                s.shape
            )));
        }
        s.tensor()
    }

    fn fill_store<S: Real>(&self, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = store.iter().map(|(_, n, v)| (n.to_string(), v.shape().to_vec())).collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            store.values_mut()[i] = self.tensor(&format!("{prefix}{name}"), shape)?;
        }
        Ok(())
    }

    fn restore_adam<S: Real>(&self, prefix: &str, store: &ParamStore<S>, lr: f64) -> Result<Adam<S>> {
        let mut adam = Adam::new(store, S::lit(lr));
        adam.step = self.section(&format!("{prefix}step"))?.values.first().copied().unwrap_or(0.0) as u64;
        for (i, name, v) in store.iter() {
            adam.first[i.index()] = self.tensor(&format!("{prefix}m.{name}"), v.shape())?;
            adam.second[i.index()] = self.tensor(&format!("{prefix}v.{name}"), v.shape())?;
        }
        Ok(adam)
    }
}

fn adam_sections<S: Real>(prefix: &str, store: &ParamStore<S>, adam: &Adam<S>) -> Vec<Section> {
    let mut out = vec![Section {
        name: format!("{prefix}step"),
        shape: vec![1],
        values: vec![adam.step as f32],
    }];
    for (i, name, _) in store.iter() {
        out.push(Section::from_tensor(format!("{prefix}m.{name}"), &adam.first[i.index()]));
        out.push(Section::from_tensor(format!("{prefix}v.{name}"), &adam.second[i.index()]));
    }
    out
}

fn tokenizer_sections<S: Real>(tok: &PoseTokenizer<S>) -> Vec<Section> {
    let mut out: Vec<Section> = tok.params.iter().map(|(_, n, v)| Section::from_tensor(n, v)).collect();
    let cb = &tok.codebook;
    out.push(Section::from_tensor("codebook.codes", &cb.codes));
    out.push(Section::from_slice("codebook.ema_counts", &cb.ema_counts));
    out.push(Section::from_tensor("codebook.ema_sums", &cb.ema_sums));
    out.push(Section {
        name: "codebook.usage".into(),
        shape: vec![cb.usage.len()],
        values: cb.usage.iter().map(|&u| u as f32).collect(),
    });
    out
}

/// Rebuilds the module structure from the configuration, then overwrites
/// every tensor from the checkpoint.
fn restore_tokenizer<S: Real>(ckpt: &Checkpoint) -> Result<PoseTokenizer<S>> {
    let dims = TokenizerDims::from_config(&ckpt.config);
    let mut tok = PoseTokenizer::<S>::new(dims, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.fill_store("", &mut tok.params)?;
    let (k, d) = (dims.n_codes, dims.code_dim);
    let counts: Tensor<S> = ckpt.tensor("codebook.ema_counts", &[k])?;
    tok.codebook = Codebook {
        codes: ckpt.tensor("codebook.codes", &[k, d])?,
        ema_counts: counts.data().to_vec(),
        ema_sums: ckpt.tensor("codebook.ema_sums", &[k, d])?,
        usage: ckpt.section("codebook.usage")?.values.iter().map(|&u| u as u64).collect(),
    };
    Ok(tok)
}

fn expect_stage(ckpt: &Checkpoint, stage: Stage) -> Result<()> {
    if ckpt.stage != stage {
        return Err(Error::Checkpoint(format!("expected a {stage:?} checkpoint, found {:?}", ckpt.stage)));
    }
    Ok(())
}

pub fn tokenizer_checkpoint<S: Real>(cfg: &Config, state: &TokenizerTrainer<S>) -> Checkpoint {
    let mut sections = tokenizer_sections(&state.tokenizer);
    sections.extend(adam_sections("opt.", &state.tokenizer.params, &state.optimizer));
    Checkpoint {
        stage: Stage::Tokenizer,
        step: state.step as u64,
        config: cfg.clone(),
        sections,
    }
}

/// Tokenizer training state; the learning rate comes from the stored config.
pub fn tokenizer_state<S: Real>(ckpt: &Checkpoint) -> Result<TokenizerTrainer<S>> {
    expect_stage(ckpt, Stage::Tokenizer)?;
    let tokenizer = restore_tokenizer::<S>(ckpt)?;
    let optimizer = ckpt.restore_adam("opt.", &tokenizer.params, ckpt.config.tokenizer_lr)?;
    Ok(TokenizerTrainer {
        tokenizer,
        optimizer,
        step: ckpt.step as usize,
    })
}

/// The tokenizer from either kind of checkpoint.
pub fn tokenizer_from<S: Real>(ckpt: &Checkpoint) -> Result<PoseTokenizer<S>> {
    match ckpt.stage {
        Stage::Tokenizer => restore_tokenizer(ckpt),
        Stage::Model => {
            let mut inner = ckpt.clone();
            inner.sections = ckpt
                .sections
                .iter()
                .filter_map(|s| {
                    s.name.strip_prefix("tokenizer.").map(|n| Section {
                        name: n.to_string(),
                        ..s.clone()
                    })
                })
                .collect();
            restore_tokenizer(&inner)
        }
    }
}

/// Stage-2 checkpoint embedding the frozen tokenizer under `tokenizer.`.
pub fn model_checkpoint<S: Real>(cfg: &Config, state: &GenHmrTrainer<S>, tokenizer: &PoseTokenizer<S>) -> Checkpoint {
    let mut sections: Vec<Section> = tokenizer_sections(tokenizer)
        .into_iter()
        .map(|s| Section {
            name: format!("tokenizer.{}", s.name),
            ..s
        })
        .collect();
    let params = &state.model.params;
    sections.extend(params.iter().map(|(_, n, v)| Section::from_tensor(format!("transformer.{n}"), v)));
    sections.extend(adam_sections("transformer.opt.", params, &state.optimizer));
    Checkpoint {
        stage: Stage::Model,
        step: state.step as u64,
        config: cfg.clone(),
        sections,
    }
}

pub fn model_state<S: Real>(ckpt: &Checkpoint, channels: usize) -> Result<(GenHmrTrainer<S>, PoseTokenizer<S>)> {
    expect_stage(ckpt, Stage::Model)?;
    let tokenizer = tokenizer_from::<S>(ckpt)?;
    let dims = ModelDims::from_config(&ckpt.config, channels);
    let mut model = MaskedTransformer::<S>::new(dims, [0.0, 0.0, 2.0], &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.fill_store("transformer.", &mut model.params)?;
    let optimizer = ckpt.restore_adam("transformer.opt.", &model.params, ckpt.config.lr)?;
    Ok((
        GenHmrTrainer {
            model,
            optimizer,
            step: ckpt.step as usize,
        },
        tokenizer,
    ))
}
