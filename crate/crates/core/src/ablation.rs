//! Toy-scale sweeps over inference and training knobs.

use std::str::FromStr;

use numcore::Real;

use crate::body::BodyModel;
use crate::config::{Config, ScheduleKind};
use crate::error::{Error, Result};
use crate::inference::{DecodeConfig, InferConfig, RefineConfig};
use crate::metrics::{EvalReport, StageTimings};
use crate::pipeline::{evaluate, fit_model, fit_tokenizer};
use crate::tokenizer::PoseTokenizer;
use crate::training::{evaluate_tokenizer, Dataset, PoseTargets};
use crate::transformer::MaskedTransformer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Schedule,
    Topk,
    Iters,
    MaskingRatio,
    Layers,
    Codebook,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Self::Schedule,
        Self::Topk,
        Self::Iters,
        Self::MaskingRatio,
        Self::Layers,
        Self::Codebook,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Schedule => "schedule",
            Self::Topk => "topk",
            Self::Iters => "iters",
            Self::MaskingRatio => "masking-ratio",
            Self::Layers => "layers",
            Self::Codebook => "codebook",
        }
    }

    /// Whether the study retrains models rather than sweeping inference.
    pub fn trains(self) -> bool {
        matches!(self, Self::MaskingRatio | Self::Layers | Self::Codebook)
    }
}

impl FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown study `{s}` ({})", names.join(", ")))
        })
    }
}

pub const SCHEDULE_ITERS: [usize; 4] = [1, 3, 5, 10];
pub const TOPK_VALUES: [usize; 5] = [1, 2, 5, 10, 20];
pub const UGS_ITERS: [usize; 4] = [1, 5, 10, 20];
pub const REFINE_ITERS: [usize; 5] = [0, 1, 5, 10, 20];
pub const MASK_RATIO_MAX: [f64; 4] = [1.0, 0.3, 0.5, 0.7];
pub const LAYER_COUNTS: [usize; 4] = [2, 4, 6, 8];
/// (codes, code dimension)
pub const CODEBOOKS: [(usize, usize); 4] = [(32, 32), (64, 16), (64, 32), (128, 32)];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub knobs: Vec<(&'static str, String)>,
    pub report: EvalReport,
    pub extra: Vec<(&'static str, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn columns(&self) -> (Vec<&'static str>, Vec<&'static str>) {
        self.rows.first().map_or_else(Default::default, |r| {
            (r.knobs.iter().map(|k| k.0).collect(), r.extra.iter().map(|k| k.0).collect())
        })
    }

    /// Accuracy table; deterministic for a fixed seed.
    pub fn metrics_csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let (knobs, extra) = self.columns();
        let mut header: Vec<String> = knobs.iter().map(|s| s.to_string()).collect();
        header.extend(["mpjpe_mm", "pa_mpjpe_mm", "mve_mm"].map(String::from));
        header.extend(extra.iter().map(|s| s.to_string()));
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row: Vec<String> = r.knobs.iter().map(|k| k.1.clone()).collect();
                row.extend([r.report.mpjpe_mm, r.report.pa_mpjpe_mm, r.report.mve_mm].map(|v| format!("{v:.4}")));
                row.extend(r.extra.iter().map(|e| format!("{:.4}", e.1)));
                row
            })
            .collect();
        (header, rows)
    }

    /// Average per-image wall-clock time per stage.
    pub fn timings_csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let (knobs, _) = self.columns();
        let mut header: Vec<String> = knobs.iter().map(|s| s.to_string()).collect();
        header.extend(["encode_s", "ugs_s", "decode_s", "refine_s", "total_s"].map(String::from));
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let t: StageTimings = r.report.aiti_seconds;
                let mut row: Vec<String> = r.knobs.iter().map(|k| k.1.clone()).collect();
                row.extend([t.encode, t.ugs, t.decode, t.refine, t.total].map(|v| format!("{v:.6}")));
                row
            })
            .collect();
        (header, rows)
    }
}

/// Everything a study may need; inference studies use the trained model,
/// training studies use `train` and the step budgets.
pub struct AblationContext<'a, S> {
    pub cfg: &'a Config,
    pub body: &'a BodyModel<S>,
    pub tokenizer: Option<&'a PoseTokenizer<S>>,
    pub model: Option<&'a MaskedTransformer<S>>,
    pub train: Option<&'a Dataset>,
    pub eval: &'a Dataset,
    pub tokenizer_steps: usize,
    pub model_steps: usize,
}

fn infer_config(cfg: &Config, schedule: ScheduleKind, iters: usize, topk: usize, refine: usize) -> InferConfig {
    InferConfig {
        decode: DecodeConfig { schedule, iters, topk },
        refine: RefineConfig {
            iters: refine,
            ..InferConfig::from_config(cfg).refine
        },
    }
}

fn need<'a, T>(x: Option<&'a T>, what: &str, study: Study) -> Result<&'a T> {
    x.ok_or_else(|| Error::Invalid(format!("study `{}` needs {what}", study.name())))
}

pub fn run_study<S: Real>(study: Study, ctx: &AblationContext<'_, S>) -> Result<AblationTable> {
    let cfg = ctx.cfg;
    let mut rows = Vec::new();
    if !study.trains() {
        let model = need(ctx.model, "a trained model", study)?;
        let tok = need(ctx.tokenizer, "a tokenizer", study)?;
        let mut run = |knobs: Vec<(&'static str, String)>, icfg: InferConfig| -> Result<()> {
            let guided = icfg.refine.iters > 0;
            let ev = evaluate(model, tok, ctx.body, ctx.eval, &icfg, guided, cfg.seed)?;
            rows.push(AblationRow {
                knobs,
                report: ev.report,
                extra: Vec::new(),
            });
            Ok(())
        };
        match study {
            Study::Schedule => {
                for kind in ScheduleKind::ALL {
                    for t in SCHEDULE_ITERS {
                        let knobs = vec![("schedule", kind.name().to_string()), ("iters", t.to_string())];
                        run(knobs, infer_config(cfg, kind, t, cfg.topk, 0))?;
                    }
                }
            }
            Study::Topk => {
                for k in TOPK_VALUES.into_iter().filter(|&k| k <= cfg.n_codes) {
                    run(vec![("topk", k.to_string())], infer_config(cfg, cfg.schedule, 5, k, 0))?;
                }
            }
            Study::Iters => {
                for t in UGS_ITERS {
                    let knobs = vec![("stage", "ugs".to_string()), ("iters", t.to_string())];
                    run(knobs, infer_config(cfg, cfg.schedule, t, cfg.topk, 0))?;
                }
                for p in REFINE_ITERS {
                    let knobs = vec![("stage", "refine".to_string()), ("iters", p.to_string())];
                    run(knobs, infer_config(cfg, cfg.schedule, cfg.iters, cfg.topk, p))?;
                }
            }
            _ => unreachable!("training studies handled below"),
        }
        return Ok(AblationTable { rows });
    }

    let train = need(ctx.train, "a training set", study)?;
    let icfg = infer_config(cfg, cfg.schedule, 5, cfg.topk, 0);
    let fit_and_score = |c: &Config, tok: &PoseTokenizer<S>| -> Result<EvalReport> {
        let (state, _) = fit_model(c, tok, ctx.body, None, train, ctx.eval, ctx.model_steps)?;
        Ok(evaluate(&state.model, tok, ctx.body, ctx.eval, &icfg, false, c.seed)?.report)
    };
    let quiet = |c: &mut Config| c.eval_every = 0;
    match study {
        Study::MaskingRatio | Study::Layers => {
            let tok = need(ctx.tokenizer, "a tokenizer", study)?;
            let settings: Vec<(&'static str, String, Config)> = if study == Study::MaskingRatio {
                MASK_RATIO_MAX
                    .iter()
                    .map(|&u| {
                        let mut c = cfg.clone();
                        c.mask_max_ratio_time = u;
                        ("mask_tau_max", format!("{u}"), c)
                    })
                    .collect()
            } else {
                LAYER_COUNTS
                    .iter()
                    .map(|&n| {
                        let mut c = cfg.clone();
                        c.n_layers = n;
                        ("layers", n.to_string(), c)
                    })
                    .collect()
            };
            for (name, value, mut c) in settings {
                quiet(&mut c);
                let report = fit_and_score(&c, tok)?;
                rows.push(AblationRow {
                    knobs: vec![(name, value)],
                    report,
                    extra: Vec::new(),
                });
            }
        }
        Study::Codebook => {
            for (k, d) in CODEBOOKS {
                let mut c = cfg.clone();
                c.n_codes = k;
                c.code_dim = d;
                quiet(&mut c);
                let (tstate, _) = fit_tokenizer(&c, ctx.body, None, train, ctx.eval, ctx.tokenizer_steps)?;
                let recon = evaluate_tokenizer(&tstate.tokenizer, ctx.body, &PoseTargets::build(ctx.eval, ctx.body)?)?;
                let report = fit_and_score(&c, &tstate.tokenizer)?;
                rows.push(AblationRow {
                    knobs: vec![("codes", k.to_string()), ("code_dim", d.to_string())],
                    report,
                    extra: vec![("tokenizer_mpjpe_mm", recon.mpjpe_mm)],
                });
            }
        }
        _ => unreachable!("inference studies handled above"),
    }
    Ok(AblationTable { rows })
}
