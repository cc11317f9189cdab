//! Generative human mesh recovery at desk scale.
//!
//! A discrete pose tokenizer, an image-conditioned masked token transformer,
//! iterative confidence-guided decoding and keypoint-guided latent refinement,
//! all built on the [`numcore`] autodiff tape.

pub mod ablation;
pub mod body;
pub mod config;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

/// [`numcore::grad_check`] for closures returning this crate's errors.
pub fn grad_check<S, F>(f: F, x: &numcore::Tensor<S>, eps: S) -> Result<S>
where
    S: numcore::Real,
    F: Fn(&mut numcore::Tape<S>, numcore::Var) -> Result<numcore::Var>,
{
    let wrapped = |tape: &mut numcore::Tape<S>, v: numcore::Var| {
        f(tape, v).map_err(|e| match e {
            Error::Num(n) => n,
            other => numcore::NumError::InvalidShape {
                op: "grad_check",
                shape: Vec::new(),
                reason: other.to_string(),
            },
        })
    };
    Ok(numcore::grad_check(wrapped, x, eps)?)
}

pub type Body32 = body::BodyModel<f32>;
pub type Body64 = body::BodyModel<f64>;
pub type Tokenizer32 = tokenizer::PoseTokenizer<f32>;
pub type Tokenizer64 = tokenizer::PoseTokenizer<f64>;
pub type Model32 = transformer::MaskedTransformer<f32>;
pub type Model64 = transformer::MaskedTransformer<f64>;
