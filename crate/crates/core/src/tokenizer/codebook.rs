use numcore::{Real, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Code vectors with exponential-moving-average statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    /// `[K, D]`
    pub codes: Tensor<S>,
    pub ema_counts: Vec<S>,
    /// `[K, D]`
    pub ema_sums: Tensor<S>,
    /// Assignments since the last reset window closed.
    pub usage: Vec<u64>,
}

pub const EMA_EPS: f64 = 1e-5;

impl<S: Real> Codebook<S> {
    /// Builds a codebook whose EMA state is consistent with `codes`.
    pub fn from_codes(codes: Tensor<S>) -> Self {
        let k = codes.shape()[0];
        Self {
            ema_counts: vec![S::one(); k],
            ema_sums: codes.clone(),
            usage: vec![0; k],
            codes,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, k: usize) -> &[S] {
        let d = self.dim();
        &self.codes.data()[k * d..(k + 1) * d]
    }

    /// Nearest code by Euclidean distance for each `D`-row of `latents`;
    /// ties go to the lowest index.
    pub fn quantize(&self, latents: &[S]) -> Result<Vec<usize>> {
        let d = self.dim();
        if latents.len() % d != 0 {
            return Err(Error::Invalid(format!(
                "latent length {} is not a multiple of code dim {d}",
                latents.len()
            )));
        }
        Ok(latents
            .chunks(d)
            .map(|z| {
                let mut best = (0usize, S::infinity());
                for k in 0..self.len() {
                    let dist: S = self
                        .code(k)
                        .iter()
                        .zip(z)
                        .map(|(&c, &x)| (x - c) * (x - c))
                        .sum();
                    if dist < best.1 {
                        best = (k, dist);
                    }
                }
                best.0
            })
            .collect())
    }

    /// Code vectors for `tokens`, shape `[tokens.len(), D]`.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.len() {
                return Err(Error::Invalid(format!("token {t} out of range {}", self.len())));
            }
            data.extend_from_slice(self.code(t));
        }
        Ok(Tensor::new(vec![tokens.len(), d], data)?)
    }

    /// One EMA step from `latents` (rows of `D`) assigned to `tokens`.
    ///
    /// Counts and sums of every code decay; a code is recomputed only when
    /// it received at least one latent this step.
    pub fn ema_update(&mut self, latents: &[S], tokens: &[usize], decay: S) {
        let d = self.dim();
        let k = self.len();
        let mut counts = vec![S::zero(); k];
        let mut sums = vec![S::zero(); k * d];
        for (z, &t) in latents.chunks(d).zip(tokens) {
            counts[t] += S::one();
            for (s, &x) in sums[t * d..(t + 1) * d].iter_mut().zip(z) {
                *s += x;
            }
            self.usage[t] += 1;
        }
        let keep = S::one() - decay;
        let eps = S::lit(EMA_EPS);
        for c in 0..k {
            self.ema_counts[c] = decay * self.ema_counts[c] + keep * counts[c];
            let row = &mut self.ema_sums.data_mut()[c * d..(c + 1) * d];
            for (s, &n) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *s = decay * *s + keep * n;
            }
            if counts[c] > S::zero() {
                let denom = self.ema_counts[c] + eps;
                let sums_row: Vec<S> = self.ema_sums.data()[c * d..(c + 1) * d].to_vec();
                for (dst, s) in self.codes.data_mut()[c * d..(c + 1) * d].iter_mut().zip(sums_row) {
                    *dst = s / denom;
                }
            }
        }
    }

    /// Moves every code used fewer than `threshold` times in the closing
    /// window onto a random row of `latents`, then clears usage.
    pub fn reset_dead(&mut self, latents: &[S], threshold: u64, rng: &mut impl Rng) -> usize {
        let d = self.dim();
        let n = latents.len() / d;
        if n == 0 {
            log::warn!("codebook reset skipped: empty batch");
            return 0;
        }
        let mut resets = 0;
        for c in 0..self.len() {
            if self.usage[c] < threshold {
                let pick = rng.random_range(0..n);
                let z = &latents[pick * d..(pick + 1) * d];
                self.codes.data_mut()[c * d..(c + 1) * d].copy_from_slice(z);
                self.ema_sums.data_mut()[c * d..(c + 1) * d].copy_from_slice(z);
                self.ema_counts[c] = S::one();
                resets += 1;
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        resets
    }

    pub fn all_finite(&self) -> bool {
        self.codes.all_finite() && self.ema_sums.all_finite() && self.ema_counts.iter().all(|c| c.is_finite())
    }

    pub fn cast<T: Real>(&self) -> Codebook<T> {
        Codebook {
            codes: self.codes.cast(),
            ema_counts: self.ema_counts.iter().map(|&c| T::lit(c.to_f64_lossy())).collect(),
            ema_sums: self.ema_sums.cast(),
            usage: self.usage.clone(),
        }
    }
}

/// Fraction of codes that never appear in `tokens`.
pub fn dead_fraction(tokens: &[usize], n_codes: usize) -> f64 {
    let mut seen = vec![false; n_codes];
    for &t in tokens {
        seen[t] = true;
    }
    seen.iter().filter(|s| !**s).count() as f64 / n_codes as f64
}
