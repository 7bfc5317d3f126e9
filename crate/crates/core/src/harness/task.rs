//! Synthetic copy task with ground-truth token boundaries.
//!
//! Each token is rendered as a contiguous run of frames: its embedding plus
//! Gaussian noise. The run lengths give the reference boundary of every
//! token.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EOS, SOS};
use crate::numerics::Tensor;

/// Model id of content token 0; ids below are `sos` and `eos`.
pub const TOKEN_OFFSET: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Content tokens, excluding `sos`/`eos`.
    pub vocab: usize,
    pub span_min: usize,
    pub span_max: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub input_dim: usize,
    pub noise: f64,
    /// Draw the tokens of an utterance without replacement.
    pub distinct: bool,
    /// Seed of the token embedding table, shared by every split.
    pub embedding_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab: 16,
            span_min: 2,
            span_max: 5,
            frames_min: 1,
            frames_max: 50,
            tokens_min: 2,
            tokens_max: 10,
            input_dim: 16,
            noise: 0.2,
            distinct: true,
            embedding_seed: 17,
        }
    }
}

impl TaskConfig {
    /// Token counts for which some span assignment fits the frame range.
    fn feasible_counts(&self) -> Vec<usize> {
        (self.tokens_min..=self.tokens_max)
            .filter(|&n| n * self.span_min <= self.frames_max && n * self.span_max >= self.frames_min)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Generation(m));
        if self.span_min == 0 || self.span_min > self.span_max {
            return err(format!("span range [{}, {}] needs 1 <= min <= max", self.span_min, self.span_max));
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return err(format!("token range [{}, {}] needs 1 <= min <= max", self.tokens_min, self.tokens_max));
        }
        if self.vocab == 0 || self.input_dim == 0 {
            return err("vocab and input_dim must be positive".into());
        }
        if self.distinct && self.tokens_min > self.vocab {
            return err(format!("{} distinct tokens requested from a vocabulary of {}", self.tokens_min, self.vocab));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise {} must be finite and >= 0", self.noise));
        }
        if self.feasible_counts().is_empty() {
            return err(format!(
                "frame range [{}, {}] cannot hold {}..={} tokens of {}..={} frames",
                self.frames_min, self.frames_max, self.tokens_min, self.tokens_max, self.span_min, self.span_max
            ));
        }
        Ok(())
    }

    /// Model vocabulary size: content tokens plus `sos` and `eos`.
    pub fn model_vocab(&self) -> usize {
        self.vocab + TOKEN_OFFSET
    }

    /// Unit-variance token embeddings, one row per content token.
    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.embedding_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.vocab)
            .map(|_| (0..self.input_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    /// `T × input_dim`.
    pub frames: Tensor,
    /// Content tokens in `0..vocab`.
    pub tokens: Vec<usize>,
    /// Last frame (1-based) of each token's span.
    pub boundaries: Vec<usize>,
}

impl AlignedSample {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model targets `sos, tokens…, eos`.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.tokens.len() + 2);
        t.push(SOS);
        t.extend(self.tokens.iter().map(|&k| k + TOKEN_OFFSET));
        t.push(EOS);
        t
    }

    /// Reference tokens as model ids.
    pub fn reference(&self) -> Vec<usize> {
        self.tokens.iter().map(|&k| k + TOKEN_OFFSET).collect()
    }
}

const MAX_ATTEMPTS: usize = 10_000;

fn sample_one<R: Rng>(cfg: &TaskConfig, counts: &[usize], table: &[Vec<f64>], rng: &mut R) -> Result<AlignedSample> {
    let n = counts[rng.random_range(0..counts.len())];
    let spans = (0..MAX_ATTEMPTS)
        .map(|_| (0..n).map(|_| rng.random_range(cfg.span_min..=cfg.span_max)).collect::<Vec<_>>())
        .find(|s| (cfg.frames_min..=cfg.frames_max).contains(&s.iter().sum()))
        .ok_or_else(|| Error::Generation(format!("no span assignment for {n} tokens after {MAX_ATTEMPTS} draws")))?;
    let tokens: Vec<usize> = if cfg.distinct {
        sample_indices(rng, cfg.vocab, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect()
    };
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive std"));
    let total: usize = spans.iter().sum();
    let mut data = Vec::with_capacity(total * cfg.input_dim);
    let mut boundaries = Vec::with_capacity(n);
    for (&tok, &span) in tokens.iter().zip(&spans) {
        for _ in 0..span {
            data.extend(table[tok].iter().map(|&e| e + noise.map_or(0.0, |d| d.sample(rng))));
        }
        boundaries.push(boundaries.last().copied().unwrap_or(0) + span);
    }
    Ok(AlignedSample {
        frames: Tensor::matrix(total, cfg.input_dim, data)?,
        tokens,
        boundaries,
    })
}

/// `n` samples drawn deterministically from `seed`.
pub fn gen_copy_task(seed: u64, n: usize, cfg: &TaskConfig) -> Result<Vec<AlignedSample>> {
    cfg.validate()?;
    let counts = cfg.feasible_counts();
    let table = cfg.embeddings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_one(cfg, &counts, &table, &mut rng)).collect()
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[AlignedSample]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string(samples)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AlignedSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
