//! Building blocks shared by the encoder and decoder, each with a tape path
//! for training and a plain-vector path for incremental inference.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};

use crate::attention::{multi_head, AttentionHeads, AttentionMask, Projection};
use crate::error::{Error, Result};
use crate::numerics::{dot, gelu, Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Sinusoidal position encoding for absolute position `pos`.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            if i % 2 == 0 { angle.sin() } else { angle.cos() }
        })
        .collect()
}

pub(crate) fn positional_rows(positions: &[usize], d: usize) -> Tensor {
    let data = positions.iter().flat_map(|&p| positional_encoding(p, d)).collect();
    Tensor::matrix(positions.len(), d, data).expect("sized buffer")
}

pub(crate) fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// `x W (+ b)` for a single row vector.
pub(crate) fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let mut out = b.map_or_else(|| vec![0.0; w.cols()], |b| b.data().to_vec());
    for (i, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row_slice(i)) {
            *o += xv * wv;
        }
    }
    out
}

pub(crate) fn add_in_place(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

pub(crate) fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("sized buffer")
}

/// Inverted dropout on the tape; identity when `rate == 0` or `rng` is absent.
pub(crate) fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = Bernoulli::new(1.0 - rate).map_err(|e| Error::Config(e.to_string()))?;
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let data = (0..n).map(|_| if keep.sample(rng) { 1.0 / (1.0 - rate) } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(shape, data)?)?;
    tape.mul(x, mask)
}

/// Position-wise `W2 gelu(x W1 + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, width: usize, rng: &mut R) -> Self {
        FeedForward {
            w1: store.add_linear_weight(format!("{prefix}.w1"), d_model, width, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, width])),
            w2: store.add_linear_weight(format!("{prefix}.w2"), width, d_model, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d_model])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.w1))?;
        let h = tape.add_row(h, bound.var(self.b1))?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, bound.var(self.w2))?;
        tape.add_row(h, bound.var(self.b2))
    }

    pub fn forward_vec(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = affine(x, store.get(self.w1), Some(store.get(self.b1)))
            .into_iter()
            .map(gelu)
            .collect();
        affine(&h, store.get(self.w2), Some(store.get(self.b2)))
    }
}

/// Per-head key/value rows of every position seen so far by one
/// self-attention sub-layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-norm self-attention sub-layer followed by a pre-norm feed-forward
/// sub-layer, each with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub(crate) attn: AttentionHeads,
    pub(crate) ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, heads: usize, d_k: usize, ffn: usize, rng: &mut R) -> Self {
        SelfAttentionBlock {
            attn: AttentionHeads::new(store, &format!("{prefix}.self"), heads, d_k, rng),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), heads * d_k, ffn, rng),
        }
    }

    /// `x + SelfAttn(LN(x))`.
    pub fn attend<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mask: Option<&AttentionMask>,
        drop: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS)?;
        let a = multi_head(tape, bound, &self.attn, n, n, n, mask)?;
        let a = dropout(tape, a, drop, rng)?;
        tape.add(x, a)
    }

    /// `x + FFN(LN(x))`.
    pub fn feed<R: Rng + ?Sized>(&self, tape: &mut Tape, bound: &Bound, x: Var, drop: f64, rng: Option<&mut R>) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS)?;
        let f = self.ffn.forward(tape, bound, n)?;
        let f = dropout(tape, f, drop, rng)?;
        tape.add(x, f)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mask: Option<&AttentionMask>,
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let h = self.attend(tape, bound, x, mask, drop, rng.as_deref_mut())?;
        self.feed(tape, bound, h, drop, rng)
    }

    /// Causal self-attention for one new position, appending its keys and
    /// values to `cache`.
    pub fn attend_step(&self, store: &ParamStore, x: &[f64], cache: &mut KvCache) -> Vec<f64> {
        let heads = self.attn.heads();
        let d_k = self.attn.d_k();
        let n = layer_norm(x);
        if cache.keys.is_empty() {
            cache.keys = vec![Vec::new(); heads];
            cache.values = vec![Vec::new(); heads];
        }
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut cat = Vec::with_capacity(heads * d_k);
        for h in 0..heads {
            let q = self.attn.project_vec(store, &n, Projection::Query, h);
            cache.keys[h].push(self.attn.project_vec(store, &n, Projection::Key, h));
            cache.values[h].push(self.attn.project_vec(store, &n, Projection::Value, h));
            let scores: Vec<f64> = cache.keys[h].iter().map(|k| dot(&q, k) * scale).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut out = vec![0.0; d_k];
            for (w, v) in exps.iter().zip(&cache.values[h]) {
                out.iter_mut().zip(v).for_each(|(o, x)| *o += w / total * x);
            }
            cat.extend(out);
        }
        let mut y = x.to_vec();
        add_in_place(&mut y, &self.attn.output_vec(store, &cat));
        y
    }

    pub fn feed_step(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        add_in_place(&mut y, &self.ffn.forward_vec(store, &layer_norm(x)));
        y
    }
}

/// Lower-triangular visibility for `n` decoder positions.
pub fn causal_mask(n: usize) -> AttentionMask {
    let visible = (0..n).flat_map(|r| (0..n).map(move |c| c <= r)).collect();
    AttentionMask::new(n, n, visible).expect("square mask")
}
