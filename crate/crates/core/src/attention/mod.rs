//! Dot-product and multi-head attention, plus the per-frame sigmoid energies
//! used by streaming attention.

mod mask;

use rand::Rng;

pub use mask::{chunk_mask, AttentionMask, Chunk, ChunkConfig, UNBOUNDED};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// `softmax(Q Kᵀ / sqrt(d_k)) V`. Masked keys receive exactly zero weight;
/// a query row with no visible key is an error.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&AttentionMask>) -> Result<Var> {
    let weights = attention_weights(tape, q, k, mask)?;
    tape.matmul(weights, v)
}

/// The softmax weight matrix of [`scaled_dot_attention`].
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, mask: Option<&AttentionMask>) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs[1] != ks[1] {
        return Err(Error::dim("scaled_dot_attention", &qs, &ks));
    }
    if let Some(m) = mask {
        if (m.rows(), m.cols()) != (qs[0], ks[0]) {
            return Err(Error::dim("attention mask", &[m.rows(), m.cols()], &[qs[0], ks[0]]));
        }
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    tape.softmax_rows(scores, mask.map(AttentionMask::as_slice))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

/// Per-head `d_k × d_k` projections applied to the head's slice of the
/// `d_m = H·d_k` input, and a `d_m × d_m` output projection.
#[derive(Clone, Debug)]
pub struct AttentionHeads {
    heads: usize,
    d_k: usize,
    w_q: Vec<ParamId>,
    w_k: Vec<ParamId>,
    w_v: Vec<ParamId>,
    w_o: ParamId,
}

impl AttentionHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, heads: usize, d_k: usize, rng: &mut R) -> Self {
        let per_head = |name: &str, store: &mut ParamStore, rng: &mut R| -> Vec<ParamId> {
            (0..heads)
                .map(|h| store.add_linear_weight(format!("{prefix}.{name}.{h}"), d_k, d_k, rng))
                .collect()
        };
        let w_q = per_head("w_q", store, rng);
        let w_k = per_head("w_k", store, rng);
        let w_v = per_head("w_v", store, rng);
        let d_m = heads * d_k;
        let w_o = store.add_linear_weight(format!("{prefix}.w_o"), d_m, d_m, rng);
        AttentionHeads {
            heads,
            d_k,
            w_q,
            w_k,
            w_v,
            w_o,
        }
    }

    /// All projections set to the identity.
    pub fn identity(store: &mut ParamStore, prefix: &str, heads: usize, d_k: usize) -> Self {
        let eye = |store: &mut ParamStore, name: String, n: usize| store.add(name, Tensor::identity(n));
        let w_q = (0..heads).map(|h| eye(store, format!("{prefix}.w_q.{h}"), d_k)).collect();
        let w_k = (0..heads).map(|h| eye(store, format!("{prefix}.w_k.{h}"), d_k)).collect();
        let w_v = (0..heads).map(|h| eye(store, format!("{prefix}.w_v.{h}"), d_k)).collect();
        let w_o = eye(store, format!("{prefix}.w_o"), heads * d_k);
        AttentionHeads {
            heads,
            d_k,
            w_q,
            w_k,
            w_v,
            w_o,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn weight(&self, which: Projection, head: usize) -> ParamId {
        match which {
            Projection::Query => self.w_q[head],
            Projection::Key => self.w_k[head],
            Projection::Value => self.w_v[head],
        }
    }

    pub fn output_weight(&self) -> ParamId {
        self.w_o
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s[1] != self.d_model() {
            return Err(Error::dim("attention heads", s, &[s[0], self.d_model()]));
        }
        Ok(())
    }

    /// Head `h` projection of `x` (`n × d_m`), giving `n × d_k`.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, x: Var, which: Projection, head: usize) -> Result<Var> {
        self.check_width(tape, x)?;
        let slice = tape.slice_cols(x, head * self.d_k, self.d_k)?;
        tape.matmul(slice, bound.var(self.weight(which, head)))
    }

    /// Value-level projection of one `d_m` vector for head `h`.
    pub fn project_vec(&self, store: &ParamStore, x: &[f64], which: Projection, head: usize) -> Vec<f64> {
        let w = store.get(self.weight(which, head));
        let xs = &x[head * self.d_k..(head + 1) * self.d_k];
        let mut out = vec![0.0; self.d_k];
        for (i, &xv) in xs.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row_slice(i)) {
                *o += xv * wv;
            }
        }
        out
    }

    /// Value-level output projection of one `d_m` vector.
    pub fn output_vec(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.w_o);
        let mut out = vec![0.0; self.d_model()];
        for (i, &xv) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row_slice(i)) {
                *o += xv * wv;
            }
        }
        out
    }
}

/// `Concat(head_1, ..., head_H) W_O` with each head a scaled dot-product
/// attention over its projected slice.
pub fn multi_head(
    tape: &mut Tape,
    bound: &Bound,
    heads: &AttentionHeads,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.heads());
    for h in 0..heads.heads() {
        let qh = heads.project(tape, bound, q, Projection::Query, h)?;
        let kh = heads.project(tape, bound, k, Projection::Key, h)?;
        let vh = heads.project(tape, bound, v, Projection::Value, h)?;
        outs.push(scaled_dot_attention(tape, qh, kh, vh, mask)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, bound.var(heads.output_weight()))
}

/// Streaming attention energy `q·k / sqrt(d_k)` for one frame.
pub fn monotonic_energy(q_prev: &[f64], k: &[f64], d_k: usize) -> Result<f64> {
    if q_prev.len() != d_k || k.len() != d_k {
        return Err(Error::dim("monotonic_energy", &[q_prev.len()], &[k.len(), d_k]));
    }
    Ok(dot(q_prev, k) / (d_k as f64).sqrt())
}

/// Sigmoid of an energy: a per-frame relevance in (0, 1) that needs no
/// other frame.
pub fn monotonic_weight(energy: f64) -> f64 {
    sigmoid(energy)
}

/// Batched sigmoid weights `sigmoid(Q Kᵀ / sqrt(d_k))`, `L × T`.
pub fn monotonic_weights(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs[1] != ks[1] {
        return Err(Error::dim("monotonic_weights", &qs, &ks));
    }
    let kt = tape.transpose(k)?;
    let e = tape.matmul(q, kt)?;
    let e = tape.scale(e, 1.0 / (qs[1] as f64).sqrt())?;
    tape.sigmoid(e)
}
