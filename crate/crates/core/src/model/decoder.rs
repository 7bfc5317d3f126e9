//! Decoder: token embedding, self-attention-only lower layers, and a top
//! layer whose cross-attention is cumulative attention.

use rand::Rng;

use super::config::{ModelConfig, EOS, SOS};
use super::layers::{
    add_in_place, affine, causal_mask, dropout, gaussian, layer_norm, positional_encoding, positional_rows,
    KvCache, SelfAttentionBlock, LN_EPS,
};
use crate::cumulative::CumulativeAttention;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubLayer {
    SelfAttention,
    CrossAttention,
    FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    embed: ParamId,
    lower: Vec<SelfAttentionBlock>,
    top: SelfAttentionBlock,
    cross: CumulativeAttention,
    out_w: ParamId,
    out_b: ParamId,
    vocab: usize,
    d_model: usize,
}

/// Self-attention caches of one incremental decoding session.
#[derive(Clone, Debug, Default)]
pub struct DecoderCache {
    layers: Vec<KvCache>,
    position: usize,
}

impl DecoderCache {
    /// Number of positions processed so far.
    pub fn len(&self) -> usize {
        self.position
    }

    pub fn is_empty(&self) -> bool {
        self.position == 0
    }
}

/// Decoder state at one position, before cross-attention.
#[derive(Clone, Debug)]
pub struct StepState {
    /// Top-layer residual after self-attention.
    pub hidden: Vec<f64>,
    /// `LN(hidden)`: the query for the next cross-attention step.
    pub query: Vec<f64>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model();
        let top_index = cfg.decoder_layers - 1;
        let embed = store.add("dec.embed", gaussian(cfg.vocab, d, 1.0, rng));
        let lower = (0..top_index)
            .map(|l| SelfAttentionBlock::new(store, &format!("dec.{l}"), cfg.heads, cfg.d_k, cfg.ffn, rng))
            .collect();
        let top = SelfAttentionBlock::new(store, &format!("dec.{top_index}"), cfg.heads, cfg.d_k, cfg.ffn, rng);
        let cross = CumulativeAttention::new(store, &format!("dec.{top_index}.cross"), cfg.heads, cfg.d_k, &cfg.selector, rng);
        Decoder {
            embed,
            lower,
            top,
            cross,
            out_w: store.add_linear_weight("out.w", d, cfg.vocab, rng),
            out_b: store.add("out.b", Tensor::zeros(&[1, cfg.vocab])),
            vocab: cfg.vocab,
            d_model: d,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn cross(&self) -> &CumulativeAttention {
        &self.cross
    }

    pub fn cross_mut(&mut self) -> &mut CumulativeAttention {
        &mut self.cross
    }

    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    /// Sub-layers of each decoder layer, bottom first.
    pub fn structure(&self) -> Vec<Vec<SubLayer>> {
        let mut layers = vec![vec![SubLayer::SelfAttention, SubLayer::FeedForward]; self.lower.len()];
        layers.push(vec![SubLayer::SelfAttention, SubLayer::CrossAttention, SubLayer::FeedForward]);
        layers
    }

    fn check_token(&self, id: usize) -> Result<()> {
        if id >= self.vocab {
            return Err(Error::Vocabulary { id, size: self.vocab });
        }
        Ok(())
    }

    /// Teacher-forced pass up to the cross-attention input: returns the
    /// top-layer residual after self-attention and its layer norm, one row
    /// per input token.
    pub fn queries<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[usize],
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        for &t in inputs {
            self.check_token(t)?;
        }
        let n = inputs.len();
        let emb = tape.gather_rows(bound.var(self.embed), inputs)?;
        let pe = tape.constant(positional_rows(&(0..n).collect::<Vec<_>>(), self.d_model))?;
        let mut x = tape.add(emb, pe)?;
        x = dropout(tape, x, drop, rng.as_deref_mut())?;
        let mask = causal_mask(n);
        for layer in &self.lower {
            x = layer.forward(tape, bound, x, Some(&mask), drop, rng.as_deref_mut())?;
        }
        let h = self.top.attend(tape, bound, x, Some(&mask), drop, rng)?;
        let q = tape.layer_norm_rows(h, LN_EPS)?;
        Ok((h, q))
    }

    /// Output logits from the top-layer residual and the cross-attention
    /// contexts (`n × d_m` each).
    pub fn output<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hidden: Var,
        contexts: Var,
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let c = tape.matmul(contexts, bound.var(self.cross.heads().output_weight()))?;
        let c = dropout(tape, c, drop, rng.as_deref_mut())?;
        let h = tape.add(hidden, c)?;
        let h = self.top.feed(tape, bound, h, drop, rng)?;
        let h = tape.layer_norm_rows(h, LN_EPS)?;
        let logits = tape.matmul(h, bound.var(self.out_w))?;
        tape.add_row(logits, bound.var(self.out_b))
    }

    /// Mean token cross-entropy of `targets` (`sos … eos`) given encoder
    /// states `memory` (`T × d_m`). Selector noise and dropout draw from
    /// `rng`; without it the loss is deterministic.
    pub fn decode_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        memory: Var,
        targets: &[usize],
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if targets.len() < 2 {
            return Err(Error::Targets("need at least sos and eos"));
        }
        if targets[0] != SOS || targets[targets.len() - 1] != EOS {
            return Err(Error::Targets("must begin with sos and end with eos"));
        }
        for &t in targets {
            self.check_token(t)?;
        }
        let inputs = &targets[..targets.len() - 1];
        let (h, q) = self.queries(tape, bound, inputs, drop, rng.as_deref_mut())?;
        let steps = self.cross.train_steps(tape, bound, q, memory, memory, rng.as_deref_mut())?;
        let contexts: Vec<Var> = steps.iter().map(|s| s.context).collect();
        let ctx = if contexts.len() == 1 { contexts[0] } else { tape.concat_rows(&contexts)? };
        let logits = self.output(tape, bound, h, ctx, drop, rng)?;
        let logp = tape.log_softmax_rows(logits)?;
        let picked = tape.pick_cols(logp, &targets[1..])?;
        let mean = tape.mean(picked)?;
        tape.scale(mean, -1.0)
    }

    /// Incremental pass for the next position with input `token`.
    pub fn step(&self, store: &ParamStore, cache: &mut DecoderCache, token: usize) -> Result<StepState> {
        self.check_token(token)?;
        if cache.layers.is_empty() {
            cache.layers = vec![KvCache::default(); self.lower.len() + 1];
        }
        let mut x = store.get(self.embed).row_slice(token).to_vec();
        add_in_place(&mut x, &positional_encoding(cache.position, self.d_model));
        for (layer, kv) in self.lower.iter().zip(&mut cache.layers) {
            let h = layer.attend_step(store, &x, kv);
            x = layer.feed_step(store, &h);
        }
        let top_cache = cache.layers.last_mut().expect("top cache");
        let hidden = self.top.attend_step(store, &x, top_cache);
        cache.position += 1;
        Ok(StepState {
            query: layer_norm(&hidden),
            hidden,
        })
    }

    /// Output logits for one position given its cross-attention context.
    pub fn output_step(&self, store: &ParamStore, state: &StepState, context: &[f64]) -> Vec<f64> {
        let mut h = state.hidden.clone();
        add_in_place(&mut h, &self.cross.heads().output_vec(store, context));
        let h = self.top.feed_step(store, &h);
        affine(&layer_norm(&h), store.get(self.out_w), Some(store.get(self.out_b)))
    }
}
