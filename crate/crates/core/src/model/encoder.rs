//! Chunkwise streaming encoder.
//!
//! Each central chunk is encoded by running the full layer stack over its
//! visible window only; frames shared by neighbouring windows are recomputed
//! rather than reused. The states of a chunk are therefore a deterministic
//! function of the window, and the same computation serves training and
//! streaming.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{dropout, positional_rows, SelfAttentionBlock, LN_EPS};
use crate::attention::{AttentionMask, Chunk, ChunkConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Encoder {
    input_w: ParamId,
    input_b: ParamId,
    layers: Vec<SelfAttentionBlock>,
    chunks: ChunkConfig,
    d_model: usize,
    input_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model();
        Encoder {
            input_w: store.add_linear_weight("enc.input.w", cfg.input_dim, d, rng),
            input_b: store.add("enc.input.b", Tensor::zeros(&[1, d])),
            layers: (0..cfg.encoder_layers)
                .map(|l| SelfAttentionBlock::new(store, &format!("enc.{l}"), cfg.heads, cfg.d_k, cfg.ffn, rng))
                .collect(),
            chunks: cfg.chunks,
            d_model: d,
            input_dim: cfg.input_dim,
        }
    }

    pub fn chunks(&self) -> ChunkConfig {
        self.chunks
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs the layer stack over `frames` (`n × input_dim`) placed at the
    /// given absolute positions. Output rows are layer-normalised.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_rows<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: Var,
        positions: &[usize],
        mask: Option<&AttentionMask>,
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let s = tape.shape(frames).to_vec();
        if s[1] != self.input_dim || s[0] != positions.len() {
            return Err(Error::dim("encoder input", &s, &[positions.len(), self.input_dim]));
        }
        let x = tape.matmul(frames, bound.var(self.input_w))?;
        let x = tape.add_row(x, bound.var(self.input_b))?;
        let pe = tape.constant(positional_rows(positions, self.d_model))?;
        let mut x = tape.add(x, pe)?;
        x = dropout(tape, x, drop, rng.as_deref_mut())?;
        for layer in &self.layers {
            x = layer.forward(tape, bound, x, mask, drop, rng.as_deref_mut())?;
        }
        tape.layer_norm_rows(x, LN_EPS)
    }

    /// Encodes one chunk from its window, returning the central rows.
    #[allow(clippy::too_many_arguments)]
    fn encode_chunk<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: Var,
        chunk: Chunk,
        total: usize,
        drop: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let (lo, hi) = self.chunks.window(chunk, total);
        let window = tape.slice_rows(frames, lo, hi - lo)?;
        let positions: Vec<usize> = (lo..hi).collect();
        let states = self.forward_rows(tape, bound, window, &positions, None, drop, rng)?;
        tape.slice_rows(states, chunk.start - lo, chunk.end - chunk.start)
    }

    /// Encoder states for a whole utterance (`T × input_dim` → `T × d_m`),
    /// computed chunk by chunk exactly as in streaming.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: Var,
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let total = tape.shape(frames)[0];
        if total == 0 {
            return Err(Error::EmptyInput("utterance has no frames"));
        }
        let parts = self
            .chunks
            .chunks(total)
            .into_iter()
            .map(|c| self.encode_chunk(tape, bound, frames, c, total, drop, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// Value-level window encoding used by [`EncoderStream`].
    fn encode_window(&self, store: &ParamStore, frames: &[Vec<f64>], chunk: Chunk, total: usize) -> Result<Vec<Vec<f64>>> {
        let (lo, hi) = self.chunks.window(chunk, total);
        let mut tape = Tape::with_checks(false);
        let bound = store.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::from_rows(&frames[lo..hi])?)?;
        let positions: Vec<usize> = (lo..hi).collect();
        let states = self.forward_rows::<rand_chacha::ChaCha8Rng>(&mut tape, &bound, x, &positions, None, 0.0, None)?;
        let v = tape.value(states);
        Ok((chunk.start..chunk.end).map(|t| v.row_slice(t - lo).to_vec()).collect())
    }
}

/// Incremental encoder: frames go in one at a time and each chunk's states
/// come out once its right context has arrived (or the input has ended).
#[derive(Debug)]
pub struct EncoderStream<'a> {
    encoder: &'a Encoder,
    store: &'a ParamStore,
    frames: Vec<Vec<f64>>,
    emitted: usize,
    finished: bool,
}

impl<'a> EncoderStream<'a> {
    pub fn new(encoder: &'a Encoder, store: &'a ParamStore) -> Self {
        EncoderStream {
            encoder,
            store,
            frames: Vec::new(),
            emitted: 0,
            finished: false,
        }
    }

    /// Frames received so far.
    pub fn arrived(&self) -> usize {
        self.frames.len()
    }

    /// Encoder states emitted so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn push(&mut self, frame: &[f64]) -> Result<Vec<Vec<f64>>> {
        if self.finished {
            return Err(Error::Config("frame pushed after end of input".into()));
        }
        if frame.len() != self.encoder.input_dim {
            return Err(Error::dim("encoder frame", &[frame.len()], &[self.encoder.input_dim]));
        }
        self.frames.push(frame.to_vec());
        self.drain()
    }

    /// Marks the end of input and flushes the remaining chunks. An empty
    /// stream yields no states.
    pub fn finish(&mut self) -> Result<Vec<Vec<f64>>> {
        self.finished = true;
        self.drain()
    }

    fn drain(&mut self) -> Result<Vec<Vec<f64>>> {
        let cfg = self.encoder.chunks;
        let arrived = self.frames.len();
        let mut out = Vec::new();
        while self.emitted < arrived {
            let chunk = cfg.chunk_of(self.emitted);
            let ready = if self.finished {
                true
            } else {
                chunk.end.saturating_add(cfg.right) <= arrived
            };
            if !ready {
                break;
            }
            let chunk = Chunk {
                end: chunk.end.min(arrived),
                ..chunk
            };
            out.extend(self.encoder.encode_window(self.store, &self.frames, chunk, arrived)?);
            self.emitted = chunk.end;
        }
        Ok(out)
    }
}
