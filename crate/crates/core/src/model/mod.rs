//! Toy streaming Transformer with a cumulative-attention decoder.
//!
//! Pre-norm layers, sinusoidal positions, an affine input front-end, and a
//! decoder whose top layer alone attends to the encoder. The cross-attention
//! query at step `i` is the layer-normalised top-layer residual after
//! self-attention at position `i - 1`.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod session;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::FORMAT_VERSION;
pub use config::{ModelConfig, EOS, SOS};
pub use decoder::{Decoder, DecoderCache, StepState, SubLayer};
pub use encoder::{Encoder, EncoderStream};
pub use layers::{causal_mask, positional_encoding, FeedForward, KvCache, SelfAttentionBlock};
pub use session::{DecodeOptions, DecodeResult, DecoderSession};
pub use train::{Adam, OptimConfig};

use crate::error::Result;
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let decoder = Decoder::new(&mut store, &config, &mut rng);
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Changes the training-time selector noise.
    pub fn set_noise_std(&mut self, std: f64) {
        self.config.selector.noise_std = std;
        self.decoder.cross_mut().selector_mut().set_noise_std(std);
    }

    /// Indices of decoder layers containing a cross-attention sub-layer.
    pub fn cross_attention_layers(&self) -> Vec<usize> {
        self.decoder
            .structure()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(&SubLayer::CrossAttention))
            .map(|(i, _)| i)
            .collect()
    }

    /// Training loss for one utterance. With `rng`, dropout and selector
    /// noise are active; without it the loss is deterministic.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: &Tensor,
        targets: &[usize],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let drop = if rng.is_some() { self.config.dropout } else { 0.0 };
        let x = tape.constant(frames.clone())?;
        let memory = self.encoder.encode(tape, bound, x, drop, rng.as_deref_mut())?;
        self.decoder.decode_train(tape, bound, memory, targets, drop, rng)
    }

    /// Deterministic loss value.
    pub fn loss_value(&self, frames: &Tensor, targets: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false)?;
        let loss = self.loss::<ChaCha8Rng>(&mut tape, &bound, frames, targets, None)?;
        Ok(tape.value(loss).data()[0])
    }

    pub fn encode_stream(&self) -> EncoderStream<'_> {
        EncoderStream::new(&self.encoder, &self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{HaltingPolicy, PolicyKind};
    use crate::model::layers::gaussian;

    fn tiny(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                heads: 2,
                d_k: 4,
                ffn: 16,
                vocab: 6,
                input_dim: 4,
                chunks: "2,2,1".parse().unwrap(),
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn single_cross_attention_at_top() {
        let m = tiny(0);
        assert_eq!(m.cross_attention_layers(), [m.config().decoder_layers - 1]);
    }

    #[test]
    fn zero_output_layer_gives_uniform_loss() {
        let mut m = tiny(1);
        let (w, b) = m.decoder().output_params();
        let (ws, bs) = (m.store().get(w).shape().to_vec(), m.store().get(b).shape().to_vec());
        m.store_mut().set(w, Tensor::zeros(&ws)).unwrap();
        m.store_mut().set(b, Tensor::zeros(&bs)).unwrap();
        let frames = gaussian(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let loss = m.loss_value(&frames, &[SOS, 2, 3, EOS]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_loss() {
        let frames = gaussian(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = tiny(4).loss_value(&frames, &[SOS, 2, 5, EOS]).unwrap();
        let b = tiny(4).loss_value(&frames, &[SOS, 2, 5, EOS]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn forced_eos_gives_empty_hypothesis() {
        let mut m = tiny(2);
        let (_, b) = m.decoder().output_params();
        let mut bias = Tensor::zeros(&[1, 6]);
        bias.data_mut()[EOS] = 1e3;
        m.store_mut().set(b, bias).unwrap();
        let frames = gaussian(7, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        for kind in [PolicyKind::Ca, PolicyKind::Mocha, PolicyKind::Hsdacs] {
            let opts = DecodeOptions {
                policy: HaltingPolicy::new(kind, None),
                max_len: 10,
            };
            let r = m.decode_stream(&frames, &opts).unwrap();
            assert!(r.tokens.is_empty());
            assert_eq!(r.traces.len(), 1);
            assert!(!r.truncated);
        }
    }

    #[test]
    fn decoding_respects_causality_and_max_len() {
        let mut m = tiny(5);
        let (_, b) = m.decoder().output_params();
        let mut bias = Tensor::zeros(&[1, 6]);
        bias.data_mut()[3] = 1e3;
        m.store_mut().set(b, bias).unwrap();
        let frames = gaussian(9, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let opts = DecodeOptions {
            max_len: 4,
            ..Default::default()
        };
        let r = m.decode_stream(&frames, &opts).unwrap();
        assert_eq!(r.tokens, [3, 3, 3, 3]);
        assert!(r.truncated);
        assert!(r.access_log.iter().all(|a| a.index < a.available));
        assert!(r.traces.windows(2).all(|w| w[0].synced <= w[1].synced));
    }

    #[test]
    fn loss_decreases_on_memorisation_set() {
        let mut m = tiny(6);
        m.set_noise_std(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<(Tensor, Vec<usize>)> = (0..5)
            .map(|i| (gaussian(6, 4, 1.0, &mut rng), vec![SOS, 2 + i % 4, 2 + (i + 1) % 4, EOS]))
            .collect();
        let batch: Vec<(&Tensor, &[usize])> = data.iter().map(|(f, t)| (f, t.as_slice())).collect();
        let mean = |m: &Model| data.iter().map(|(f, t)| m.loss_value(f, t).unwrap()).sum::<f64>() / 5.0;
        let before = mean(&m);
        let mut adam = Adam::new(OptimConfig { lr: 1e-2, ..Default::default() }, m.store());
        for _ in 0..100 {
            m.train_batch(&mut adam, &batch, &mut rng).unwrap();
        }
        let after = mean(&m);
        assert!(after < 0.5 * before, "loss {before} -> {after}");
    }
}
