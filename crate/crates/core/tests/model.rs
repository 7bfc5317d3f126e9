use ca_stream::attention::{AttentionMask, ChunkConfig};
use ca_stream::baseline::{HaltingPolicy, PolicyKind};
use ca_stream::cumulative::SelectorConfig;
use ca_stream::model::{DecodeOptions, Model, ModelConfig, SubLayer, EOS, FORMAT_VERSION, SOS};
use ca_stream::numerics::{grad_check, Bound, GradCheckOptions, Tape, Tensor};
use ca_stream::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(chunks: ChunkConfig, bias: f64) -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        d_k: 4,
        ffn: 16,
        vocab: 7,
        input_dim: 5,
        chunks,
        selector: SelectorConfig {
            bias_init: bias,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn frames(seed: u64, t: usize, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(t, dim, (0..t * dim).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn chunk_config() -> impl Strategy<Value = ChunkConfig> {
    (1usize..5, 1usize..5, 0usize..3).prop_map(|(l, c, r)| ChunkConfig::new(l, c, r).unwrap())
}

/// One masked pass over all chunk windows laid end to end, each keeping
/// its absolute positions; a block-diagonal mask keeps windows apart.
fn block_diagonal_oracle(model: &Model, x: &Tensor) -> Vec<Vec<f64>> {
    let cfg = model.config().chunks;
    let total = x.rows();
    let chunks = cfg.chunks(total);
    let mut rows = Vec::new();
    let mut positions = Vec::new();
    let mut sizes = Vec::new();
    let mut central = Vec::new();
    for c in &chunks {
        let (lo, hi) = cfg.window(*c, total);
        let offset = rows.len();
        for t in lo..hi {
            rows.push(x.row_slice(t).to_vec());
            positions.push(t);
        }
        sizes.push(hi - lo);
        central.extend((c.start..c.end).map(|t| offset + t - lo));
    }
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, false).unwrap();
    let input = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
    let mask = AttentionMask::block_diagonal(&sizes);
    let out = model
        .encoder()
        .forward_rows::<ChaCha8Rng>(&mut tape, &bound, input, &positions, Some(&mask), 0.0, None)
        .unwrap();
    central.iter().map(|&r| tape.value(out).row_slice(r).to_vec()).collect()
}

fn streamed(model: &Model, x: &Tensor) -> Vec<Vec<f64>> {
    let mut s = model.encode_stream();
    let mut out = Vec::new();
    for t in 0..x.rows() {
        out.extend(s.push(x.row_slice(t)).unwrap());
    }
    out.extend(s.finish().unwrap());
    out
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn streamed_encoder_matches_masked_oracle(cfg in chunk_config(), t in 1usize..20, seed in 0u64..500) {
        let model = Model::new(config(cfg, -4.0), seed).unwrap();
        let x = frames(seed + 1, t, 5);
        let got = streamed(&model, &x);
        prop_assert!(max_diff(&got, &block_diagonal_oracle(&model, &x)) < 1e-10);

        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let enc = model.encoder().encode::<ChaCha8Rng>(&mut tape, &bound, xv, 0.0, None).unwrap();
        let batch: Vec<Vec<f64>> = (0..t).map(|r| tape.value(enc).row_slice(r).to_vec()).collect();
        prop_assert!(max_diff(&got, &batch) < 1e-12);
    }

    #[test]
    fn encoder_state_ignores_frames_beyond_its_window(cfg in chunk_config(), t in 2usize..20, seed in 0u64..500) {
        let model = Model::new(config(cfg, -4.0), seed).unwrap();
        let x = frames(seed, t, 5);
        let base = streamed(&model, &x);
        let mut y = x.clone();
        let last = t - 1;
        for d in 0..5 {
            y.data_mut()[last * 5 + d] += 3.0;
        }
        let moved = streamed(&model, &y);
        for s in 0..t {
            let (_, hi) = cfg.window(cfg.chunk_of(s), t);
            if hi <= last {
                prop_assert_eq!(&base[s], &moved[s]);
            }
        }
    }

    #[test]
    fn streaming_decode_equals_full_input_decode(
        cfg in chunk_config(),
        t in 1usize..24,
        seed in 0u64..500,
        bias in -1.0f64..1.5,
        kind in prop_oneof![Just(PolicyKind::Ca), Just(PolicyKind::Mocha), Just(PolicyKind::Hsdacs)],
        lookahead in prop::option::of(1usize..8),
    ) {
        let model = Model::new(config(cfg, bias), seed).unwrap();
        let x = frames(seed ^ 7, t, 5);
        let opts = DecodeOptions { policy: HaltingPolicy::new(kind, lookahead), max_len: 8 };
        let a = model.decode_stream(&x, &opts).unwrap();
        let b = model.decode_offline(&x, &opts).unwrap();
        prop_assert_eq!(&a.tokens, &b.tokens);
        prop_assert_eq!(a.truncated, b.truncated);
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            prop_assert_eq!((ta.halt, ta.synced, ta.reason), (tb.halt, tb.synced, tb.reason));
            for (p, q) in ta.probs.iter().zip(&tb.probs) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
        prop_assert_eq!(a.traces.len(), b.traces.len());
    }

    #[test]
    fn stream_reads_only_computed_states(cfg in chunk_config(), t in 1usize..24, seed in 0u64..500, bias in -1.0f64..1.5) {
        let model = Model::new(config(cfg, bias), seed).unwrap();
        let x = frames(seed, t, 5);
        let r = model.decode_stream(&x, &DecodeOptions { max_len: 8, ..Default::default() }).unwrap();
        // States ready after n arrivals: every chunk whose window end has arrived.
        for (n, &avail) in (1..=t).zip(&r.availability) {
            let ready = if n == t {
                t
            } else {
                (0..t).filter(|&s| cfg.ready_at(cfg.chunk_of(s), t) <= n).count()
            };
            prop_assert_eq!(avail, ready);
        }
        prop_assert!(r.access_log.iter().all(|a| a.index < a.available));
        // Synchronised positions never move back and never pass what had arrived.
        let mut prev = 0;
        for (tr, &n) in r.traces.iter().zip(&r.arrivals) {
            prop_assert!(tr.synced >= prev);
            prop_assert!(tr.halt <= r.availability[n - 1]);
            prev = tr.synced;
        }
    }
}

#[test]
fn exactly_one_cross_attention_layer_at_the_top() {
    for layers in 1..=4 {
        let cfg = ModelConfig {
            decoder_layers: layers,
            ..config(ChunkConfig::default(), -4.0)
        };
        let model = Model::new(cfg, 0).unwrap();
        assert_eq!(model.cross_attention_layers(), [layers - 1]);
        let s = model.decoder().structure();
        let count = s.iter().flatten().filter(|l| **l == SubLayer::CrossAttention).count();
        assert_eq!(count, 1);
    }
}

#[test]
fn every_step_has_one_shared_halt() {
    let model = Model::new(config(ChunkConfig::new(2, 3, 1).unwrap(), 0.5), 4).unwrap();
    let r = model.decode_stream(&frames(3, 15, 5), &DecodeOptions::default()).unwrap();
    for (i, tr) in r.traces.iter().enumerate() {
        assert_eq!(tr.step, i + 1);
        assert_eq!(tr.probs.len(), tr.halt);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        heads: 2,
        d_k: 4,
        ffn: 8,
        vocab: 6,
        input_dim: 3,
        chunks: ChunkConfig::new(2, 2, 1).unwrap(),
        selector: SelectorConfig {
            noise_std: 0.0,
            bias_init: -1.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = Model::new(cfg, 11).unwrap();
    let x = frames(5, 6, 3);
    let targets = [SOS, 3, 5, EOS];
    let leaves: Vec<Tensor> = model.store().iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |tape: &mut Tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            model.loss::<ChaCha8Rng>(tape, &bound, &x, &targets, None)
        },
        &leaves,
        GradCheckOptions::with_tol(1e-4),
    )
    .unwrap();
    assert!(report.passed(), "max relative error {}", report.max_rel_err());
}

#[test]
fn checkpoint_round_trip_preserves_behaviour() {
    let model = Model::new(config(ChunkConfig::new(3, 4, 2).unwrap(), 0.3), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let x = frames(1, 13, 5);
    let targets = [SOS, 2, 4, EOS];
    assert_eq!(back.loss_value(&x, &targets).unwrap(), model.loss_value(&x, &targets).unwrap());
    let opts = DecodeOptions::default();
    assert_eq!(back.decode_stream(&x, &opts).unwrap(), model.decode_stream(&x, &opts).unwrap());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains(&format!("\"format_version\": {FORMAT_VERSION}")) || text.contains(&format!("\"format_version\":{FORMAT_VERSION}")));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = Model::new(config(ChunkConfig::default(), -4.0), 1).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    v["format_version"] = serde_json::json!(99);
    assert!(Model::from_json(&v.to_string()).is_err());
    assert!(Model::from_json("{").is_err());
}

#[test]
fn decoding_needs_input() {
    let model = Model::new(config(ChunkConfig::default(), -4.0), 1).unwrap();
    let empty = Tensor::zeros(&[0, 5]);
    assert!(matches!(model.decode_stream(&empty, &DecodeOptions::default()), Err(Error::NoInput)));
    let wide = frames(0, 3, 6);
    assert!(model.decode_stream(&wide, &DecodeOptions::default()).is_err());
}
