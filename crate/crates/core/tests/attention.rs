use ca_stream::attention::{
    chunk_mask, monotonic_energy, monotonic_weight, monotonic_weights, multi_head, scaled_dot_attention, AttentionHeads,
    AttentionMask, ChunkConfig,
};
use ca_stream::numerics::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn chunk_config() -> impl Strategy<Value = ChunkConfig> {
    (1usize..6, 1usize..6, 0usize..4).prop_map(|(l, c, r)| ChunkConfig::new(l, c, r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_keys_do_not_influence_output(
        q in matrix(4, 3),
        k in matrix(6, 3),
        v in matrix(6, 2),
        noise in matrix(6, 2),
        visible in prop::collection::vec(any::<bool>(), 24),
    ) {
        let mut visible = visible;
        for r in 0..4 {
            visible[r * 6 + r] = true;
        }
        let mask = AttentionMask::new(4, 6, visible.clone()).unwrap();
        // Perturb only the value rows every query has masked out.
        let mut v2 = v.clone();
        for c in 0..6 {
            if (0..4).all(|r| !visible[r * 6 + c]) {
                for d in 0..2 {
                    v2.data_mut()[c * 2 + d] += noise.get(c, d);
                }
            }
        }
        let run = |v: Tensor| {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.constant(q.clone()).unwrap(), t.constant(k.clone()).unwrap(), t.constant(v).unwrap());
            let out = scaled_dot_attention(&mut t, qv, kv, vv, Some(&mask)).unwrap();
            t.value(out).clone()
        };
        prop_assert_eq!(run(v), run(v2));
    }

    #[test]
    fn single_identity_head_is_plain_attention(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 4)) {
        let mut store = ParamStore::new();
        let heads = AttentionHeads::identity(&mut store, "h", 1, 4);
        let mut t = Tape::new();
        let bound = store.bind(&mut t, false).unwrap();
        let (qv, kv, vv) = (t.constant(q).unwrap(), t.constant(k).unwrap(), t.constant(v).unwrap());
        let a = multi_head(&mut t, &bound, &heads, qv, kv, vv, None).unwrap();
        let b = scaled_dot_attention(&mut t, qv, kv, vv, None).unwrap();
        prop_assert_eq!(t.value(a).data(), t.value(b).data());
    }

    #[test]
    fn batched_sigmoid_weights_match_per_frame(q in matrix(3, 4), k in matrix(7, 4)) {
        let mut t = Tape::new();
        let (qv, kv) = (t.constant(q.clone()).unwrap(), t.constant(k.clone()).unwrap());
        let w = monotonic_weights(&mut t, qv, kv).unwrap();
        let w = t.value(w);
        for i in 0..3 {
            for j in 0..7 {
                let e = monotonic_energy(q.row_slice(i), k.row_slice(j), 4).unwrap();
                let a = monotonic_weight(e);
                prop_assert!((w.get(i, j) - a).abs() < 1e-15);
                prop_assert!(a > 0.0 && a < 1.0);
            }
        }
    }

    #[test]
    fn chunk_mask_respects_window(cfg in chunk_config(), total in 1usize..30) {
        let m = chunk_mask(total, &cfg);
        for t in 0..total {
            let chunk = cfg.chunk_of(t);
            let hi = (chunk.end + cfg.right).min(total);
            let lo = chunk.start.saturating_sub(cfg.left);
            prop_assert!(m.get(t, t));
            for s in 0..total {
                prop_assert_eq!(m.get(t, s), lo <= s && s < hi);
            }
            prop_assert_eq!(cfg.ready_at(chunk, total), hi);
        }
    }

    #[test]
    fn chunks_tile_the_input(cfg in chunk_config(), total in 0usize..40) {
        let chunks = cfg.chunks(total);
        let mut next = 0;
        for c in &chunks {
            prop_assert_eq!(c.start, next);
            prop_assert!(c.end > c.start && c.end - c.start <= cfg.central);
            next = c.end;
        }
        prop_assert_eq!(next, total);
    }
}

#[test]
fn full_config_sees_everything() {
    let m = chunk_mask(9, &ChunkConfig::full());
    assert!(m.as_slice().iter().all(|&v| v));
}

#[test]
fn fully_masked_row_is_an_error() {
    let mut t = Tape::new();
    let q = t.constant(Tensor::row(vec![1.0])).unwrap();
    let k = t.constant(Tensor::column(vec![1.0, 2.0])).unwrap();
    let mask = AttentionMask::new(1, 2, vec![false, false]).unwrap();
    assert!(scaled_dot_attention(&mut t, q, k, k, Some(&mask)).is_err());
}
