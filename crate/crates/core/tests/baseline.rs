use ca_stream::baseline::{hsdacs_halt, mocha_halt, mocha_chunk_context};
use ca_stream::cumulative::{HaltReason, HaltRule};
use proptest::prelude::*;

/// Probabilities on a 1/16 grid so sums are exact in any order.
fn streams() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5, 1usize..25).prop_flat_map(|(h, n)| {
        prop::collection::vec(prop::collection::vec((0u32..=16).prop_map(|k| k as f64 / 16.0), n), h)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mocha_layer_halt_is_the_slowest_head(s in streams(), lookahead in prop::option::of(1usize..10), t_prev in 0usize..6, eoi in any::<bool>()) {
        let rule = HaltRule::with_lookahead(lookahead);
        let per_head: Option<Vec<(usize, HaltReason)>> = s.iter().map(|p| rule.scan(p, t_prev, eoi)).collect();
        let got = mocha_halt(&s, 3, lookahead, t_prev, eoi).unwrap();
        match per_head {
            None => prop_assert!(got.is_none()),
            Some(heads) => {
                let got = got.unwrap();
                let halts: Vec<usize> = heads.iter().map(|h| h.0).collect();
                let max = *halts.iter().max().unwrap();
                prop_assert_eq!(&got.head_halts, &halts);
                prop_assert_eq!(got.layer_halt, max);
                prop_assert_eq!(got.synced, t_prev.max(max));
            }
        }
    }

    #[test]
    fn halts_respect_the_lookahead_cap(s in streams(), m in 1usize..10, t_prev in 0usize..6) {
        let cap = t_prev + m;
        if let Some(h) = mocha_halt(&s, 2, Some(m), t_prev, true).unwrap() {
            prop_assert!(h.layer_halt <= cap);
        }
        if let Some(h) = hsdacs_halt(&s, Some(m), t_prev, true).unwrap() {
            prop_assert!(h.halt <= cap);
        }
    }

    #[test]
    fn head_order_does_not_matter(s in streams(), rot in 0usize..4, t_prev in 0usize..4) {
        let mut r = s.clone();
        let k = rot % r.len();
        r.rotate_left(k);
        let a = mocha_halt(&s, 2, Some(8), t_prev, true).unwrap().unwrap();
        let b = mocha_halt(&r, 2, Some(8), t_prev, true).unwrap().unwrap();
        prop_assert_eq!((a.layer_halt, a.reason()), (b.layer_halt, b.reason()));
        prop_assert_eq!(hsdacs_halt(&s, Some(8), t_prev, true).unwrap(), hsdacs_halt(&r, Some(8), t_prev, true).unwrap());
    }

    #[test]
    fn dacs_halts_at_the_first_sufficient_frame(s in streams()) {
        let h = hsdacs_halt(&s, None, 0, true).unwrap().unwrap();
        let n = s[0].len();
        let mut acc = 0.0;
        let mut first = None;
        for j in 0..n {
            acc += s.iter().map(|p| p[j]).sum::<f64>();
            if acc >= s.len() as f64 && first.is_none() {
                first = Some(j + 1);
            }
        }
        match first {
            Some(j) => prop_assert_eq!((h.halt, h.reason), (j, HaltReason::Triggered)),
            None => prop_assert_eq!((h.halt, h.reason), (n, HaltReason::Exhausted)),
        }
    }

    #[test]
    fn chunk_context_is_a_convex_combination(e in prop::collection::vec(-5.0f64..5.0, 1..10), w in 1usize..5, pick in 0usize..10) {
        let n = e.len();
        let halt = pick % n + 1;
        let values: Vec<Vec<f64>> = (0..n).map(|j| vec![j as f64]).collect();
        let c = mocha_chunk_context(&e, &values, halt, w).unwrap()[0];
        let lo = halt.saturating_sub(w) as f64;
        prop_assert!(c >= lo - 1e-12 && c <= (halt - 1) as f64 + 1e-12);
    }
}

#[test]
fn one_dead_head_stalls_mocha_but_not_dacs() {
    let live: Vec<f64> = (1..=30).map(|j| if j >= 4 { 0.99 } else { 0.01 }).collect();
    let dead = vec![1e-6; 30];
    let s = vec![live, dead];
    let m = mocha_halt(&s, 4, Some(12), 0, true).unwrap().unwrap();
    assert_eq!((m.layer_halt, m.reason()), (12, HaltReason::LookaheadCap));
    let d = hsdacs_halt(&s, Some(12), 0, true).unwrap().unwrap();
    assert_eq!((d.halt, d.reason), (5, HaltReason::Triggered));
}
