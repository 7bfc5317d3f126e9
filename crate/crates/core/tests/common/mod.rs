//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ca_stream::attention::ChunkConfig;
use ca_stream::cumulative::{HaltReason, HaltingTrace};
use ca_stream::harness::UtteranceResult;
use rand::Rng;

/// Every matched `(hyp, ref)` set over all minimum-cost alignments, from a
/// suffix-cost table.
pub fn optimal_match_sets(hyp: &[usize], reference: &[usize]) -> BTreeSet<Vec<(usize, usize)>> {
    let (n, m) = (hyp.len(), reference.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let diag = cost[i + 1][j + 1] + usize::from(hyp[i] != reference[j]);
                diag.min(cost[i + 1][j] + 1).min(cost[i][j + 1] + 1)
            };
        }
    }
    let mut out = BTreeSet::new();
    walk(hyp, reference, &cost, 0, 0, &mut Vec::new(), &mut out);
    out
}

fn walk(
    hyp: &[usize],
    reference: &[usize],
    cost: &[Vec<usize>],
    i: usize,
    j: usize,
    path: &mut Vec<(usize, usize)>,
    out: &mut BTreeSet<Vec<(usize, usize)>>,
) {
    let (n, m) = (hyp.len(), reference.len());
    if i == n && j == m {
        out.insert(path.clone());
        return;
    }
    if i < n && j < m {
        let same = hyp[i] == reference[j];
        if cost[i][j] == cost[i + 1][j + 1] + usize::from(!same) {
            if same {
                path.push((i, j));
            }
            walk(hyp, reference, cost, i + 1, j + 1, path, out);
            if same {
                path.pop();
            }
        }
    }
    if i < n && cost[i][j] == cost[i + 1][j] + 1 {
        walk(hyp, reference, cost, i + 1, j, path, out);
    }
    if j < m && cost[i][j] == cost[i][j + 1] + 1 {
        walk(hyp, reference, cost, i, j + 1, path, out);
    }
}

/// Frames needed to emit a token whose step synchronised at `t` (1-based):
/// the end of that frame's chunk plus the right context, capped at `total`.
pub fn naive_emission(t: usize, chunks: &ChunkConfig, total: usize) -> usize {
    if chunks.is_full() {
        return total;
    }
    let t = t.max(1).min(total);
    let chunk_end = ((t - 1) / chunks.central + 1) * chunks.central;
    (chunk_end + chunks.right).min(total)
}

/// `(Σ (b̂ − b), count)` over matched tokens, with synchronised positions
/// recomputed from the raw halts. `None` if some utterance has an
/// ambiguous match set.
pub fn naive_latency(utts: &[UtteranceResult], chunks: &ChunkConfig) -> Option<(i64, usize)> {
    let (mut sum, mut count) = (0i64, 0usize);
    for u in utts {
        let sets = optimal_match_sets(&u.hyp, &u.reference);
        if sets.len() != 1 {
            return None;
        }
        let mut synced = Vec::new();
        let mut frontier = 0;
        for tr in &u.traces {
            frontier = frontier.max(tr.halt);
            synced.push(frontier);
        }
        for &(k, r) in sets.iter().next().unwrap() {
            sum += naive_emission(synced[k], chunks, u.frames) as i64 - u.boundaries[r] as i64;
            count += 1;
        }
    }
    Some((sum, count))
}

/// Traces for a sequence of raw halting positions, chaining `t_prev`.
pub fn traces_from_halts(halts: &[usize]) -> Vec<HaltingTrace> {
    let mut t_prev = 0;
    halts
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let tr = HaltingTrace::new(i + 1, vec![0.9; h], h, t_prev, HaltReason::Triggered, h);
            t_prev = tr.synced;
            tr
        })
        .collect()
}

/// A random corpus of 1 to 4 utterances with a random chunk config.
pub fn random_latency_case<R: Rng>(rng: &mut R) -> (Vec<UtteranceResult>, ChunkConfig) {
    let chunks = if rng.random_bool(0.1) {
        ChunkConfig::full()
    } else {
        ChunkConfig::new(rng.random_range(1..6), rng.random_range(1..9), rng.random_range(0..5)).unwrap()
    };
    let n = rng.random_range(1..=4);
    let utts = (0..n)
        .map(|utt_id| {
            let r_len = rng.random_range(1..=6);
            let mut pool: Vec<usize> = (2..12).collect();
            let reference: Vec<usize> = (0..r_len).map(|_| pool.swap_remove(rng.random_range(0..pool.len()))).collect();
            let mut b = 0;
            let boundaries: Vec<usize> = reference
                .iter()
                .map(|_| {
                    b += rng.random_range(1..=6);
                    b
                })
                .collect();
            let frames = b + rng.random_range(0..4);
            let h_len = rng.random_range(0..=7);
            let hyp: Vec<usize> = (0..h_len)
                .map(|k| {
                    if k < r_len && rng.random_bool(0.7) {
                        reference[k]
                    } else {
                        rng.random_range(2..14)
                    }
                })
                .collect();
            let halts: Vec<usize> = (0..=h_len).map(|_| rng.random_range(1..=frames)).collect();
            UtteranceResult {
                utt_id,
                hyp,
                reference,
                boundaries,
                traces: traces_from_halts(&halts),
                frames,
                truncated: false,
            }
        })
        .collect();
    (utts, chunks)
}
