//! Corpus-level latency: mean of `b̂ − b` over correctly decoded tokens,
//! where `b̂` is the last frame of the look-ahead window of the chunk that
//! holds the synchronised halting position and `b` is the reference
//! boundary.

use serde::{Deserialize, Serialize};

use crate::attention::ChunkConfig;
use crate::cumulative::HaltingTrace;
use crate::error::{Error, Result};

/// Emission frame (1-based count of frames needed) for a step that halted
/// with synchronised position `synced` in an utterance of `total` frames.
pub fn emission_frame(synced: usize, chunks: &ChunkConfig, total: usize) -> usize {
    let t = synced.clamp(1, total.max(1));
    chunks.ready_at(chunks.chunk_of(t - 1), total)
}

pub fn emission_boundary(trace: &HaltingTrace, chunks: &ChunkConfig, total: usize) -> usize {
    emission_frame(trace.synced, chunks, total)
}

/// Edit-distance alignment; returns the `(hyp, ref)` index pairs aligned
/// as exact matches. Ties prefer the diagonal.
pub fn aligned_matches(hyp: &[usize], reference: &[usize]) -> Vec<(usize, usize)> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut pairs = Vec::new();
    while i > 0 && j > 0 {
        let same = hyp[i - 1] == reference[j - 1];
        if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
            if same {
                pairs.push((i - 1, j - 1));
            }
            i -= 1;
            j -= 1;
        } else if d[i][j] == d[i - 1][j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    for (i, h) in hyp.iter().enumerate() {
        let mut cur = vec![i + 1; reference.len() + 1];
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(h != r)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[reference.len()]
}

/// Decoding output of one utterance with its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub utt_id: usize,
    pub hyp: Vec<usize>,
    pub reference: Vec<usize>,
    /// Reference boundaries, 1-based, one per reference token.
    pub boundaries: Vec<usize>,
    /// One per decoding step; `traces[k]` emitted `hyp[k]`.
    pub traces: Vec<HaltingTrace>,
    pub frames: usize,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLatency {
    pub utt_id: usize,
    /// Index into the reference sequence.
    pub token_idx: usize,
    pub token: usize,
    pub b_hat: usize,
    pub b_ref: usize,
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub tokens: Vec<TokenLatency>,
    /// Mean `b̂ − b` over included tokens, in frames.
    pub mean: f64,
    pub included: usize,
    pub reference_tokens: usize,
}

pub fn corpus_latency(utterances: &[UtteranceResult], chunks: &ChunkConfig) -> Result<LatencyReport> {
    let mut tokens = Vec::new();
    let mut reference_tokens = 0;
    for u in utterances {
        if u.boundaries.len() != u.reference.len() || u.traces.len() < u.hyp.len() {
            return Err(Error::dim(
                "corpus_latency",
                &[u.reference.len(), u.boundaries.len()],
                &[u.hyp.len(), u.traces.len()],
            ));
        }
        reference_tokens += u.reference.len();
        for (k, i) in aligned_matches(&u.hyp, &u.reference) {
            let b_hat = emission_boundary(&u.traces[k], chunks, u.frames);
            let b_ref = u.boundaries[i];
            tokens.push(TokenLatency {
                utt_id: u.utt_id,
                token_idx: i,
                token: u.reference[i],
                b_hat,
                b_ref,
                delta: b_hat as i64 - b_ref as i64,
            });
        }
    }
    if tokens.is_empty() {
        return Err(Error::UndefinedLatency);
    }
    let sum: i64 = tokens.iter().map(|t| t.delta).sum();
    Ok(LatencyReport {
        mean: sum as f64 / tokens.len() as f64,
        included: tokens.len(),
        reference_tokens,
        tokens,
    })
}

/// `1 − edits / reference tokens` over a corpus.
pub fn token_accuracy(utterances: &[UtteranceResult]) -> f64 {
    let (edits, total) = utterances
        .iter()
        .fold((0, 0), |(e, n), u| (e + edit_distance(&u.hyp, &u.reference), n + u.reference.len()));
    if total == 0 {
        return 1.0;
    }
    1.0 - edits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cumulative::HaltReason;

    fn trace(synced: usize) -> HaltingTrace {
        HaltingTrace::new(1, vec![0.9], synced, 0, HaltReason::Triggered, synced)
    }

    #[test]
    fn boundary_examples() {
        let c = ChunkConfig::new(4, 4, 2).unwrap();
        assert_eq!(emission_frame(5, &c, 20), 10);
        assert_eq!(emission_frame(6, &c, 20), 10);
        assert_eq!(emission_frame(20, &c, 20), 20);
        assert_eq!(emission_frame(3, &ChunkConfig::full(), 37), 37);
    }

    #[test]
    fn boundary_is_monotone() {
        let c = ChunkConfig::new(3, 5, 2).unwrap();
        let b: Vec<usize> = (1..=30).map(|t| emission_frame(t, &c, 30)).collect();
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
        assert!(b.iter().zip(1..).all(|(&e, t)| e >= t));
    }

    #[test]
    fn hand_checked_mean() {
        let u = UtteranceResult {
            utt_id: 0,
            hyp: vec![5, 6],
            reference: vec![5, 6],
            boundaries: vec![8, 15],
            traces: vec![trace(10), trace(20)],
            frames: 30,
            truncated: false,
        };
        let r = corpus_latency(std::slice::from_ref(&u), &ChunkConfig::new(1, 1, 0).unwrap()).unwrap();
        assert_eq!(r.mean, 3.5);
        assert_eq!(r.included, 2);
        let zero = UtteranceResult {
            boundaries: vec![10, 20],
            ..u.clone()
        };
        assert_eq!(corpus_latency(&[zero], &ChunkConfig::new(1, 1, 0).unwrap()).unwrap().mean, 0.0);
        let wrong = UtteranceResult { hyp: vec![7, 8], ..u };
        assert!(matches!(
            corpus_latency(&[wrong], &ChunkConfig::default()),
            Err(Error::UndefinedLatency)
        ));
    }

    #[test]
    fn alignment_skips_insertions_and_substitutions() {
        assert_eq!(aligned_matches(&[1, 9, 2, 3], &[1, 2, 3]), [(0, 0), (2, 1), (3, 2)]);
        assert_eq!(aligned_matches(&[1, 7, 3], &[1, 2, 3]), [(0, 0), (2, 2)]);
        assert_eq!(aligned_matches(&[], &[1]), []);
        assert_eq!(edit_distance(&[1, 9, 2, 3], &[1, 2, 3]), 1);
    }
}
