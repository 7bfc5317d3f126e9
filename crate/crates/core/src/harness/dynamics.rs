//! Constructed streams with one dead head, run through all three halting
//! policies on the same layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::AttentionHeads;
use crate::baseline::{BaselineScanner, HaltingPolicy, PolicyKind};
use crate::cumulative::{
    ca_infer_step, CumulativeAttention, FrameBuffer, HaltReason, HaltRule, HaltingSelector, ProjectedFrame,
    ScanStatus, SelectorConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Energy magnitude of the constructed keys: `sigmoid(±SHARPNESS)`.
const SHARPNESS: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyHalt {
    pub policy: PolicyKind,
    pub halt: usize,
    pub reason: HaltReason,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeadHeadReport {
    pub heads: usize,
    pub fire_at: usize,
    pub lookahead: usize,
    pub frames: usize,
    pub halts: Vec<PolicyHalt>,
}

impl DeadHeadReport {
    pub fn halt_of(&self, policy: PolicyKind) -> Option<&PolicyHalt> {
        self.halts.iter().find(|h| h.policy == policy)
    }
}

/// `heads` heads over `frames` frames with identity projections. Every
/// head but the last attends (`a ≈ 1`) from frame `fire_at` on; the last
/// head never does (`a ≈ 0`). The selector halts once any live head has
/// accumulated one value vector.
pub fn dead_head_scenario(heads: usize, fire_at: usize, lookahead: usize, frames: usize) -> Result<DeadHeadReport> {
    if heads < 2 || fire_at == 0 || fire_at > frames || lookahead == 0 {
        return Err(Error::Config(format!(
            "dead-head scenario needs heads >= 2 and 1 <= fire_at <= frames, lookahead >= 1 (got {heads}, {fire_at}, {frames}, {lookahead})"
        )));
    }
    let d_k = 2;
    let mut store = ParamStore::new();
    let att = AttentionHeads::identity(&mut store, "demo.attn", heads, d_k);
    let cfg = SelectorConfig {
        noise_std: 0.0,
        ..Default::default()
    };
    let mut selector = HaltingSelector::new(&mut store, "demo.selector", heads * d_k, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let (w, b) = selector.layer_params()[0];
    let weight: Vec<f64> = (0..heads * d_k).map(|i| if i % d_k == 0 { 1.0 } else { 0.0 }).collect();
    store.set(w, Tensor::column(weight))?;
    store.set(b, Tensor::scalar(0.0))?;
    store.set(selector.bias_param(), Tensor::scalar(-0.5))?;
    selector.set_noise_std(0.0);
    let layer = CumulativeAttention::from_parts(att, selector, false);

    let scale = SHARPNESS * (d_k as f64).sqrt();
    let projected: Vec<ProjectedFrame> = (1..=frames)
        .map(|j| ProjectedFrame {
            keys: (0..heads)
                .map(|h| {
                    let live = h + 1 < heads && j >= fire_at;
                    vec![if live { scale } else { -scale }, 0.0]
                })
                .collect(),
            values: vec![vec![1.0, 0.0]; heads],
        })
        .collect();
    let buffer = FrameBuffer::complete(projected);
    let query: Vec<f64> = (0..heads).flat_map(|_| [1.0, 0.0]).collect();

    let mut halts = Vec::new();
    let ca = ca_infer_step(&layer, &store, &query, &buffer, 1, 0, HaltRule::with_lookahead(Some(lookahead)))?;
    halts.push(PolicyHalt {
        policy: PolicyKind::Ca,
        halt: ca.trace.halt,
        reason: ca.trace.reason,
    });
    for kind in [PolicyKind::Mocha, PolicyKind::Hsdacs] {
        let policy = HaltingPolicy::new(kind, Some(lookahead));
        let mut scanner = BaselineScanner::new(&layer, &store, policy, &query, 1, 0)?;
        match scanner.advance(&buffer, true)? {
            ScanStatus::Halted(out) => halts.push(PolicyHalt {
                policy: kind,
                halt: out.trace.halt,
                reason: out.trace.reason,
            }),
            ScanStatus::NeedMore => unreachable!("complete input always halts"),
        }
    }
    Ok(DeadHeadReport {
        heads,
        fire_at,
        lookahead,
        frames,
        halts,
    })
}
