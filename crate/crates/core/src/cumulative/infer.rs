//! Streaming inference for cumulative attention.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{CumulativeAttention, InterimContext};
use crate::attention::Projection;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, ParamStore};

/// Halting fires at the first frame with `p >= HALT_THRESHOLD`.
pub const HALT_THRESHOLD: f64 = 0.5;

/// Per-head key and value projections of one encoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFrame {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl ProjectedFrame {
    pub fn project(layer: &CumulativeAttention, store: &ParamStore, state: &[f64]) -> Self {
        let heads = layer.heads();
        ProjectedFrame {
            keys: (0..heads.heads())
                .map(|h| heads.project_vec(store, state, Projection::Key, h))
                .collect(),
            values: (0..heads.heads())
                .map(|h| heads.project_vec(store, state, Projection::Value, h))
                .collect(),
        }
    }
}

/// One read of an encoder state: its index and how many states were
/// available at that moment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub index: usize,
    pub available: usize,
}

/// Encoder states as they become available, with a log of every read.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    frames: Vec<ProjectedFrame>,
    finished: bool,
    log: RefCell<Vec<Access>>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// A buffer holding a complete input.
    pub fn complete(frames: Vec<ProjectedFrame>) -> Self {
        FrameBuffer {
            frames,
            finished: true,
            log: RefCell::default(),
        }
    }

    pub fn push(&mut self, frame: ProjectedFrame) {
        debug_assert!(!self.finished, "push after finish");
        self.frames.push(frame);
    }

    /// Marks the input as complete: no further states will arrive.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    pub fn available(&self) -> usize {
        self.frames.len()
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Reads state `index` (0-based). Reading past the available states is
    /// a causality error.
    pub fn read(&self, index: usize) -> Result<&ProjectedFrame> {
        let available = self.frames.len();
        self.log.borrow_mut().push(Access { index, available });
        self.frames.get(index).ok_or(Error::Causality { index, available })
    }

    pub fn access_log(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    pub fn clear_log(&self) {
        self.log.borrow_mut().clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    /// `p >= threshold` at the halting frame.
    Triggered,
    /// Forced stop at `t_prev + M`.
    LookaheadCap,
    /// The input ended first.
    Exhausted,
}

/// Threshold and optional look-ahead cap shared by every halting policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltRule {
    pub threshold: f64,
    pub lookahead: Option<usize>,
}

impl Default for HaltRule {
    fn default() -> Self {
        HaltRule {
            threshold: HALT_THRESHOLD,
            lookahead: None,
        }
    }
}

impl HaltRule {
    pub fn with_lookahead(lookahead: Option<usize>) -> Self {
        HaltRule {
            lookahead,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookahead == Some(0) {
            return Err(Error::Config("look-ahead cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Last frame (1-based) a step may read, if capped.
    pub fn cap(&self, t_prev: usize) -> Option<usize> {
        self.lookahead.map(|m| t_prev + m)
    }

    /// Decision after observing `p` at frame `j` (1-based).
    pub fn decide(&self, j: usize, p: f64, t_prev: usize) -> Option<HaltReason> {
        if p >= self.threshold {
            Some(HaltReason::Triggered)
        } else if self.cap(t_prev) == Some(j) {
            Some(HaltReason::LookaheadCap)
        } else {
            None
        }
    }

    /// Applies the rule to a known probability sequence. Returns `None`
    /// when more input is needed.
    pub fn scan(&self, probs: &[f64], t_prev: usize, end_of_input: bool) -> Option<(usize, HaltReason)> {
        for (i, &p) in probs.iter().enumerate() {
            if let Some(reason) = self.decide(i + 1, p, t_prev) {
                return Some((i + 1, reason));
            }
        }
        if end_of_input && !probs.is_empty() {
            Some((probs.len(), HaltReason::Exhausted))
        } else {
            None
        }
    }
}

/// Halting record of one decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingTrace {
    /// Decoding step, 1-based.
    pub step: usize,
    /// Layer-level halting probabilities for frames `1..=halt`.
    pub probs: Vec<f64>,
    /// Halting frame `j*` (1-based), shared by all heads.
    pub halt: usize,
    /// `t_i = max(t_{i-1}, j*)`.
    pub synced: usize,
    pub triggered: bool,
    pub reason: HaltReason,
    /// Number of encoder states read during the step.
    pub frames_read: usize,
}

impl HaltingTrace {
    pub fn new(step: usize, probs: Vec<f64>, halt: usize, t_prev: usize, reason: HaltReason, frames_read: usize) -> Self {
        HaltingTrace {
            step,
            probs,
            halt,
            synced: t_prev.max(halt),
            triggered: reason == HaltReason::Triggered,
            reason,
            frames_read,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Concatenated interim context at the halting frame, width `d_m`.
    pub context: Vec<f64>,
    pub trace: HaltingTrace,
    /// Sigmoid weights `a^h_j` per head for the frames read.
    pub head_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum ScanStatus {
    Halted(StepOutput),
    NeedMore,
}

/// Resumable frame-by-frame scan for one decoding step.
#[derive(Debug)]
pub struct CaScanner<'a> {
    layer: &'a CumulativeAttention,
    store: &'a ParamStore,
    query: Vec<Vec<f64>>,
    context: InterimContext,
    probs: Vec<f64>,
    head_weights: Vec<Vec<f64>>,
    step: usize,
    t_prev: usize,
    rule: HaltRule,
}

impl<'a> CaScanner<'a> {
    /// Starts step `step` from frame 1 with the decoder state `q_prev`.
    pub fn new(
        layer: &'a CumulativeAttention,
        store: &'a ParamStore,
        q_prev: &[f64],
        step: usize,
        t_prev: usize,
        rule: HaltRule,
    ) -> Result<Self> {
        let heads = layer.heads();
        if q_prev.len() != heads.d_model() {
            return Err(Error::dim("ca_infer_step", &[q_prev.len()], &[heads.d_model()]));
        }
        rule.validate()?;
        let query = (0..heads.heads())
            .map(|h| heads.project_vec(store, q_prev, Projection::Query, h))
            .collect();
        Ok(CaScanner {
            layer,
            store,
            query,
            context: InterimContext::zeros(heads.heads(), heads.d_k()),
            probs: Vec::new(),
            head_weights: vec![Vec::new(); heads.heads()],
            step,
            t_prev,
            rule,
        })
    }

    /// Consumes available frames until the step halts. With `end_of_input`
    /// false and no decision yet, returns [`ScanStatus::NeedMore`].
    pub fn advance(&mut self, frames: &FrameBuffer, end_of_input: bool) -> Result<ScanStatus> {
        let scale = 1.0 / (self.layer.heads().d_k() as f64).sqrt();
        loop {
            let next = self.context.step();
            if next >= frames.available() {
                if !end_of_input {
                    return Ok(ScanStatus::NeedMore);
                }
                if next == 0 {
                    return Err(Error::NoInput);
                }
                return Ok(self.halt(next, HaltReason::Exhausted));
            }
            let frame = frames.read(next)?;
            let weights: Vec<f64> = self
                .query
                .iter()
                .zip(&frame.keys)
                .map(|(q, k)| sigmoid(dot(q, k) * scale))
                .collect();
            self.context.accumulate_in_place(&weights, &frame.values)?;
            for (hw, a) in self.head_weights.iter_mut().zip(&weights) {
                hw.push(*a);
            }
            let logit = self.layer.selector().logit_value(self.store, &self.context.concat_heads());
            let p = sigmoid(logit);
            self.probs.push(p);
            let j = next + 1;
            if let Some(reason) = self.rule.decide(j, p, self.t_prev) {
                return Ok(self.halt(j, reason));
            }
        }
    }

    fn halt(&mut self, j: usize, reason: HaltReason) -> ScanStatus {
        let trace = HaltingTrace::new(
            self.step,
            std::mem::take(&mut self.probs),
            j,
            self.t_prev,
            reason,
            self.context.step(),
        );
        ScanStatus::Halted(StepOutput {
            context: self.context.concat_heads(),
            trace,
            head_weights: std::mem::take(&mut self.head_weights),
        })
    }
}

/// One inference step over the states currently in `frames`, treating them
/// as the whole input: if nothing triggers, the step halts at the last
/// available frame with `triggered = false`.
pub fn ca_infer_step(
    layer: &CumulativeAttention,
    store: &ParamStore,
    q_prev: &[f64],
    frames: &FrameBuffer,
    step: usize,
    t_prev: usize,
    rule: HaltRule,
) -> Result<StepOutput> {
    if frames.available() == 0 {
        return Err(Error::NoInput);
    }
    let mut scanner = CaScanner::new(layer, store, q_prev, step, t_prev, rule)?;
    match scanner.advance(frames, true)? {
        ScanStatus::Halted(out) => Ok(out),
        ScanStatus::NeedMore => unreachable!("end of input always halts"),
    }
}
