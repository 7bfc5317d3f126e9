//! Inference-time halting rules in the style of MoChA and HS-DACS.
//!
//! Both read the per-head sigmoid weights of the cross-attention layer as
//! halting probability streams. MoChA halts each head independently at its
//! first `p ≥ 0.5` and the layer waits for the slowest head; HS-DACS sums
//! the probabilities over heads and frames and halts once the sum reaches
//! the head count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cumulative::{CumulativeAttention, FrameBuffer, HaltReason, HaltRule, HaltingTrace, ScanStatus, StepOutput};
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, ParamStore};
use crate::attention::Projection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Ca,
    Mocha,
    Hsdacs,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Ca => "ca",
            PolicyKind::Mocha => "mocha",
            PolicyKind::Hsdacs => "hsdacs",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(PolicyKind::Ca),
            "mocha" => Ok(PolicyKind::Mocha),
            "hsdacs" | "hs-dacs" => Ok(PolicyKind::Hsdacs),
            other => Err(Error::Config(format!("unknown policy `{other}` (ca|mocha|hsdacs)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingPolicy {
    pub kind: PolicyKind,
    /// Second-pass chunk width for MoChA.
    pub chunk_width: usize,
    pub lookahead: Option<usize>,
}

impl HaltingPolicy {
    pub fn new(kind: PolicyKind, lookahead: Option<usize>) -> Self {
        HaltingPolicy {
            kind,
            chunk_width: 4,
            lookahead,
        }
    }

    /// HS-DACS joint threshold: the head count.
    pub fn joint_threshold(heads: usize) -> f64 {
        heads as f64
    }

    pub fn rule(&self) -> HaltRule {
        HaltRule::with_lookahead(self.lookahead)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_width == 0 {
            return Err(Error::Config("MoChA chunk width must be at least 1".into()));
        }
        self.rule().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MochaHalt {
    /// Per-head halting frame, 1-based.
    pub head_halts: Vec<usize>,
    pub head_reasons: Vec<HaltReason>,
    /// Layer halting frame: the maximum over heads.
    pub layer_halt: usize,
    /// `max(t_prev, layer_halt)`.
    pub synced: usize,
}

impl MochaHalt {
    pub fn reason(&self) -> HaltReason {
        if self.head_reasons.contains(&HaltReason::LookaheadCap) {
            HaltReason::LookaheadCap
        } else if self.head_reasons.contains(&HaltReason::Exhausted) {
            HaltReason::Exhausted
        } else {
            HaltReason::Triggered
        }
    }
}

fn check_streams(streams: &[Vec<f64>]) -> Result<usize> {
    let n = streams.first().map(Vec::len).ok_or(Error::EmptyInput("no heads"))?;
    if let Some(bad) = streams.iter().find(|s| s.len() != n) {
        return Err(Error::dim("probability streams", &[n], &[bad.len()]));
    }
    Ok(n)
}

/// Per-head monotonic halting. `streams[h][j]` is head `h`'s attending
/// probability at frame `j + 1`; `end_of_input` says whether the streams
/// cover the whole input. Returns `None` while any head is undecided.
pub fn mocha_halt(
    streams: &[Vec<f64>],
    chunk_width: usize,
    lookahead: Option<usize>,
    t_prev: usize,
    end_of_input: bool,
) -> Result<Option<MochaHalt>> {
    if chunk_width == 0 {
        return Err(Error::Config("MoChA chunk width must be at least 1".into()));
    }
    check_streams(streams)?;
    let rule = HaltRule::with_lookahead(lookahead);
    rule.validate()?;
    let mut head_halts = Vec::with_capacity(streams.len());
    let mut head_reasons = Vec::with_capacity(streams.len());
    for s in streams {
        match rule.scan(s, t_prev, end_of_input) {
            Some((j, reason)) => {
                head_halts.push(j);
                head_reasons.push(reason);
            }
            None => return Ok(None),
        }
    }
    let layer_halt = head_halts.iter().copied().max().unwrap_or(0);
    Ok(Some(MochaHalt {
        head_halts,
        head_reasons,
        layer_halt,
        synced: t_prev.max(layer_halt),
    }))
}

/// Second-pass soft attention over the `chunk_width` frames ending at
/// `halt` (1-based): softmax of the energies, weighted sum of the values.
pub fn mocha_chunk_context<V: AsRef<[f64]>>(energies: &[f64], values: &[V], halt: usize, chunk_width: usize) -> Result<Vec<f64>> {
    if chunk_width == 0 {
        return Err(Error::Config("MoChA chunk width must be at least 1".into()));
    }
    if halt == 0 || halt > energies.len() || energies.len() != values.len() {
        return Err(Error::dim("mocha_chunk_context", &[halt, energies.len()], &[values.len()]));
    }
    let start = halt.saturating_sub(chunk_width);
    let window = &energies[start..halt];
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = window.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let width = values[0].as_ref().len();
    let mut out = vec![0.0; width];
    for (w, v) in exps.iter().zip(&values[start..halt]) {
        out.iter_mut().zip(v.as_ref()).for_each(|(o, x)| *o += w / total * x);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DacsHalt {
    pub halt: usize,
    pub synced: usize,
    pub reason: HaltReason,
    /// Running sum `Σ_h Σ_{k≤j} p^h_k` at the halt.
    pub accumulated: f64,
}

/// Head-synchronous accumulation: halts at the earliest frame where the
/// probabilities summed over heads and frames reach the head count.
pub fn hsdacs_halt(streams: &[Vec<f64>], lookahead: Option<usize>, t_prev: usize, end_of_input: bool) -> Result<Option<DacsHalt>> {
    let n = check_streams(streams)?;
    let rule = HaltRule::with_lookahead(lookahead);
    rule.validate()?;
    let threshold = HaltingPolicy::joint_threshold(streams.len());
    let mut acc = 0.0;
    for j in 0..n {
        acc += streams.iter().map(|s| s[j]).sum::<f64>();
        let reason = if acc >= threshold {
            Some(HaltReason::Triggered)
        } else if rule.cap(t_prev) == Some(j + 1) {
            Some(HaltReason::LookaheadCap)
        } else {
            None
        };
        if let Some(reason) = reason {
            return Ok(Some(DacsHalt {
                halt: j + 1,
                synced: t_prev.max(j + 1),
                reason,
                accumulated: acc,
            }));
        }
    }
    if end_of_input && n > 0 {
        return Ok(Some(DacsHalt {
            halt: n,
            synced: t_prev.max(n),
            reason: HaltReason::Exhausted,
            accumulated: acc,
        }));
    }
    Ok(None)
}

/// Frame-by-frame driver for the baseline policies over a trained
/// cumulative-attention layer's heads.
#[derive(Debug)]
pub struct BaselineScanner<'a> {
    layer: &'a CumulativeAttention,
    policy: HaltingPolicy,
    query: Vec<Vec<f64>>,
    energies: Vec<Vec<f64>>,
    streams: Vec<Vec<f64>>,
    values: Vec<Vec<Vec<f64>>>,
    interim: Vec<Vec<f64>>,
    step: usize,
    t_prev: usize,
}

impl<'a> BaselineScanner<'a> {
    pub fn new(
        layer: &'a CumulativeAttention,
        store: &ParamStore,
        policy: HaltingPolicy,
        q_prev: &[f64],
        step: usize,
        t_prev: usize,
    ) -> Result<Self> {
        policy.validate()?;
        if policy.kind == PolicyKind::Ca {
            return Err(Error::Config("BaselineScanner drives mocha or hsdacs only".into()));
        }
        let heads = layer.heads();
        if q_prev.len() != heads.d_model() {
            return Err(Error::dim("baseline step", &[q_prev.len()], &[heads.d_model()]));
        }
        let n = heads.heads();
        Ok(BaselineScanner {
            layer,
            policy,
            query: (0..n).map(|h| heads.project_vec(store, q_prev, Projection::Query, h)).collect(),
            energies: vec![Vec::new(); n],
            streams: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            interim: vec![vec![0.0; heads.d_k()]; n],
            step,
            t_prev,
        })
    }

    fn decide(&self, end_of_input: bool) -> Result<Option<StepOutput>> {
        if self.streams[0].is_empty() {
            return Ok(None);
        }
        let n = self.streams[0].len();
        let mean_p: Vec<f64> = (0..n)
            .map(|j| self.streams.iter().map(|s| s[j]).sum::<f64>() / self.streams.len() as f64)
            .collect();
        match self.policy.kind {
            PolicyKind::Mocha => {
                let Some(h) = mocha_halt(&self.streams, self.policy.chunk_width, self.policy.lookahead, self.t_prev, end_of_input)? else {
                    return Ok(None);
                };
                let mut context = Vec::new();
                for (head, &halt) in h.head_halts.iter().enumerate() {
                    context.extend(mocha_chunk_context(&self.energies[head], &self.values[head], halt, self.policy.chunk_width)?);
                }
                let trace = HaltingTrace::new(self.step, mean_p[..h.layer_halt].to_vec(), h.layer_halt, self.t_prev, h.reason(), n);
                Ok(Some(StepOutput {
                    context,
                    trace,
                    head_weights: self.streams.clone(),
                }))
            }
            PolicyKind::Hsdacs => {
                let Some(h) = hsdacs_halt(&self.streams, self.policy.lookahead, self.t_prev, end_of_input)? else {
                    return Ok(None);
                };
                let trace = HaltingTrace::new(self.step, mean_p[..h.halt].to_vec(), h.halt, self.t_prev, h.reason, n);
                Ok(Some(StepOutput {
                    context: self.interim.concat(),
                    trace,
                    head_weights: self.streams.clone(),
                }))
            }
            PolicyKind::Ca => unreachable!("rejected in new"),
        }
    }

    pub fn advance(&mut self, frames: &FrameBuffer, end_of_input: bool) -> Result<ScanStatus> {
        let scale = 1.0 / (self.layer.heads().d_k() as f64).sqrt();
        loop {
            if let Some(out) = self.decide(false)? {
                return Ok(ScanStatus::Halted(out));
            }
            let next = self.streams[0].len();
            if next >= frames.available() {
                if !end_of_input {
                    return Ok(ScanStatus::NeedMore);
                }
                if next == 0 {
                    return Err(Error::NoInput);
                }
                let out = self.decide(true)?.expect("end of input always decides");
                return Ok(ScanStatus::Halted(out));
            }
            let frame = frames.read(next)?;
            for h in 0..self.query.len() {
                let e = dot(&self.query[h], &frame.keys[h]) * scale;
                let a = sigmoid(e);
                self.energies[h].push(e);
                self.streams[h].push(a);
                self.values[h].push(frame.values[h].clone());
                self.interim[h].iter_mut().zip(&frame.values[h]).for_each(|(c, v)| *c += a * v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_heads_fire_at_first_frame() {
        let s = vec![vec![0.9, 0.1], vec![0.6, 0.0]];
        let h = mocha_halt(&s, 2, None, 0, false).unwrap().unwrap();
        assert_eq!(h.layer_halt, 1);
        assert_eq!(h.reason(), HaltReason::Triggered);
    }

    #[test]
    fn silent_head_is_capped() {
        let mut a = vec![0.1; 20];
        a[2] = 0.8;
        let b = vec![0.01; 20];
        let h = mocha_halt(&[a, b], 2, Some(16), 0, false).unwrap().unwrap();
        assert_eq!(h.head_halts, [3, 16]);
        assert_eq!(h.layer_halt, 16);
        assert_eq!(h.reason(), HaltReason::LookaheadCap);
        assert!(h.layer_halt >= *h.head_halts.iter().max().unwrap());
    }

    #[test]
    fn undecided_head_waits() {
        let s = vec![vec![0.9, 0.1], vec![0.1, 0.1]];
        assert_eq!(mocha_halt(&s, 1, None, 0, false).unwrap(), None);
        let h = mocha_halt(&s, 1, None, 0, true).unwrap().unwrap();
        assert_eq!((h.layer_halt, h.reason()), (2, HaltReason::Exhausted));
    }

    #[test]
    fn unit_chunk_returns_halt_value() {
        let values = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let ctx = mocha_chunk_context(&[0.3, -2.0, 1.0], &values, 2, 1).unwrap();
        assert_eq!(ctx, [3.0, 4.0]);
    }

    #[test]
    fn zero_chunk_width_rejected() {
        assert!(matches!(mocha_halt(&[vec![0.9]], 0, None, 0, true), Err(Error::Config(_))));
    }

    #[test]
    fn dacs_examples() {
        let h = hsdacs_halt(&[vec![1.0; 5], vec![1.0; 5]], None, 0, false).unwrap().unwrap();
        assert_eq!(h.halt, 1);
        let h = hsdacs_halt(&[vec![0.25; 8], vec![0.25; 8]], None, 0, false).unwrap().unwrap();
        assert_eq!((h.halt, h.accumulated), (4, 2.0));
        let h = hsdacs_halt(&[vec![1e-9; 8], vec![1e-9; 8]], None, 0, true).unwrap().unwrap();
        assert_eq!((h.halt, h.reason), (8, HaltReason::Exhausted));
        assert_eq!(HaltingPolicy::joint_threshold(8), 8.0);
    }

    #[test]
    fn policy_names() {
        assert_eq!("HS-DACS".parse::<PolicyKind>().unwrap(), PolicyKind::Hsdacs);
        assert_eq!(PolicyKind::Mocha.to_string(), "mocha");
        assert!("beam".parse::<PolicyKind>().is_err());
    }
}
