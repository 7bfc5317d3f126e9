//! Greedy streaming decoding.

use serde::{Deserialize, Serialize};

use super::config::{EOS, SOS};
use super::decoder::{DecoderCache, StepState};
use super::encoder::EncoderStream;
use super::Model;
use crate::baseline::{BaselineScanner, HaltingPolicy, PolicyKind};
use crate::cumulative::{Access, CaScanner, FrameBuffer, HaltingTrace, ProjectedFrame, ScanStatus};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub policy: HaltingPolicy,
    /// Maximum number of emitted tokens, `eos` excluded.
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            policy: HaltingPolicy::new(PolicyKind::Ca, None),
            max_len: 64,
        }
    }
}

/// Incremental decoder state: prefix, self-attention caches, synchronised
/// position and per-step traces.
#[derive(Clone, Debug)]
pub struct DecoderSession {
    prefix: Vec<usize>,
    cache: DecoderCache,
    t_prev: usize,
    traces: Vec<HaltingTrace>,
}

impl Default for DecoderSession {
    fn default() -> Self {
        DecoderSession {
            prefix: vec![SOS],
            cache: DecoderCache::default(),
            t_prev: 0,
            traces: Vec::new(),
        }
    }
}

impl DecoderSession {
    pub fn new() -> Self {
        Self::default()
    }

    /// `y_0 .. y_{i-1}`, starting with `sos`.
    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    pub fn t_prev(&self) -> usize {
        self.t_prev
    }

    pub fn traces(&self) -> &[HaltingTrace] {
        &self.traces
    }

    pub fn finished(&self) -> bool {
        self.prefix.last() == Some(&EOS)
    }

    fn record(&mut self, token: usize, trace: HaltingTrace) {
        debug_assert!(trace.synced >= self.t_prev);
        self.t_prev = trace.synced;
        self.traces.push(trace);
        self.prefix.push(token);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Hypothesis without `sos`/`eos`.
    pub tokens: Vec<usize>,
    /// One trace per step, including the step that produced `eos`.
    pub traces: Vec<HaltingTrace>,
    /// Input frames received when each step halted.
    pub arrivals: Vec<usize>,
    /// `max_len` was reached before `eos`.
    pub truncated: bool,
    pub frames: usize,
    pub access_log: Vec<Access>,
    /// States available in the frame buffer after each arrival.
    pub availability: Vec<usize>,
}

enum Scanner<'a> {
    Ca(CaScanner<'a>),
    Baseline(BaselineScanner<'a>),
}

impl Scanner<'_> {
    fn advance(&mut self, frames: &FrameBuffer) -> Result<ScanStatus> {
        match self {
            Scanner::Ca(s) => s.advance(frames, frames.finished()),
            Scanner::Baseline(s) => s.advance(frames, frames.finished()),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl Model {
    fn scanner(&self, opts: &DecodeOptions, state: &StepState, step: usize, t_prev: usize) -> Result<Scanner<'_>> {
        let layer = self.decoder().cross();
        Ok(match opts.policy.kind {
            PolicyKind::Ca => Scanner::Ca(CaScanner::new(layer, self.store(), &state.query, step, t_prev, opts.policy.rule())?),
            _ => Scanner::Baseline(BaselineScanner::new(layer, self.store(), opts.policy, &state.query, step, t_prev)?),
        })
    }

    /// Greedy decoding while `frames` (`T × input_dim`) arrive one at a
    /// time. Each step scans encoder states from frame 1 and waits for more
    /// input whenever its halting decision needs a state not yet computed.
    pub fn decode_stream(&self, frames: &Tensor, opts: &DecodeOptions) -> Result<DecodeResult> {
        if opts.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        opts.policy.validate()?;
        let total = frames.rows();
        if total == 0 {
            return Err(Error::NoInput);
        }
        if frames.cols() != self.config().input_dim {
            return Err(Error::dim("decode_stream frames", frames.shape(), &[total, self.config().input_dim]));
        }
        let store = self.store();
        let dec = self.decoder();
        let layer = dec.cross();
        let mut stream = EncoderStream::new(self.encoder(), store);
        let mut buffer = FrameBuffer::new();
        let mut session = DecoderSession::new();
        let mut state = dec.step(store, &mut session.cache, SOS)?;
        let mut scanner = self.scanner(opts, &state, 1, 0)?;
        let mut arrivals = Vec::new();
        let mut availability = Vec::with_capacity(total);
        let mut truncated = false;

        'input: for n in 0..total {
            let mut states = stream.push(frames.row_slice(n))?;
            if n + 1 == total {
                states.extend(stream.finish()?);
            }
            for s in &states {
                buffer.push(ProjectedFrame::project(layer, store, s));
            }
            if n + 1 == total {
                buffer.finish();
            }
            availability.push(buffer.available());
            loop {
                let out = match scanner.advance(&buffer)? {
                    ScanStatus::NeedMore => break,
                    ScanStatus::Halted(out) => out,
                };
                arrivals.push(n + 1);
                let token = argmax(&dec.output_step(store, &state, &out.context));
                session.record(token, out.trace);
                if token == EOS {
                    break 'input;
                }
                if session.prefix.len() > opts.max_len {
                    truncated = true;
                    break 'input;
                }
                state = dec.step(store, &mut session.cache, token)?;
                scanner = self.scanner(opts, &state, session.traces.len() + 1, session.t_prev)?;
            }
        }
        Ok(Self::finish_result(session, arrivals, truncated, total, &buffer, availability))
    }

    /// Greedy decoding with every encoder state computed up front by the
    /// batch encoder.
    pub fn decode_offline(&self, frames: &Tensor, opts: &DecodeOptions) -> Result<DecodeResult> {
        if opts.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        opts.policy.validate()?;
        let total = frames.rows();
        if total == 0 {
            return Err(Error::NoInput);
        }
        let store = self.store();
        let dec = self.decoder();
        let mut tape = Tape::with_checks(false);
        let bound = store.bind(&mut tape, false)?;
        let x = tape.constant(frames.clone())?;
        let memory = self.encoder().encode::<ChaCha8Rng>(&mut tape, &bound, x, 0.0, None)?;
        let buffer = FrameBuffer::complete(
            (0..total)
                .map(|t| ProjectedFrame::project(dec.cross(), store, tape.value(memory).row_slice(t)))
                .collect(),
        );
        let mut session = DecoderSession::new();
        let mut arrivals = Vec::new();
        let mut truncated = false;
        let mut state = dec.step(store, &mut session.cache, SOS)?;
        loop {
            let mut scanner = self.scanner(opts, &state, session.traces.len() + 1, session.t_prev)?;
            let out = match scanner.advance(&buffer)? {
                ScanStatus::Halted(out) => out,
                ScanStatus::NeedMore => unreachable!("complete input always halts"),
            };
            arrivals.push(total);
            let token = argmax(&dec.output_step(store, &state, &out.context));
            session.record(token, out.trace);
            if token == EOS {
                break;
            }
            if session.prefix.len() > opts.max_len {
                truncated = true;
                break;
            }
            state = dec.step(store, &mut session.cache, token)?;
        }
        Ok(Self::finish_result(session, arrivals, truncated, total, &buffer, vec![total; total]))
    }

    fn finish_result(
        session: DecoderSession,
        arrivals: Vec<usize>,
        truncated: bool,
        total: usize,
        buffer: &FrameBuffer,
        availability: Vec<usize>,
    ) -> DecodeResult {
        let mut tokens: Vec<usize> = session.prefix[1..].to_vec();
        if tokens.last() == Some(&EOS) {
            tokens.pop();
        }
        DecodeResult {
            tokens,
            traces: session.traces,
            arrivals,
            truncated,
            frames: total,
            access_log: buffer.access_log(),
            availability,
        }
    }
}
