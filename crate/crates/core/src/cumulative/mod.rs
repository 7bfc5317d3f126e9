//! Cumulative attention.
//!
//! For decoding step `i`, every head accumulates sigmoid-weighted value
//! vectors frame by frame into an interim context. The heads' contexts are
//! concatenated and scored by a [`HaltingSelector`]; all heads therefore
//! share one halting position.
//!
//! Training marginalises over halting positions with the halting
//! distribution `α_j = p_j ∏_{k<j} (1 − p_k)` and uses the expected context
//! `Σ_j α_j c_j`. Inference stops at the first frame with `p ≥ 0.5` and
//! uses the interim context at that frame.

mod infer;
mod selector;

use rand::Rng;

pub use infer::{
    ca_infer_step, Access, CaScanner, StepOutput, FrameBuffer, HaltReason, HaltRule, HaltingTrace, ProjectedFrame,
    ScanStatus, HALT_THRESHOLD,
};
pub use selector::{halting_probability, HaltingSelector, Mode, SelectorConfig};

use crate::attention::{monotonic_weights, AttentionHeads, Projection};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamStore, Tape, Var};

/// Direct products are used up to this length; longer inputs switch to
/// log-space sums.
const LOG_SPACE_ABOVE: usize = 32;

/// Per-head running context `c^h_{i,j}` after `step` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct InterimContext {
    per_head: Vec<Vec<f64>>,
    step: usize,
}

impl InterimContext {
    pub fn zeros(heads: usize, d_k: usize) -> Self {
        InterimContext {
            per_head: vec![vec![0.0; d_k]; heads],
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.per_head[h]
    }

    /// `c^h_j = c^h_{j-1} + a^h_j v^h_j` for every head.
    pub fn accumulate<V: AsRef<[f64]>>(&self, weights: &[f64], values: &[V]) -> Result<InterimContext> {
        let mut next = self.clone();
        next.accumulate_in_place(weights, values)?;
        Ok(next)
    }

    pub(crate) fn accumulate_in_place<V: AsRef<[f64]>>(&mut self, weights: &[f64], values: &[V]) -> Result<()> {
        let h = self.per_head.len();
        if weights.len() != h || values.len() != h {
            return Err(Error::dim("accumulate_context", &[h], &[weights.len(), values.len()]));
        }
        for ((c, &a), v) in self.per_head.iter_mut().zip(weights).zip(values) {
            let v = v.as_ref();
            if v.len() != c.len() {
                return Err(Error::dim("accumulate_context", &[c.len()], &[v.len()]));
            }
            c.iter_mut().zip(v).for_each(|(cv, vv)| *cv += a * vv);
        }
        self.step += 1;
        Ok(())
    }

    /// Head-order concatenation, width `H·d_k`.
    pub fn concat_heads(&self) -> Vec<f64> {
        self.per_head.concat()
    }
}

/// `α_j = p_j ∏_{k<j} (1 − p_k)`, without renormalisation.
///
/// In strict mode every `p_j` must lie in the open interval (0, 1); otherwise
/// the closed interval is accepted.
pub fn halting_distribution(p: &[f64], strict: bool) -> Result<Vec<f64>> {
    for (index, &value) in p.iter().enumerate() {
        let ok = if strict {
            value > 0.0 && value < 1.0
        } else {
            (0.0..=1.0).contains(&value)
        };
        if !ok {
            return Err(Error::Domain { index, value });
        }
    }
    let mut alpha = Vec::with_capacity(p.len());
    if p.len() <= LOG_SPACE_ABOVE {
        let mut survive = 1.0;
        for &pj in p {
            alpha.push(pj * survive);
            survive *= 1.0 - pj;
        }
    } else {
        let mut log_survive = 0.0;
        for &pj in p {
            alpha.push(pj * f64::exp(log_survive));
            log_survive += (-pj).ln_1p();
        }
    }
    Ok(alpha)
}

/// `Σ_j α_j c_j`.
pub fn expected_context<C: AsRef<[f64]>>(alphas: &[f64], contexts: &[C]) -> Result<Vec<f64>> {
    if alphas.len() != contexts.len() {
        return Err(Error::dim("expected_context", &[alphas.len()], &[contexts.len()]));
    }
    let width = contexts.first().map_or(0, |c| c.as_ref().len());
    let mut out = vec![0.0; width];
    for (&a, c) in alphas.iter().zip(contexts) {
        let c = c.as_ref();
        if c.len() != width {
            return Err(Error::dim("expected_context", &[width], &[c.len()]));
        }
        out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
    }
    Ok(out)
}

/// Tape form of the halting distribution from halting logits `z` (`T × 1`),
/// using `ln(1 − sigmoid(z)) = −softplus(z)` so saturated logits stay finite.
/// Returns `(α, ln ∏_k (1 − p_k))`.
pub fn halting_distribution_from_logits(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    let sp = tape.softplus(z)?;
    let log_fail = tape.scale(sp, -1.0)?;
    let log_survive = tape.cumsum_rows(log_fail, true)?;
    let survive = tape.exp(log_survive)?;
    let p = tape.sigmoid(z)?;
    let alpha = tape.mul(p, survive)?;
    let log_residual = tape.sum(log_fail)?;
    Ok((alpha, log_residual))
}

/// Tensors produced by one training-path step.
#[derive(Clone, Copy, Debug)]
pub struct TrainStepOutput {
    /// Expected context, `1 × d_m`.
    pub context: Var,
    /// Interim contexts for every frame, `T × d_m`.
    pub interim: Var,
    /// Halting logits, `T × 1`.
    pub logits: Var,
    /// Halting distribution, `T × 1`.
    pub alpha: Var,
}

/// The cumulative-attention cross-attention layer: per-head projections plus
/// a halting selector.
#[derive(Clone, Debug)]
pub struct CumulativeAttention {
    heads: AttentionHeads,
    selector: HaltingSelector,
    tail_mass: bool,
}

impl CumulativeAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, heads: usize, d_k: usize, cfg: &SelectorConfig, rng: &mut R) -> Self {
        let att = AttentionHeads::new(store, &format!("{prefix}.attn"), heads, d_k, rng);
        let selector = HaltingSelector::new(store, &format!("{prefix}.selector"), heads * d_k, cfg, rng);
        CumulativeAttention {
            heads: att,
            selector,
            tail_mass: cfg.tail_mass,
        }
    }

    pub fn from_parts(heads: AttentionHeads, selector: HaltingSelector, tail_mass: bool) -> Self {
        CumulativeAttention {
            heads,
            selector,
            tail_mass,
        }
    }

    pub fn heads(&self) -> &AttentionHeads {
        &self.heads
    }

    pub fn selector(&self) -> &HaltingSelector {
        &self.selector
    }

    pub fn selector_mut(&mut self) -> &mut HaltingSelector {
        &mut self.selector
    }

    /// Training path for one query `q_prev` (`1 × d_m`) over the whole
    /// visible encoder sequence.
    pub fn train_step<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        q_prev: Var,
        keys: Var,
        values: Var,
        rng: Option<&mut R>,
    ) -> Result<TrainStepOutput> {
        let mut out = self.train_steps(tape, bound, q_prev, keys, values, rng)?;
        Ok(out.remove(0))
    }

    /// Training path for every row of `queries` (`L × d_m`), sharing the
    /// key/value projections. Selector noise is drawn from `rng`; without
    /// one the logits are noise-free.
    pub fn train_steps<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        queries: Var,
        keys: Var,
        values: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Vec<TrainStepOutput>> {
        let t = tape.shape(keys)[0];
        if t == 0 {
            return Err(Error::EmptyInput("cumulative attention needs at least one encoder state"));
        }
        if tape.shape(values)[0] != t {
            return Err(Error::dim("ca_train_step", tape.shape(keys), tape.shape(values)));
        }
        let n_heads = self.heads.heads();
        let mut weights = Vec::with_capacity(n_heads);
        let mut vals = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.heads.project(tape, bound, queries, Projection::Query, h)?;
            let kh = self.heads.project(tape, bound, keys, Projection::Key, h)?;
            vals.push(self.heads.project(tape, bound, values, Projection::Value, h)?);
            weights.push(monotonic_weights(tape, qh, kh)?);
        }
        let steps = tape.shape(queries)[0];
        let mut outputs = Vec::with_capacity(steps);
        for i in 0..steps {
            let mut per_head = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let row = tape.slice_rows(weights[h], i, 1)?;
                let col = tape.transpose(row)?;
                let scaled = tape.mul_col(vals[h], col)?;
                per_head.push(tape.cumsum_rows(scaled, false)?);
            }
            let interim = if n_heads == 1 { per_head[0] } else { tape.concat_cols(&per_head)? };
            let mode = if rng.is_some() { Mode::Train } else { Mode::Infer };
            let logits = self.selector.logits(tape, bound, interim, mode, rng.as_deref_mut())?;
            let (mut alpha, log_residual) = halting_distribution_from_logits(tape, logits)?;
            if self.tail_mass {
                let residual = tape.exp(log_residual)?;
                let last = tape.slice_rows(alpha, t - 1, 1)?;
                let last = tape.add(last, residual)?;
                alpha = if t == 1 {
                    last
                } else {
                    let head = tape.slice_rows(alpha, 0, t - 1)?;
                    tape.concat_rows(&[head, last])?
                };
            }
            let at = tape.transpose(alpha)?;
            let context = tape.matmul(at, interim)?;
            outputs.push(TrainStepOutput {
                context,
                interim,
                logits,
                alpha,
            });
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_leaves_context_unchanged() {
        let c = InterimContext::zeros(2, 2).accumulate(&[1.0, 1.0], &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let next = c.accumulate(&[0.0, 0.0], &[vec![9.0, 9.0], vec![9.0, 9.0]]).unwrap();
        assert_eq!(next.concat_heads(), c.concat_heads());
        assert_eq!(next.step(), 2);
    }

    #[test]
    fn first_frame_with_unit_weight_is_the_value() {
        let c = InterimContext::zeros(1, 3).accumulate(&[1.0], &[[0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(c.concat_heads(), [0.1, 0.2, 0.3]);
    }

    #[test]
    fn three_half_weighted_basis_vectors() {
        let mut c = InterimContext::zeros(1, 3);
        for e in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            c = c.accumulate(&[0.5], &[e]).unwrap();
        }
        assert_eq!(c.concat_heads(), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn head_count_mismatch() {
        let c = InterimContext::zeros(2, 1);
        assert!(matches!(c.accumulate(&[0.5], &[[1.0]]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_preserves_head_order() {
        let c = InterimContext::zeros(2, 2).accumulate(&[1.0, 1.0], &[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let cat = c.concat_heads();
        assert_eq!(cat, [1.0, 2.0, 3.0, 4.0]);
        for h in 0..2 {
            assert_eq!(&cat[h * 2..h * 2 + 2], c.head(h));
        }
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(halting_distribution(&[1.0, 0.3, 0.7], false).unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(halting_distribution(&[0.5, 0.5, 1.0], false).unwrap(), [0.5, 0.25, 0.25]);
        let a = halting_distribution(&[0.5, 0.5], true).unwrap();
        assert_eq!(a, [0.5, 0.25]);
        assert_eq!(a.iter().sum::<f64>(), 0.75);
    }

    #[test]
    fn distribution_domain() {
        assert!(matches!(
            halting_distribution(&[0.2, 1.0], true),
            Err(Error::Domain { index: 1, .. })
        ));
        assert!(halting_distribution(&[0.2, 1.2], false).is_err());
    }

    #[test]
    fn log_space_matches_direct_product() {
        let p: Vec<f64> = (0..60).map(|i| 0.01 + 0.9 * ((i * 37 % 17) as f64 / 17.0)).collect();
        let long = halting_distribution(&p, true).unwrap();
        let mut survive = 1.0;
        for (j, &pj) in p.iter().enumerate() {
            assert!((long[j] - pj * survive).abs() < 1e-14);
            survive *= 1.0 - pj;
        }
    }

    #[test]
    fn expected_context_examples() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(expected_context(&[0.5, 0.25], &c).unwrap(), [0.5, 0.25]);
        assert_eq!(expected_context(&[0.0, 1.0], &c).unwrap(), c[1]);
        assert!(expected_context(&[1.0], &c).is_err());
    }

    #[test]
    fn tape_distribution_matches_value_level() {
        let z = [-1.0, 0.3, 2.0, -0.5];
        let p: Vec<f64> = z.iter().map(|&v| crate::numerics::sigmoid(v)).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(crate::numerics::Tensor::column(z.to_vec())).unwrap();
        let (alpha, log_res) = halting_distribution_from_logits(&mut tape, zv).unwrap();
        let want = halting_distribution(&p, true).unwrap();
        for (a, b) in tape.value(alpha).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        let res: f64 = p.iter().map(|v| 1.0 - v).product();
        assert!((tape.value(log_res).data()[0].exp() - res).abs() < 1e-14);
    }
}
