use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    /// Hidden widths; empty means a single affine layer `d_m -> 1`.
    pub hidden: Vec<usize>,
    /// Std of the pre-sigmoid Gaussian noise used only in training.
    pub noise_std: f64,
    /// Initial value of the trainable halting bias `r`.
    pub bias_init: f64,
    /// Put the never-halted mass `prod(1 - p)` on the last frame of the
    /// expected context instead of dropping it.
    pub tail_mass: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            hidden: Vec::new(),
            noise_std: 1.0,
            bias_init: -4.0,
            tail_mass: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

/// Maps a concatenated interim context to a halting logit. Hidden layers use
/// `tanh`; the last layer has width one.
#[derive(Clone, Debug)]
pub struct HaltingSelector {
    layers: Vec<Affine>,
    r: ParamId,
    noise_std: f64,
}

impl HaltingSelector {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, cfg: &SelectorConfig, rng: &mut R) -> Self {
        let mut widths = vec![d_model];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Affine {
                weight: store.add_linear_weight(format!("{prefix}.layer{i}.w"), w[0], w[1], rng),
                bias: store.add(format!("{prefix}.layer{i}.b"), Tensor::zeros(&[1, w[1]])),
            })
            .collect();
        let r = store.add(format!("{prefix}.r"), Tensor::scalar(cfg.bias_init));
        HaltingSelector {
            layers,
            r,
            noise_std: cfg.noise_std,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        self.layers.last().map_or(0, |l| store.get(l.weight).cols())
    }

    pub fn bias_param(&self) -> ParamId {
        self.r
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn set_noise_std(&mut self, std: f64) {
        self.noise_std = std;
    }

    /// Weight and bias of each layer, input side first.
    pub fn layer_params(&self) -> Vec<(ParamId, ParamId)> {
        self.layers.iter().map(|l| (l.weight, l.bias)).collect()
    }

    /// `HaltSelect(c)` for each row of `c` (`n × d_m`), as `n × 1`.
    pub fn select(&self, tape: &mut Tape, bound: &Bound, c: Var) -> Result<Var> {
        let mut x = c;
        for (i, layer) in self.layers.iter().enumerate() {
            x = tape.matmul(x, bound.var(layer.weight))?;
            x = tape.add_row(x, bound.var(layer.bias))?;
            if i + 1 < self.layers.len() {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// Halting logits `HaltSelect(c) + r (+ ε in training)`, `n × 1`.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        c: Var,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let s = self.select(tape, bound, c)?;
        let mut z = tape.add_row(s, bound.var(self.r))?;
        if mode == Mode::Train && self.noise_std > 0.0 {
            let rng = rng.ok_or_else(|| Error::Config("training-mode halting needs a noise source".into()))?;
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
            let n = tape.shape(z)[0];
            let eps = Tensor::column((0..n).map(|_| normal.sample(rng)).collect());
            let eps = tape.constant(eps)?;
            z = tape.add(z, eps)?;
        }
        Ok(z)
    }

    /// Value-level `HaltSelect(c) + r` for one context vector.
    pub fn logit_value(&self, store: &ParamStore, c: &[f64]) -> f64 {
        let mut x = c.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias).data();
            let mut y = b.to_vec();
            for (r, &xv) in x.iter().enumerate() {
                for (o, &wv) in y.iter_mut().zip(w.row_slice(r)) {
                    *o += xv * wv;
                }
            }
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        x[0] + store.get(self.r).data()[0]
    }
}

/// `p = sigmoid(HaltSelect(c) + r + ε)` for each row of `c`. In
/// [`Mode::Infer`], `ε = 0` and `rng` may be `None`.
pub fn halting_probability<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    selector: &HaltingSelector,
    c: Var,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<Var> {
    let z = selector.logits(tape, bound, c, mode, rng)?;
    tape.sigmoid(z)
}
