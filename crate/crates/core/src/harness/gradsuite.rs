//! Randomised finite-difference checks of the two training paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cumulative::{CumulativeAttention, SelectorConfig};
use crate::error::Result;
use crate::model::{Model, ModelConfig, EOS, SOS};
use crate::numerics::{grad_check, Bound, GradCheckOptions, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub target: &'static str,
    pub description: String,
    pub parameters: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols).map(|_| rand_distr::Distribution::sample(&normal, rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

/// One random cumulative-attention configuration: query, keys, values and
/// all layer parameters are checked against a random linear read-out of
/// the expected context.
pub fn check_ca_train_step(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCase> {
    let heads = rng.random_range(1..=4);
    let d_k = rng.random_range(1..=8);
    let t = rng.random_range(1..=8);
    let hidden = if rng.random_bool(0.5) { vec![rng.random_range(1..=4)] } else { Vec::new() };
    let cfg = SelectorConfig {
        hidden: hidden.clone(),
        noise_std: 0.0,
        bias_init: rng.random_range(-4.0..0.0),
        tail_mass: rng.random_bool(0.5),
    };
    let d = heads * d_k;
    let mut store = ParamStore::new();
    let layer = CumulativeAttention::new(&mut store, "ca", heads, d_k, &cfg, rng);
    let n_params = store.len();
    let mut leaves: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    leaves.push(normal_tensor(1, d, rng));
    leaves.push(normal_tensor(t, d, rng));
    leaves.push(normal_tensor(t, d, rng));
    let readout = normal_tensor(1, d, rng);
    let report = grad_check(
        |tape: &mut Tape, vars| {
            let bound = Bound::from_vars(vars[..n_params].to_vec());
            let (q, k, v) = (vars[n_params], vars[n_params + 1], vars[n_params + 2]);
            let out = layer.train_step::<ChaCha8Rng>(tape, &bound, q, k, v, None)?;
            let w = tape.constant(readout.clone())?;
            let y = tape.mul(out.context, w)?;
            tape.sum(y)
        },
        &leaves,
        opts,
    )?;
    Ok(GradCase {
        target: "ca_train_step",
        description: format!(
            "H={heads} d_k={d_k} T={t} hidden={hidden:?} tail_mass={}",
            cfg.tail_mass
        ),
        parameters: leaves.iter().map(Tensor::len).sum(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
    })
}

/// One random small model: every parameter is checked against the
/// teacher-forced loss on a random utterance.
pub fn check_decode_train(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCase> {
    let heads = rng.random_range(1..=2);
    let d_k = rng.random_range(2..=4);
    let t = rng.random_range(2..=8);
    let len = rng.random_range(1..=3);
    let cfg = ModelConfig {
        encoder_layers: rng.random_range(1..=2),
        decoder_layers: rng.random_range(1..=2),
        heads,
        d_k,
        ffn: 8,
        vocab: 5,
        input_dim: 3,
        chunks: format!("{},{},{}", rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(0..=2))
            .parse()?,
        selector: SelectorConfig {
            noise_std: 0.0,
            bias_init: rng.random_range(-4.0..0.0),
            ..Default::default()
        },
        ..Default::default()
    };
    let model = Model::new(cfg.clone(), rng.random())?;
    let frames = normal_tensor(t, cfg.input_dim, rng);
    let mut targets = vec![SOS];
    targets.extend((0..len).map(|_| rng.random_range(2..cfg.vocab)));
    targets.push(EOS);
    let leaves: Vec<Tensor> = model.store().iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |tape: &mut Tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            model.loss::<ChaCha8Rng>(tape, &bound, &frames, &targets, None)
        },
        &leaves,
        opts,
    )?;
    Ok(GradCase {
        target: "decode_train",
        description: format!(
            "E={} D={} H={heads} d_k={d_k} T={t} chunks={} targets={targets:?}",
            cfg.encoder_layers, cfg.decoder_layers, cfg.chunks
        ),
        parameters: model.store().num_scalars(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
    })
}

/// `cases` random configurations of each training path.
pub fn gradient_suite(cases: usize, seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * cases);
    for _ in 0..cases {
        out.push(check_ca_train_step(&mut rng, opts)?);
    }
    for _ in 0..cases {
        out.push(check_decode_train(&mut rng, opts)?);
    }
    Ok(out)
}
