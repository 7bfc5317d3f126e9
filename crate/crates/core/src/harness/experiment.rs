//! Experiment configuration and the generate → train → decode → latency
//! pipeline.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latency::{corpus_latency, token_accuracy, LatencyReport, UtteranceResult};
use super::plot::halting_svg;
use super::task::{gen_copy_task, AlignedSample, TaskConfig};
use crate::attention::ChunkConfig;
use crate::baseline::{HaltingPolicy, PolicyKind};
use crate::cumulative::{HaltReason, HaltingTrace};
use crate::error::{Error, Result};
use crate::model::{Adam, DecodeOptions, Model, ModelConfig, OptimConfig};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Maximum look-ahead `M` past the previous synchronised position.
    pub lookahead: Option<usize>,
    pub max_len: usize,
    /// Second-pass window of the MoChA policy.
    pub mocha_width: usize,
    /// Policies decoded by `run_experiment`; the first one is the primary.
    pub policies: Vec<PolicyKind>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            lookahead: None,
            max_len: 32,
            mocha_width: 4,
            policies: vec![PolicyKind::Ca, PolicyKind::Mocha, PolicyKind::Hsdacs],
        }
    }
}

impl StreamConfig {
    pub fn decode_options(&self, kind: PolicyKind) -> DecodeOptions {
        DecodeOptions {
            policy: HaltingPolicy {
                kind,
                chunk_width: self.mocha_width,
                lookahead: self.lookahead,
            },
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: 2000, test: 200 }
    }
}

/// Full experiment description. `model.vocab` and `model.input_dim` are
/// taken from the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The model config with task-derived widths filled in.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.task.model_vocab(),
            input_dim: self.task.input_dim,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        self.optim.validate()?;
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.stream.max_len == 0 {
            return Err(Error::Config("stream.max_len must be at least 1".into()));
        }
        for &kind in &self.stream.policies {
            self.stream.decode_options(kind).policy.validate()?;
        }
        Ok(())
    }

    /// Seeds of the train and test splits.
    pub fn split_seeds(&self) -> (u64, u64) {
        (self.seed.wrapping_mul(2).wrapping_add(1), self.seed.wrapping_mul(2).wrapping_add(2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Trains a fresh model on `train`, calling `on_epoch` after every epoch.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &[AlignedSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("no training samples"));
    }
    let mut model = Model::new(cfg.resolved_model(), cfg.seed)?;
    let mut adam = Adam::new(cfg.optim.clone(), model.store());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let targets: Vec<Vec<usize>> = train.iter().map(AlignedSample::targets).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 1..=cfg.optim.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.optim.batch_size) {
            let items: Vec<(&Tensor, &[usize])> = batch.iter().map(|&i| (&train[i].frames, targets[i].as_slice())).collect();
            total += model.train_batch(&mut adam, &items, &mut rng)? * items.len() as f64;
        }
        let log = EpochLog {
            epoch,
            loss: total / train.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Streams every sample through the decoder.
pub fn decode_corpus(model: &Model, samples: &[AlignedSample], opts: &DecodeOptions) -> Result<Vec<UtteranceResult>> {
    samples
        .iter()
        .enumerate()
        .map(|(utt_id, s)| {
            let r = model.decode_stream(&s.frames, opts)?;
            Ok(UtteranceResult {
                utt_id,
                hyp: r.tokens,
                reference: s.reference(),
                boundaries: s.boundaries.clone(),
                traces: r.traces,
                frames: s.len(),
                truncated: r.truncated,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub token_accuracy: f64,
    pub exact_match: f64,
    /// Corpus latency in frames; `None` when no token was decoded correctly.
    pub latency: Option<f64>,
    pub latency_tokens: usize,
    pub steps: usize,
    pub triggered: usize,
    pub lookahead_caps: usize,
    pub exhausted: usize,
    pub truncated: usize,
}

pub fn summarize(policy: PolicyKind, results: &[UtteranceResult], chunks: &ChunkConfig) -> PolicySummary {
    let traces = || results.iter().flat_map(|u| &u.traces);
    let count = |r: HaltReason| traces().filter(|t| t.reason == r).count();
    let latency = corpus_latency(results, chunks).ok();
    PolicySummary {
        policy,
        token_accuracy: token_accuracy(results),
        exact_match: results.iter().filter(|u| u.hyp == u.reference).count() as f64 / results.len().max(1) as f64,
        latency_tokens: latency.as_ref().map_or(0, |l| l.included),
        latency: latency.map(|l| l.mean),
        steps: traces().count(),
        triggered: count(HaltReason::Triggered),
        lookahead_caps: count(HaltReason::LookaheadCap),
        exhausted: count(HaltReason::Exhausted),
        truncated: results.iter().filter(|u| u.truncated).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub chunks: ChunkConfig,
    pub lookahead: Option<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub parameters: usize,
    pub epochs: Vec<EpochLog>,
    pub policies: Vec<PolicySummary>,
    /// Latency of the same hypotheses when every token is emitted only
    /// after the whole utterance (full visibility).
    pub offline_latency: Option<f64>,
}

#[derive(Serialize)]
struct TraceRow {
    utt_id: usize,
    step: usize,
    j_star: usize,
    t_i: usize,
    p_len: usize,
    triggered: bool,
    reason: HaltReason,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, report: &LatencyReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for t in &report.tokens {
        w.serialize(t)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the header only when there are no tokens.
pub fn write_empty_metrics_csv(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["utt_id", "token_idx", "token", "b_hat", "b_ref", "delta"])?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace_csv(path: impl AsRef<Path>, results: &[UtteranceResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for u in results {
        for t in &u.traces {
            w.serialize(trace_row(u.utt_id, t))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn trace_row(utt_id: usize, t: &HaltingTrace) -> TraceRow {
    TraceRow {
        utt_id,
        step: t.step,
        j_star: t.halt,
        t_i: t.synced,
        p_len: t.probs.len(),
        triggered: t.triggered,
        reason: t.reason,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn suffix(kind: PolicyKind, primary: PolicyKind) -> String {
    if kind == primary {
        String::new()
    } else {
        format!("_{kind}")
    }
}

/// Writes metrics, traces and (for the first utterance) a halting plot for
/// one policy's results.
pub fn write_policy_artifacts(
    out: &Path,
    kind: PolicyKind,
    primary: PolicyKind,
    results: &[UtteranceResult],
    chunks: &ChunkConfig,
) -> Result<()> {
    let sfx = suffix(kind, primary);
    let metrics = out.join(format!("metrics{sfx}.csv"));
    match corpus_latency(results, chunks) {
        Ok(report) => write_metrics_csv(&metrics, &report)?,
        Err(Error::UndefinedLatency) => write_empty_metrics_csv(&metrics)?,
        Err(e) => return Err(e),
    }
    write_trace_csv(out.join(format!("halting_trace{sfx}.csv")), results)?;
    if let Some(first) = results.first() {
        let svg = halting_svg(first, chunks);
        let path = out.join(format!("halting{sfx}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Runs the whole pipeline and writes its artifacts into `out`:
/// `config.toml`, `model.json`, `metrics*.csv`, `halting_trace*.csv`,
/// `halting*.svg`, `decoded*.json` and `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<RunSummary> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("write"))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out, e).in_stage("write"))?;

    let (train_seed, test_seed) = cfg.split_seeds();
    let train = gen_copy_task(train_seed, cfg.data.train, &cfg.task).map_err(|e| e.in_stage("generate"))?;
    let test = gen_copy_task(test_seed, cfg.data.test, &cfg.task).map_err(|e| e.in_stage("generate"))?;
    log(&format!("generated {} train / {} test utterances", train.len(), test.len()));

    let (model, epochs) = train_model(cfg, &train, |e| {
        log(&format!("epoch {:>3}  loss {:.4}  {:.1}s", e.epoch, e.loss, e.seconds))
    })
    .map_err(|e| e.in_stage("train"))?;
    model.save(out.join("model.json")).map_err(|e| e.in_stage("write"))?;

    let chunks = cfg.model.chunks;
    let primary = cfg.stream.policies.first().copied().unwrap_or(PolicyKind::Ca);
    let mut policies = Vec::new();
    let mut offline_latency = None;
    for &kind in &cfg.stream.policies {
        let results =
            decode_corpus(&model, &test, &cfg.stream.decode_options(kind)).map_err(|e| e.in_stage("decode"))?;
        let summary = summarize(kind, &results, &chunks);
        log(&format!(
            "{kind:>6}: accuracy {:.4}  latency {}",
            summary.token_accuracy,
            summary.latency.map_or("undefined".into(), |l| format!("{l:.3}"))
        ));
        if kind == primary {
            offline_latency = corpus_latency(&results, &ChunkConfig::full()).ok().map(|r| r.mean);
        }
        write_policy_artifacts(out, kind, primary, &results, &chunks).map_err(|e| e.in_stage("latency"))?;
        write_json(&out.join(format!("decoded{}.json", suffix(kind, primary))), &results)
            .map_err(|e| e.in_stage("write"))?;
        policies.push(summary);
    }

    let summary = RunSummary {
        seed: cfg.seed,
        chunks,
        lookahead: cfg.stream.lookahead,
        train_samples: train.len(),
        test_samples: test.len(),
        parameters: model.store().num_scalars(),
        epochs,
        policies,
        offline_latency,
    };
    write_json(&out.join("summary.json"), &summary).map_err(|e| e.in_stage("write"))?;
    Ok(summary)
}
