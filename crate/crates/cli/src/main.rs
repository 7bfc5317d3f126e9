use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ca_stream::attention::ChunkConfig;
use ca_stream::baseline::PolicyKind;
use ca_stream::harness::{
    corpus_latency, dead_head_scenario, decode_corpus, gen_copy_task, gradient_suite, load_dataset, run_experiment,
    save_dataset, summarize, train_model, write_metrics_csv, write_trace_csv, AlignedSample, ExperimentConfig,
    UtteranceResult,
};
use ca_stream::model::Model;
use ca_stream::numerics::GradCheckOptions;
use ca_stream::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "ca-stream", version, about = "Toy streaming transducer with cumulative attention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Halting policy: ca, mocha or hsdacs.
    #[arg(long, global = true)]
    policy: Option<PolicyKind>,
    /// Maximum look-ahead M past the previous synchronised position.
    #[arg(long, global = true)]
    lookahead: Option<usize>,
    /// Encoder chunks as `L,C,R` or `full`.
    #[arg(long, global = true)]
    chunks: Option<ChunkConfig>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test splits of the copy task.
    GenData {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Training set written by `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stream a dataset through a trained model.
    Decode {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Test set written by `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus latency of a decode result.
    Latency {
        #[arg(long)]
        decoded: Option<PathBuf>,
    },
    /// Compare halting policies on dead-head streams and, with --model, on a test set.
    CompareHalting {
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        fire_at: usize,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of both training paths on random configurations.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Generate, train, decode with every policy, and measure latency.
    Run,
}

#[derive(Serialize, Deserialize)]
struct DecodedFile {
    policy: PolicyKind,
    chunks: ChunkConfig,
    lookahead: Option<usize>,
    results: Vec<UtteranceResult>,
}

/// Outcome of a command that ran to completion but whose checks failed.
#[derive(Debug)]
struct CheckFailed(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CheckFailed(msg))) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = common.lookahead {
        cfg.stream.lookahead = Some(m);
    }
    if let Some(c) = common.chunks {
        cfg.model.chunks = c;
    }
    if let Some(p) = common.policy {
        cfg.stream.policies = vec![p];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn test_set(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<AlignedSample>> {
    match data {
        Some(p) => load_dataset(p),
        None => gen_copy_task(cfg.split_seeds().1, cfg.data.test, &cfg.task),
    }
}

fn load_model(common: &Common, cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Model> {
    let default = common.out.join("model.json");
    let model = Model::load(path.unwrap_or(&default))?;
    if let Some(c) = common.chunks {
        if c != model.config().chunks {
            return Err(Error::Config(format!(
                "--chunks {c} differs from the checkpoint's {}; chunking is fixed at training time",
                model.config().chunks
            )));
        }
    }
    if model.config().input_dim != cfg.task.input_dim || model.config().vocab != cfg.task.model_vocab() {
        return Err(Error::Config("checkpoint widths do not match the task config".into()));
    }
    Ok(model)
}

fn dispatch(cli: Cli) -> Result<std::result::Result<(), CheckFailed>> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    let out = &common.out;
    match cli.command {
        Command::GenData { train, test } => {
            create_out(out)?;
            let (train_seed, test_seed) = cfg.split_seeds();
            let train = gen_copy_task(train_seed, train.unwrap_or(cfg.data.train), &cfg.task)?;
            let test = gen_copy_task(test_seed, test.unwrap_or(cfg.data.test), &cfg.task)?;
            save_dataset(out.join("train.json"), &train)?;
            save_dataset(out.join("test.json"), &test)?;
            println!("wrote {} train and {} test utterances to {}", train.len(), test.len(), out.display());
        }
        Command::Train { data, epochs } => {
            create_out(out)?;
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            let train = match data {
                Some(p) => load_dataset(p)?,
                None => gen_copy_task(cfg.split_seeds().0, cfg.data.train, &cfg.task)?,
            };
            let (model, logs) = train_model(&cfg, &train, |e| {
                println!("epoch {:>3}  loss {:.4}  {:.1}s", e.epoch, e.loss, e.seconds)
            })?;
            model.save(out.join("model.json"))?;
            write_json(&out.join("train_log.json"), &logs)?;
            println!("wrote {}", out.join("model.json").display());
        }
        Command::Decode { model, data, max_len } => {
            create_out(out)?;
            let m = load_model(common, &cfg, model.as_deref())?;
            let test = test_set(&cfg, data.as_deref())?;
            let kind = cfg.stream.policies[0];
            let mut opts = cfg.stream.decode_options(kind);
            if let Some(n) = max_len {
                opts.max_len = n;
            }
            let results = decode_corpus(&m, &test, &opts)?;
            let chunks = m.config().chunks;
            let s = summarize(kind, &results, &chunks);
            write_trace_csv(out.join("halting_trace.csv"), &results)?;
            write_json(
                &out.join("decoded.json"),
                &DecodedFile {
                    policy: kind,
                    chunks,
                    lookahead: opts.policy.lookahead,
                    results,
                },
            )?;
            println!(
                "{kind}: token accuracy {:.4}, exact match {:.4}, {} steps ({} capped, {} exhausted)",
                s.token_accuracy, s.exact_match, s.steps, s.lookahead_caps, s.exhausted
            );
        }
        Command::Latency { decoded } => {
            create_out(out)?;
            let path = decoded.unwrap_or_else(|| out.join("decoded.json"));
            let file: DecodedFile = read_json(&path)?;
            let chunks = common.chunks.unwrap_or(file.chunks);
            let report = corpus_latency(&file.results, &chunks)?;
            write_metrics_csv(out.join("metrics.csv"), &report)?;
            println!(
                "{}: corpus latency {:.4} frames over {} of {} reference tokens (chunks {chunks})",
                file.policy, report.mean, report.included, report.reference_tokens
            );
        }
        Command::CompareHalting {
            heads,
            fire_at,
            frames,
            model,
            data,
        } => {
            let m = cfg.stream.lookahead.unwrap_or(16);
            let r = dead_head_scenario(heads, fire_at, m, frames).map_err(|e| e.in_stage("dead-head scenario"))?;
            println!("dead-head streams: H={heads}, live heads fire at frame {fire_at}, M={m}, T={frames}");
            for h in &r.halts {
                println!("  {:>6}: halt at frame {:>3} ({:?})", h.policy.to_string(), h.halt, h.reason);
            }
            if model.is_some() {
                create_out(out)?;
                let trained = load_model(common, &cfg, model.as_deref())?;
                let test = test_set(&cfg, data.as_deref())?;
                let chunks = trained.config().chunks;
                let mut summaries = Vec::new();
                for kind in [PolicyKind::Ca, PolicyKind::Mocha, PolicyKind::Hsdacs] {
                    let results = decode_corpus(&trained, &test, &cfg.stream.decode_options(kind))?;
                    let s = summarize(kind, &results, &chunks);
                    println!(
                        "  {:>6}: accuracy {:.4}  latency {}  capped {}  exhausted {}",
                        kind.to_string(),
                        s.token_accuracy,
                        s.latency.map_or("undefined".into(), |l| format!("{l:.3}")),
                        s.lookahead_caps,
                        s.exhausted
                    );
                    summaries.push(s);
                }
                write_json(&out.join("compare_halting.json"), &(r, summaries))?;
            }
        }
        Command::GradCheck { cases, tol } => {
            let opts = GradCheckOptions::with_tol(tol);
            let seed = cfg.seed;
            let start = std::time::Instant::now();
            let report = gradient_suite(cases, seed, opts)?;
            let mut failed = 0;
            for c in &report {
                println!(
                    "{} {:<14} max rel err {:.3e}  ({} params)  {}",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.target,
                    c.max_rel_err,
                    c.parameters,
                    c.description
                );
                failed += usize::from(!c.passed);
            }
            println!("{} cases, {failed} failed, {:.1}s", report.len(), start.elapsed().as_secs_f64());
            if failed > 0 {
                return Ok(Err(CheckFailed(format!("{failed} gradient checks above {tol}"))));
            }
        }
        Command::Run => {
            let summary = run_experiment(&cfg, out, |line| println!("{line}"))?;
            if let Some(off) = summary.offline_latency {
                println!("offline latency {off:.3}");
            }
            println!("artifacts in {}", out.display());
        }
    }
    Ok(Ok(()))
}
