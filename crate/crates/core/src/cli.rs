//! Command-line front end. Machine-readable output goes to stdout as JSON
//! (one object per line); logs and errors go to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::evaluate_policy;
use crate::harness::experiment::{self, RunRecorder};
use crate::inference::{self, PolicyKind, RemaskPolicy};
use crate::model::ModelDenoiser;
use crate::rng;
use crate::scene::{render_features, Split};
use crate::training;

#[derive(Debug, Parser)]
#[command(name = "maskdiff", version, about = "Masked-diffusion word recognizer on synthetic feature grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and eval datasets into a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics.jsonl and checkpoint.bin.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split of a generated dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode one word and print every denoising step.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        word: String,
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the four ablation cells and sweep K for LC and BLC.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of the training loss gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const TRAIN_FILE: &str = "train.bin";
const EVAL_FILE: &str = "eval.bin";

/// Parses `argv` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn emit(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn policy_for(kind: PolicyKind, steps: Option<usize>, seq_len: usize) -> Result<RemaskPolicy> {
    RemaskPolicy::new(kind, steps.unwrap_or_else(|| kind.default_steps(seq_len)), seq_len)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData { config, out: dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let prep = experiment::prepare(&cfg)?;
            for (split, samples, file) in [(Split::Train, &prep.train, TRAIN_FILE), (Split::Eval, &prep.eval, EVAL_FILE)] {
                let path = dir.join(file);
                save_checkpoint(&path, &experiment::dataset_to_checkpoint(samples, &cfg, split))?;
                emit(out, &serde_json::json!({ "split": file.trim_end_matches(".bin"), "n": samples.len(), "path": path }))?;
            }
            Ok(())
        }
        Command::Train { config, seed, out: dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let prep = experiment::prepare(&cfg)?;
            let mut rec = RunRecorder::new(&cfg, Some(&dir))?;
            let outcome = training::train_loop(cfg.model, &cfg.train, &prep.vocab, &prep.train, seed, &mut rec)?;
            let path = dir.join("checkpoint.bin");
            emit(out, &serde_json::json!({
                "checkpoint": path,
                "steps": outcome.opt.step,
                "config_hash": cfg.hash_hex(),
                "seed": seed,
            }))
        }
        Command::Eval { ckpt, policy, steps, data } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = ck.config()?;
            let params = ck.params()?;
            let vocab = cfg.vocab()?;
            let samples = experiment::dataset_from_checkpoint(&load_checkpoint(&data_file(&data))?, &vocab)?;
            let policy = policy_for(policy, steps, cfg.model.seq_len)?;
            let (report, _) = evaluate_policy(&params, &vocab, &samples, &policy)?;
            emit(out, &report)
        }
        Command::Trace { ckpt, word, policy, steps } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = ck.config()?;
            let params = ck.params()?;
            let vocab = cfg.vocab()?;
            let ids = vocab.encode(&word, cfg.model.seq_len)?;
            let codebook = cfg.codebook()?;
            let mut r = rng::stream(&[rng::TAG_EVAL_DATA, cfg.data.seed, rng::hash_str(&word)]);
            let grid = render_features(&ids, &cfg.data.corruption, &mut r, &vocab, &codebook);
            let policy = policy_for(policy, steps, cfg.model.seq_len)?;
            let model = ModelDenoiser::new(&params, &grid);
            let (result, trace) = inference::run(&model, &policy, vocab.mask_id())?;
            for rec in trace.records(&vocab) {
                emit(out, &rec)?;
            }
            log::info!("decoded {:?} for {:?}", vocab.decode(&result), word);
            Ok(())
        }
        Command::Ablate { config, out: dir, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            std::fs::create_dir_all(&dir)?;
            experiment::ablate(&cfg, &seeds, Some(&dir), &mut |v| emit(out, v))?;
            Ok(())
        }
        Command::Gradcheck { config, coords, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = experiment::gradient_check(cfg.model, &cfg.data.charset, coords, seed)?;
            emit(out, &report)?;
            if report.max_rel_err >= 1e-3 {
                return Err(Error::NonFinite(format!("gradient check failed: max relative error {:.3e}", report.max_rel_err)));
            }
            Ok(())
        }
    }
}

/// `--data` may name the directory written by `gen-data` or a dataset file directly.
fn data_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(EVAL_FILE)
    } else {
        path.to_path_buf()
    }
}
