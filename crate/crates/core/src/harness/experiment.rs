use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{correction_probe, evaluate_policy, EvalReport, PolicyReport};
use crate::inference::{PolicyKind, RemaskPolicy};
use crate::model::gradcheck::{self, GradCheckReport};
use crate::model::{ModelConfig, Params, Tensor};
use crate::noising::{random_mask, token_replace, MaskStrategy};
use crate::rng;
use crate::scene::{gen_dataset, Codebook, CorruptionConfig, FeatureGrid, Sample, Split};
use crate::training::{self, loss_and_grad, total_loss, Branch, StepMetrics, TrainExample, TrainObserver};
use crate::vocab::{TokenId, TokenSeq, Vocab};

/// Replaced characters per sample in the correction probe.
pub const PROBE_REPLACEMENTS: usize = 2;

pub struct Prepared {
    pub vocab: Vocab,
    pub lexicon: Vec<String>,
    pub codebook: Codebook,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Builds the vocabulary, codebook and both dataset splits from the config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let lexicon = cfg.lexicon()?;
    let codebook = cfg.codebook()?;
    let d = &cfg.data;
    let l = cfg.model.seq_len;
    let train = gen_dataset(&lexicon, &vocab, l, d.n_train, &d.corruption, &codebook, d.seed, Split::Train)?;
    let eval = gen_dataset(&lexicon, &vocab, l, d.n_eval, &d.corruption, &codebook, d.seed, Split::Eval)?;
    Ok(Prepared { vocab, lexicon, codebook, train, eval })
}

/// PD, AR, Re (K = 2) and LC/BLC at the configured K.
pub fn standard_policies(cfg: &ExperimentConfig) -> Vec<RemaskPolicy> {
    let l = cfg.model.seq_len;
    let k = match cfg.infer.policy {
        PolicyKind::Lc | PolicyKind::Blc => cfg.infer.steps,
        _ => PolicyKind::Blc.default_steps(l),
    };
    vec![
        RemaskPolicy::default_for(PolicyKind::Pd, l),
        RemaskPolicy::default_for(PolicyKind::Ar, l),
        RemaskPolicy::default_for(PolicyKind::Re, l),
        RemaskPolicy { kind: PolicyKind::Lc, steps: k },
        RemaskPolicy { kind: PolicyKind::Blc, steps: k },
    ]
}

pub fn evaluate(
    params: &Params<f32>,
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    eval: &[Sample],
    policies: &[RemaskPolicy],
    label: &str,
    seed: u64,
) -> Result<EvalReport> {
    let policies = policies
        .iter()
        .map(|p| evaluate_policy(params, vocab, eval, p).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let probe = correction_probe(params, vocab, eval, PROBE_REPLACEMENTS, cfg.data.seed)?;
    Ok(EvalReport {
        label: label.to_string(),
        config_hash: cfg.hash_hex(),
        seed,
        policies,
        correction_probe: Some(probe),
    })
}

/// Writes one JSON object per training step and optional checkpoints.
pub struct RunRecorder {
    cfg: ExperimentConfig,
    metrics: Option<BufWriter<File>>,
    ckpt_dir: Option<PathBuf>,
    pub log_every: usize,
}

impl RunRecorder {
    pub fn new(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Self> {
        let (metrics, ckpt_dir) = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                (Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?)), Some(dir.to_path_buf()))
            }
            None => (None, None),
        };
        Ok(Self { cfg: cfg.clone(), metrics, ckpt_dir, log_every: 250 })
    }
}

impl TrainObserver for RunRecorder {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n")?;
        }
        if self.log_every > 0 && m.step % self.log_every == 0 {
            log::info!("step {} loss_d {:.4} loss_c {:.4} lr {:.2e}", m.step, m.loss_d, m.loss_c, m.lr);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &Params<f32>) -> Result<()> {
        if let Some(dir) = &self.ckpt_dir {
            let ck = Checkpoint::from_params(&self.cfg, params, step as u64);
            let name = if step == self.cfg.train.total_steps { "checkpoint.bin".to_string() } else { format!("checkpoint-{step}.bin") };
            save_checkpoint(&dir.join(name), &ck)?;
        }
        if let Some(w) = &mut self.metrics {
            w.flush()?;
        }
        Ok(())
    }
}

pub struct ExperimentOutcome {
    pub params: Params<f32>,
    pub report: EvalReport,
}

/// Dataset generation, training with `seed`, then evaluation under every policy.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, label: &str, observer: &mut dyn TrainObserver) -> Result<ExperimentOutcome> {
    let prep = prepare(cfg)?;
    let out = training::train_loop(cfg.model, &cfg.train, &prep.vocab, &prep.train, seed, observer)?;
    let report = evaluate(&out.params, cfg, &prep.vocab, &prep.eval, &standard_policies(cfg), label, seed)?;
    Ok(ExperimentOutcome { params: out.params, report })
}

/// The four ablation cells: {random mask only, all seven strategies} × {TRN off, on}.
pub fn ablation_cells(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut cells = Vec::new();
    for (sname, set) in [("R", vec![MaskStrategy::RandomMask]), ("R+All", MaskStrategy::ALL.to_vec())] {
        for trn in [false, true] {
            let mut c = base.clone();
            c.train.mask_strategy_set = set.clone();
            c.train.trn_enabled = trn;
            cells.push((format!("{sname}{}", if trn { "+TRN" } else { "" }), c));
        }
    }
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub seed: u64,
    pub report: PolicyReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<EvalReport>,
    /// BLC and LC at K = 1..=8 on the full (all strategies + TRN) model.
    pub k_sweep: Vec<SweepPoint>,
}

pub const K_SWEEP: std::ops::RangeInclusive<usize> = 1..=8;

pub fn k_sweep(params: &Params<f32>, vocab: &Vocab, eval: &[Sample], seed: u64) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for kind in [PolicyKind::Blc, PolicyKind::Lc] {
        for k in K_SWEEP {
            let policy = RemaskPolicy::new(kind, k, params.cfg.seq_len)?;
            let (report, _) = evaluate_policy(params, vocab, eval, &policy)?;
            out.push(SweepPoint { seed, report });
        }
    }
    Ok(out)
}

/// Trains every ablation cell for every seed and runs the K sweep on the full
/// model. Each report is handed to `emit` as soon as it is ready.
pub fn ablate(
    base: &ExperimentConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    emit: &mut dyn FnMut(&serde_json::Value) -> Result<()>,
) -> Result<AblationReport> {
    let mut cells = Vec::new();
    let mut sweep = Vec::new();
    for (label, cfg) in ablation_cells(base) {
        let prep = prepare(&cfg)?;
        for &seed in seeds {
            let dir = out_dir.map(|d| d.join(format!("{}-seed{seed}", label.replace('+', "_"))));
            let mut rec = RunRecorder::new(&cfg, dir.as_deref())?;
            let out = training::train_loop(cfg.model, &cfg.train, &prep.vocab, &prep.train, seed, &mut rec)?;
            let report = evaluate(&out.params, &cfg, &prep.vocab, &prep.eval, &standard_policies(&cfg), &label, seed)?;
            emit(&serde_json::json!({ "kind": "cell", "report": &report }))?;
            cells.push(report);
            if cfg.train.trn_enabled && cfg.train.mask_strategy_set.len() == MaskStrategy::ALL.len() {
                for point in k_sweep(&out.params, &prep.vocab, &prep.eval, seed)? {
                    emit(&serde_json::json!({ "kind": "k_sweep", "point": &point }))?;
                    sweep.push(point);
                }
            }
        }
    }
    let report = AblationReport { cells, k_sweep: sweep };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Finite-difference check of the total loss on a two-example batch (one
/// denoising, one correction) in 64-bit arithmetic.
pub fn gradient_check(model: ModelConfig, charset: &str, coords: usize, seed: u64) -> Result<GradCheckReport> {
    model.validate()?;
    let vocab = Vocab::new(charset)?;
    if vocab.size() != model.vocab_size {
        return Err(Error::Config(format!("charset gives {} tokens, model expects {}", vocab.size(), model.vocab_size)));
    }
    let params = Params::<f32>::init(model, seed)?.cast::<f64>();
    let l = model.seq_len;
    let codebook = Codebook::new(&vocab, model.d_model, seed);
    let corruption = CorruptionConfig { occlusion_rate: 0.0, substitution_rate: 0.0, noise_sigma: 0.2 };
    let words: Vec<String> = (0..2)
        .map(|w| (0..l.div_ceil(2).max(1)).map(|i| vocab.characters()[(w * 3 + i) % vocab.num_chars()]).collect())
        .collect();
    let data = gen_dataset(&words, &vocab, l, 2, &corruption, &codebook, seed, Split::Train)?;
    let mut r = rng::stream(&[0x6C, seed]);
    let y0 = data[0].ids.clone();
    let y1 = data[1].ids.clone();
    let batch = vec![
        TrainExample {
            input: random_mask(&y0, l.div_ceil(2), &vocab, &mut r)?,
            target: y0,
            branch: Branch::Denoising,
            strategy: Some(MaskStrategy::RandomMask),
            grid: &data[0].grid,
        },
        TrainExample {
            input: token_replace(&y1, l.div_ceil(3), &vocab, &mut r)?,
            target: y1,
            branch: Branch::Correction,
            strategy: None,
            grid: &data[1].grid,
        },
    ];
    let (_, grads) = loss_and_grad(&batch, &params)?;
    Ok(gradcheck::check(&params, &grads, |p| total_loss(&batch, p).expect("valid batch").total(), coords, 1e-4, seed))
}

/// Stores a dataset in the checkpoint container.
pub fn dataset_to_checkpoint(samples: &[Sample], cfg: &ExperimentConfig, split: Split) -> Checkpoint {
    let n = samples.len();
    let (l, d) = (cfg.model.seq_len, cfg.model.d_model);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let labels = samples.iter().flat_map(|s| s.ids.iter().map(|&t| t as f32)).collect();
    let grids = samples.iter().flat_map(|s| s.grid.values.iter().copied()).collect();
    let occ = samples.iter().flat_map(|s| s.grid.occluded.iter().map(|&b| flag(b))).collect();
    let sub = samples.iter().flat_map(|s| s.grid.substituted.iter().map(|&b| flag(b))).collect();
    let header = format!("split = \"{}\"\n{}", if split == Split::Train { "train" } else { "eval" }, cfg.to_toml());
    Checkpoint {
        header,
        tensors: vec![
            ("labels".into(), Tensor { shape: vec![n, l], data: labels }),
            ("grids".into(), Tensor { shape: vec![n, l, d], data: grids }),
            ("occluded".into(), Tensor { shape: vec![n, l], data: occ }),
            ("substituted".into(), Tensor { shape: vec![n, l], data: sub }),
        ],
        step: 0,
    }
}

pub fn dataset_from_checkpoint(ck: &Checkpoint, vocab: &Vocab) -> Result<Vec<Sample>> {
    let get = |name: &str| ck.tensor(name).ok_or_else(|| Error::Shape(format!("dataset file lacks tensor {name}")));
    let (labels, grids, occ, sub) = (get("labels")?, get("grids")?, get("occluded")?, get("substituted")?);
    let [n, l] = labels.shape[..] else {
        return Err(Error::Shape(format!("labels must be rank 2, got {:?}", labels.shape)));
    };
    let d = *grids.shape.get(2).ok_or_else(|| Error::Shape("grids must be rank 3".into()))?;
    if grids.shape != [n, l, d] || occ.shape != [n, l] || sub.shape != [n, l] {
        return Err(Error::Shape("dataset tensors disagree on shape".into()));
    }
    (0..n)
        .map(|i| {
            let ids: Vec<TokenId> = labels.data[i * l..(i + 1) * l].iter().map(|&v| v as TokenId).collect();
            if ids.iter().any(|&t| t as usize >= vocab.size()) {
                return Err(Error::Shape(format!("sample {i} has out-of-vocabulary labels")));
            }
            let ids = TokenSeq::new(ids);
            Ok(Sample {
                text: vocab.decode(&ids),
                ids,
                grid: FeatureGrid {
                    len: l,
                    dim: d,
                    values: grids.data[i * l * d..(i + 1) * l * d].to_vec(),
                    occluded: occ.data[i * l..(i + 1) * l].iter().map(|&v| v != 0.0).collect(),
                    substituted: sub.data[i * l..(i + 1) * l].iter().map(|&v| v != 0.0).collect(),
                },
            })
        })
        .collect()
}
