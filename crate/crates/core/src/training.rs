//! Objectives, optimizer and the training loop.
//!
//! Two objectives are summed: the denoising loss averages the negative
//! log-likelihood over masked positions only, the correction loss averages it
//! over every position of a token-replaced (unmasked) input. Each batch element
//! is routed to one of the two branches.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelDenoiser, Params, ProbMatrix, Real};
use crate::noising::{self, MaskPattern, MaskStrategy, NoiseSpec, NoisedSeq};
use crate::rng;
use crate::scene::{FeatureGrid, Sample};
use crate::vocab::{TokenId, TokenSeq, Vocab};

/// `−(1/l1) Σ_{i masked} ln p_i(y_i)`.
pub fn denoising_loss(probs: &ProbMatrix, y: &[TokenId], pattern: &MaskPattern) -> Result<f64> {
    let l1 = pattern.count();
    if l1 == 0 {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = (0..y.len())
        .filter(|&i| pattern.masked[i])
        .map(|i| f64::from(probs.row(i)[y[i] as usize]).ln())
        .sum();
    Ok(-sum / l1 as f64)
}

/// `−(1/L) Σ_i ln p_i(y_i)`.
pub fn correction_loss(probs: &ProbMatrix, y: &[TokenId]) -> f64 {
    let sum: f64 = (0..y.len()).map(|i| f64::from(probs.row(i)[y[i] as usize]).ln()).sum();
    -sum / y.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Denoising,
    Correction,
}

#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub target: TokenSeq,
    pub branch: Branch,
    pub input: NoisedSeq,
    /// Strategy drawn for denoising-side examples; `None` for plain correction examples.
    pub strategy: Option<MaskStrategy>,
    pub grid: &'a FeatureGrid,
}

impl TrainExample<'_> {
    /// `l1` for the denoising branch, `l2` for the correction branch.
    pub fn noise_count(&self) -> usize {
        match self.branch {
            Branch::Denoising => self.input.num_masked(),
            Branch::Correction => self.input.num_replaced(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Losses {
    pub denoising: f64,
    pub correction: f64,
    pub n_denoising: usize,
    pub n_correction: usize,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.denoising + self.correction
    }
}

/// Per-row weights `w_i` such that the example loss is `−Σ w_i ln p_i(y_i)`.
fn row_weights(ex: &TrainExample<'_>) -> Result<Vec<f64>> {
    let len = ex.target.len();
    match ex.branch {
        Branch::Denoising => {
            let l1 = ex.input.num_masked();
            if l1 == 0 {
                return Err(Error::EmptyMask);
            }
            Ok(ex.input.pattern.masked.iter().map(|&m| if m { 1.0 / l1 as f64 } else { 0.0 }).collect())
        }
        Branch::Correction => Ok(vec![1.0 / len as f64; len]),
    }
}

fn memory_of<F: Real>(grid: &FeatureGrid) -> Vec<F> {
    grid.values.iter().map(|&v| F::from_f32(v).unwrap()).collect()
}

/// Computes the batch losses and, when `grads` is given, accumulates their gradient.
fn batch_pass<F: Real>(batch: &[TrainExample<'_>], params: &Params<F>, mut grads: Option<&mut Params<F>>) -> Result<Losses> {
    let n_d = batch.iter().filter(|e| e.branch == Branch::Denoising).count();
    let n_c = batch.len() - n_d;
    let mut losses = Losses { n_denoising: n_d, n_correction: n_c, ..Losses::default() };
    let vocab = params.cfg.vocab_size;
    for ex in batch {
        let weights = row_weights(ex)?;
        let denom = match ex.branch {
            Branch::Denoising => n_d,
            Branch::Correction => n_c,
        } as f64;
        let acts = model::forward(params, &memory_of::<F>(ex.grid), &ex.input.ids)?;
        let logp = acts.log_probs();
        let mut loss = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                loss -= w * logp.row(i)[ex.target[i] as usize].to_f64().unwrap();
            }
        }
        match ex.branch {
            Branch::Denoising => losses.denoising += loss / denom,
            Branch::Correction => losses.correction += loss / denom,
        }
        if let Some(g) = grads.as_deref_mut() {
            let mut dlogits = vec![F::zero(); logp.data.len()];
            for (i, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let scale = F::from_f64(w / denom).unwrap();
                let row = &mut dlogits[i * vocab..(i + 1) * vocab];
                for (j, d) in row.iter_mut().enumerate() {
                    *d = scale * logp.row(i)[j].exp();
                }
                row[ex.target[i] as usize] = row[ex.target[i] as usize] - scale;
            }
            model::backward(params, &acts, &dlogits, g);
        }
    }
    Ok(losses)
}

/// Mean denoising loss over denoising-branch examples plus mean correction
/// loss over correction-branch examples. A branch absent from the batch
/// contributes 0.
pub fn total_loss<F: Real>(batch: &[TrainExample<'_>], params: &Params<F>) -> Result<Losses> {
    let losses = batch_pass(batch, params, None)?;
    warn_missing_branches(&losses);
    Ok(losses)
}

/// [`total_loss`] together with its gradient.
pub fn loss_and_grad<F: Real>(batch: &[TrainExample<'_>], params: &Params<F>) -> Result<(Losses, Params<F>)> {
    let mut grads = params.zeros_like();
    let losses = batch_pass(batch, params, Some(&mut grads))?;
    Ok((losses, grads))
}

fn warn_missing_branches(l: &Losses) {
    if l.n_denoising == 0 {
        log::warn!("batch has no denoising examples; L_denoising term is 0");
    }
    if l.n_correction == 0 {
        log::warn!("batch has no correction examples; L_correction term is 0");
    }
}

fn default_strategies() -> Vec<MaskStrategy> {
    MaskStrategy::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Probability that a batch element goes to the correction branch (when TRN is on).
    pub branch_correction_prob: f64,
    pub trn_enabled: bool,
    #[serde(default = "default_strategies")]
    pub mask_strategy_set: Vec<MaskStrategy>,
    /// Block count used for BlockLowConf training patterns.
    pub blc_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            warmup_steps: 250,
            total_steps: 5000,
            batch_size: 64,
            branch_correction_prob: 0.5,
            trn_enabled: true,
            mask_strategy_set: default_strategies(),
            blc_steps: 3,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(0.0..=1.0).contains(&self.branch_correction_prob) {
            return bad(format!("branch_correction_prob {} not in [0, 1]", self.branch_correction_prob));
        }
        if self.mask_strategy_set.is_empty() {
            return bad("mask_strategy_set is empty".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("lr, weight_decay and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec { strategies: self.mask_strategy_set.clone(), trn: self.trn_enabled, blc_steps: self.blc_steps }
    }
}

/// Linear warmup from 0 to `cfg.lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Params<f32>,
    pub v: Params<f32>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl OptState {
    pub fn new(params: &Params<f32>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam update with learning rate `lr`.
pub fn adamw_update(params: &mut Params<f32>, opt: &mut OptState, grads: &Params<f32>, lr: f64, cfg: &TrainConfig) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (lr, wd, eps) = (lr as f32, cfg.weight_decay as f32, cfg.adam_eps as f32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.m.tensors_mut())
        .zip(opt.v.tensors_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.data[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_d: f64,
    pub loss_c: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Computes the batch gradient, clips it and applies one AdamW update at
/// `lr_schedule(opt.step + 1)`.
pub fn train_step(
    params: &mut Params<f32>,
    opt: &mut OptState,
    batch: &[TrainExample<'_>],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = opt.step + 1;
    if !params.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: "parameters are not finite before the update".into() });
    }
    let (losses, mut grads) = loss_and_grad(batch, params)?;
    if !losses.total().is_finite() {
        let detail = format!(
            "loss_d = {}, loss_c = {}, batch = {} ({} denoising / {} correction), param norm = {}",
            losses.denoising,
            losses.correction,
            batch.len(),
            losses.n_denoising,
            losses.n_correction,
            params.sq_norm().sqrt()
        );
        return Err(Error::NonFiniteLoss { step, detail });
    }
    let grad_norm = f64::from(grads.sq_norm()).sqrt();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        grads.scale((cfg.grad_clip / grad_norm) as f32);
    }
    let lr = lr_schedule(step, cfg);
    adamw_update(params, opt, &grads, lr, cfg);
    Ok(StepMetrics {
        step,
        loss_d: losses.denoising,
        loss_c: losses.correction,
        lr,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Assembles the batch for update number `step` (1-based). Element `b` is a
/// pure function of `(seed, step, b)` and the current parameters.
pub fn build_batch<'a>(
    step: usize,
    cfg: &TrainConfig,
    vocab: &Vocab,
    dataset: &'a [Sample],
    params: &Params<f32>,
    seed: u64,
) -> Result<Vec<TrainExample<'a>>> {
    let spec = cfg.noise_spec();
    (0..cfg.batch_size)
        .map(|b| {
            let mut r = rng::stream(&[rng::TAG_EXAMPLE, seed, step as u64, b as u64]);
            let sample = &dataset[r.random_range(0..dataset.len())];
            let y = &sample.ids;
            if cfg.trn_enabled && r.random::<f64>() < cfg.branch_correction_prob {
                let l2 = r.random_range(0..=y.len());
                let input = noising::token_replace(y, l2, vocab, &mut r)?;
                return Ok(TrainExample { target: y.clone(), branch: Branch::Correction, input, strategy: None, grid: &sample.grid });
            }
            let aux = ModelDenoiser::new(params, &sample.grid);
            let (kind, input) = noising::sample_training_noise(y, vocab, &spec, &mut r, Some(&aux))?;
            let branch = if kind == MaskStrategy::Refinement { Branch::Correction } else { Branch::Denoising };
            Ok(TrainExample { target: y.clone(), branch, input, strategy: Some(kind), grid: &sample.grid })
        })
        .collect()
}

/// Receives the metrics stream and periodic checkpoints.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &Params<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects metrics in memory.
#[derive(Debug, Default)]
pub struct MetricsLog(pub Vec<StepMetrics>);

impl TrainObserver for MetricsLog {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        self.0.push(m.clone());
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: Params<f32>,
    pub opt: OptState,
}

/// Trains from a fresh initialization seeded by `seed`.
pub fn train_loop(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
    dataset: &[Sample],
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if model_cfg.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match charset size {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    let mut params = Params::<f32>::init(model_cfg, seed)?;
    let mut opt = OptState::new(&params);
    for step in 1..=cfg.total_steps {
        let batch = build_batch(step, cfg, vocab, dataset, &params, seed)?;
        let metrics = train_step(&mut params, &mut opt, &batch, cfg)?;
        observer.on_step(&metrics)?;
        if cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 && step != cfg.total_steps {
            observer.on_checkpoint(step, &params)?;
        }
    }
    observer.on_checkpoint(cfg.total_steps, &params)?;
    Ok(TrainOutcome { params, opt })
}
