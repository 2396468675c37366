use std::cell::Cell;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, RemaskPolicy};
use crate::model::{Denoiser, ModelDenoiser, Params, ProbMatrix};
use crate::noising;
use crate::rng;
use crate::scene::Sample;
use crate::vocab::{TokenId, Vocab};

/// Fraction of exact string matches.
pub fn word_accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], refs: &[T]) -> Result<f64> {
    if preds.len() != refs.len() {
        return Err(Error::LengthMismatch { preds: preds.len(), refs: refs.len() });
    }
    if preds.is_empty() {
        return Err(Error::EmptyEval);
    }
    let hits = preds.iter().zip(refs).filter(|(p, r)| p.as_ref() == r.as_ref()).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Wraps a denoiser and counts forward passes.
pub struct Counting<D> {
    pub inner: D,
    pub calls: Cell<usize>,
}

impl<D: Denoiser> Counting<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, calls: Cell::new(0) }
    }
}

impl<D: Denoiser> Denoiser for Counting<D> {
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    fn predict(&self, ids: &[TokenId]) -> Result<ProbMatrix> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub steps: usize,
    pub n: usize,
    pub word_accuracy: f64,
    pub n_occluded: usize,
    /// Word accuracy on samples with at least one occluded position.
    pub occluded_accuracy: f64,
    /// Median wall time per sample.
    pub median_ms: f64,
    pub forward_passes_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub policies: Vec<PolicyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_probe: Option<f64>,
}

impl EvalReport {
    pub fn policy(&self, name: &str, steps: usize) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name && p.steps == steps)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Decodes every sample with `policy`; returns the report and the decoded strings.
pub fn evaluate_policy(
    params: &Params<f32>,
    vocab: &Vocab,
    samples: &[Sample],
    policy: &RemaskPolicy,
) -> Result<(PolicyReport, Vec<String>)> {
    if samples.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut times = Vec::with_capacity(samples.len());
    let mut passes = 0usize;
    for s in samples {
        let model = Counting::new(ModelDenoiser::new(params, &s.grid));
        let start = Instant::now();
        let (out, _) = inference::run(&model, policy, vocab.mask_id())?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        passes += model.calls.get();
        preds.push(vocab.decode(&out));
    }
    let refs: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let occ: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].grid.any_occluded()).collect();
    let occluded_accuracy = if occ.is_empty() {
        f64::NAN
    } else {
        let p: Vec<&str> = occ.iter().map(|&i| preds[i].as_str()).collect();
        let r: Vec<&str> = occ.iter().map(|&i| refs[i]).collect();
        word_accuracy(&p, &r)?
    };
    let report = PolicyReport {
        policy: policy.kind.name().to_string(),
        steps: policy.steps,
        n: samples.len(),
        word_accuracy: word_accuracy(&preds, &refs)?,
        n_occluded: occ.len(),
        occluded_accuracy,
        median_ms: median(times),
        forward_passes_per_sample: passes as f64 / samples.len() as f64,
    };
    Ok((report, preds))
}

/// Injected-error probe: the ground truth with `n_replace` characters swapped
/// (unmasked) is fed as input to one forward pass; returns the fraction of
/// samples whose argmax output equals the ground truth.
pub fn correction_probe(params: &Params<f32>, vocab: &Vocab, samples: &[Sample], n_replace: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut fixed = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let mut r = rng::stream(&[rng::TAG_PROBE, seed, i as u64]);
        // corrupt characters of the word itself
        let text_len = s.text.chars().count();
        let k = n_replace.min(text_len);
        let mut input = s.ids.clone();
        for pos in index::sample(&mut r, text_len, k) {
            let one = noising::token_replace(&s.ids[pos..pos + 1], 1, vocab, &mut r)?;
            input[pos] = one.ids[0];
        }
        let model = ModelDenoiser::new(params, &s.grid);
        let out = inference::refine_once(&model, &input, vocab.mask_id())?;
        fixed += usize::from(out == s.ids);
    }
    Ok(fixed as f64 / samples.len() as f64)
}
