//! K-step denoising with remask policies.
//!
//! Decoding starts from an all-`[MASK]` sequence. Each step runs one forward
//! pass and takes the argmax at every position, masked or not, so that
//! unmasked tokens can still be corrected. Between steps a remask policy
//! decides which predictions are fed back as tokens and which revert to
//! `[MASK]`:
//!
//! | policy | steps | rule |
//! |--------|-------|------|
//! | `Pd`   | 1     | single parallel pass |
//! | `Ar`   | L     | commit one position per step, left to right |
//! | `Re`   | K     | feed every prediction back, nothing masked |
//! | `Lc`   | K     | remask positions below the mean confidence |
//! | `Blc`  | K     | as `Lc`, but only inside one block of size ≈ L/K per step |
//!
//! Committed (frozen) positions keep their token for the rest of the run.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, ProbMatrix};
use crate::vocab::{TokenId, TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Pd,
    Ar,
    Re,
    Lc,
    Blc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [PolicyKind::Pd, PolicyKind::Ar, PolicyKind::Re, PolicyKind::Lc, PolicyKind::Blc];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Pd => "pd",
            PolicyKind::Ar => "ar",
            PolicyKind::Re => "re",
            PolicyKind::Lc => "lc",
            PolicyKind::Blc => "blc",
        }
    }

    pub fn default_steps(self, seq_len: usize) -> usize {
        match self {
            PolicyKind::Pd => 1,
            PolicyKind::Ar => seq_len,
            PolicyKind::Re => 2,
            PolicyKind::Lc | PolicyKind::Blc => 3,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidPolicy(format!("unknown policy {s:?} (expected pd, ar, re, lc or blc)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemaskPolicy {
    pub kind: PolicyKind,
    pub steps: usize,
}

impl RemaskPolicy {
    /// Validates the step count against the policy: PD needs K = 1, AR needs
    /// K = L, the others need 1 ≤ K (and K ≤ L for BLC's block partition).
    pub fn new(kind: PolicyKind, steps: usize, seq_len: usize) -> Result<Self> {
        let ok = match kind {
            PolicyKind::Pd => steps == 1,
            PolicyKind::Ar => steps == seq_len,
            PolicyKind::Re | PolicyKind::Lc => steps >= 1,
            PolicyKind::Blc => (1..=seq_len).contains(&steps),
        };
        if !ok {
            return Err(Error::InvalidPolicy(format!("{kind} cannot run with K = {steps} at L = {seq_len}")));
        }
        Ok(Self { kind, steps })
    }

    pub fn default_for(kind: PolicyKind, seq_len: usize) -> Self {
        Self { kind, steps: kind.default_steps(seq_len) }
    }
}

/// Splits `[0, len)` into `steps` contiguous left-to-right blocks; the first
/// `len mod steps` blocks get the extra position.
pub fn blocks(len: usize, steps: usize) -> Result<Vec<Range<usize>>> {
    if steps == 0 || len < steps {
        return Err(Error::BlockPartition { len, steps });
    }
    let (base, extra) = (len / steps, len % steps);
    let mut start = 0;
    Ok((0..steps)
        .map(|b| {
            let size = base + usize::from(b < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect())
}

fn mean(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| f64::from(x)).sum::<f64>() / xs.len() as f64
}

/// Indices in `range` whose confidence is strictly below the mean over `range`.
pub fn below_mean(conf: &[f32], range: Range<usize>) -> Vec<usize> {
    let m = mean(&conf[range.clone()]);
    range.filter(|&i| f64::from(conf[i]) < m).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    /// 1-based step index.
    pub step: usize,
    /// Input to this step's forward pass.
    pub current: TokenSeq,
    pub masked: Vec<bool>,
    /// Predictions of this step (valid after [`denoise_step`]).
    pub preds: TokenSeq,
    pub conf: Vec<f32>,
    pub frozen: Vec<bool>,
}

pub fn init_state(len: usize, mask_id: TokenId) -> DenoiseState {
    DenoiseState {
        step: 1,
        current: TokenSeq::filled(len, mask_id),
        masked: vec![true; len],
        preds: TokenSeq::filled(len, mask_id),
        conf: vec![0.0; len],
        frozen: vec![false; len],
    }
}

/// Argmax over every token except `[MASK]` (lowest id wins ties).
pub fn argmax_excluding(probs: &ProbMatrix, mask_id: TokenId) -> (Vec<TokenId>, Vec<f32>) {
    let mut ids = Vec::with_capacity(probs.len());
    let mut conf = Vec::with_capacity(probs.len());
    for i in 0..probs.len() {
        let mut best = (0usize, f32::NEG_INFINITY);
        for (t, &p) in probs.row(i).iter().enumerate() {
            if t as TokenId != mask_id && p > best.1 {
                best = (t, p);
            }
        }
        ids.push(best.0 as TokenId);
        conf.push(best.1);
    }
    (ids, conf)
}

/// One forward pass; fills `preds` and `conf` for every position. Frozen
/// positions keep their committed token, with the model's probability of it
/// as their confidence.
pub fn denoise_step(model: &dyn Denoiser, state: &mut DenoiseState, mask_id: TokenId) -> Result<()> {
    let probs = model.predict(&state.current)?;
    let (mut ids, mut conf) = argmax_excluding(&probs, mask_id);
    for i in 0..ids.len() {
        if state.frozen[i] {
            ids[i] = state.current[i];
            conf[i] = probs.row(i)[ids[i] as usize];
        }
    }
    state.preds = TokenSeq::new(ids);
    state.conf = conf;
    Ok(())
}

/// Applies the remask policy to a predicted state, returning the next state
/// and the positions reverted to `[MASK]`.
pub fn remask(state: &DenoiseState, policy: &RemaskPolicy, mask_id: TokenId) -> Result<(DenoiseState, Vec<usize>)> {
    if state.step >= policy.steps {
        return Err(Error::StepOutOfRange { step: state.step, steps: policy.steps });
    }
    let len = state.preds.len();
    let j = state.step;
    let mut frozen = state.frozen.clone();
    let remasked: Vec<usize> = match policy.kind {
        PolicyKind::Pd => unreachable!("PD has a single step"),
        PolicyKind::Ar => {
            frozen[j - 1] = true;
            (j..len).collect()
        }
        PolicyKind::Re => Vec::new(),
        PolicyKind::Lc => below_mean(&state.conf, 0..len),
        PolicyKind::Blc => {
            let block = blocks(len, policy.steps)?[j - 1].clone();
            let low = below_mean(&state.conf, block.clone());
            for i in block {
                if !low.contains(&i) {
                    frozen[i] = true;
                }
            }
            low
        }
    };
    let mut masked = vec![false; len];
    let mut current = state.preds.clone();
    for &i in &remasked {
        masked[i] = true;
        current[i] = mask_id;
    }
    let next = DenoiseState {
        step: j + 1,
        current,
        masked,
        preds: state.preds.clone(),
        conf: state.conf.clone(),
        frozen,
    };
    Ok((next, remasked))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub input: TokenSeq,
    pub preds: TokenSeq,
    pub conf: Vec<f32>,
    /// Positions reverted to `[MASK]` after this step (empty on the last step).
    pub remasked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

/// One exported trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub input_string: String,
    pub pred_string: String,
    pub conf: Vec<f32>,
    pub remasked: Vec<usize>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// How often each position was remasked over the whole run.
    pub fn remask_counts(&self, len: usize) -> Vec<usize> {
        let mut counts = vec![0; len];
        for s in &self.steps {
            for &i in &s.remasked {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Masked-input count at each step.
    pub fn masked_counts(&self, mask_id: TokenId) -> Vec<usize> {
        self.steps.iter().map(|s| s.input.iter().filter(|&&t| t == mask_id).count()).collect()
    }

    /// Trace rendering keeps PAD visible as `·` so position indices line up.
    pub fn records(&self, vocab: &Vocab) -> Vec<TraceRecord> {
        let render = |seq: &[TokenId]| -> String {
            seq.iter()
                .map(|&t| if t == vocab.pad_id() { "·".to_string() } else { vocab.decode(&[t]) })
                .collect()
        };
        self.steps
            .iter()
            .map(|s| TraceRecord {
                step: s.step,
                input_string: render(&s.input),
                pred_string: render(&s.preds),
                conf: s.conf.clone(),
                remasked: s.remasked.clone(),
            })
            .collect()
    }
}

/// Runs K denoising steps with K − 1 remask events between them.
pub fn run(model: &dyn Denoiser, policy: &RemaskPolicy, mask_id: TokenId) -> Result<(TokenSeq, Trace)> {
    let len = model.seq_len();
    RemaskPolicy::new(policy.kind, policy.steps, len)?;
    let mut state = init_state(len, mask_id);
    let mut trace = Trace::default();
    loop {
        denoise_step(model, &mut state, mask_id)?;
        let input = state.current.clone();
        if state.step == policy.steps {
            trace.steps.push(TraceStep {
                step: state.step,
                input,
                preds: state.preds.clone(),
                conf: state.conf.clone(),
                remasked: Vec::new(),
            });
            return Ok((state.preds, trace));
        }
        let (next, remasked) = remask(&state, policy, mask_id)?;
        trace.steps.push(TraceStep {
            step: state.step,
            input,
            preds: state.preds.clone(),
            conf: state.conf.clone(),
            remasked,
        });
        state = next;
    }
}

/// A single forward pass over a fully visible input, argmax everywhere.
pub fn refine_once(model: &dyn Denoiser, input: &[TokenId], mask_id: TokenId) -> Result<TokenSeq> {
    let probs = model.predict(input)?;
    Ok(TokenSeq::new(argmax_excluding(&probs, mask_id).0))
}
