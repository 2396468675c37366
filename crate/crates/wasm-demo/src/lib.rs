//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use maskdiff::inference::{self, PolicyKind, RemaskPolicy};
use maskdiff::model::{Denoiser, ProbMatrix};
use maskdiff::noising::{self, ArDirection, MaskStrategy};
use maskdiff::{rng, Result, TokenId, Vocab};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Block partition used by BLC for a sequence of `len` positions and `k` steps.
pub fn block_layout(len: usize, k: usize) -> Result<Value> {
    let bs = inference::blocks(len, k)?;
    Ok(json!(bs.iter().map(|b| [b.start, b.end]).collect::<Vec<_>>()))
}

/// Applies one training corruption to `word`, padded to `len`.
///
/// `strategy` is a mask strategy name or `token_replace`; `amount` is `l1`
/// for random masks, `t` for the AR patterns and `l2` for replacement.
pub fn noise_word(word: &str, len: usize, strategy: &str, amount: usize, seed: u64) -> Result<Value> {
    let vocab = Vocab::lowercase();
    let y = vocab.encode(word, len)?;
    let mut r = rng::stream(&[seed]);
    let noised = match strategy {
        "token_replace" => noising::token_replace(&y, amount, &vocab, &mut r)?,
        other => match other.parse::<MaskStrategy>()? {
            MaskStrategy::RandomMask => noising::random_mask(&y, amount, &vocab, &mut r)?,
            MaskStrategy::FullMask => noising::full_mask(&y, &vocab),
            MaskStrategy::ForwardAr => noising::ar_mask(&y, amount, ArDirection::Forward, &vocab)?,
            MaskStrategy::BackwardAr => noising::ar_mask(&y, amount, ArDirection::Backward, &vocab)?,
            MaskStrategy::Refinement => noising::NoisedSeq::clean(&y),
            s => {
                return Err(maskdiff::Error::MissingConfidence(s));
            }
        },
    };
    let cells: Vec<Value> = (0..len)
        .map(|i| {
            let t = noised.ids[i];
            let kind = if noised.pattern.masked[i] {
                "mask"
            } else if noised.replaced[i] {
                "replaced"
            } else if t == vocab.pad_id() {
                "pad"
            } else {
                "kept"
            };
            let text = if t == vocab.pad_id() { "·".to_string() } else { vocab.decode(&[t]) };
            json!({ "text": text, "kind": kind })
        })
        .collect();
    Ok(json!({ "cells": cells, "masked": noised.num_masked(), "replaced": noised.num_replaced() }))
}

/// A predictor that ignores its input: every position is confident except
/// `trap`, whose top token only gets `trap_conf`.
pub struct TrapOracle {
    pub len: usize,
    pub trap: usize,
    pub trap_conf: f32,
}

const ORACLE_CHARS: &str = "abcd";

impl Denoiser for TrapOracle {
    fn seq_len(&self) -> usize {
        self.len
    }

    fn predict(&self, _ids: &[TokenId]) -> Result<ProbMatrix> {
        let v = ORACLE_CHARS.len() + 2;
        let rows: Vec<Vec<f32>> = (0..self.len)
            .map(|i| {
                let top = if i == self.trap { self.trap_conf } else { 0.95 };
                let mut row = vec![(1.0 - top) / (v - 1) as f32; v];
                row[i % ORACLE_CHARS.len()] = top;
                row
            })
            .collect();
        Ok(ProbMatrix::from_rows(&rows))
    }
}

/// Runs LC and BLC with `k` steps on the trap oracle and returns both traces.
pub fn trap_traces(len: usize, k: usize, trap: usize, trap_conf: f32) -> Result<Value> {
    if trap >= len || !(0.0..=1.0).contains(&trap_conf) {
        return Err(maskdiff::Error::Config(format!("trap position must be < {len} and confidence in [0, 1]")));
    }
    let vocab = Vocab::new(ORACLE_CHARS)?;
    let oracle = TrapOracle { len, trap, trap_conf };
    let mut out = serde_json::Map::new();
    for kind in [PolicyKind::Lc, PolicyKind::Blc] {
        let policy = RemaskPolicy::new(kind, k, len)?;
        let (result, trace) = inference::run(&oracle, &policy, vocab.mask_id())?;
        out.insert(
            kind.name().to_string(),
            json!({
                "steps": trace.records(&vocab),
                "remask_counts": trace.remask_counts(len),
                "output": vocab.decode(&result),
            }),
        );
    }
    Ok(Value::Object(out))
}

#[wasm_bindgen(js_name = blockLayout)]
pub fn block_layout_js(len: usize, k: usize) -> String {
    respond(block_layout(len, k))
}

#[wasm_bindgen(js_name = noiseWord)]
pub fn noise_word_js(word: &str, len: usize, strategy: &str, amount: usize, seed: u32) -> String {
    respond(noise_word(word, len, strategy, amount, u64::from(seed)))
}

#[wasm_bindgen(js_name = trapTraces)]
pub fn trap_traces_js(len: usize, k: usize, trap: usize, trap_conf: f32) -> String {
    respond(trap_traces(len, k, trap, trap_conf))
}
