#![allow(dead_code)]

use maskdiff::model::{Denoiser, ProbMatrix};
use maskdiff::{Result, TokenId};

/// Plain left-to-right greedy decoder: position `t` is read off a forward
/// pass whose input holds the committed prefix followed by masks. The argmax
/// skips `mask_id` and takes the lowest id on ties.
pub fn reference_greedy(model: &dyn Denoiser, mask_id: TokenId) -> Result<Vec<TokenId>> {
    let len = model.seq_len();
    let mut seq = vec![mask_id; len];
    for t in 0..len {
        let probs = model.predict(&seq)?;
        seq[t] = best_token(probs.row(t), mask_id);
    }
    Ok(seq)
}

fn best_token(row: &[f32], mask_id: TokenId) -> TokenId {
    let mut best: Option<(usize, f32)> = None;
    for (t, &p) in row.iter().enumerate() {
        if t == mask_id as usize {
            continue;
        }
        match best {
            Some((_, q)) if p <= q => {}
            _ => best = Some((t, p)),
        }
    }
    best.expect("vocabulary has a non-mask token").0 as TokenId
}

/// Always predicts the same table: position `trap` gets its token with low
/// probability, every other position is confident.
pub struct OverconfidentOracle {
    pub len: usize,
    pub vocab: usize,
    pub trap: usize,
}

impl Denoiser for OverconfidentOracle {
    fn seq_len(&self) -> usize {
        self.len
    }

    fn predict(&self, _ids: &[TokenId]) -> Result<ProbMatrix> {
        let rows: Vec<Vec<f32>> = (0..self.len)
            .map(|i| {
                let top = if i == self.trap { 0.3 } else { 0.95 };
                let rest = (1.0 - top) / (self.vocab - 1) as f32;
                let mut row = vec![rest; self.vocab];
                row[i % 2] = top;
                row
            })
            .collect();
        Ok(ProbMatrix::from_rows(&rows))
    }
}
