//! Synthetic conditioning features.
//!
//! Each position of a ground-truth sequence is rendered as the codebook vector
//! of its token plus Gaussian noise. Positions can be occluded (zeroed) or
//! substituted (rendered as a different token), so that reading the grid
//! position by position is not enough and the decoder has to use context.
//! Feature positions are aligned with sequence positions (`S = L`).

use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::vocab::{TokenId, TokenSeq, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub len: usize,
    pub dim: usize,
    /// `len x dim`, row-major.
    pub values: Vec<f32>,
    pub occluded: Vec<bool>,
    pub substituted: Vec<bool>,
}

impl FeatureGrid {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn any_occluded(&self) -> bool {
        self.occluded.iter().any(|&o| o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub occlusion_rate: f64,
    pub substitution_rate: f64,
    pub noise_sigma: f64,
}

impl CorruptionConfig {
    pub const CLEAN: Self = Self { occlusion_rate: 0.0, substitution_rate: 0.0, noise_sigma: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.occlusion_rate) || !rate_ok(self.substitution_rate) {
            return Err(Error::Config(format!("corruption rates must lie in [0, 1]: {self:?}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0: {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One random unit vector per renderable token (every character plus `[PAD]`).
/// The `[MASK]` row exists for indexing convenience and is never rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(vocab: &Vocab, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(&[rng::TAG_CODEBOOK, seed]);
        let mut vectors = Vec::with_capacity(vocab.size() * dim);
        for _ in 0..vocab.size() {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            vectors.extend(v.iter().map(|x| (x / norm) as f32));
        }
        Self { dim, vectors }
    }

    pub fn vector(&self, id: TokenId) -> &[f32] {
        &self.vectors[id as usize * self.dim..(id as usize + 1) * self.dim]
    }

    /// Index of the renderable token whose vector has the largest inner product with `x`.
    pub fn nearest(&self, vocab: &Vocab, x: &[f32]) -> TokenId {
        renderable(vocab)
            .map(|t| (t, self.vector(t).iter().zip(x).map(|(a, b)| a * b).sum::<f32>()))
            .fold((0, f32::NEG_INFINITY), |best, (t, s)| if s > best.1 { (t, s) } else { best })
            .0
    }
}

fn renderable(vocab: &Vocab) -> impl Iterator<Item = TokenId> {
    (0..vocab.num_chars() as TokenId).chain(std::iter::once(vocab.pad_id()))
}

/// Renders `y` into a grid. Per position: occlusion with `occlusion_rate`,
/// otherwise substitution with `substitution_rate`; non-occluded rows get
/// `N(0, sigma²)` noise.
pub fn render_features(y: &[TokenId], cfg: &CorruptionConfig, r: &mut Rng, vocab: &Vocab, codebook: &Codebook) -> FeatureGrid {
    let (len, dim) = (y.len(), codebook.dim);
    let n_render = vocab.num_chars() + 1;
    let mut values = vec![0.0f32; len * dim];
    let mut occluded = vec![false; len];
    let mut substituted = vec![false; len];
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"));

    for (i, &tok) in y.iter().enumerate() {
        if r.random::<f64>() < cfg.occlusion_rate {
            occluded[i] = true;
            continue;
        }
        let mut shown = tok;
        if r.random::<f64>() < cfg.substitution_rate {
            // uniform over the other renderable tokens
            let k = r.random_range(0..n_render - 1);
            let mut cand = renderable(vocab).filter(|&t| t != tok);
            shown = cand.nth(k).expect("at least two renderable tokens");
            substituted[i] = true;
        }
        let row = &mut values[i * dim..(i + 1) * dim];
        row.copy_from_slice(codebook.vector(shown));
        if let Some(dist) = &noise {
            for v in row.iter_mut() {
                *v += dist.sample(r) as f32;
            }
        }
    }
    FeatureGrid { len, dim, values, occluded, substituted }
}

/// Reads one word per line, keeping first occurrences in file order.
pub fn load_lexicon(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<String>> {
    parse_lexicon(&std::fs::read_to_string(path)?, vocab, max_len)
}

pub fn parse_lexicon(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let word = line.trim_end_matches('\r');
        if word.is_empty() {
            return Err(Error::Lexicon { line: line_no, reason: "empty line".into() });
        }
        if let Some(c) = word.chars().find(|&c| vocab.id(c).is_none()) {
            return Err(Error::Lexicon { line: line_no, reason: format!("symbol {c:?} not in charset") });
        }
        let n = word.chars().count();
        if n > max_len {
            return Err(Error::Lexicon { line: line_no, reason: format!("{n} symbols exceeds L = {max_len}") });
        }
        if seen.insert(word.to_string()) {
            words.push(word.to_string());
        }
    }
    if words.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    Ok(words)
}

/// The 500-word lexicon shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => rng::TAG_TRAIN_DATA,
            Split::Eval => rng::TAG_EVAL_DATA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub text: String,
    pub ids: TokenSeq,
    pub grid: FeatureGrid,
}

/// Draws `n` samples. Sample `i` depends only on `(seed, split, i)`: the word
/// is drawn from one stream and its corruption from a stream keyed by
/// `(seed, split, i, word)`, so train and eval never share noise instances.
pub fn gen_dataset(
    lexicon: &[String],
    vocab: &Vocab,
    seq_len: usize,
    n: usize,
    cfg: &CorruptionConfig,
    codebook: &Codebook,
    seed: u64,
    split: Split,
) -> Result<Vec<Sample>> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    if n == 0 {
        return Err(Error::OutOfRange { what: "dataset size", value: 0, lo: 1, hi: usize::MAX });
    }
    cfg.validate()?;
    (0..n as u64)
        .map(|i| {
            let mut pick = rng::stream(&[rng::TAG_WORD_PICK, split.tag(), seed, i]);
            let text = lexicon[pick.random_range(0..lexicon.len())].clone();
            let ids = vocab.encode(&text, seq_len)?;
            let mut r = rng::stream(&[split.tag(), seed, i, rng::hash_str(&text)]);
            let grid = render_features(&ids, cfg, &mut r, vocab, codebook);
            Ok(Sample { text, ids, grid })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Vec<String> {
        parse_lexicon(BUNDLED_LEXICON, &Vocab::lowercase(), 12).unwrap()
    }

    #[test]
    fn bundled_lexicon_has_500_words() {
        assert_eq!(lex().len(), 500);
    }

    #[test]
    fn lexicon_dedups_in_order() {
        let v = Vocab::lowercase();
        assert_eq!(parse_lexicon("cat\ndog\ncat\n", &v, 12).unwrap(), vec!["cat", "dog"]);
    }

    #[test]
    fn lexicon_errors() {
        let v = Vocab::lowercase();
        assert!(matches!(parse_lexicon("", &v, 12), Err(Error::EmptyLexicon)));
        match parse_lexicon("cat\nx@z\n", &v, 12) {
            Err(Error::Lexicon { line: 2, reason }) => assert!(reason.contains('@')),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_lexicon("abcdef\n", &v, 4), Err(Error::Lexicon { line: 1, .. })));
    }

    #[test]
    fn load_lexicon_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("words.txt");
        std::fs::write(&path, "cat\ndog\ncat\n").unwrap();
        assert_eq!(load_lexicon(&path, &Vocab::lowercase(), 12).unwrap(), vec!["cat", "dog"]);
    }

    #[test]
    fn clean_render_is_the_codebook() {
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 64, 1);
        let y = v.encode("cat", 6).unwrap();
        let g = render_features(&y, &CorruptionConfig::CLEAN, &mut rng::stream(&[1]), &v, &cb);
        for (i, &t) in y.iter().enumerate() {
            assert_eq!(g.row(i), cb.vector(t));
        }
        assert!(!g.any_occluded());
    }

    #[test]
    fn full_occlusion_zeroes_everything() {
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 16, 1);
        let cfg = CorruptionConfig { occlusion_rate: 1.0, substitution_rate: 0.5, noise_sigma: 0.3 };
        let g = render_features(&v.encode("dog", 5).unwrap(), &cfg, &mut rng::stream(&[2]), &v, &cb);
        assert!(g.values.iter().all(|&x| x == 0.0));
        assert!(g.occluded.iter().all(|&o| o));
        assert!(g.substituted.iter().all(|&s| !s));
    }

    #[test]
    fn codebook_vectors_are_unit_length() {
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 64, 9);
        for t in 0..v.size() as TokenId {
            let n: f32 = cb.vector(t).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn substitution_count_matches_binomial() {
        // E = L·p = 2, per-render variance L·p(1−p) = 1.6; 10⁴ renders → SE of mean 0.0126.
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 16, 3);
        let cfg = CorruptionConfig { occlusion_rate: 0.0, substitution_rate: 0.2, noise_sigma: 0.0 };
        let y = v.encode("abcdefghij", 10).unwrap();
        let mut r = rng::stream(&[3]);
        let mut total = 0usize;
        for _ in 0..10_000 {
            let g = render_features(&y, &cfg, &mut r, &v, &cb);
            for (i, &s) in g.substituted.iter().enumerate() {
                if s {
                    assert_ne!(cb.nearest(&v, g.row(i)), y[i]);
                }
            }
            total += g.substituted.iter().filter(|&&s| s).count();
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 2.0).abs() < 4.0 * 0.0127, "mean substitutions {mean}");
    }

    #[test]
    fn dataset_is_deterministic_and_split_aware() {
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 16, 5);
        let cfg = CorruptionConfig { occlusion_rate: 0.25, substitution_rate: 0.1, noise_sigma: 0.1 };
        let l = lex();
        let a = gen_dataset(&l, &v, 12, 50, &cfg, &cb, 5, Split::Train).unwrap();
        let b = gen_dataset(&l, &v, 12, 50, &cfg, &cb, 5, Split::Train).unwrap();
        let e = gen_dataset(&l, &v, 12, 50, &cfg, &cb, 5, Split::Eval).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, e);
        let one = gen_dataset(&l, &v, 12, 1, &cfg, &cb, 5, Split::Train).unwrap();
        assert!(l.contains(&one[0].text));
    }

    #[test]
    fn word_frequencies_are_uniform() {
        // 10⁵ draws over 100 words: 1000 expected each, binomial SD ≈ 31.5.
        // Aggregate check by chi-square, per-word within ±20% (≈6 SD).
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 4, 0);
        let words: Vec<String> = lex().into_iter().take(100).collect();
        let data = gen_dataset(&words, &v, 12, 100_000, &CorruptionConfig::CLEAN, &cb, 11, Split::Train).unwrap();
        let mut counts = std::collections::HashMap::new();
        for s in &data {
            *counts.entry(s.text.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 100);
        let chi2: f64 = counts.values().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        // chi-square(99) critical value at p = 0.001 is 148.23
        assert!(chi2 < 148.23, "chi2 = {chi2}");
        for &c in counts.values() {
            assert!((c as f64 - 1000.0).abs() < 200.0);
        }
    }

    #[test]
    fn nearest_codebook_is_perfect_on_clean_grids() {
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 64, 2);
        let data = gen_dataset(&lex(), &v, 12, 300, &CorruptionConfig::CLEAN, &cb, 2, Split::Eval).unwrap();
        for s in &data {
            for (i, &t) in s.ids.iter().enumerate() {
                assert_eq!(cb.nearest(&v, s.grid.row(i)), t);
            }
        }
    }

    #[test]
    fn occlusion_caps_positionwise_accuracy() {
        // A position-wise reader can be right on an occluded position only by
        // chance: accuracy ≤ (1 − q) + q/|renderable|.
        let v = Vocab::lowercase();
        let cb = Codebook::new(&v, 64, 4);
        let q = 0.3;
        let cfg = CorruptionConfig { occlusion_rate: q, substitution_rate: 0.0, noise_sigma: 0.0 };
        let data = gen_dataset(&lex(), &v, 12, 2000, &cfg, &cb, 4, Split::Eval).unwrap();
        let (mut hit, mut n) = (0usize, 0usize);
        for s in &data {
            for (i, &t) in s.ids.iter().enumerate() {
                hit += usize::from(cb.nearest(&v, s.grid.row(i)) == t);
                n += 1;
            }
        }
        let acc = hit as f64 / n as f64;
        let bound = (1.0 - q) + q / (v.num_chars() + 1) as f64;
        // 24k positions: allow 4 SD of sampling slack on the occlusion rate
        assert!(acc <= bound + 4.0 * (q * (1.0 - q) / n as f64).sqrt(), "acc {acc} bound {bound}");
    }
}
