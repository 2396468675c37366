//! Training-time corruption: seven mask strategies and token replacement.
//!
//! The strategies mirror the patterns the decoder meets at inference
//! (full mask, auto-regressive prefixes, refinement passes, low-confidence and
//! block low-confidence remasks) so that training and decoding see the same
//! input distribution. Token replacement swaps characters for wrong ones
//! without marking them, which is what teaches the decoder to correct
//! confident errors.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{argmax_excluding, below_mean, blocks};
use crate::model::Denoiser;
use crate::rng::Rng;
use crate::vocab::{TokenId, TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RandomMask,
    FullMask,
    ForwardAr,
    BackwardAr,
    Refinement,
    LowConf,
    BlockLowConf,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 7] = [
        MaskStrategy::RandomMask,
        MaskStrategy::FullMask,
        MaskStrategy::ForwardAr,
        MaskStrategy::BackwardAr,
        MaskStrategy::Refinement,
        MaskStrategy::LowConf,
        MaskStrategy::BlockLowConf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::RandomMask => "random_mask",
            MaskStrategy::FullMask => "full_mask",
            MaskStrategy::ForwardAr => "forward_ar",
            MaskStrategy::BackwardAr => "backward_ar",
            MaskStrategy::Refinement => "refinement",
            MaskStrategy::LowConf => "low_conf",
            MaskStrategy::BlockLowConf => "block_low_conf",
        }
    }

    pub fn needs_confidence(self) -> bool {
        matches!(self, MaskStrategy::LowConf | MaskStrategy::BlockLowConf)
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeptSource {
    GroundTruth,
    ModelPrediction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub masked: Vec<bool>,
    pub kept_source: KeptSource,
}

impl MaskPattern {
    pub fn none(len: usize) -> Self {
        Self { masked: vec![false; len], kept_source: KeptSource::GroundTruth }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisedSeq {
    pub ids: TokenSeq,
    pub pattern: MaskPattern,
    /// Positions holding a substituted wrong character.
    pub replaced: Vec<bool>,
}

impl NoisedSeq {
    /// `source` at unmasked positions, `[MASK]` elsewhere.
    pub fn from_pattern(source: &[TokenId], pattern: MaskPattern, vocab: &Vocab) -> Self {
        let ids = source
            .iter()
            .zip(&pattern.masked)
            .map(|(&t, &m)| if m { vocab.mask_id() } else { t })
            .collect();
        let len = source.len();
        Self { ids: TokenSeq::new(ids), pattern, replaced: vec![false; len] }
    }

    pub fn clean(y: &[TokenId]) -> Self {
        Self { ids: TokenSeq::new(y.to_vec()), pattern: MaskPattern::none(y.len()), replaced: vec![false; y.len()] }
    }

    pub fn num_masked(&self) -> usize {
        self.pattern.count()
    }

    pub fn num_replaced(&self) -> usize {
        self.replaced.iter().filter(|&&r| r).count()
    }
}

/// Masks exactly `l1` positions chosen uniformly without replacement.
pub fn random_mask(y: &[TokenId], l1: usize, vocab: &Vocab, r: &mut Rng) -> Result<NoisedSeq> {
    let len = y.len();
    if !(1..=len).contains(&l1) {
        return Err(Error::OutOfRange { what: "l1", value: l1, lo: 1, hi: len });
    }
    let mut masked = vec![false; len];
    for i in index::sample(r, len, l1) {
        masked[i] = true;
    }
    Ok(NoisedSeq::from_pattern(y, MaskPattern { masked, kept_source: KeptSource::GroundTruth }, vocab))
}

pub fn full_mask(y: &[TokenId], vocab: &Vocab) -> NoisedSeq {
    NoisedSeq::from_pattern(y, MaskPattern { masked: vec![true; y.len()], kept_source: KeptSource::GroundTruth }, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArDirection {
    Forward,
    Backward,
}

/// Forward keeps the first `t − 1` tokens and masks the rest; Backward keeps
/// the last `t − 1` tokens.
pub fn ar_mask(y: &[TokenId], t: usize, direction: ArDirection, vocab: &Vocab) -> Result<NoisedSeq> {
    let len = y.len();
    if !(1..=len).contains(&t) {
        return Err(Error::OutOfRange { what: "t", value: t, lo: 1, hi: len });
    }
    let masked = (0..len)
        .map(|i| match direction {
            ArDirection::Forward => i >= t - 1,
            ArDirection::Backward => i < len - (t - 1),
        })
        .collect();
    Ok(NoisedSeq::from_pattern(y, MaskPattern { masked, kept_source: KeptSource::GroundTruth }, vocab))
}

/// Low-confidence patterns over model confidences. `LowConf` masks every
/// position below the global mean; `BlockLowConf` picks one of the `steps`
/// blocks uniformly and masks the positions below that block's mean.
pub fn confidence_pattern(conf: &[f32], kind: MaskStrategy, steps: usize, r: &mut Rng) -> Result<MaskPattern> {
    let len = conf.len();
    let low = match kind {
        MaskStrategy::LowConf => below_mean(conf, 0..len),
        MaskStrategy::BlockLowConf => {
            let bs = blocks(len, steps)?;
            let b = bs[r.random_range(0..bs.len())].clone();
            below_mean(conf, b)
        }
        other => return Err(Error::Config(format!("{other} is not a confidence pattern"))),
    };
    let mut masked = vec![false; len];
    for i in low {
        masked[i] = true;
    }
    Ok(MaskPattern { masked, kept_source: KeptSource::ModelPrediction })
}

/// Replaces exactly `l2` uniformly chosen positions with a character drawn
/// uniformly from the charset minus the original token. Never writes
/// `[MASK]` or `[PAD]`.
pub fn token_replace(y: &[TokenId], l2: usize, vocab: &Vocab, r: &mut Rng) -> Result<NoisedSeq> {
    let len = y.len();
    if l2 > len {
        return Err(Error::OutOfRange { what: "l2", value: l2, lo: 0, hi: len });
    }
    let n = vocab.num_chars() as TokenId;
    let mut out = NoisedSeq::clean(y);
    for i in index::sample(r, len, l2) {
        let orig = y[i];
        let tok = if vocab.is_char(orig) {
            // draw from n − 1 candidates, skipping the original
            let k = r.random_range(0..n - 1);
            if k >= orig {
                k + 1
            } else {
                k
            }
        } else {
            r.random_range(0..n)
        };
        out.ids[i] = tok;
        out.replaced[i] = true;
    }
    Ok(out)
}

/// Which strategies and corruption a training run draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseSpec {
    pub strategies: Vec<MaskStrategy>,
    /// When set, Refinement examples are token-replaced; otherwise they are clean.
    pub trn: bool,
    /// Block count for BlockLowConf patterns.
    pub blc_steps: usize,
}

impl NoiseSpec {
    pub fn all(trn: bool, blc_steps: usize) -> Self {
        Self { strategies: MaskStrategy::ALL.to_vec(), trn, blc_steps }
    }
}

/// Draws one strategy uniformly from `spec.strategies` and applies it.
///
/// RandomMask draws `l1 ~ U[1, L]`; the AR patterns draw `t ~ U[1, L]`;
/// the confidence patterns run `aux` on the fully masked sequence, keep its
/// predictions at unmasked positions, and fall back to masking the single
/// least-confident position when every confidence ties. Refinement masks
/// nothing and is supervised by the correction objective.
pub fn sample_training_noise(
    y: &[TokenId],
    vocab: &Vocab,
    spec: &NoiseSpec,
    r: &mut Rng,
    aux: Option<&dyn Denoiser>,
) -> Result<(MaskStrategy, NoisedSeq)> {
    let len = y.len();
    let kind = spec.strategies[r.random_range(0..spec.strategies.len())];
    let noised = match kind {
        MaskStrategy::RandomMask => {
            let l1 = r.random_range(1..=len);
            random_mask(y, l1, vocab, r)?
        }
        MaskStrategy::FullMask => full_mask(y, vocab),
        MaskStrategy::ForwardAr | MaskStrategy::BackwardAr => {
            let t = r.random_range(1..=len);
            let dir = if kind == MaskStrategy::ForwardAr { ArDirection::Forward } else { ArDirection::Backward };
            ar_mask(y, t, dir, vocab)?
        }
        MaskStrategy::Refinement => {
            if spec.trn {
                let l2 = r.random_range(0..=len);
                token_replace(y, l2, vocab, r)?
            } else {
                NoisedSeq::clean(y)
            }
        }
        MaskStrategy::LowConf | MaskStrategy::BlockLowConf => {
            let aux = aux.ok_or(Error::MissingConfidence(kind))?;
            let probs = aux.predict(&full_mask(y, vocab).ids)?;
            let (preds, conf) = argmax_excluding(&probs, vocab.mask_id());
            let mut pattern = confidence_pattern(&conf, kind, spec.blc_steps, r)?;
            if pattern.count() == 0 {
                let argmin = (0..len).fold(0, |m, i| if conf[i] < conf[m] { i } else { m });
                pattern.masked[argmin] = true;
            }
            NoisedSeq::from_pattern(&preds, pattern, vocab)
        }
    };
    Ok((kind, noised))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProbMatrix;
    use crate::rng;
    use proptest::prelude::*;

    fn v() -> Vocab {
        Vocab::lowercase()
    }

    fn cat(len: usize) -> TokenSeq {
        v().encode("cat", len).unwrap()
    }

    struct ConstConf(Vec<f32>);

    impl Denoiser for ConstConf {
        fn seq_len(&self) -> usize {
            self.0.len()
        }
        fn predict(&self, _: &[TokenId]) -> Result<ProbMatrix> {
            let vs = v().size();
            let rows: Vec<Vec<f32>> = self
                .0
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let mut r = vec![(1.0 - c) / (vs - 1) as f32; vs];
                    r[i % 26] = c;
                    r
                })
                .collect();
            Ok(ProbMatrix::from_rows(&rows))
        }
    }

    #[test]
    fn random_mask_degenerates_to_full_mask() {
        let y = cat(4);
        let m = v().mask_id();
        let a = random_mask(&y, 4, &v(), &mut rng::stream(&[1])).unwrap();
        assert_eq!(&a.ids[..], &[m; 4]);
        assert_eq!(a, full_mask(&y, &v()));
    }

    #[test]
    fn random_mask_range() {
        let y = cat(4);
        assert!(random_mask(&y, 0, &v(), &mut rng::stream(&[1])).is_err());
        assert!(random_mask(&y, 5, &v(), &mut rng::stream(&[1])).is_err());
    }

    #[test]
    fn random_mask_single_position_leaves_rest() {
        let y = v().encode("cat", 3).unwrap();
        let out = random_mask(&y, 1, &v(), &mut rng::stream(&[7])).unwrap();
        let i = out.pattern.masked.iter().position(|&m| m).unwrap();
        for j in 0..3 {
            assert_eq!(out.ids[j], if j == i { v().mask_id() } else { y[j] });
        }
    }

    #[test]
    fn random_mask_is_uniform_over_positions() {
        // 10⁵ draws, p = 0.25: SD of frequency ≈ 0.00137, so ±1% is > 7 SD.
        let y = cat(4);
        let mut r = rng::stream(&[2]);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            let out = random_mask(&y, 1, &v(), &mut r).unwrap();
            counts[out.pattern.masked.iter().position(|&m| m).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn ar_mask_shapes() {
        let y = v().encode("abcde", 5).unwrap();
        let m = v().mask_id();
        assert_eq!(&ar_mask(&y, 3, ArDirection::Forward, &v()).unwrap().ids[..], &[0, 1, m, m, m]);
        assert_eq!(ar_mask(&y, 1, ArDirection::Forward, &v()).unwrap(), full_mask(&y, &v()));
        assert_eq!(&ar_mask(&y, 3, ArDirection::Backward, &v()).unwrap().ids[..], &[m, m, m, 3, 4]);
        assert!(ar_mask(&y, 0, ArDirection::Forward, &v()).is_err());
        assert!(ar_mask(&y, 6, ArDirection::Backward, &v()).is_err());
    }

    #[test]
    fn full_mask_small() {
        let m = v().mask_id();
        assert_eq!(&full_mask(&cat(3), &v()).ids[..], &[m, m, m]);
        assert_eq!(&full_mask(&[5], &v()).ids[..], &[m]);
    }

    #[test]
    fn low_conf_pattern() {
        let mut r = rng::stream(&[0]);
        let p = confidence_pattern(&[0.9, 0.5, 0.95, 0.6], MaskStrategy::LowConf, 3, &mut r).unwrap();
        assert_eq!(p.masked, vec![false, true, false, true]);
        assert_eq!(p.kept_source, KeptSource::ModelPrediction);
        let tie = confidence_pattern(&[0.4; 5], MaskStrategy::LowConf, 3, &mut r).unwrap();
        assert_eq!(tie.count(), 0);
        // an overconfident wrong token (0.95) sits above the mean and survives
        let p = confidence_pattern(&[0.95, 0.3, 0.8, 0.9], MaskStrategy::LowConf, 3, &mut r).unwrap();
        assert!(!p.masked[0]);
    }

    #[test]
    fn block_low_conf_pattern_stays_in_one_block() {
        let conf = [0.9, 0.2, 0.8, 0.8, 0.1, 0.9];
        let mut r = rng::stream(&[4]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let p = confidence_pattern(&conf, MaskStrategy::BlockLowConf, 3, &mut r).unwrap();
            let idx: Vec<usize> = (0..6).filter(|&i| p.masked[i]).collect();
            seen.insert(idx);
        }
        // block 0 → {1}, block 1 → ∅ (tie), block 2 → {4}
        let expect: std::collections::HashSet<Vec<usize>> = [vec![1], vec![], vec![4]].into_iter().collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn token_replace_identity_and_count() {
        let y = cat(3);
        let same = token_replace(&y, 0, &v(), &mut rng::stream(&[1])).unwrap();
        assert_eq!(same.ids, y);
        assert_eq!(same.num_replaced(), 0);
        assert!(token_replace(&y, 4, &v(), &mut rng::stream(&[1])).is_err());
    }

    #[test]
    fn token_replace_property_over_many_trials() {
        let vocab = v();
        let mut r = rng::stream(&[9]);
        for trial in 0..10_000 {
            let text: String = (0..(trial % 9)).map(|k| (b'a' + ((trial * 7 + k * 3) % 26) as u8) as char).collect();
            let y = vocab.encode(&text, 10).unwrap();
            let l2 = r.random_range(0..=10);
            let out = token_replace(&y, l2, &vocab, &mut r).unwrap();
            assert_eq!(out.num_replaced(), l2);
            for i in 0..10 {
                if out.replaced[i] {
                    assert_ne!(out.ids[i], y[i]);
                    assert!(vocab.is_char(out.ids[i]));
                } else {
                    assert_eq!(out.ids[i], y[i]);
                }
            }
        }
    }

    #[test]
    fn strategies_are_uniform() {
        // 7·10⁴ draws: SD of each frequency ≈ 0.00132, ±0.01 is > 7 SD.
        let vocab = v();
        let y = vocab.encode("house", 12).unwrap();
        let aux = ConstConf((0..12).map(|i| 0.3 + 0.05 * i as f32).collect());
        let spec = NoiseSpec::all(true, 3);
        let mut r = rng::stream(&[3]);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..70_000 {
            let (k, _) = sample_training_noise(&y, &vocab, &spec, &mut r, Some(&aux)).unwrap();
            *counts.entry(k).or_insert(0usize) += 1;
        }
        let mut chi2 = 0.0;
        for k in MaskStrategy::ALL {
            let f = counts[&k] as f64 / 70_000.0;
            assert!((f - 1.0 / 7.0).abs() < 0.01, "{k}: {f}");
            chi2 += (counts[&k] as f64 - 10_000.0).powi(2) / 10_000.0;
        }
        // chi-square(6) critical value at p = 0.001
        assert!(chi2 < 22.46, "chi2 {chi2}");
    }

    #[test]
    fn l1_is_uniform_on_one_to_len() {
        let vocab = v();
        let y = vocab.encode("zebra", 6).unwrap();
        let spec = NoiseSpec { strategies: vec![MaskStrategy::RandomMask], trn: false, blc_steps: 3 };
        let mut r = rng::stream(&[8]);
        let mut counts = [0usize; 7];
        let n = 60_000;
        for _ in 0..n {
            let (_, s) = sample_training_noise(&y, &vocab, &spec, &mut r, None).unwrap();
            counts[s.num_masked()] += 1;
        }
        assert_eq!(counts[0], 0);
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - 10_000.0).powi(2) / 10_000.0).sum();
        // chi-square(5) critical value at p = 0.001
        assert!(chi2 < 20.52, "{counts:?}");
    }

    #[test]
    fn confidence_strategies_need_aux() {
        let vocab = v();
        let y = vocab.encode("cat", 4).unwrap();
        let spec = NoiseSpec { strategies: vec![MaskStrategy::LowConf], trn: false, blc_steps: 2 };
        assert!(matches!(
            sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[0]), None),
            Err(Error::MissingConfidence(MaskStrategy::LowConf))
        ));
    }

    #[test]
    fn confidence_strategies_keep_model_predictions() {
        let vocab = v();
        let y = vocab.encode("cat", 4).unwrap();
        let aux = ConstConf(vec![0.9, 0.2, 0.8, 0.7]);
        let spec = NoiseSpec { strategies: vec![MaskStrategy::LowConf], trn: false, blc_steps: 2 };
        let (_, s) = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[0]), Some(&aux)).unwrap();
        // mean 0.65 → only position 1 is masked; the rest carry the aux argmax i % 26
        let m = vocab.mask_id();
        assert_eq!(&s.ids[..], &[0, m, 2, 3]);
        assert_eq!(s.pattern.kept_source, KeptSource::ModelPrediction);

        // all-tied confidences still mask one position
        let tied = ConstConf(vec![0.5; 4]);
        let (_, s) = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[0]), Some(&tied)).unwrap();
        assert_eq!(s.num_masked(), 1);
    }

    #[test]
    fn refinement_masks_nothing() {
        let vocab = v();
        let y = vocab.encode("word", 6).unwrap();
        let spec = NoiseSpec { strategies: vec![MaskStrategy::Refinement], trn: false, blc_steps: 3 };
        let (_, s) = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[0]), None).unwrap();
        assert_eq!(s, NoisedSeq::clean(&y));
        let spec = NoiseSpec { trn: true, ..spec };
        for seed in 0..50 {
            let (_, s) = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[seed]), None).unwrap();
            assert_eq!(s.num_masked(), 0);
            assert_eq!(s.pattern.kept_source, KeptSource::GroundTruth);
        }
    }

    #[test]
    fn full_mask_strategy_ignores_rng() {
        let vocab = v();
        let y = vocab.encode("word", 6).unwrap();
        let spec = NoiseSpec { strategies: vec![MaskStrategy::FullMask], trn: true, blc_steps: 3 };
        let a = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[1]), None).unwrap();
        let b = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[2]), None).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn mask_flags_match_ids(seed in 0u64..10_000, text in "[a-z]{0,10}") {
            let vocab = v();
            let y = vocab.encode(&text, 10).unwrap();
            let aux = ConstConf((0..10).map(|i| ((i * 37 + seed as usize) % 11) as f32 / 11.0).collect());
            let spec = NoiseSpec::all(true, 3);
            let (_, s) = sample_training_noise(&y, &vocab, &spec, &mut rng::stream(&[seed]), Some(&aux)).unwrap();
            for i in 0..10 {
                prop_assert_eq!(s.pattern.masked[i], s.ids[i] == vocab.mask_id());
                prop_assert!(!(s.pattern.masked[i] && s.replaced[i]));
                if s.replaced[i] {
                    prop_assert!(vocab.is_char(s.ids[i]));
                    prop_assert!(s.ids[i] != y[i]);
                }
            }
        }
    }
}
