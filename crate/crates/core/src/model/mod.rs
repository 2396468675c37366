//! Conditional transformer decoder.
//!
//! Token embedding plus learned positions, `N` pre-norm blocks of
//! {bidirectional self-attention, cross-attention to the feature grid,
//! feed-forward}, a final norm and a linear classifier. There is no causal
//! mask: every position attends to every other, so any subset of known
//! tokens can condition any subset of masked ones.
//!
//! Forward and backward are written by hand over flat slices and are generic
//! in the float type: training runs in `f32`, gradient checking in `f64`.

mod forward;
pub mod gradcheck;
pub(crate) mod ops;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::FeatureGrid;
use crate::vocab::TokenId;

pub use forward::{backward, forward, Activations};

pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence length `L`.
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Embedding and feature channel width `D`.
    pub d_model: usize,
    /// Decoder depth `N`.
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Feature positions `S`.
    pub feat_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.seq_len,
            self.vocab_size,
            self.d_model,
            self.layers,
            self.heads,
            self.d_ff,
            self.feat_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// The tiny shape used for finite-difference checks.
    pub fn tiny() -> Self {
        Self { seq_len: 4, vocab_size: 6, d_model: 8, layers: 1, heads: 2, d_ff: 16, feat_len: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut rng::Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| F::from_f64(dist.sample(rng)).unwrap())
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub sa_wq: Tensor<F>,
    pub sa_wk: Tensor<F>,
    pub sa_wv: Tensor<F>,
    pub sa_wo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub ca_wq: Tensor<F>,
    pub ca_wk: Tensor<F>,
    pub ca_wv: Tensor<F>,
    pub ca_wo: Tensor<F>,
    pub ln3_g: Tensor<F>,
    pub ln3_b: Tensor<F>,
    pub ff_w1: Tensor<F>,
    pub ff_b1: Tensor<F>,
    pub ff_w2: Tensor<F>,
    pub ff_b2: Tensor<F>,
}

const LAYER_TENSORS: [&str; 18] = [
    "ln1_g", "ln1_b", "sa_wq", "sa_wk", "sa_wv", "sa_wo", "ln2_g", "ln2_b", "ca_wq", "ca_wk", "ca_wv",
    "ca_wo", "ln3_g", "ln3_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
];

impl<F> LayerParams<F> {
    fn tensors(&self) -> [&Tensor<F>; 18] {
        [
            &self.ln1_g, &self.ln1_b, &self.sa_wq, &self.sa_wk, &self.sa_wv, &self.sa_wo, &self.ln2_g,
            &self.ln2_b, &self.ca_wq, &self.ca_wk, &self.ca_wv, &self.ca_wo, &self.ln3_g, &self.ln3_b,
            &self.ff_w1, &self.ff_b1, &self.ff_w2, &self.ff_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 18] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.sa_wq, &mut self.sa_wk, &mut self.sa_wv,
            &mut self.sa_wo, &mut self.ln2_g, &mut self.ln2_b, &mut self.ca_wq, &mut self.ca_wk,
            &mut self.ca_wv, &mut self.ca_wo, &mut self.ln3_g, &mut self.ln3_b, &mut self.ff_w1,
            &mut self.ff_b1, &mut self.ff_w2, &mut self.ff_b2,
        ]
    }
}

/// Every learnable tensor of the decoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub cfg: ModelConfig,
    /// `vocab_size x D`
    pub tok_emb: Tensor<F>,
    /// `L x D`
    pub pos_emb: Tensor<F>,
    /// `S x D`, added to the feature grid before it is attended to.
    pub feat_pos: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
    /// `D x vocab_size`, untied from `tok_emb`.
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

impl<F: Real> Params<F> {
    fn build(cfg: ModelConfig, mut make: impl FnMut(&str, &[usize]) -> Tensor<F>) -> Self {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: make("ln_g", &[d]),
                ln1_b: make("ln_b", &[d]),
                sa_wq: make("proj", &[d, d]),
                sa_wk: make("proj", &[d, d]),
                sa_wv: make("proj", &[d, d]),
                sa_wo: make("proj", &[d, d]),
                ln2_g: make("ln_g", &[d]),
                ln2_b: make("ln_b", &[d]),
                ca_wq: make("proj", &[d, d]),
                ca_wk: make("proj", &[d, d]),
                ca_wv: make("proj", &[d, d]),
                ca_wo: make("proj", &[d, d]),
                ln3_g: make("ln_g", &[d]),
                ln3_b: make("ln_b", &[d]),
                ff_w1: make("proj", &[d, cfg.d_ff]),
                ff_b1: make("bias", &[cfg.d_ff]),
                ff_w2: make("proj", &[cfg.d_ff, d]),
                ff_b2: make("bias", &[d]),
            })
            .collect();
        Self {
            cfg,
            tok_emb: make("emb", &[v, d]),
            pos_emb: make("emb", &[cfg.seq_len, d]),
            feat_pos: make("emb", &[cfg.feat_len, d]),
            layers,
            lnf_g: make("ln_g", &[d]),
            lnf_b: make("ln_b", &[d]),
            head_w: make("head", &[d, v]),
            head_b: make("bias", &[v]),
        }
    }

    pub fn zeros(cfg: ModelConfig) -> Self {
        Self::build(cfg, |_, shape| Tensor::zeros(shape))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cfg)
    }

    /// Scaled-normal initialization: projections `N(0, 1/fan_in)`, embeddings
    /// and classifier `N(0, 0.02²)`, norms at identity, biases zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(&[rng::TAG_INIT, seed]);
        Ok(Self::build(cfg, |kind, shape| match kind {
            "proj" => Tensor::normal(shape, 1.0 / (shape[0] as f64).sqrt(), &mut r),
            "emb" | "head" => Tensor::normal(shape, 0.02, &mut r),
            "ln_g" => Tensor::filled(shape, F::one()),
            _ => Tensor::zeros(shape),
        }))
    }

    /// Tensor names in canonical order (the order of [`Params::tensors`]).
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".into(), "feat_pos".into()];
        for i in 0..self.layers.len() {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layers.{i}.{t}")));
        }
        names.extend(["lnf_g", "lnf_b", "head_w", "head_b"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.feat_pos];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.feat_pos];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in canonical order.
    pub fn from_named(cfg: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        cfg.validate()?;
        let mut out = Self::zeros(cfg);
        let names = out.names();
        if named.len() != names.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", names.len(), named.len())));
        }
        for ((expect, slot), (name, t)) in names.iter().zip(out.tensors_mut()).zip(named) {
            if *expect != name || slot.shape != t.shape {
                return Err(Error::Shape(format!(
                    "tensor {name} {:?} does not match {expect} {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let named = self.names().into_iter().zip(self.tensors().into_iter().map(Tensor::cast)).collect();
        Params::from_named(self.cfg, named).expect("same config")
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            for x in &mut t.data {
                *x = *x * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn sq_norm(&self) -> F {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|&v| v * v).sum()
    }
}

/// Row-wise distributions over the vocabulary, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix<F = f32> {
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Real> ProbMatrix<F> {
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let vocab = rows.first().map_or(0, Vec::len);
        Self { vocab, data: rows.iter().flatten().copied().collect() }
    }

    pub fn uniform(len: usize, vocab: usize) -> Self {
        Self { vocab, data: vec![F::one() / F::from_usize(vocab).unwrap(); len * vocab] }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.vocab.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Argmax per row (lowest id on ties) and its probability.
    pub fn confidence(&self) -> ConfidenceVector<F> {
        let mut conf = Vec::with_capacity(self.len());
        let mut argmax_ids = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let (best, p) = self
                .row(i)
                .iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bp), (j, &p)| if p > bp { (j, p) } else { (bi, bp) });
            argmax_ids.push(best as TokenId);
            conf.push(p);
        }
        ConfidenceVector { conf, argmax_ids }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector<F = f32> {
    pub conf: Vec<F>,
    pub argmax_ids: Vec<TokenId>,
}

/// Anything that maps a (partially masked) input sequence to per-position
/// distributions. The trained decoder bound to one feature grid is the main
/// implementation; hand-built oracles implement it in tests and demos.
pub trait Denoiser {
    fn seq_len(&self) -> usize;
    fn predict(&self, ids: &[TokenId]) -> Result<ProbMatrix>;
}

/// The decoder conditioned on one feature grid.
pub struct ModelDenoiser<'a> {
    pub params: &'a Params<f32>,
    pub grid: &'a FeatureGrid,
}

impl<'a> ModelDenoiser<'a> {
    pub fn new(params: &'a Params<f32>, grid: &'a FeatureGrid) -> Self {
        Self { params, grid }
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn seq_len(&self) -> usize {
        self.params.cfg.seq_len
    }

    fn predict(&self, ids: &[TokenId]) -> Result<ProbMatrix> {
        let acts = forward(self.params, &self.grid.values, ids)?;
        Ok(acts.probs())
    }
}

/// Draws a uniformly random valid token sequence (any token except the mask),
/// used by sensitivity tests and init statistics.
pub fn random_ids(len: usize, vocab: usize, mask_id: TokenId, r: &mut rng::Rng) -> Vec<TokenId> {
    (0..len)
        .map(|_| loop {
            let t = r.random_range(0..vocab as TokenId);
            if t != mask_id {
                break t;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { seq_len: 12, vocab_size: 28, d_model: 64, layers: 2, heads: 4, d_ff: 256, feat_len: 12 }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = Params::<f32>::init(cfg(), 7).unwrap();
        let b = Params::<f32>::init(cfg(), 7).unwrap();
        let c = Params::<f32>::init(cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.tok_emb.shape, vec![28, 64]);
        assert_eq!(a.head_w.shape, vec![64, 28]);
        assert_eq!(a.names().len(), a.tensors().len());
    }

    #[test]
    fn rejects_bad_head_count() {
        let mut c = cfg();
        c.heads = 5;
        assert!(Params::<f32>::init(c, 0).is_err());
    }

    #[test]
    fn from_named_rejects_shape_mismatch() {
        let p = Params::<f32>::init(ModelConfig::tiny(), 0).unwrap();
        let mut named: Vec<_> = p.names().into_iter().zip(p.tensors().into_iter().cloned()).collect();
        named[0].1.shape = vec![1, 48];
        assert!(Params::from_named(p.cfg, named).is_err());
    }

    #[test]
    fn confidence_breaks_ties_low() {
        let pm = ProbMatrix::from_rows(&[vec![0.25f32, 0.25, 0.5], vec![0.4, 0.4, 0.2]]);
        let c = pm.confidence();
        assert_eq!(c.argmax_ids, vec![2, 0]);
        assert_eq!(c.conf, vec![0.5, 0.4]);
    }
}
