use super::ops::{self, AttnCache, LnCache};
use super::{Params, ProbMatrix, Real};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

struct LayerActs<F> {
    ln1: LnCache<F>,
    h1: Vec<F>,
    sa: AttnCache<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    ca: AttnCache<F>,
    ln3: LnCache<F>,
    h3: Vec<F>,
    ff_pre: Vec<F>,
    ff_act: Vec<F>,
}

/// Everything recorded by a forward pass that the backward pass needs.
pub struct Activations<F> {
    ids: Vec<TokenId>,
    /// Feature grid plus feature positions, `S x D`.
    memory: Vec<F>,
    layers: Vec<LayerActs<F>>,
    lnf: LnCache<F>,
    hf: Vec<F>,
    /// `L x vocab_size`
    pub logits: Vec<F>,
}

impl<F: Real> Activations<F> {
    pub fn probs(&self) -> ProbMatrix<F> {
        let vocab = self.logits.len() / self.ids.len();
        ProbMatrix { vocab, data: ops::softmax_rows(&self.logits, vocab) }
    }

    pub fn log_probs(&self) -> ProbMatrix<F> {
        let vocab = self.logits.len() / self.ids.len();
        ProbMatrix { vocab, data: ops::log_softmax_rows(&self.logits, vocab) }
    }
}

fn check_finite<F: Real>(v: &[F], what: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn project<F: Real>(x: &[F], n: usize, k: usize, w: &[F], m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    ops::matmul(x, n, k, w, m, &mut out);
    out
}

/// Runs the decoder on `ids` (length `L`) conditioned on `memory`
/// (the feature grid, `S x D` row-major).
pub fn forward<F: Real>(params: &Params<F>, memory: &[F], ids: &[TokenId]) -> Result<Activations<F>> {
    let cfg = params.cfg;
    let (l, d, s, v) = (cfg.seq_len, cfg.d_model, cfg.feat_len, cfg.vocab_size);
    if ids.len() != l {
        return Err(Error::Shape(format!("input length {} != L = {l}", ids.len())));
    }
    if memory.len() != s * d {
        return Err(Error::Shape(format!("feature grid has {} values, expected {s} x {d}", memory.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary of {v}")));
    }

    let mut x = vec![F::zero(); l * d];
    for (i, &t) in ids.iter().enumerate() {
        let e = &params.tok_emb.data[t as usize * d..(t as usize + 1) * d];
        let p = &params.pos_emb.data[i * d..(i + 1) * d];
        for j in 0..d {
            x[i * d + j] = e[j] + p[j];
        }
    }
    let mut mem = memory.to_vec();
    for (m, &p) in mem.iter_mut().zip(&params.feat_pos.data) {
        *m = *m + p;
    }
    check_finite(&x, || "embedding".into())?;
    check_finite(&mem, || "feature grid".into())?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let (h1, ln1) = ops::layernorm(&x, d, &lp.ln1_g.data, &lp.ln1_b.data);
        let sa = ops::attention_core(
            project(&h1, l, d, &lp.sa_wq.data, d),
            project(&h1, l, d, &lp.sa_wk.data, d),
            project(&h1, l, d, &lp.sa_wv.data, d),
            l,
            l,
            d,
            cfg.heads,
        );
        let sa_out = project(&sa.ctx, l, d, &lp.sa_wo.data, d);
        for (a, b) in x.iter_mut().zip(&sa_out) {
            *a = *a + *b;
        }

        let (h2, ln2) = ops::layernorm(&x, d, &lp.ln2_g.data, &lp.ln2_b.data);
        let ca = ops::attention_core(
            project(&h2, l, d, &lp.ca_wq.data, d),
            project(&mem, s, d, &lp.ca_wk.data, d),
            project(&mem, s, d, &lp.ca_wv.data, d),
            l,
            s,
            d,
            cfg.heads,
        );
        let ca_out = project(&ca.ctx, l, d, &lp.ca_wo.data, d);
        for (a, b) in x.iter_mut().zip(&ca_out) {
            *a = *a + *b;
        }

        let (h3, ln3) = ops::layernorm(&x, d, &lp.ln3_g.data, &lp.ln3_b.data);
        let mut ff_pre = project(&h3, l, d, &lp.ff_w1.data, cfg.d_ff);
        ops::add_bias(&mut ff_pre, &lp.ff_b1.data);
        let ff_act = ops::gelu(&ff_pre);
        let mut ff_out = project(&ff_act, l, cfg.d_ff, &lp.ff_w2.data, d);
        ops::add_bias(&mut ff_out, &lp.ff_b2.data);
        for (a, b) in x.iter_mut().zip(&ff_out) {
            *a = *a + *b;
        }
        check_finite(&x, || format!("decoder layer {li}"))?;

        layers.push(LayerActs { ln1, h1, sa, ln2, h2, ca, ln3, h3, ff_pre, ff_act });
    }

    let (hf, lnf) = ops::layernorm(&x, d, &params.lnf_g.data, &params.lnf_b.data);
    let mut logits = project(&hf, l, d, &params.head_w.data, v);
    ops::add_bias(&mut logits, &params.head_b.data);
    check_finite(&logits, || "classifier".into())?;

    Ok(Activations { ids: ids.to_vec(), memory: mem, layers, lnf, hf, logits })
}

/// Self-attention backward given `d(out)`; returns `d(input to projections)`.
#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    cache: &AttnCache<F>,
    hq: &[F],
    hkv: &[F],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
    w: [&[F]; 4],
    dw: [&mut [F]; 4],
    dout: &[F],
    dhq: &mut [F],
    dhkv: &mut [F],
) {
    let [wq, wk, wv, wo] = w;
    let [dwq, dwk, dwv, dwo] = dw;
    let mut dctx = vec![F::zero(); n * d];
    ops::matmul_backward(&cache.ctx, n, d, wo, d, dout, Some(&mut dctx), dwo);
    let (dq, dk, dv) = ops::attention_core_backward(cache, &dctx, n, m, d, heads);
    ops::matmul_backward(hq, n, d, wq, d, &dq, Some(dhq), dwq);
    ops::matmul_backward(hkv, m, d, wk, d, &dk, Some(&mut *dhkv), dwk);
    ops::matmul_backward(hkv, m, d, wv, d, &dv, Some(dhkv), dwv);
}

/// Reverse-mode pass: accumulates `dL/dθ` into `grads` given `dL/dlogits`.
pub fn backward<F: Real>(params: &Params<F>, acts: &Activations<F>, dlogits: &[F], grads: &mut Params<F>) {
    let cfg = params.cfg;
    let (l, d, s, v) = (cfg.seq_len, cfg.d_model, cfg.feat_len, cfg.vocab_size);
    debug_assert_eq!(dlogits.len(), l * v);

    let mut dhf = vec![F::zero(); l * d];
    ops::matmul_backward(&acts.hf, l, d, &params.head_w.data, v, dlogits, Some(&mut dhf), &mut grads.head_w.data);
    ops::bias_backward(dlogits, &mut grads.head_b.data);
    let mut dx = vec![F::zero(); l * d];
    ops::layernorm_backward(
        &acts.lnf,
        d,
        &params.lnf_g.data,
        &dhf,
        &mut dx,
        &mut grads.lnf_g.data,
        &mut grads.lnf_b.data,
    );

    let mut dmem = vec![F::zero(); s * d];
    for ((lp, la), lg) in params.layers.iter().zip(&acts.layers).zip(grads.layers.iter_mut()).rev() {
        // feed-forward: x += W2·gelu(W1·ln3(x) + b1) + b2
        ops::bias_backward(&dx, &mut lg.ff_b2.data);
        let mut dact = vec![F::zero(); l * cfg.d_ff];
        ops::matmul_backward(&la.ff_act, l, cfg.d_ff, &lp.ff_w2.data, d, &dx, Some(&mut dact), &mut lg.ff_w2.data);
        let dpre = ops::gelu_backward(&la.ff_pre, &dact);
        ops::bias_backward(&dpre, &mut lg.ff_b1.data);
        let mut dh3 = vec![F::zero(); l * d];
        ops::matmul_backward(&la.h3, l, d, &lp.ff_w1.data, cfg.d_ff, &dpre, Some(&mut dh3), &mut lg.ff_w1.data);
        ops::layernorm_backward(&la.ln3, d, &lp.ln3_g.data, &dh3, &mut dx, &mut lg.ln3_g.data, &mut lg.ln3_b.data);

        // cross-attention: x += CA(ln2(x), memory)
        let mut dh2 = vec![F::zero(); l * d];
        attention_backward(
            &la.ca,
            &la.h2,
            &acts.memory,
            l,
            s,
            d,
            cfg.heads,
            [&lp.ca_wq.data, &lp.ca_wk.data, &lp.ca_wv.data, &lp.ca_wo.data],
            [&mut lg.ca_wq.data, &mut lg.ca_wk.data, &mut lg.ca_wv.data, &mut lg.ca_wo.data],
            &dx,
            &mut dh2,
            &mut dmem,
        );
        ops::layernorm_backward(&la.ln2, d, &lp.ln2_g.data, &dh2, &mut dx, &mut lg.ln2_g.data, &mut lg.ln2_b.data);

        // self-attention: x += SA(ln1(x))
        let mut dq_in = vec![F::zero(); l * d];
        let mut dkv_in = vec![F::zero(); l * d];
        attention_backward(
            &la.sa,
            &la.h1,
            &la.h1,
            l,
            l,
            d,
            cfg.heads,
            [&lp.sa_wq.data, &lp.sa_wk.data, &lp.sa_wv.data, &lp.sa_wo.data],
            [&mut lg.sa_wq.data, &mut lg.sa_wk.data, &mut lg.sa_wv.data, &mut lg.sa_wo.data],
            &dx,
            &mut dq_in,
            &mut dkv_in,
        );
        for (a, b) in dq_in.iter_mut().zip(&dkv_in) {
            *a = *a + *b;
        }
        ops::layernorm_backward(&la.ln1, d, &lp.ln1_g.data, &dq_in, &mut dx, &mut lg.ln1_g.data, &mut lg.ln1_b.data);
    }

    for (g, &dm) in grads.feat_pos.data.iter_mut().zip(&dmem) {
        *g = *g + dm;
    }
    for (i, &t) in acts.ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = &mut grads.tok_emb.data[t as usize * d..(t as usize + 1) * d];
        for (g, &r) in te.iter_mut().zip(row) {
            *g = *g + r;
        }
        let pe = &mut grads.pos_emb.data[i * d..(i + 1) * d];
        for (g, &r) in pe.iter_mut().zip(row) {
            *g = *g + r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_ids, ModelConfig};
    use crate::rng;
    use rand::Rng as _;

    fn random_memory(n: usize, r: &mut rng::Rng) -> Vec<f32> {
        (0..n).map(|_| r.random_range(-0.3..0.3)).collect()
    }

    #[test]
    fn rows_are_distributions() {
        let cfg = ModelConfig { seq_len: 6, vocab_size: 10, d_model: 16, layers: 2, heads: 4, d_ff: 32, feat_len: 6 };
        let p = Params::<f32>::init(cfg, 1).unwrap();
        let mut r = rng::stream(&[99]);
        for _ in 0..20 {
            let ids = random_ids(6, 10, 8, &mut r);
            let mem = random_memory(6 * 16, &mut r);
            let probs = forward(&p, &mem, &ids).unwrap().probs();
            assert_eq!(probs.len(), 6);
            for i in 0..6 {
                let sum: f32 = probs.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "row {i} sums to {sum}");
                assert!(probs.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let p = Params::<f32>::init(ModelConfig::tiny(), 0).unwrap();
        assert!(matches!(forward(&p, &[0.0; 32], &[0, 1, 2]), Err(Error::Shape(_))));
        assert!(matches!(forward(&p, &[0.0; 31], &[0, 1, 2, 3]), Err(Error::Shape(_))));
        assert!(matches!(forward(&p, &[0.0; 32], &[0, 1, 2, 9]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_names_the_stage() {
        let p = Params::<f32>::init(ModelConfig::tiny(), 0).unwrap();
        let mut mem = vec![0.0f32; 32];
        mem[3] = f32::NAN;
        match forward(&p, &mem, &[0, 1, 2, 3]) {
            Err(Error::NonFinite(stage)) => assert_eq!(stage, "feature grid"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
        let mut bad = p.clone();
        bad.layers[0].ff_b2.data[0] = f32::INFINITY;
        match forward(&bad, &[0.0; 32], &[0, 1, 2, 3]) {
            Err(Error::NonFinite(stage)) => assert_eq!(stage, "decoder layer 0"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }
}
