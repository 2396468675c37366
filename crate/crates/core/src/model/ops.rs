//! Row-major dense kernels and their reverse-mode counterparts.
//!
//! All matrices are flat slices; `x` is `n x k`, weights are `k x m`
//! (input-major, so `y = x · w`). Backward kernels accumulate into their
//! gradient outputs.

use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // Eight partial sums so the compiler can keep them in vector lanes.
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + ac[l] * bc[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out = x · w`, overwriting `out` (`n x m`).
pub(crate) fn matmul<F: Real>(x: &[F], n: usize, k: usize, w: &[F], m: usize, out: &mut [F]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(F::zero());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            if a != F::zero() {
                axpy(a, &w[p * m..(p + 1) * m], row);
            }
        }
    }
}

/// Given `dy = dL/d(x·w)`: `dw += xᵀ·dy` and, when requested, `dx += dy·wᵀ`.
pub(crate) fn matmul_backward<F: Real>(
    x: &[F],
    n: usize,
    k: usize,
    w: &[F],
    m: usize,
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
) {
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            if a != F::zero() {
                axpy(a, dyi, &mut dw[p * m..(p + 1) * m]);
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let dyi = &dy[i * m..(i + 1) * m];
            for p in 0..k {
                dx[i * k + p] = dx[i * k + p] + dot(dyi, &w[p * m..(p + 1) * m]);
            }
        }
    }
}

pub(crate) fn add_bias<F: Real>(out: &mut [F], bias: &[F]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

pub(crate) fn bias_backward<F: Real>(dy: &[F], db: &mut [F]) {
    for row in dy.chunks(db.len()) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
}

pub(crate) struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layernorm<F: Real>(x: &[F], d: usize, gain: &[F], bias: &[F]) -> (Vec<F>, LnCache<F>) {
    let n = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); n];
    let df = F::from_usize(d).unwrap();
    let eps = F::from_f64(LN_EPS).unwrap();
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, `dgain`, `dbias`.
pub(crate) fn layernorm_backward<F: Real>(
    cache: &LnCache<F>,
    d: usize,
    gain: &[F],
    dy: &[F],
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let n = cache.rstd.len();
    let df = F::from_usize(d).unwrap();
    let mut g = vec![F::zero(); d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for j in 0..d {
            dgain[j] = dgain[j] + dyi[j] * xh[j];
            dbias[j] = dbias[j] + dyi[j];
            g[j] = dyi[j] * gain[j];
            sum_g = sum_g + g[j];
            sum_gx = sum_gx + g[j] * xh[j];
        }
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = dx[i * d + j] + r * (g[j] - sum_g / df - xh[j] * sum_gx / df);
        }
    }
}

// tanh approximation of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Real>(u: &[F]) -> Vec<F> {
    let c = F::from_f64(GELU_C).unwrap();
    let a = F::from_f64(GELU_A).unwrap();
    let half = F::from_f64(0.5).unwrap();
    u.iter()
        .map(|&x| half * x * (F::one() + (c * (x + a * x * x * x)).tanh()))
        .collect()
}

pub(crate) fn gelu_backward<F: Real>(u: &[F], dy: &[F]) -> Vec<F> {
    let c = F::from_f64(GELU_C).unwrap();
    let a = F::from_f64(GELU_A).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    u.iter()
        .zip(dy)
        .map(|(&x, &g)| {
            let t = (c * (x + a * x * x * x)).tanh();
            let dt = (F::one() - t * t) * c * (F::one() + three * a * x * x);
            g * (half * (F::one() + t) + half * x * dt)
        })
        .collect()
}

pub(crate) fn softmax_rows<F: Real>(x: &[F], m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (row, o) in x.chunks(m).zip(out.chunks_mut(m)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - max).exp();
            sum = sum + *oj;
        }
        for oj in o.iter_mut() {
            *oj = *oj / sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<F: Real>(x: &[F], m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (row, o) in x.chunks(m).zip(out.chunks_mut(m)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = v - lse;
        }
    }
    out
}

/// Multi-head attention over already-projected `q` (`n x d`), `k`, `v` (`m x d`).
pub(crate) struct AttnCache<F> {
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// Attention weights, `heads x n x m`.
    pub weights: Vec<F>,
    /// Concatenated head outputs before the output projection, `n x d`.
    pub ctx: Vec<F>,
}

pub(crate) fn attention_core<F: Real>(
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> AttnCache<F> {
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut weights = vec![F::zero(); heads * n * m];
    let mut ctx = vec![F::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let w = &mut weights[(h * n + i) * m..(h * n + i + 1) * m];
            let mut max = F::neg_infinity();
            for j in 0..m {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                w[j] = s;
                max = max.max(s);
            }
            let mut sum = F::zero();
            for wj in w.iter_mut() {
                *wj = (*wj - max).exp();
                sum = sum + *wj;
            }
            for wj in w.iter_mut() {
                *wj = *wj / sum;
            }
            let ci = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..m {
                axpy(w[j], &v[j * d + off..j * d + off + dh], ci);
            }
        }
    }
    AttnCache { q, k, v, weights, ctx }
}

/// Returns `(dq, dk, dv)` given `dctx`.
pub(crate) fn attention_core_backward<F: Real>(
    cache: &AttnCache<F>,
    dctx: &[F],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); m * d];
    let mut dv = vec![F::zero(); m * d];
    let mut dw = vec![F::zero(); m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let w = &cache.weights[(h * n + i) * m..(h * n + i + 1) * m];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut inner = F::zero();
            for j in 0..m {
                dw[j] = dot(dci, &cache.v[j * d + off..j * d + off + dh]);
                inner = inner + dw[j] * w[j];
                axpy(w[j], dci, &mut dv[j * d + off..j * d + off + dh]);
            }
            let qi = &cache.q[i * d + off..i * d + off + dh];
            for j in 0..m {
                let ds = w[j] * (dw[j] - inner) * scale;
                if ds != F::zero() {
                    axpy(ds, &cache.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}
