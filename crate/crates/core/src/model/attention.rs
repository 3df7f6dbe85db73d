//! Attention and block primitives: row softmax, layer norm, GELU, and the
//! bidirectional coupling between the condition and denoise streams, each
//! with a matching backward pass.

use ndarray::{Array1, Array2};

use super::{LayerParams, ModelError};

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// dS for Y = softmax(S) given dY: dS = Y ⊙ (dY − rowsum(dY ⊙ Y)).
fn softmax_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(y.dim());
    for i in 0..y.nrows() {
        let dot: f64 = y.row(i).iter().zip(dy.row(i).iter()).map(|(a, b)| a * b).sum();
        for j in 0..y.ncols() {
            out[[i, j]] = y[[i, j]] * (dy[[i, j]] - dot);
        }
    }
    out
}

pub(super) const LN_EPS: f64 = 1e-6;

pub(super) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm with learned gain/bias.
pub(super) fn layernorm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std[i] = inv;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward of `layernorm`; returns dx and accumulates dgain/dbias.
pub(super) fn layernorm_backward(
    dy: &Array2<f64>,
    gain: &Array1<f64>,
    cache: &LnCache,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..dy.ncols() {
            let g = dy[[i, j]];
            dgain[j] += g * cache.xhat[[i, j]];
            dbias[j] += g;
            let dxh = g * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * cache.xhat[[i, j]];
        }
        let inv = cache.inv_std[i];
        for j in 0..dy.ncols() {
            let dxh = dy[[i, j]] * gain[j];
            dx[[i, j]] =
                inv * (dxh - sum_dxhat / d - cache.xhat[[i, j]] * sum_dxhat_xhat / d);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Cache for one cross-attention direction (queries from one stream, keys
/// and values from the other).
pub(super) struct CrossCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head softmax matrices, N_q x N_kv.
    pub attn: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub heads_out: Array2<f64>,
}

/// Multi-head cross attention: queries from `xq`, keys/values from `xkv`.
pub(super) fn cross_attention(
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    wo: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, CrossCache) {
    let d = wq.ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = xq.dot(wq);
    let k = xkv.dot(wk);
    let v = xkv.dot(wv);
    let mut heads_out = Array2::zeros((xq.nrows(), d));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = ndarray::s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let logits = qh.dot(&kh.t()).mapv(|x| x * scale);
        let a = softmax_rows(&logits);
        let oh = a.dot(&vh);
        heads_out.slice_mut(cols).assign(&oh);
        attn.push(a);
    }
    let out = heads_out.dot(wo);
    (out, CrossCache { q, k, v, attn, heads_out })
}

/// Gradients produced by one cross-attention direction.
pub(super) struct CrossGrads {
    pub d_xq: Array2<f64>,
    pub d_xkv: Array2<f64>,
    pub d_wq: Array2<f64>,
    pub d_wk: Array2<f64>,
    pub d_wv: Array2<f64>,
    pub d_wo: Array2<f64>,
}

pub(super) fn cross_attention_backward(
    d_out: &Array2<f64>,
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    wo: &Array2<f64>,
    heads: usize,
    cache: &CrossCache,
) -> CrossGrads {
    let d = wq.ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let d_wo = cache.heads_out.t().dot(d_out);
    let d_heads = d_out.dot(&wo.t());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..heads {
        let cols = ndarray::s![.., h * hd..(h + 1) * hd];
        let a = &cache.attn[h];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let d_oh = d_heads.slice(cols);
        let d_a = d_oh.dot(&vh.t());
        let d_vh = a.t().dot(&d_oh);
        let d_s = softmax_backward(a, &d_a);
        let d_qh = d_s.dot(&kh).mapv(|x| x * scale);
        let d_kh = d_s.t().dot(&qh).mapv(|x| x * scale);
        dq.slice_mut(cols).assign(&d_qh);
        dk.slice_mut(cols).assign(&d_kh);
        dv.slice_mut(cols).assign(&d_vh);
    }
    CrossGrads {
        d_xq: dq.dot(&wq.t()),
        d_xkv: dk.dot(&wk.t()) + dv.dot(&wv.t()),
        d_wq: xq.t().dot(&dq),
        d_wk: xkv.t().dot(&dk),
        d_wv: xkv.t().dot(&dv),
        d_wo,
    }
}

/// Coupling variants: `Raw` is the literal equation used by the unit tests,
/// `Projected` the trainable multi-head form used inside the network.
pub enum CoupleMode<'a> {
    Raw,
    Projected { layer: &'a LayerParams, heads: usize },
}

/// Exchange information between the streams in both directions:
/// C~ = softmax(C Dᵀ / sqrt(d)) D and D~ = softmax(D Cᵀ / sqrt(d)) C, either
/// on the inputs as-is (`Raw`) or with learned per-stream Q/K/V/output
/// projections around the same structure (`Projected`).
pub fn bidirectional_couple(
    c: &Array2<f64>,
    d: &Array2<f64>,
    mode: CoupleMode,
) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    if c.ncols() != d.ncols() {
        return Err(ModelError::WidthMismatch { a: c.ncols(), b: d.ncols() });
    }
    match mode {
        CoupleMode::Raw => {
            let scale = 1.0 / (c.ncols() as f64).sqrt();
            let c_new = softmax_rows(&c.dot(&d.t()).mapv(|x| x * scale)).dot(d);
            let d_new = softmax_rows(&d.dot(&c.t()).mapv(|x| x * scale)).dot(c);
            Ok((c_new, d_new))
        }
        CoupleMode::Projected { layer, heads } => {
            let (c_new, _) = cross_attention(
                c, d, &layer.wq_c, &layer.wk_d, &layer.wv_d, &layer.wo_c, heads,
            );
            let (d_new, _) = cross_attention(
                d, c, &layer.wq_d, &layer.wk_c, &layer.wv_c, &layer.wo_d, heads,
            );
            Ok((c_new, d_new))
        }
    }
}
