//! Dense forward and reverse-mode backward passes of the transformer.
//!
//! Pre-norm decoder: `h += attn(ln(h)); h += ffn(ln(h))`, final `ln` and an
//! untied unembedding. Layer norms have no affine parameters. The backward
//! pass accepts gradients on the logits and, optionally, directly on each
//! sublayer output, and returns gradients for whichever parameter sets were
//! requested plus the input embeddings.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::weights::{LayerMatrix, LayerWeights, Weights, PAD_TOKEN};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise normalisation; returns (normalised rows, reciprocal std per row).
pub fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd[i] = r;
    }
    (out, rstd)
}

fn layer_norm_backward(dy: &Array2<f64>, xhat: &Array2<f64>, rstd: &Array1<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = dy.clone();
    for (i, mut row) in dx.outer_iter_mut().enumerate() {
        let xh = xhat.row(i);
        let mean_dy = row.sum() / d;
        let mean_dyx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = rstd[i];
        for (v, &x) in row.iter_mut().zip(xh.iter()) {
            *v = r * (*v - mean_dy - x * mean_dyx);
        }
    }
    dx
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Log-softmax of every row.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Causal multi-head attention context from projected q, k, v.
/// Returns the context and the per-head attention probabilities.
pub fn causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    num_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let t = q.nrows();
    let di = q.ncols();
    let dh = di / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((t, di));
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        for i in 0..t {
            for j in (i + 1)..t {
                scores[[i, j]] = f64::NEG_INFINITY;
            }
        }
        softmax_rows_inplace(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    (ctx, probs)
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub attn_in: Array2<f64>,
    attn_rstd: Array1<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    /// Attention sublayer output before the residual add.
    pub attn_out: Array2<f64>,
    pub ffn_in: Array2<f64>,
    ffn_rstd: Array1<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
    /// FFN sublayer output before the residual add.
    pub ffn_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    final_xhat: Array2<f64>,
    final_rstd: Array1<f64>,
    pub logits: Array2<f64>,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.logits.nrows()
    }
}

/// Token-embedding lookup.
pub fn embed_tokens(weights: &Weights, tokens: &[usize]) -> Result<Array2<f64>> {
    let cfg = &weights.config;
    let mut out = Array2::zeros((tokens.len(), cfg.d_model));
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {tok} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        out.row_mut(i).assign(&weights.tok_emb.row(tok));
    }
    Ok(out)
}

/// Forward pass over a sequence of input embeddings (before positional add).
pub fn forward(weights: &Weights, input: ArrayView2<f64>) -> Result<ForwardCache> {
    let cfg = &weights.config;
    let t = input.nrows();
    if t == 0 {
        return Err(Error::Empty("input sequence".into()));
    }
    if t > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max: cfg.max_seq_len,
        });
    }
    if input.ncols() != cfg.d_model {
        return Err(Error::shape("input embeddings", cfg.d_model, input.ncols()));
    }
    let mut h = &input + &weights.pos_emb.slice(s![0..t, ..]);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lw in &weights.layers {
        let (attn_in, attn_rstd) = layer_norm(&h);
        let q = attn_in.dot(&lw.attn_q);
        let k = attn_in.dot(&lw.attn_k);
        let v = attn_in.dot(&lw.attn_v);
        let (ctx, probs) = causal_attention(&q, &k, &v, cfg.num_heads);
        let attn_out = ctx.dot(&lw.attn_o);
        h += &attn_out;
        let (ffn_in, ffn_rstd) = layer_norm(&h);
        let pre = ffn_in.dot(&lw.ffn_up);
        let act = pre.mapv(gelu);
        let ffn_out = act.dot(&lw.ffn_down);
        h += &ffn_out;
        layers.push(LayerCache {
            attn_in,
            attn_rstd,
            q,
            k,
            v,
            probs,
            ctx,
            attn_out,
            ffn_in,
            ffn_rstd,
            pre,
            act,
            ffn_out,
        });
    }
    let (final_xhat, final_rstd) = layer_norm(&h);
    let logits = final_xhat.dot(&weights.unembed);
    Ok(ForwardCache {
        layers,
        final_xhat,
        final_rstd,
        logits,
    })
}

/// Which gradients the backward pass should materialise.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    /// Token/positional embeddings and unembedding.
    pub frozen: bool,
    /// The six per-layer matrices.
    pub layers: bool,
    /// Gradient with respect to the input embeddings.
    pub input: bool,
}

impl GradRequest {
    pub fn all() -> Self {
        Self {
            frozen: true,
            layers: true,
            input: true,
        }
    }

    pub fn layers_only() -> Self {
        Self {
            layers: true,
            ..Self::default()
        }
    }

    pub fn input_only() -> Self {
        Self {
            input: true,
            ..Self::default()
        }
    }
}

/// Upstream gradients: on logits, and optionally on sublayer outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: Array2<f64>,
    pub attn_out: Vec<Option<Array2<f64>>>,
    pub ffn_out: Vec<Option<Array2<f64>>>,
}

impl OutputGrads {
    pub fn from_logits(logits: Array2<f64>, num_layers: usize) -> Self {
        Self {
            logits,
            attn_out: vec![None; num_layers],
            ffn_out: vec![None; num_layers],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerWeights>,
    pub tok_emb: Option<Array2<f64>>,
    pub pos_emb: Option<Array2<f64>>,
    pub unembed: Option<Array2<f64>>,
    pub input: Option<Array2<f64>>,
}

impl Grads {
    pub fn zeros(weights: &Weights, request: GradRequest) -> Self {
        let cfg = &weights.config;
        Self {
            layers: if request.layers {
                (0..cfg.num_layers).map(|_| LayerWeights::zeros(cfg)).collect()
            } else {
                Vec::new()
            },
            tok_emb: request.frozen.then(|| Array2::zeros(weights.tok_emb.dim())),
            pos_emb: request.frozen.then(|| Array2::zeros(weights.pos_emb.dim())),
            unembed: request.frozen.then(|| Array2::zeros(weights.unembed.dim())),
            input: None,
        }
    }

    /// Accumulates parameter gradients (input gradients are per-sequence and
    /// are not summed).
    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        for (a, b) in [
            (&mut self.tok_emb, &other.tok_emb),
            (&mut self.pos_emb, &other.pos_emb),
            (&mut self.unembed, &other.unembed),
        ] {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a += b;
            }
        }
    }
}

/// Reverse-mode pass. `tokens` is only consulted for token-embedding
/// gradients and must correspond to the rows of the forward input.
pub fn backward(
    weights: &Weights,
    cache: &ForwardCache,
    tokens: Option<&[usize]>,
    upstream: &OutputGrads,
    request: GradRequest,
) -> Result<Grads> {
    let cfg = &weights.config;
    let t = cache.seq_len();
    if upstream.logits.dim() != cache.logits.dim() {
        return Err(Error::shape(
            "logit gradient",
            format!("{:?}", cache.logits.dim()),
            format!("{:?}", upstream.logits.dim()),
        ));
    }
    let mut grads = Grads::zeros(weights, request);
    let dlogits = &upstream.logits;
    if let Some(du) = grads.unembed.as_mut() {
        *du += &cache.final_xhat.t().dot(dlogits);
    }
    let dfinal = dlogits.dot(&weights.unembed.t());
    let mut dh = layer_norm_backward(&dfinal, &cache.final_xhat, &cache.final_rstd);
    let dh_head = cfg.head_dim();
    let scale = 1.0 / (dh_head as f64).sqrt();

    for l in (0..cfg.num_layers).rev() {
        let lw = &weights.layers[l];
        let lc = &cache.layers[l];

        // FFN sublayer.
        let mut d_ffn_out = dh.clone();
        if let Some(extra) = &upstream.ffn_out[l] {
            d_ffn_out += extra;
        }
        let d_act = d_ffn_out.dot(&lw.ffn_down.t());
        let d_pre = &d_act * &lc.pre.mapv(gelu_prime);
        let d_ffn_in = d_pre.dot(&lw.ffn_up.t());
        if request.layers {
            let g = &mut grads.layers[l];
            g.ffn_down += &lc.act.t().dot(&d_ffn_out);
            g.ffn_up += &lc.ffn_in.t().dot(&d_pre);
        }
        dh += &layer_norm_backward(&d_ffn_in, &lc.ffn_in, &lc.ffn_rstd);

        // Attention sublayer.
        let mut d_attn_out = dh.clone();
        if let Some(extra) = &upstream.attn_out[l] {
            d_attn_out += extra;
        }
        let d_ctx = d_attn_out.dot(&lw.attn_o.t());
        let mut dq = Array2::zeros(lc.q.dim());
        let mut dk = Array2::zeros(lc.k.dim());
        let mut dv = Array2::zeros(lc.v.dim());
        for (h, p) in lc.probs.iter().enumerate() {
            let cols = s![.., h * dh_head..(h + 1) * dh_head];
            let dctx_h = d_ctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let dp = dctx_h.dot(&lc.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            for i in 0..t {
                for j in 0..t {
                    ds[[i, j]] = p[[i, j]] * (ds[[i, j]] - row_dot[i]);
                }
            }
            dq.slice_mut(cols).assign(&(ds.dot(&lc.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&lc.q.slice(cols)) * scale));
        }
        let d_attn_in =
            dq.dot(&lw.attn_q.t()) + dk.dot(&lw.attn_k.t()) + dv.dot(&lw.attn_v.t());
        if request.layers {
            let g = &mut grads.layers[l];
            g.attn_o += &lc.ctx.t().dot(&d_attn_out);
            g.attn_q += &lc.attn_in.t().dot(&dq);
            g.attn_k += &lc.attn_in.t().dot(&dk);
            g.attn_v += &lc.attn_in.t().dot(&dv);
        }
        dh += &layer_norm_backward(&d_attn_in, &lc.attn_in, &lc.attn_rstd);
    }

    if let Some(dp) = grads.pos_emb.as_mut() {
        dp.slice_mut(s![0..t, ..]).scaled_add(1.0, &dh);
    }
    if let (Some(de), Some(tokens)) = (grads.tok_emb.as_mut(), tokens) {
        for (i, &tok) in tokens.iter().enumerate() {
            if tok != PAD_TOKEN {
                let mut row = de.row_mut(tok);
                row += &dh.row(i);
            }
        }
    }
    if request.input {
        grads.input = Some(dh);
    }
    Ok(grads)
}

/// Effective dense weights `W_base + (m_row m_col^T) * delta` for one matrix.
pub fn masked_sum(
    base: &Array2<f64>,
    delta: &Array2<f64>,
    m_row: &Array1<f64>,
    m_col: &Array1<f64>,
) -> Array2<f64> {
    let mut out = base.clone();
    for ((j, k), v) in out.indexed_iter_mut() {
        let m = m_row[j] * m_col[k];
        if m != 0.0 {
            *v += m * delta[[j, k]];
        }
    }
    out
}

/// Shapes of the six layer matrices, for contract checks.
pub fn check_layer_shapes(weights: &Weights, layers: &[LayerWeights]) -> Result<()> {
    let cfg = &weights.config;
    if layers.len() != cfg.num_layers {
        return Err(Error::shape("delta layers", cfg.num_layers, layers.len()));
    }
    for (l, lw) in layers.iter().enumerate() {
        for m in LayerMatrix::ALL {
            if lw.get(m).dim() != m.shape(cfg) {
                return Err(Error::shape(
                    m.qualified_name(l),
                    format!("{:?}", m.shape(cfg)),
                    format!("{:?}", lw.get(m).dim()),
                ));
            }
        }
    }
    Ok(())
}
