//! The gated delta path `W = W_base + M * delta` with a rank-1 structured `M`.
//!
//! Two execution modes compute the same function. Activation gating applies
//! the gates to activations on a separate delta path; materialized masking
//! builds the effective dense weights once and runs the dense network. The
//! dense path is the one the trainers differentiate, and
//! [`DeltaModel::chain_gradients`] maps dense weight gradients back onto
//! gate masks and delta weights.

use ndarray::{Array2, ArrayView2};

use super::forward::{self, causal_attention, embed_tokens, gelu, layer_norm, ForwardCache};
use super::gates::{GateGroup, GateSet};
use super::weights::{LayerMatrix, LayerWeights, Weights};
use crate::carrier::CarrierSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    ActivationGating,
    MaterializedMask,
}

/// Gate configuration for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gating<'a> {
    Gates(&'a GateSet),
    AllOn,
    AllOff,
}

/// The input to a forward pass: token ids, or embedding rows (soft triggers).
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    Embeddings(ArrayView2<'a, f64>),
}

impl Input<'_> {
    pub fn embed(&self, weights: &Weights) -> Result<Array2<f64>> {
        match self {
            Input::Tokens(t) => embed_tokens(weights, t),
            Input::Embeddings(e) => Ok(e.to_owned()),
        }
    }
}

/// Concatenate trigger rows and the embeddings of `tokens`.
pub fn prefixed_embeddings(
    weights: &Weights,
    prefix: ArrayView2<f64>,
    tokens: &[usize],
) -> Result<Array2<f64>> {
    let body = embed_tokens(weights, tokens)?;
    if prefix.nrows() == 0 {
        return Ok(body);
    }
    ndarray::concatenate(ndarray::Axis(0), &[prefix, body.view()])
        .map_err(|e| Error::Invalid(format!("prefix concat: {e}")))
}

/// Base weights plus a per-layer delta. Frozen matrices come from `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaModel {
    pub base: Weights,
    pub delta: Vec<LayerWeights>,
}

impl DeltaModel {
    pub fn new(base: Weights, delta: Vec<LayerWeights>) -> Result<Self> {
        forward::check_layer_shapes(&base, &delta)?;
        Ok(Self { base, delta })
    }

    pub fn config(&self) -> &super::ModelConfig {
        &self.base.config
    }

    /// Binary masks for the requested gating.
    pub fn masks(&self, gating: Gating) -> Result<GateSet> {
        let cfg = self.config();
        match gating {
            Gating::Gates(g) => {
                g.validate(cfg)?;
                Ok(g.binarized())
            }
            Gating::AllOn => Ok(GateSet::filled(cfg, 1.0)),
            Gating::AllOff => Ok(GateSet::filled(cfg, 0.0)),
        }
    }

    /// Dense weights with every delta masked by the outer product of its
    /// row and column gates.
    pub fn materialize(&self, gating: Gating) -> Result<Weights> {
        let masks = self.masks(gating)?;
        Ok(self.materialize_masks(&masks))
    }

    pub(crate) fn materialize_masks(&self, masks: &GateSet) -> Weights {
        let mut w = self.base.clone();
        for (l, layer) in w.layers.iter_mut().enumerate() {
            let gl = &masks.layers[l];
            for m in LayerMatrix::ALL {
                let (rg, cg) = m.gate_groups();
                *layer.get_mut(m) =
                    forward::masked_sum(layer.get(m), self.delta[l].get(m), gl.get(rg), gl.get(cg));
            }
        }
        w
    }

    /// Fully fine-tuned dense weights (`base + delta`).
    pub fn finetuned(&self) -> Weights {
        let mut w = self.base.clone();
        for (layer, d) in w.layers.iter_mut().zip(&self.delta) {
            layer.add_assign(d);
        }
        w
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config().num_layers {
            return Err(Error::Invalid(format!(
                "layer {layer} out of range (num_layers = {})",
                self.config().num_layers
            )));
        }
        Ok(())
    }

    /// FFN sublayer output (base path plus gated delta path) for rows of
    /// normalised activations `x`.
    pub fn ffn_delta_forward(
        &self,
        x: &Array2<f64>,
        layer: usize,
        gating: Gating,
        mode: ExecutionMode,
    ) -> Result<Array2<f64>> {
        self.check_layer(layer)?;
        let cfg = self.config();
        if x.ncols() != cfg.d_model {
            return Err(Error::shape("ffn input", cfg.d_model, x.ncols()));
        }
        let masks = self.masks(gating)?;
        let g = &masks.layers[layer];
        let base = &self.base.layers[layer];
        let delta = &self.delta[layer];
        Ok(match mode {
            ExecutionMode::ActivationGating => {
                let m_read = g.get(GateGroup::FfnRead);
                let m_hidden = g.get(GateGroup::FfnHidden);
                let m_write = g.get(GateGroup::FfnWrite);
                let pre = x.dot(&base.ffn_up) + (x * m_read).dot(&delta.ffn_up) * m_hidden;
                let h = pre.mapv(gelu);
                h.dot(&base.ffn_down) + (&h * m_hidden).dot(&delta.ffn_down) * m_write
            }
            ExecutionMode::MaterializedMask => {
                let w = self.materialize_masks(&masks);
                let lw = &w.layers[layer];
                x.dot(&lw.ffn_up).mapv(gelu).dot(&lw.ffn_down)
            }
        })
    }

    /// Causal attention sublayer output for a sequence of normalised rows.
    pub fn attn_delta_forward(
        &self,
        x: &Array2<f64>,
        layer: usize,
        gating: Gating,
        mode: ExecutionMode,
    ) -> Result<Array2<f64>> {
        self.check_layer(layer)?;
        let cfg = self.config();
        if x.ncols() != cfg.d_model {
            return Err(Error::shape("attention input", cfg.d_model, x.ncols()));
        }
        let masks = self.masks(gating)?;
        let g = &masks.layers[layer];
        let base = &self.base.layers[layer];
        let delta = &self.delta[layer];
        Ok(match mode {
            ExecutionMode::ActivationGating => {
                let m_read = g.get(GateGroup::AttnRead);
                let m_v = g.get(GateGroup::AttnV);
                let m_write = g.get(GateGroup::AttnWrite);
                let xr = x * m_read;
                let q = x.dot(&base.attn_q) + xr.dot(&delta.attn_q) * g.get(GateGroup::AttnQ);
                let k = x.dot(&base.attn_k) + xr.dot(&delta.attn_k) * g.get(GateGroup::AttnK);
                let v = x.dot(&base.attn_v) + xr.dot(&delta.attn_v) * m_v;
                let (c, _) = causal_attention(&q, &k, &v, cfg.num_heads);
                c.dot(&base.attn_o) + (&c * m_v).dot(&delta.attn_o) * m_write
            }
            ExecutionMode::MaterializedMask => {
                let w = self.materialize_masks(&masks);
                let lw = &w.layers[layer];
                let q = x.dot(&lw.attn_q);
                let k = x.dot(&lw.attn_k);
                let v = x.dot(&lw.attn_v);
                let (c, _) = causal_attention(&q, &k, &v, cfg.num_heads);
                c.dot(&lw.attn_o)
            }
        })
    }

    /// Next-token logits for every position.
    pub fn forward(&self, input: Input, gating: Gating, mode: ExecutionMode) -> Result<Array2<f64>> {
        Ok(self.forward_traced(input, gating, mode)?.logits)
    }

    /// Logits plus every sublayer output, under either execution mode.
    pub fn forward_traced(
        &self,
        input: Input,
        gating: Gating,
        mode: ExecutionMode,
    ) -> Result<Trace> {
        let cfg = *self.config();
        let emb = input.embed(&self.base)?;
        match mode {
            ExecutionMode::MaterializedMask => {
                let w = self.materialize(gating)?;
                let cache = forward::forward(&w, emb.view())?;
                Ok(Trace::from_cache(&cache))
            }
            ExecutionMode::ActivationGating => {
                let t = emb.nrows();
                if t == 0 {
                    return Err(Error::Empty("input sequence".into()));
                }
                if t > cfg.max_seq_len {
                    return Err(Error::SequenceTooLong {
                        len: t,
                        max: cfg.max_seq_len,
                    });
                }
                let mut h = emb + self.base.pos_emb.slice(ndarray::s![0..t, ..]);
                let mut attn_out = Vec::with_capacity(cfg.num_layers);
                let mut ffn_out = Vec::with_capacity(cfg.num_layers);
                for l in 0..cfg.num_layers {
                    let (x, _) = layer_norm(&h);
                    let a = self.attn_delta_forward(&x, l, gating, mode)?;
                    h += &a;
                    let (x, _) = layer_norm(&h);
                    let f = self.ffn_delta_forward(&x, l, gating, mode)?;
                    h += &f;
                    attn_out.push(a);
                    ffn_out.push(f);
                }
                let (xf, _) = layer_norm(&h);
                Ok(Trace {
                    logits: xf.dot(&self.base.unembed),
                    attn_out,
                    ffn_out,
                })
            }
        }
    }

    /// Sublayer outputs restricted to the carrier's residual-write channels.
    pub fn capture_write_activations(
        &self,
        input: Input,
        gating: Gating,
        carrier: &CarrierSpec,
    ) -> Result<Vec<WriteRecord>> {
        carrier.validate(self.config())?;
        if carrier.write_channel_count() == 0 {
            return Ok(Vec::new());
        }
        let trace = self.forward_traced(input, gating, ExecutionMode::MaterializedMask)?;
        Ok(trace.restrict(carrier))
    }

    /// Maps gradients with respect to the effective dense layer weights onto
    /// (gradient w.r.t. binary masks, gradient w.r.t. delta weights).
    ///
    /// With `W = B + (r c^T) * D` and `G = dL/dW`:
    /// `dL/dD = G * (r c^T)`, `dL/dr = (G * D) c`, `dL/dc = (G * D)^T r`.
    /// A group shared by two matrices (hidden, value, read) sums both
    /// contributions.
    pub fn chain_gradients(
        &self,
        masks: &GateSet,
        dense: &[LayerWeights],
        want_delta: bool,
    ) -> (GateSet, Option<Vec<LayerWeights>>) {
        let cfg = self.config();
        let mut d_mask = GateSet::filled(cfg, 0.0);
        let mut d_delta = want_delta.then(|| {
            (0..cfg.num_layers)
                .map(|_| LayerWeights::zeros(cfg))
                .collect::<Vec<_>>()
        });
        for l in 0..cfg.num_layers {
            let gl = &masks.layers[l];
            for m in LayerMatrix::ALL {
                let (rg, cg) = m.gate_groups();
                let g = dense[l].get(m);
                let d = self.delta[l].get(m);
                let gd = g * d;
                let dr = gd.dot(gl.get(cg));
                let dc = gd.t().dot(gl.get(rg));
                *d_mask.layers[l].get_mut(rg) += &dr;
                *d_mask.layers[l].get_mut(cg) += &dc;
                if let Some(dd) = d_delta.as_mut() {
                    let mut out = g.clone();
                    let r = gl.get(rg);
                    let c = gl.get(cg);
                    for ((j, k), v) in out.indexed_iter_mut() {
                        *v *= r[j] * c[k];
                    }
                    *dd[l].get_mut(m) = out;
                }
            }
        }
        (d_mask, d_delta)
    }
}

/// Logits and sublayer outputs (pre-residual-add) of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: Array2<f64>,
    pub attn_out: Vec<Array2<f64>>,
    pub ffn_out: Vec<Array2<f64>>,
}

impl Trace {
    pub fn from_cache(cache: &ForwardCache) -> Self {
        Self {
            logits: cache.logits.clone(),
            attn_out: cache.layers.iter().map(|l| l.attn_out.clone()).collect(),
            ffn_out: cache.layers.iter().map(|l| l.ffn_out.clone()).collect(),
        }
    }

    pub fn restrict(&self, carrier: &CarrierSpec) -> Vec<WriteRecord> {
        restrict_outputs(&self.attn_out, &self.ffn_out, carrier)
    }
}

/// Residual-write activations of one layer at the carrier's channels, one
/// row per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteRecord {
    pub layer: usize,
    pub ffn: Array2<f64>,
    pub attn: Array2<f64>,
}

impl WriteRecord {
    pub fn is_empty(&self) -> bool {
        self.ffn.ncols() == 0 && self.attn.ncols() == 0
    }
}

pub(crate) fn select_columns(m: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    m.select(ndarray::Axis(1), cols)
}

pub(crate) fn restrict_outputs(
    attn_out: &[Array2<f64>],
    ffn_out: &[Array2<f64>],
    carrier: &CarrierSpec,
) -> Vec<WriteRecord> {
    if carrier.write_channel_count() == 0 {
        return Vec::new();
    }
    carrier
        .layers
        .iter()
        .enumerate()
        .map(|(l, lc)| WriteRecord {
            layer: l,
            ffn: select_columns(&ffn_out[l], lc.active(GateGroup::FfnWrite)),
            attn: select_columns(&attn_out[l], lc.active(GateGroup::AttnWrite)),
        })
        .collect()
}

/// Model-level forward for a gated delta model.
pub fn model_forward(
    model: &DeltaModel,
    input: Input,
    gating: Gating,
    mode: ExecutionMode,
) -> Result<Array2<f64>> {
    model.forward(input, gating, mode)
}

/// Relative error `max|a - b| / max(max|b|, tiny)`.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
    diff / scale
}

impl GateSet {
    /// Binary masks in the same layout (a mask set binarizes to itself).
    pub fn binarized(&self) -> GateSet {
        GateSet {
            layers: self
                .layers
                .iter()
                .map(|l| super::gates::LayerGates {
                    logits: l.logits.clone().map(|v| super::gates::binarize(&v)),
                })
                .collect(),
        }
    }
}
