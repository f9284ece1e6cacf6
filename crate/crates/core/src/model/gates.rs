//! Gate logits, Heaviside binarization and the straight-through estimator.
//!
//! Each layer owns eight logit vectors. Their binarizations form the row and
//! column masks of the rank-1 structured mask over every delta matrix; see
//! [`LayerMatrix::gate_groups`](super::weights::LayerMatrix::gate_groups).

use ndarray::{Array1, Array2};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateGroup {
    FfnRead,
    FfnHidden,
    FfnWrite,
    AttnRead,
    AttnQ,
    AttnK,
    AttnV,
    AttnWrite,
}

impl GateGroup {
    pub const ALL: [GateGroup; 8] = [
        GateGroup::FfnRead,
        GateGroup::FfnHidden,
        GateGroup::FfnWrite,
        GateGroup::AttnRead,
        GateGroup::AttnQ,
        GateGroup::AttnK,
        GateGroup::AttnV,
        GateGroup::AttnWrite,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GateGroup::FfnRead => "ffn_read",
            GateGroup::FfnHidden => "ffn_hidden",
            GateGroup::FfnWrite => "ffn_write",
            GateGroup::AttnRead => "attn_read",
            GateGroup::AttnQ => "attn_q",
            GateGroup::AttnK => "attn_k",
            GateGroup::AttnV => "attn_v",
            GateGroup::AttnWrite => "attn_write",
        }
    }

    pub fn from_name(name: &str) -> Option<GateGroup> {
        GateGroup::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn len(self, cfg: &ModelConfig) -> usize {
        match self {
            GateGroup::FfnRead | GateGroup::FfnWrite => cfg.d_model,
            GateGroup::AttnRead | GateGroup::AttnWrite => cfg.d_model,
            GateGroup::FfnHidden => cfg.d_ffn,
            GateGroup::AttnQ | GateGroup::AttnK | GateGroup::AttnV => cfg.d_inner,
        }
    }

    /// Residual-write groups: the output gates of the two sublayers.
    pub fn is_write(self) -> bool {
        matches!(self, GateGroup::FfnWrite | GateGroup::AttnWrite)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `m_i = 1[theta_i > 0]`. Zero maps to zero.
pub fn binarize(theta: &Array1<f64>) -> Array1<f64> {
    theta.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 })
}

/// Straight-through gradient: `dL/dtheta_i = dL/dm_i * sigma'(theta_i)`.
pub fn ste_gradient(upstream: &Array1<f64>, theta: &Array1<f64>) -> Result<Array1<f64>> {
    if upstream.len() != theta.len() {
        return Err(Error::shape("ste_gradient", theta.len(), upstream.len()));
    }
    Ok(ndarray::Zip::from(upstream)
        .and(theta)
        .map_collect(|&g, &t| g * sigmoid_prime(t)))
}

/// Outer product `M[j, k] = m_row[j] * m_col[k]`.
pub fn materialize_mask(m_row: &Array1<f64>, m_col: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m_row.len(), m_col.len()), |(j, k)| m_row[j] * m_col[k])
}

/// Eight logit vectors for one layer, indexed by [`GateGroup::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGates {
    pub logits: [Array1<f64>; 8],
}

impl LayerGates {
    pub fn filled(cfg: &ModelConfig, value: f64) -> Self {
        Self {
            logits: GateGroup::ALL.map(|g| Array1::from_elem(g.len(cfg), value)),
        }
    }

    pub fn get(&self, g: GateGroup) -> &Array1<f64> {
        &self.logits[g.index()]
    }

    pub fn get_mut(&mut self, g: GateGroup) -> &mut Array1<f64> {
        &mut self.logits[g.index()]
    }

    pub fn mask(&self, g: GateGroup) -> Array1<f64> {
        binarize(self.get(g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub layers: Vec<LayerGates>,
}

impl GateSet {
    pub fn filled(cfg: &ModelConfig, value: f64) -> Self {
        Self {
            layers: (0..cfg.num_layers)
                .map(|_| LayerGates::filled(cfg, value))
                .collect(),
        }
    }

    /// All logits at zero: every gate binarizes to off.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, 0.0)
    }

    pub fn all_on(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, 1.0)
    }

    pub fn all_off(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, -1.0)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.num_layers {
            return Err(Error::shape("gate layers", cfg.num_layers, self.layers.len()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for g in GateGroup::ALL {
                if layer.get(g).len() != g.len(cfg) {
                    return Err(Error::shape(
                        format!("gate layer {l} group {}", g.name()),
                        g.len(cfg),
                        layer.get(g).len(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn iter_logits(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.logits.iter().flat_map(|v| v.iter().copied()))
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.logits.iter().map(|v| v.len()).sum::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of logits that binarize to zero.
    pub fn inactive_fraction(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.iter_logits().filter(|&t| t <= 0.0).count() as f64 / n as f64
    }
}
