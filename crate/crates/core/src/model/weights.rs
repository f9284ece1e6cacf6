use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::gates::GateGroup;
use crate::error::{Error, Result};

/// Token id whose embedding row is pinned to zero.
pub const PAD_TOKEN: usize = 0;

/// Matrices that never carry a gated delta.
pub const FROZEN_MATRICES: [&str; 3] = ["tok_emb", "pos_emb", "unembed"];

/// The six delta-carrying matrices of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerMatrix {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnUp,
    FfnDown,
}

impl LayerMatrix {
    pub const ALL: [LayerMatrix; 6] = [
        LayerMatrix::AttnQ,
        LayerMatrix::AttnK,
        LayerMatrix::AttnV,
        LayerMatrix::AttnO,
        LayerMatrix::FfnUp,
        LayerMatrix::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerMatrix::AttnQ => "attn_q",
            LayerMatrix::AttnK => "attn_k",
            LayerMatrix::AttnV => "attn_v",
            LayerMatrix::AttnO => "attn_o",
            LayerMatrix::FfnUp => "ffn_up",
            LayerMatrix::FfnDown => "ffn_down",
        }
    }

    /// (row gate, column gate) of the rank-1 mask over this matrix's delta.
    ///
    /// The row gate of the attention output projection is the value gate:
    /// W_O reads the context vector, which is assembled from value channels.
    pub fn gate_groups(self) -> (GateGroup, GateGroup) {
        match self {
            LayerMatrix::FfnUp => (GateGroup::FfnRead, GateGroup::FfnHidden),
            LayerMatrix::FfnDown => (GateGroup::FfnHidden, GateGroup::FfnWrite),
            LayerMatrix::AttnQ => (GateGroup::AttnRead, GateGroup::AttnQ),
            LayerMatrix::AttnK => (GateGroup::AttnRead, GateGroup::AttnK),
            LayerMatrix::AttnV => (GateGroup::AttnRead, GateGroup::AttnV),
            LayerMatrix::AttnO => (GateGroup::AttnV, GateGroup::AttnWrite),
        }
    }

    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            LayerMatrix::AttnQ | LayerMatrix::AttnK | LayerMatrix::AttnV => {
                (cfg.d_model, cfg.d_inner)
            }
            LayerMatrix::AttnO => (cfg.d_inner, cfg.d_model),
            LayerMatrix::FfnUp => (cfg.d_model, cfg.d_ffn),
            LayerMatrix::FfnDown => (cfg.d_ffn, cfg.d_model),
        }
    }

    pub fn qualified_name(self, layer: usize) -> String {
        format!("layers.{layer}.{}", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_q: Array2<f64>,
    pub attn_k: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub attn_o: Array2<f64>,
    pub ffn_up: Array2<f64>,
    pub ffn_down: Array2<f64>,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let z = |m: LayerMatrix| Array2::zeros(m.shape(cfg));
        Self {
            attn_q: z(LayerMatrix::AttnQ),
            attn_k: z(LayerMatrix::AttnK),
            attn_v: z(LayerMatrix::AttnV),
            attn_o: z(LayerMatrix::AttnO),
            ffn_up: z(LayerMatrix::FfnUp),
            ffn_down: z(LayerMatrix::FfnDown),
        }
    }

    pub fn get(&self, m: LayerMatrix) -> &Array2<f64> {
        match m {
            LayerMatrix::AttnQ => &self.attn_q,
            LayerMatrix::AttnK => &self.attn_k,
            LayerMatrix::AttnV => &self.attn_v,
            LayerMatrix::AttnO => &self.attn_o,
            LayerMatrix::FfnUp => &self.ffn_up,
            LayerMatrix::FfnDown => &self.ffn_down,
        }
    }

    pub fn get_mut(&mut self, m: LayerMatrix) -> &mut Array2<f64> {
        match m {
            LayerMatrix::AttnQ => &mut self.attn_q,
            LayerMatrix::AttnK => &mut self.attn_k,
            LayerMatrix::AttnV => &mut self.attn_v,
            LayerMatrix::AttnO => &mut self.attn_o,
            LayerMatrix::FfnUp => &mut self.ffn_up,
            LayerMatrix::FfnDown => &mut self.ffn_down,
        }
    }

    pub fn add_assign(&mut self, other: &LayerWeights) {
        for m in LayerMatrix::ALL {
            *self.get_mut(m) += other.get(m);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in LayerMatrix::ALL {
            self.get_mut(m).mapv_inplace(|v| v * factor);
        }
    }
}

/// Dense parameters of the transformer. The model is bias-free and its
/// layer norms carry no affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub unembed: Array2<f64>,
}

impl Weights {
    pub fn zeros(config: ModelConfig) -> Self {
        Self {
            config,
            tok_emb: Array2::zeros((config.vocab_size, config.d_model)),
            pos_emb: Array2::zeros((config.max_seq_len, config.d_model)),
            layers: (0..config.num_layers)
                .map(|_| LayerWeights::zeros(&config))
                .collect(),
            unembed: Array2::zeros((config.d_model, config.vocab_size)),
        }
    }

    /// Gaussian initialisation; residual-writing matrices are scaled down by
    /// sqrt(2 * num_layers).
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        let std = 0.02;
        let write_std = std / (2.0 * config.num_layers as f64).sqrt();
        fill_normal(&mut w.tok_emb, 0.1, rng);
        w.tok_emb.row_mut(PAD_TOKEN).fill(0.0);
        fill_normal(&mut w.pos_emb, 0.1, rng);
        let in_std = 1.0 / (config.d_model as f64).sqrt();
        for layer in &mut w.layers {
            fill_normal(&mut layer.attn_q, in_std, rng);
            fill_normal(&mut layer.attn_k, in_std, rng);
            fill_normal(&mut layer.attn_v, in_std, rng);
            fill_normal(&mut layer.attn_o, write_std * 5.0, rng);
            fill_normal(&mut layer.ffn_up, in_std, rng);
            fill_normal(&mut layer.ffn_down, write_std * 5.0, rng);
        }
        fill_normal(&mut w.unembed, in_std, rng);
        Ok(w)
    }

    /// Every matrix with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for m in LayerMatrix::ALL {
                out.push((m.qualified_name(l), layer.get(m)));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                attn_q,
                attn_k,
                attn_v,
                attn_o,
                ffn_up,
                ffn_down,
            } = layer;
            out.push((LayerMatrix::AttnQ.qualified_name(l), attn_q));
            out.push((LayerMatrix::AttnK.qualified_name(l), attn_k));
            out.push((LayerMatrix::AttnV.qualified_name(l), attn_v));
            out.push((LayerMatrix::AttnO.qualified_name(l), attn_o));
            out.push((LayerMatrix::FfnUp.qualified_name(l), ffn_up));
            out.push((LayerMatrix::FfnDown.qualified_name(l), ffn_down));
        }
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    /// Layer matrices of `self - other`; frozen matrices must agree.
    pub fn layer_delta(&self, other: &Weights) -> Result<Vec<LayerWeights>> {
        self.check_same_shape(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let mut d = a.clone();
                for m in LayerMatrix::ALL {
                    *d.get_mut(m) -= b.get(m);
                }
                d
            })
            .collect())
    }

    pub fn check_same_shape(&self, other: &Weights) -> Result<()> {
        if self.config != other.config {
            return Err(Error::shape(
                "weights config",
                format!("{:?}", self.config),
                format!("{:?}", other.config),
            ));
        }
        Ok(())
    }

    /// Order-sensitive digest over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, arr) in self.named() {
            h.write(name.as_bytes());
            for v in arr.iter() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

fn fill_normal<R: Rng>(arr: &mut Array2<f64>, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("positive std");
    arr.mapv_inplace(|_| dist.sample(rng));
}
