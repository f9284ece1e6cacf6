//! Active-channel sets of a trained gate set.
//!
//! A channel is active when its logit is strictly positive. The residual
//! write set is kept per sublayer (FFN write, attention write) so that
//! activation capture can address the two sublayer outputs independently;
//! their union is formed where the matching loss is computed.

use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateGroup, GateSet, LayerGates, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCarrier {
    /// Sorted active indices per gate group, indexed by [`GateGroup::index`].
    pub active: [Vec<usize>; 8],
    /// Length of each group, so masks can be rebuilt without the config.
    pub group_len: [usize; 8],
}

impl LayerCarrier {
    pub fn active(&self, g: GateGroup) -> &[usize] {
        &self.active[g.index()]
    }

    /// Residual-write channels as (FFN write, attention write).
    pub fn c_write(&self) -> (&[usize], &[usize]) {
        (self.active(GateGroup::FfnWrite), self.active(GateGroup::AttnWrite))
    }

    /// Union of the two write sets (residual coordinates).
    pub fn c_write_union(&self) -> Vec<usize> {
        let (f, a) = self.c_write();
        let mut u: Vec<usize> = f.iter().chain(a).copied().collect();
        u.sort_unstable();
        u.dedup();
        u
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarrierSpec {
    pub layers: Vec<LayerCarrier>,
}

/// Counts of active channels per group, summed over layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarrierSummary {
    pub per_group: Vec<(String, usize)>,
    pub total_active: usize,
    pub total_gates: usize,
    pub write_channels: usize,
}

/// Indices `i` with `theta_i > 0`, one sorted set per group and layer.
pub fn extract_carrier(gates: &GateSet) -> CarrierSpec {
    CarrierSpec {
        layers: gates
            .layers
            .iter()
            .map(|lg| LayerCarrier {
                active: GateGroup::ALL.map(|g| {
                    lg.get(g)
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t > 0.0)
                        .map(|(i, _)| i)
                        .collect()
                }),
                group_len: GateGroup::ALL.map(|g| lg.get(g).len()),
            })
            .collect(),
    }
}

impl CarrierSpec {
    pub fn write_channel_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (f, a) = l.c_write();
                f.len() + a.len()
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.active.iter().all(|a| a.is_empty()))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.num_layers {
            return Err(Error::shape("carrier layers", cfg.num_layers, self.layers.len()));
        }
        for (l, lc) in self.layers.iter().enumerate() {
            for g in GateGroup::ALL {
                let n = g.len(cfg);
                if lc.group_len[g.index()] != n {
                    return Err(Error::shape(
                        format!("carrier layer {l} group {}", g.name()),
                        n,
                        lc.group_len[g.index()],
                    ));
                }
                let idx = lc.active(g);
                if idx.iter().any(|&i| i >= n) || idx.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Invalid(format!(
                        "carrier layer {l} group {}: indices must be sorted, unique and < {n}",
                        g.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Binary masks with ones exactly at the active channels.
    pub fn to_masks(&self) -> GateSet {
        GateSet {
            layers: self
                .layers
                .iter()
                .map(|lc| LayerGates {
                    logits: GateGroup::ALL.map(|g| {
                        let mut v = Array1::zeros(lc.group_len[g.index()]);
                        for &i in lc.active(g) {
                            v[i] = 1.0;
                        }
                        v
                    }),
                })
                .collect(),
        }
    }

    pub fn summary(&self) -> CarrierSummary {
        let per_group = GateGroup::ALL
            .iter()
            .map(|&g| {
                (
                    g.name().to_string(),
                    self.layers.iter().map(|l| l.active(g).len()).sum(),
                )
            })
            .collect::<Vec<(String, usize)>>();
        CarrierSummary {
            total_active: per_group.iter().map(|(_, n)| n).sum(),
            total_gates: self
                .layers
                .iter()
                .map(|l| l.group_len.iter().sum::<usize>())
                .sum(),
            write_channels: self.write_channel_count(),
            per_group,
        }
    }

    pub fn to_text(&self) -> String {
        let file = CarrierFile {
            format: CARRIER_FORMAT.to_string(),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, lc)| CarrierFileLayer {
                    layer: l,
                    groups: GateGroup::ALL
                        .iter()
                        .map(|&g| CarrierFileGroup {
                            name: g.name().to_string(),
                            len: lc.group_len[g.index()],
                            active: lc.active(g).to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("carrier serialises")
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let file: CarrierFile = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.format != CARRIER_FORMAT {
            return Err(bad(format!("unknown format tag {:?}", file.format)));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (expect, fl) in file.layers.iter().enumerate() {
            if fl.layer != expect {
                return Err(bad(format!("layer {} out of order", fl.layer)));
            }
            let mut active: [Vec<usize>; 8] = Default::default();
            let mut group_len = [usize::MAX; 8];
            for fg in &fl.groups {
                let g = GateGroup::from_name(&fg.name)
                    .ok_or_else(|| bad(format!("unknown gate group {:?}", fg.name)))?;
                if group_len[g.index()] != usize::MAX {
                    return Err(bad(format!("duplicate group {:?}", fg.name)));
                }
                if fg.active.iter().any(|&i| i >= fg.len)
                    || fg.active.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(bad(format!(
                        "layer {} group {}: indices must be sorted, unique and < {}",
                        fl.layer, fg.name, fg.len
                    )));
                }
                group_len[g.index()] = fg.len;
                active[g.index()] = fg.active.clone();
            }
            if group_len.contains(&usize::MAX) {
                return Err(bad(format!("layer {} is missing gate groups", fl.layer)));
            }
            layers.push(LayerCarrier { active, group_len });
        }
        Ok(CarrierSpec { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

const CARRIER_FORMAT: &str = "sparse-carrier/carrier-v1";

#[derive(Serialize, Deserialize)]
struct CarrierFile {
    format: String,
    layers: Vec<CarrierFileLayer>,
}

#[derive(Serialize, Deserialize)]
struct CarrierFileLayer {
    layer: usize,
    groups: Vec<CarrierFileGroup>,
}

#[derive(Serialize, Deserialize)]
struct CarrierFileGroup {
    name: String,
    len: usize,
    active: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 3,
            d_ffn: 4,
            d_inner: 2,
            num_heads: 1,
            vocab_size: 5,
            max_seq_len: 4,
        }
    }

    #[test]
    fn all_negative_is_empty() {
        let c = cfg();
        let carrier = extract_carrier(&GateSet::filled(&c, -0.5));
        assert!(carrier.is_empty());
        assert_eq!(carrier.write_channel_count(), 0);
        assert_eq!(carrier.summary().total_active, 0);
    }

    #[test]
    fn strict_positivity() {
        let c = cfg();
        let mut g = GateSet::filled(&c, -1.0);
        *g.layers[0].get_mut(GateGroup::FfnRead) = array![0.1, 0.0, -0.1];
        let carrier = extract_carrier(&g);
        assert_eq!(carrier.layers[0].active(GateGroup::FfnRead), &[0]);
        assert!(carrier.layers[1].active(GateGroup::FfnRead).is_empty());
    }

    #[test]
    fn masks_round_trip_binarization() {
        let c = cfg();
        let mut g = GateSet::filled(&c, -1.0);
        *g.layers[1].get_mut(GateGroup::AttnWrite) = array![0.3, -0.2, 2.0];
        *g.layers[0].get_mut(GateGroup::FfnHidden) = array![0.0, 1.0, 1e-12, -3.0];
        let carrier = extract_carrier(&g);
        assert_eq!(carrier.to_masks(), g.binarized());
        assert_eq!(carrier.layers[1].c_write(), (&[][..], &[0usize, 2][..]));
        assert_eq!(carrier.layers[1].c_write_union(), vec![0, 2]);
    }

    #[test]
    fn write_sets_come_only_from_write_groups() {
        let c = cfg();
        let mut g = GateSet::filled(&c, 1.0);
        g.layers[0].get_mut(GateGroup::FfnWrite).fill(-1.0);
        g.layers[0].get_mut(GateGroup::AttnWrite).fill(-1.0);
        let carrier = extract_carrier(&g);
        // Read/hidden/q/k/v are all active but contribute nothing to C_write.
        assert_eq!(carrier.layers[0].c_write_union(), Vec::<usize>::new());
        assert_eq!(carrier.write_channel_count(), 2 * c.d_model);
    }

    #[test]
    fn text_round_trip_and_corruption() {
        let c = cfg();
        let mut g = GateSet::filled(&c, -1.0);
        *g.layers[0].get_mut(GateGroup::AttnQ) = array![1.0, 2.0];
        *g.layers[1].get_mut(GateGroup::FfnWrite) = array![-1.0, 1.0, 1.0];
        let carrier = extract_carrier(&g);
        let text = carrier.to_text();
        let back = CarrierSpec::from_text(&text, Path::new("x")).unwrap();
        assert_eq!(back, carrier);
        back.validate(&c).unwrap();

        let corrupted = text.replace("active = [1, 2]", "active = [2, 1]");
        assert!(corrupted != text);
        assert!(CarrierSpec::from_text(&corrupted, Path::new("x")).is_err());
        assert!(CarrierSpec::from_text("garbage ][", Path::new("x")).is_err());
    }
}
