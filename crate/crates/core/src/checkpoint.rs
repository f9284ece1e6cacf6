//! On-disk layout for weights, checkpoint triples and gate sets.
//!
//! Every artifact is a directory holding one `.npy` array per named matrix
//! (little-endian f64) and a `manifest.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    DeltaModel, GateGroup, GateSet, LayerGates, LayerMatrix, LayerWeights, ModelConfig, Weights,
    FROZEN_MATRICES,
};

const WEIGHTS_FORMAT: &str = "sparse-carrier/checkpoint-v1";
const TRIPLE_FORMAT: &str = "sparse-carrier/triple-v1";
const GATES_FORMAT: &str = "sparse-carrier/gates-v1";
pub const MANIFEST: &str = "manifest.toml";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path,
        reason: e.to_string(),
    })
}

fn save_array2(path: &Path, a: &Array2<f64>) -> Result<()> {
    write_npy(path, a).map_err(|e| Error::Array {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_array2(path: &Path, shape: (usize, usize)) -> Result<Array2<f64>> {
    let a: Array2<f64> = read_npy(path).map_err(|e| Error::Array {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if a.dim() != shape {
        return Err(Error::shape(
            path.display().to_string(),
            format!("{shape:?}"),
            format!("{:?}", a.dim()),
        ));
    }
    Ok(a)
}

fn array_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.npy"))
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    format: String,
    config: ModelConfig,
    frozen_set: Vec<String>,
    matrices: Vec<String>,
}

fn expected_shape(cfg: &ModelConfig, name: &str) -> Result<(usize, usize)> {
    match name {
        "tok_emb" => Ok((cfg.vocab_size, cfg.d_model)),
        "pos_emb" => Ok((cfg.max_seq_len, cfg.d_model)),
        "unembed" => Ok((cfg.d_model, cfg.vocab_size)),
        _ => {
            for l in 0..cfg.num_layers {
                for m in LayerMatrix::ALL {
                    if m.qualified_name(l) == name {
                        return Ok(m.shape(cfg));
                    }
                }
            }
            Err(Error::Invalid(format!("unknown matrix name {name:?}")))
        }
    }
}

pub fn save_weights(weights: &Weights, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let named = weights.named();
    for (name, arr) in &named {
        save_array2(&array_path(dir, name), arr)?;
    }
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.into(),
        config: weights.config,
        frozen_set: FROZEN_MATRICES.iter().map(|s| s.to_string()).collect(),
        matrices: named.into_iter().map(|(n, _)| n).collect(),
    };
    write_text(
        &dir.join(MANIFEST),
        &toml::to_string(&manifest).expect("manifest serialises"),
    )
}

pub fn load_weights(dir: &Path) -> Result<Weights> {
    let manifest: WeightsManifest = read_manifest(dir)?;
    if manifest.format != WEIGHTS_FORMAT {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            reason: format!("unexpected format {:?}", manifest.format),
        });
    }
    load_weights_with(dir, manifest.config)
}

fn load_weights_with(dir: &Path, config: ModelConfig) -> Result<Weights> {
    config.validate()?;
    let mut w = Weights::zeros(config);
    for (name, slot) in w.named_mut() {
        *slot = load_array2(&array_path(dir, &name), expected_shape(&config, &name)?)?;
    }
    Ok(w)
}

/// Base weights, fine-tuned weights and their per-layer difference.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTriple {
    pub base: Weights,
    pub finetuned: Weights,
    /// `finetuned - base` for every gated (layer) matrix. Frozen matrices
    /// are identical in base and finetuned, so their delta is zero.
    pub delta: Vec<LayerWeights>,
}

impl CheckpointTriple {
    pub fn new(base: Weights, finetuned: Weights) -> Result<Self> {
        base.check_same_shape(&finetuned)?;
        for (name, (a, b)) in ["tok_emb", "pos_emb", "unembed"].iter().zip([
            (&base.tok_emb, &finetuned.tok_emb),
            (&base.pos_emb, &finetuned.pos_emb),
            (&base.unembed, &finetuned.unembed),
        ]) {
            if a != b {
                return Err(Error::Contract(format!(
                    "frozen matrix {name} differs between base and finetuned"
                )));
            }
        }
        let delta = finetuned.layer_delta(&base)?;
        Ok(Self {
            base,
            finetuned,
            delta,
        })
    }

    /// Rebuilds the triple around a new delta: `finetuned = base + delta`,
    /// and the stored delta is recomputed from the two.
    pub fn with_delta(base: Weights, delta: &[LayerWeights]) -> Result<Self> {
        let mut ft = base.clone();
        for (layer, d) in ft.layers.iter_mut().zip(delta) {
            layer.add_assign(d);
        }
        Self::new(base, ft)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    pub fn delta_model(&self) -> DeltaModel {
        DeltaModel {
            base: self.base.clone(),
            delta: self.delta.clone(),
        }
    }

    /// Checks the stored delta against `finetuned - base` exactly.
    pub fn verify(&self) -> Result<()> {
        let recomputed = self.finetuned.layer_delta(&self.base)?;
        if recomputed != self.delta {
            return Err(Error::Contract("delta != finetuned - base".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        save_weights(&self.base, &dir.join("base"))?;
        save_weights(&self.finetuned, &dir.join("finetuned"))?;
        let ddir = dir.join("delta");
        ensure_dir(&ddir)?;
        let mut names = Vec::new();
        for (l, d) in self.delta.iter().enumerate() {
            for m in LayerMatrix::ALL {
                let name = m.qualified_name(l);
                save_array2(&array_path(&ddir, &name), d.get(m))?;
                names.push(name);
            }
        }
        let manifest = TripleManifest {
            format: TRIPLE_FORMAT.into(),
            config: *self.config(),
            frozen_set: FROZEN_MATRICES.iter().map(|s| s.to_string()).collect(),
            delta_matrices: names,
        };
        write_text(
            &dir.join(MANIFEST),
            &toml::to_string(&manifest).expect("manifest serialises"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TripleManifest = read_manifest(dir)?;
        if manifest.format != TRIPLE_FORMAT {
            return Err(Error::Format {
                path: dir.join(MANIFEST),
                reason: format!("unexpected format {:?}", manifest.format),
            });
        }
        let cfg = manifest.config;
        let base = load_weights_with(&dir.join("base"), cfg)?;
        let finetuned = load_weights_with(&dir.join("finetuned"), cfg)?;
        let ddir = dir.join("delta");
        let mut delta = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut lw = LayerWeights::zeros(&cfg);
            for m in LayerMatrix::ALL {
                *lw.get_mut(m) = load_array2(&array_path(&ddir, &m.qualified_name(l)), m.shape(&cfg))?;
            }
            delta.push(lw);
        }
        let triple = Self {
            base,
            finetuned,
            delta,
        };
        triple.verify()?;
        Ok(triple)
    }
}

#[derive(Serialize, Deserialize)]
struct TripleManifest {
    format: String,
    config: ModelConfig,
    frozen_set: Vec<String>,
    delta_matrices: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GatesManifest {
    format: String,
    num_layers: usize,
    groups: Vec<GateSchema>,
}

#[derive(Serialize, Deserialize)]
struct GateSchema {
    name: String,
    len: usize,
}

pub fn save_gates(gates: &GateSet, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let first = gates
        .layers
        .first()
        .ok_or_else(|| Error::Empty("gate set has no layers".into()))?;
    for (l, layer) in gates.layers.iter().enumerate() {
        for g in GateGroup::ALL {
            let path = array_path(dir, &format!("layers.{l}.{}", g.name()));
            write_npy(&path, layer.get(g)).map_err(|e| Error::Array {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
    }
    let manifest = GatesManifest {
        format: GATES_FORMAT.into(),
        num_layers: gates.layers.len(),
        groups: GateGroup::ALL
            .iter()
            .map(|&g| GateSchema {
                name: g.name().into(),
                len: first.get(g).len(),
            })
            .collect(),
    };
    write_text(
        &dir.join(MANIFEST),
        &toml::to_string(&manifest).expect("manifest serialises"),
    )
}

pub fn load_gates(dir: &Path) -> Result<GateSet> {
    let manifest: GatesManifest = read_manifest(dir)?;
    if manifest.format != GATES_FORMAT {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            reason: format!("unexpected format {:?}", manifest.format),
        });
    }
    let mut layers = Vec::with_capacity(manifest.num_layers);
    for l in 0..manifest.num_layers {
        let mut logits: [Array1<f64>; 8] = Default::default();
        for schema in &manifest.groups {
            let g = GateGroup::from_name(&schema.name).ok_or_else(|| Error::Format {
                path: dir.join(MANIFEST),
                reason: format!("unknown gate group {:?}", schema.name),
            })?;
            let path = array_path(dir, &format!("layers.{l}.{}", g.name()));
            let v: Array1<f64> = read_npy(&path).map_err(|e| Error::Array {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if v.len() != schema.len {
                return Err(Error::shape(path.display().to_string(), schema.len, v.len()));
            }
            logits[g.index()] = v;
        }
        layers.push(LayerGates { logits });
    }
    Ok(GateSet { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 4,
            d_ffn: 6,
            d_inner: 4,
            num_heads: 2,
            vocab_size: 9,
            max_seq_len: 5,
        }
    }

    fn perturbed(base: &Weights, rng: &mut ChaCha8Rng) -> Weights {
        let mut ft = base.clone();
        for layer in &mut ft.layers {
            for m in LayerMatrix::ALL {
                layer.get_mut(m).mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
            }
        }
        ft
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Weights::init(cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        save_weights(&w, dir.path()).unwrap();
        assert_eq!(load_weights(dir.path()).unwrap(), w);
    }

    #[test]
    fn triple_round_trip_and_delta_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Weights::init(cfg(), &mut rng).unwrap();
        let ft = perturbed(&base, &mut rng);
        let t = CheckpointTriple::new(base, ft).unwrap();
        t.verify().unwrap();
        t.save(dir.path()).unwrap();
        let back = CheckpointTriple::load(dir.path()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn triple_rejects_changed_frozen_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Weights::init(cfg(), &mut rng).unwrap();
        let mut ft = base.clone();
        ft.unembed[[0, 0]] += 1.0;
        assert!(CheckpointTriple::new(base, ft).is_err());
    }

    #[test]
    fn tampered_delta_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Weights::init(cfg(), &mut rng).unwrap();
        let ft = perturbed(&base, &mut rng);
        let mut t = CheckpointTriple::new(base, ft).unwrap();
        t.delta[0].ffn_up[[0, 0]] += 1.0;
        t.save(dir.path()).unwrap();
        assert!(CheckpointTriple::load(dir.path()).is_err());
    }

    #[test]
    fn gates_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = GateSet::zeros(&cfg());
        g.layers[1].get_mut(GateGroup::AttnV)[2] = 0.75;
        save_gates(&g, dir.path()).unwrap();
        assert_eq!(load_gates(dir.path()).unwrap(), g);
    }
}
