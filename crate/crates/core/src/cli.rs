//! Shared plumbing for the stage binaries.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_gates, load_weights, CheckpointTriple, MANIFEST};
use crate::error::{Error, Result};
use crate::model::{GateSet, Gating, Weights};
use crate::pipeline::PipelineConfig;

/// A model directory as written by one of the stages.
pub enum ModelDir {
    /// `lcdd --out`: `gates/` plus `triple/`.
    Masked { triple: CheckpointTriple, gates: GateSet },
    Triple(CheckpointTriple),
    Dense(Weights),
}

impl ModelDir {
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join("gates").join(MANIFEST).exists() && dir.join("triple").join(MANIFEST).exists() {
            return Ok(ModelDir::Masked {
                triple: CheckpointTriple::load(&dir.join("triple"))?,
                gates: load_gates(&dir.join("gates"))?,
            });
        }
        if dir.join("triple").join(MANIFEST).exists() {
            return Ok(ModelDir::Triple(CheckpointTriple::load(&dir.join("triple"))?));
        }
        if dir.join("base").join(MANIFEST).exists() {
            return Ok(ModelDir::Triple(CheckpointTriple::load(dir)?));
        }
        if dir.join(MANIFEST).exists() {
            return Ok(ModelDir::Dense(load_weights(dir)?));
        }
        Err(Error::MissingArtifacts(vec![dir.join(MANIFEST)]))
    }

    /// The model the directory stands for: the masked model, the
    /// fine-tuned model, or the weights themselves.
    pub fn dense(&self) -> Result<Weights> {
        match self {
            ModelDir::Masked { triple, gates } => triple.delta_model().materialize(Gating::Gates(gates)),
            ModelDir::Triple(t) => Ok(t.finetuned.clone()),
            ModelDir::Dense(w) => Ok(w.clone()),
        }
    }

    /// The base weights where the directory records them.
    pub fn base(&self) -> Option<&Weights> {
        match self {
            ModelDir::Masked { triple, .. } | ModelDir::Triple(triple) => Some(&triple.base),
            ModelDir::Dense(_) => None,
        }
    }
}

/// The base model for `--base`: a weights directory or anything holding a
/// triple.
pub fn load_base(dir: &Path) -> Result<Weights> {
    match ModelDir::load(dir)? {
        ModelDir::Dense(w) => Ok(w),
        other => Ok(other.base().expect("triple-backed").clone()),
    }
}

pub fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .with_derived_seeds())
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Prints the error chain and exits non-zero.
pub fn exit_on_error<T>(r: Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            std::process::exit(1);
        }
    }
}
