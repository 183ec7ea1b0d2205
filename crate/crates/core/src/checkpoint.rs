//! Versioned checkpoint container: named parameter arrays, EMA shadows,
//! optimizer moments, config, and the RNG position (seed + step; all
//! per-step randomness is derived counter-style, so no generator state
//! needs to be serialized).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::error::{CoreError, Result};
use crate::expert::Policy;
use crate::Real;

pub const CHECKPOINT_VERSION: &str = "ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: RunConfig,
    pub step: usize,
    /// All model parameters, frozen ones included.
    pub params: BTreeMap<String, ParamBlob>,
    /// EMA shadows for trainable parameters.
    pub ema: BTreeMap<String, Vec<Real>>,
    /// AdamW first/second moments for trainable parameters.
    pub opt_m: BTreeMap<String, Vec<Real>>,
    pub opt_v: BTreeMap<String, Vec<Real>>,
    pub train_seed: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported checkpoint version '{}'",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the policy. `use_ema`: load EMA shadows into trainable
    /// parameters (evaluation); raw parameters otherwise (resuming).
    pub fn build_policy(&self, use_ema: bool) -> Result<Policy<Real>> {
        let with_heads = self.config.train.ablation != Ablation::NoProgress;
        let policy = Policy::<Real>::new(
            &self.config.model,
            self.config.env.grid,
            with_heads,
            self.train_seed,
        )?;
        for p in policy.collect() {
            let blob = self.params.get(&p.name).ok_or_else(|| {
                CoreError::Checkpoint(format!("parameter '{}' missing from checkpoint", p.name))
            })?;
            if blob.shape != p.tensor.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter '{}' shape {:?} != stored {:?}",
                    p.name,
                    p.tensor.shape(),
                    blob.shape
                )));
            }
            let use_shadow = use_ema && p.trainable();
            match (use_shadow, self.ema.get(&p.name)) {
                (true, Some(shadow)) => p.tensor.set_data(shadow),
                _ => p.tensor.set_data(&blob.data),
            }
        }
        Ok(policy)
    }
}

/// Snapshot the named parameters of a policy.
pub fn snapshot_params(policy: &Policy<Real>) -> BTreeMap<String, ParamBlob> {
    policy
        .collect()
        .into_iter()
        .map(|p| {
            (
                p.name,
                ParamBlob {
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_vec(),
                },
            )
        })
        .collect()
}

/// Order-independent content hash of parameter values (corruption and
/// mutation checks in tests and evaluation).
pub fn params_fingerprint(policy: &Policy<Real>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in policy.collect() {
        for b in p.name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        for v in p.tensor.to_vec() {
            h = (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
