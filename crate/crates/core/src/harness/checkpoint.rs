//! Versioned JSON checkpoints: the full run config plus every named
//! parameter with shape and flat data. f64 values round-trip exactly
//! (shortest-representation float formatting), so save/load is
//! bit-faithful.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::model::Model;
use crate::nn::ParamContainer;
use crate::tensor::Tensor;

use super::config::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: RunConfig,
    params: Vec<ParamEntry>,
}

pub fn checkpoint_bytes(cfg: &RunConfig, model: &Model) -> Vec<u8> {
    let mut params = Vec::new();
    model.visit("", &mut |name, t| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    });
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params,
    };
    serde_json::to_vec(&file).expect("checkpoint serialization is infallible")
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, model: &Model) -> Result<(), HarnessError> {
    std::fs::write(path, checkpoint_bytes(cfg, model))?;
    Ok(())
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(RunConfig, Model), HarnessError> {
    let file: CheckpointFile = serde_json::from_slice(bytes)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(HarnessError::CheckpointMismatch(format!(
            "version {} (expected {})",
            file.version, CHECKPOINT_VERSION
        )));
    }
    file.config.validate()?;

    // Build a model of the right shape, then overwrite every parameter
    // from the file. The init RNG values are fully replaced.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(file.config.seed);
    let mut model = Model::init(&file.config.model_config(), &mut rng)?;

    let mut by_name: std::collections::BTreeMap<String, &ParamEntry> =
        file.params.iter().map(|p| (p.name.clone(), p)).collect();
    if by_name.len() != file.params.len() {
        return Err(HarnessError::CheckpointMismatch(
            "duplicate parameter names".into(),
        ));
    }

    let mut err: Option<HarnessError> = None;
    model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => err = Some(HarnessError::MissingParam(name.to_string())),
            Some(entry) => {
                if entry.shape != t.shape() {
                    err = Some(HarnessError::CheckpointMismatch(format!(
                        "{name}: stored shape {:?}, model expects {:?} (check d/steps)",
                        entry.shape,
                        t.shape()
                    )));
                    return;
                }
                match Tensor::from_vec(entry.shape.clone(), entry.data.clone()) {
                    Ok(v) => *t = v,
                    Err(e) => err = Some(e.into()),
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(HarnessError::CheckpointMismatch(format!(
            "unexpected parameter '{extra}' in checkpoint"
        )));
    }
    Ok((file.config, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model), HarnessError> {
    let bytes = std::fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}
