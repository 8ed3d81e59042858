//! Versioned JSON model checkpoints. Parameter values survive a round trip
//! bit-exactly (shortest-representation float encoding).

use super::dual::{DualStreamModel, SingleStream};
use crate::error::{Error, Result};
use crate::tensor::Real;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "", tag = "model_kind", rename_all = "snake_case")]
pub enum CheckpointModel<T: Real> {
    Single(SingleStream<T>),
    Dual(DualStreamModel<T>),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<T: Real> {
    pub version: u32,
    pub precision: String,
    pub model: CheckpointModel<T>,
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &CheckpointModel<T>) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        precision: T::NAME.to_string(),
        model: model.clone(),
    };
    let json = serde_json::to_string(&ckpt)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<CheckpointModel<T>> {
    let json = fs::read_to_string(path)?;
    let ckpt: Checkpoint<T> = serde_json::from_str(&json)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.precision != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint precision {} does not match requested {}",
            ckpt.precision,
            T::NAME
        )));
    }
    Ok(ckpt.model)
}
