use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::ParamMap;

/// Trained parameters plus the config that produced them, as one JSON document.
///
/// Each parameter is stored as `{rows, cols, data}` with `data` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub config: C,
    pub seed: u64,
    pub params: ParamMap,
}

impl<C: Serialize> Checkpoint<C> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

impl<C: for<'de> Deserialize<'de>> Checkpoint<C> {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text)?;
        for (name, m) in &ckpt.params {
            if !m.is_finite() {
                return Err(Error::Numeric(format!("checkpoint parameter {name} is not finite")));
            }
        }
        Ok(ckpt)
    }
}
