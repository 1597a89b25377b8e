//! Model checkpoint files: a JSON header, `"\n\0"`, then the parameters
//! and batch-norm statistics as little-endian f64 in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, Weights};
use super::train::ModelState;
use super::ModelSpec;
use crate::dataprep::ScalerParams;
use crate::error::{Error, Result};
use crate::loss::LossConfig;

const SEPARATOR: &[u8] = b"\n\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub scaler: Option<ScalerParams>,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    pub param_lens: Vec<usize>,
    pub buffer_lens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(state: ModelState, metrics: BTreeMap<String, f64>, scaler: Option<ScalerParams>, loss: Option<LossConfig>) -> Self {
        let header = CheckpointHeader {
            spec: state.spec.clone(),
            epoch: state.epoch,
            metrics,
            scaler,
            loss,
            param_lens: state.weights.params.iter().map(Vec::len).collect(),
            buffer_lens: state.weights.buffers.iter().map(Vec::len).collect(),
        };
        Checkpoint { header, state }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(SEPARATOR);
        for v in self.state.weights.params.iter().chain(&self.state.weights.buffers) {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| Error::Format("checkpoint header terminator not found".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let payload = &bytes[split + SEPARATOR.len()..];
        let total: usize = header.param_lens.iter().chain(&header.buffer_lens).sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!("checkpoint payload has {} bytes, header implies {}", payload.len(), total * 8)));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |lens: &[usize]| -> Vec<Vec<f64>> { lens.iter().map(|&n| values.by_ref().take(n).collect()).collect() };
        let params = take(&header.param_lens);
        let buffers = take(&header.buffer_lens);
        let weights = Weights { params, buffers };
        let net = Network::new(&header.spec)?;
        net.check_weights(&weights).map_err(|e| Error::Format(format!("checkpoint does not match its spec: {e}")))?;
        let state = ModelState {
            spec: header.spec.clone(),
            weights,
            epoch: header.epoch,
            best_val_loss: header.metrics.get("val_loss").copied().unwrap_or(f64::NAN),
        };
        Ok(Checkpoint { header, state })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
