//! Checkpoints: `"CCLSTMCK"`, a little-endian `u32` header length, a JSON
//! header (config, tensor manifest, training metadata) and the raw
//! little-endian `f32` tensors. Optimizer moments, when saved, follow the
//! parameters in the same canonical order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCLSTMCK";

/// AdamW first and second moments plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub first: ModelParams<FeatureGrid<f32>>,
    pub second: ModelParams<FeatureGrid<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<FeatureGrid<f32>>,
    pub epoch: usize,
    pub step: u64,
    /// Validation score the checkpoint was selected on.
    pub metric: Option<f64>,
    pub optimizer: Option<OptimizerMoments>,
    /// Free-form run metadata (training config, dataset hash, ...).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    step: u64,
    metric: Option<f64>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn push_grids(out: &mut Vec<u8>, p: &ModelParams<FeatureGrid<f32>>) {
    p.for_each(|_, g| {
        for v in g.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams<FeatureGrid<f32>>) -> Self {
        Checkpoint {
            config,
            params,
            epoch: 0,
            step: 0,
            metric: None,
            optimizer: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        self.params.for_each(|name, g| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: g.shape(),
                offset,
            });
            offset += 4 * g.numel();
        });
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            metric: self.metric,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
            extra: self.extra.clone(),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        push_grids(&mut out, &self.params);
        if let Some(o) = &self.optimizer {
            push_grids(&mut out, &o.first);
            push_grids(&mut out, &o.second);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing CCLSTMCK magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| bad(format!("invalid config: {e}")))?;
        let shapes = ModelParams::shapes(&header.config);
        let names = shapes.names();
        if names.len() != header.tensors.len() {
            return Err(bad(format!(
                "{} tensors stored, config implies {}",
                header.tensors.len(),
                names.len()
            )));
        }
        let mut offset = 0;
        let mut mismatch = None;
        shapes.for_each(|name, shape| {
            let i = offset_index(&header.tensors, name);
            match i {
                Some(e) if e.shape == *shape && e.offset == offset => {}
                _ if mismatch.is_none() => mismatch = Some(name.to_string()),
                _ => {}
            }
            offset += 4 * shape.iter().product::<usize>();
        });
        if let Some(name) = mismatch {
            return Err(bad(format!("tensor {name} missing or misplaced")));
        }
        let payload = &bytes[12 + hlen..];
        let copies = if header.optimizer_step.is_some() { 3 } else { 1 };
        if payload.len() != offset * copies {
            return Err(bad(format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                offset * copies
            )));
        }
        let read = |base: usize| {
            let mut pos = base;
            shapes.map(|_, &shape| {
                let n: usize = shape.iter().product();
                let data = payload[pos..pos + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                pos += 4 * n;
                FeatureGrid::from_vec(shape, data).expect("length checked")
            })
        };
        let params = read(0);
        let optimizer = header.optimizer_step.map(|step| OptimizerMoments {
            step,
            first: read(offset),
            second: read(2 * offset),
        });
        Ok(Checkpoint {
            config: header.config,
            params,
            epoch: header.epoch,
            step: header.step,
            metric: header.metric,
            optimizer,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn offset_index<'a>(tensors: &'a [TensorEntry], name: &str) -> Option<&'a TensorEntry> {
    tensors.iter().find(|t| t.name == name)
}
