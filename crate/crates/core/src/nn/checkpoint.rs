use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bn_store::BnStore;
use super::graph::Layer;
use super::model::{layer_out_shape, Model};
use super::Architecture;
use crate::error::{Error, Result};
use crate::quant::QuantState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ZSQCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub feature_source: Option<usize>,
    pub bn_updates: u64,
    pub bn_store: Option<BnStore>,
    pub quant: Option<QuantState>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `magic ‖ u64 LE header length ‖ JSON header ‖ f32 LE payload`.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let groups = [
        (TensorRole::Param, &model.params),
        (TensorRole::Buffer, &model.buffers),
    ];
    for (role, map) in groups {
        for (name, t) in map {
            tensors.push(TensorEntry {
                name: name.clone(),
                role,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        architecture: model.arch.clone(),
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        feature_source: model.feature_source,
        bn_updates: model.bn_updates,
        bn_store: model.bn_store.clone(),
        quant: model.quant.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

/// Reads the JSON header only.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "header of {len} bytes truncated at byte {}",
                bytes.len()
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((header, end))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path)?;
    let (header, start) = read_header(&bytes)?;
    let payload = &bytes[start..];
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        let from = e.offset as usize;
        let to = from + 4 * n;
        if to > payload.len() {
            return Err(Error::Format(format!(
                "{}: payload truncated at byte {} (needs {})",
                e.name,
                start + payload.len(),
                start + to
            )));
        }
        let data = payload[from..to]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data)?;
        let slot = match e.role {
            TensorRole::Param => &mut params,
            TensorRole::Buffer => &mut buffers,
        };
        if slot.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", e.name)));
        }
    }
    let mut shapes = vec![header.input_shape.clone()];
    for l in &header.layers {
        shapes.push(layer_out_shape(l, &shapes)?);
    }
    let model = Model {
        arch: header.architecture,
        input_shape: header.input_shape,
        layers: header.layers,
        feature_source: header.feature_source,
        params,
        buffers,
        bn_updates: header.bn_updates,
        bn_store: header.bn_store,
        quant: header.quant,
    };
    Ok(model)
}
