//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! listing each tensor's name, shape and byte offset, then the raw
//! little-endian f64 values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::AdamState;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub adam_t: u64,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// Model parameters, optimizer state and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(model: &Model, adam: Option<&AdamState>, step: usize) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            adam: adam.cloned(),
            step,
        }
    }

    /// Rebuilds the model; fails if the parameters do not fit the config.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: &[usize], values: &[f64]| -> Result<()> {
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "{name} holds non-finite value {v}"
                )));
            }
            tensors.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset: data.len(),
            });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
            Ok(())
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t.shape(), t.data())?;
        }
        if let Some(adam) = &self.adam {
            for (id, (name, t)) in self.params.iter().enumerate() {
                push(format!("{ADAM_M}{name}"), t.shape(), &adam.m[id])?;
                push(format!("{ADAM_V}{name}"), t.shape(), &adam.v[id])?;
            }
        }
        let header = Header {
            tensors,
            meta: CheckpointMeta {
                step: self.step,
                adam_t: self.adam.as_ref().map_or(0, |a| a.t),
                model: self.config.clone(),
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("file too short for header length"))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_end = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        let data = &bytes[header_end..];

        let mut params = ParamStore::new();
        let mut moments: Vec<(String, bool, Vec<f64>)> = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e
                .offset
                .checked_add(n * 8)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("{} runs past the end of the file", e.name))
                })?;
            let values: Vec<f64> = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "{} holds non-finite values",
                    e.name
                )));
            }
            if let Some(p) = e.name.strip_prefix(ADAM_M) {
                moments.push((p.to_string(), true, values));
            } else if let Some(p) = e.name.strip_prefix(ADAM_V) {
                moments.push((p.to_string(), false, values));
            } else {
                params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
            }
        }
        let adam = if moments.is_empty() {
            None
        } else {
            let mut st = AdamState::new(&params);
            st.t = header.meta.adam_t;
            let mut seen = vec![[false; 2]; params.len()];
            for (name, is_m, values) in moments {
                let id = params.id(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer state for unknown parameter {name}"))
                })?;
                if values.len() != params.tensor(id).len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state size mismatch for {name}"
                    )));
                }
                seen[id][usize::from(!is_m)] = true;
                if is_m {
                    st.m[id] = values;
                } else {
                    st.v[id] = values;
                }
            }
            if seen.iter().any(|s| !s[0] || !s[1]) {
                return Err(bad("optimizer state incomplete"));
            }
            Some(st)
        };
        let ckpt = Checkpoint {
            config: header.meta.model,
            params,
            adam,
            step: header.meta.step,
        };
        ckpt.model()?;
        Ok(ckpt)
    }
}
