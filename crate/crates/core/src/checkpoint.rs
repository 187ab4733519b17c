//! Binary checkpoints.
//!
//! Layout: `b"EECX"`, `u32` format version, `u64` metadata length, the JSON
//! metadata, then every parameter tensor as little-endian `f32` in the order
//! listed by the metadata. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::BetaSchedule;
use crate::model::{Model, ModelConfig, ParamSpec};
use crate::tensor::Tensor;
use crate::training::{LossConfig, TrainingHistory};

pub const MAGIC: &[u8; 4] = b"EECX";
pub const VERSION: u32 = 1;

/// Everything stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub loss_config: Option<LossConfig>,
    pub betas: Option<BetaSchedule>,
    pub history: Option<TrainingHistory>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamSpec>,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        model_config: model.config().clone(),
        meta: meta.clone(),
        params: model.param_specs().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'b>(bytes: &'b [u8], at: &mut usize, n: usize, what: &'static str) -> Result<&'b [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
        what,
        expected: (*at as u64).saturating_add(n as u64),
        found: bytes.len() as u64,
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4, "checkpoint magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "checkpoint version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8, "checkpoint header length")?.try_into().unwrap());
    let json = take(bytes, &mut at, len as usize, "checkpoint metadata")?;
    let header: Header = serde_json::from_slice(json)?;

    let mut params = Vec::with_capacity(header.params.len());
    for spec in &header.params {
        let n: usize = spec.shape.iter().product();
        let raw = take(bytes, &mut at, n * 4, "checkpoint tensors")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Tensor::new(spec.shape.clone(), data)?);
    }
    if at != bytes.len() {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after the declared tensors",
            bytes.len() - at
        )));
    }
    let model = Model::from_params(header.model_config, params)?;
    if model.param_specs() != header.params.as_slice() {
        return Err(Error::Inconsistent("parameter list does not match the model config".into()));
    }
    if let Some(b) = &header.meta.betas {
        if b.len() != model.num_exits() {
            return Err(Error::Inconsistent(format!(
                "{} betas stored for {} exits",
                b.len(),
                model.num_exits()
            )));
        }
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
