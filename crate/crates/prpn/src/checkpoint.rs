//! Checkpoint files: `PRPN1\n`, one line of JSON header, then the tensors
//! as little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use prpn_core::model::ModelConfig;
use prpn_core::optim::PlateauSchedule;
use prpn_core::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"PRPN1\n";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Where an interrupted run continues from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub schedule: PlateauSchedule,
    pub adam_step: u64,
    /// Word position of the training RNG stream, as a decimal string.
    pub rng_word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingState>,
}

/// Everything stored in one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub vocab: Option<Vocab>,
    pub run: Option<RunConfig>,
    pub training: Option<TrainingState>,
    /// Adam first and second moments, in parameter order.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some((m, v)) = &self.moments {
            if m.len() != self.params.len() || v.len() != self.params.len() {
                return Err(Error::Checkpoint("moment count differs from parameter count".into()));
            }
            let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
            tensors.extend(names.iter().zip(m).map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            tensors.extend(names.iter().zip(v).map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
            vocab: self.vocab.clone(),
            run: self.run.clone(),
            training: self.training.clone(),
        };
        let mut out = MAGIC.to_vec();
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Checkpoint("missing PRPN1 magic".into()))?;
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..end])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let mut payload = &rest[end + 1..];
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(Error::Checkpoint(format!("{}: payload truncated", entry.name)));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[4 * n..];
            let t = Tensor::new(entry.shape.clone(), data)?;
            if entry.name.starts_with(ADAM_M) {
                m.push(t);
            } else if entry.name.starts_with(ADAM_V) {
                v.push(t);
            } else {
                params.insert(entry.name.clone(), t);
            }
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
        }
        let moments = match (m.len(), v.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((m, v)),
            _ => return Err(Error::Checkpoint("incomplete optimizer moments".into())),
        };
        let mut vocab = header.vocab;
        if let Some(v) = vocab.as_mut() {
            v.reindex();
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            vocab,
            run: header.run,
            training: header.training,
            moments,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
