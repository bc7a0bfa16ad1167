//! Single-file binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (architecture hash, model config, iteration, validation metrics,
//! tensor manifest), then every tensor listed in the manifest as
//! little-endian `f64`, in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{DsferNet, ModelConfig};
use crate::params::{ParamKind, RunningStats};

pub const MAGIC: &[u8; 8] = b"DSFERCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DsferNet,
    pub optimizer: AdamState,
    pub iter: u64,
    pub val_metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    RunningMean,
    RunningVar,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
enum Kind {
    Weight,
    Bias,
    NormAffine,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    section: Section,
    name: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kind: Option<Kind>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch_hash: String,
    model: ModelConfig,
    iter: u64,
    adam_step: u64,
    val_metrics: Option<Metrics>,
    manifest: Vec<Entry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut manifest = Vec::new();
        let mut payload: Vec<&[f64]> = Vec::new();
        for (name, p) in self.model.params.iter() {
            manifest.push(Entry {
                section: Section::Param,
                name: name.to_string(),
                shape: p.tensor.shape().to_vec(),
                kind: Some(match p.kind {
                    ParamKind::Weight => Kind::Weight,
                    ParamKind::Bias => Kind::Bias,
                    ParamKind::NormAffine => Kind::NormAffine,
                }),
            });
            payload.push(p.tensor.data());
        }
        for (name, s) in self.model.buffers.iter() {
            for (section, values) in [(Section::RunningMean, &s.mean), (Section::RunningVar, &s.var)] {
                manifest.push(Entry {
                    section,
                    name: name.to_string(),
                    shape: vec![values.len()],
                    kind: None,
                });
                payload.push(values);
            }
        }
        for (section, moments) in [(Section::AdamM, &self.optimizer.m), (Section::AdamV, &self.optimizer.v)] {
            for (name, values) in moments {
                manifest.push(Entry {
                    section,
                    name: name.clone(),
                    shape: vec![values.len()],
                    kind: None,
                });
                payload.push(values);
            }
        }
        let header = Header {
            arch_hash: self.model.config.arch_hash(),
            model: self.model.config.clone(),
            iter: self.iter,
            adam_step: self.optimizer.step,
            val_metrics: self.val_metrics,
            manifest,
        };
        let header = serde_json::to_vec(&header)?;

        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(MAGIC)?;
        write(&FORMAT_VERSION.to_le_bytes())?;
        write(&(header.len() as u64).to_le_bytes())?;
        write(&header)?;
        for values in payload {
            for v in values {
                write(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint. With `expected`, a mismatching architecture hash
    /// is an error.
    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));

        let mut magic = [0u8; 8];
        read(&mut magic)?;
        if &magic != MAGIC {
            return Err(ckpt_err(format!("{} is not a checkpoint file", path.display())));
        }
        let mut word = [0u8; 4];
        read(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        read(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        read(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;

        if header.model.arch_hash() != header.arch_hash {
            return Err(ckpt_err("stored architecture hash does not match stored config"));
        }
        if let Some(cfg) = expected {
            let want = cfg.arch_hash();
            if want != header.arch_hash {
                return Err(ckpt_err(format!(
                    "architecture mismatch: checkpoint {} vs requested {want}",
                    header.arch_hash
                )));
            }
        }

        let mut model = DsferNet::new(header.model.clone(), 0)?;
        let mut optimizer = AdamState {
            step: header.adam_step,
            ..AdamState::default()
        };
        let mut buf = Vec::new();
        for entry in &header.manifest {
            let n: usize = entry.shape.iter().product();
            buf.resize(n * 8, 0);
            read(&mut buf)?;
            let values: Vec<f64> = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            match entry.section {
                Section::Param => {
                    let t = model
                        .params
                        .get_mut(&entry.name)
                        .ok_or_else(|| ckpt_err(format!("unexpected parameter `{}`", entry.name)))?;
                    if t.shape() != entry.shape.as_slice() {
                        return Err(ckpt_err(format!(
                            "parameter `{}` has shape {:?}, expected {:?}",
                            entry.name,
                            entry.shape,
                            t.shape()
                        )));
                    }
                    t.data_mut().copy_from_slice(&values);
                }
                Section::RunningMean | Section::RunningVar => {
                    let s: &mut RunningStats = model
                        .buffers
                        .get_mut(&entry.name)
                        .ok_or_else(|| ckpt_err(format!("unexpected buffer `{}`", entry.name)))?;
                    let dst = match entry.section {
                        Section::RunningMean => &mut s.mean,
                        _ => &mut s.var,
                    };
                    if dst.len() != values.len() {
                        return Err(ckpt_err(format!("buffer `{}` has the wrong length", entry.name)));
                    }
                    *dst = values;
                }
                Section::AdamM => {
                    optimizer.m.insert(entry.name.clone(), values);
                }
                Section::AdamV => {
                    optimizer.v.insert(entry.name.clone(), values);
                }
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(ckpt_err("trailing bytes after payload"));
        }
        if optimizer.m.is_empty() {
            optimizer = AdamState::new(&model.params);
        }
        Ok(Self {
            model,
            optimizer,
            iter: header.iter,
            val_metrics: header.val_metrics,
        })
    }
}
