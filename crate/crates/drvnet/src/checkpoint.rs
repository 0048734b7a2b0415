//! Checkpoint archive: model configuration, named parameter and state
//! tensors, optimizer moments, and the training history, in one
//! checksummed binary file.
//!
//! Layout: magic `DRVN`, format version, a JSON header describing the
//! tensor table, the raw `f64` little-endian payload in table order, and
//! a trailing SHA-256 of everything before it. Values round-trip
//! bit-exactly; a truncated or tampered file fails verification before
//! anything is applied to a model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::nn::ParamVisit;
use crate::training::EpochRecord;

const MAGIC: &[u8; 4] = b"DRVN";
const FORMAT_VERSION: u32 = 1;

/// Which table a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    State,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    adam_step: u64,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

/// A complete training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Last completed epoch of the phase this snapshot belongs to.
    pub epoch: usize,
    /// Adam's global step counter (for bias correction on resume).
    pub adam_step: u64,
    pub history: Vec<EpochRecord>,
    pub params: IndexMap<String, ArrayD<f64>>,
    /// Persistent non-trained state (batch-norm moving statistics).
    pub state: IndexMap<String, ArrayD<f64>>,
    pub adam_m: IndexMap<String, ArrayD<f64>>,
    pub adam_v: IndexMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Snapshot a model's parameters and state. Optimizer moments and
    /// history start empty; callers fill them in as training proceeds.
    pub fn from_model(config: &ModelConfig, model: &dyn ParamVisit) -> Self {
        let mut params = IndexMap::new();
        model.visit_params(&mut |name, p| {
            params.insert(name.to_string(), p.clone());
        });
        let mut state = IndexMap::new();
        model.visit_state(&mut |name, s| {
            state.insert(name.to_string(), s.clone());
        });
        Checkpoint {
            config: config.clone(),
            epoch: 0,
            adam_step: 0,
            history: Vec::new(),
            params,
            state,
            adam_m: IndexMap::new(),
            adam_v: IndexMap::new(),
        }
    }

    /// Overwrite every model parameter and state tensor whose name
    /// appears in this checkpoint. Model tensors absent from the
    /// checkpoint keep their current values (so a backbone-only
    /// checkpoint leaves a model's tail at its fresh initialization);
    /// checkpoint tensors with no model counterpart are ignored.
    pub fn apply_to(&self, model: &mut dyn ParamVisit) -> Result<()> {
        let mut mismatch: Option<String> = None;
        model.visit_params_mut(&mut |name, p| {
            if let Some(src) = self.params.get(name) {
                if src.shape() != p.shape() {
                    mismatch.get_or_insert_with(|| {
                        format!(
                            "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                            src.shape(),
                            p.shape()
                        )
                    });
                } else {
                    p.assign(src);
                }
            }
        });
        model.visit_state_mut(&mut |name, s| {
            if let Some(src) = self.state.get(name) {
                if src.shape() != s.shape() {
                    mismatch.get_or_insert_with(|| {
                        format!(
                            "state {name}: checkpoint shape {:?} vs model shape {:?}",
                            src.shape(),
                            s.shape()
                        )
                    });
                } else {
                    s.assign(src);
                }
            }
        });
        match mismatch {
            Some(m) => Err(Error::Incompatible(m)),
            None => Ok(()),
        }
    }

    /// Hex digest over the named tensors under `prefix`, in sorted name
    /// order. Used to verify freezing and checkpoint reuse.
    pub fn param_digest(&self, prefix: &str) -> String {
        let mut names: Vec<&String> = self.params.keys().filter(|k| k.starts_with(prefix)).collect();
        names.sort();
        let mut h = Sha256::new();
        for name in names {
            h.update(name.as_bytes());
            for v in self.params[name.as_str()].iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload_order: Vec<&ArrayD<f64>> = Vec::new();
        for (tbl, kind) in [
            (&self.params, TensorKind::Param),
            (&self.state, TensorKind::State),
            (&self.adam_m, TensorKind::AdamM),
            (&self.adam_v, TensorKind::AdamV),
        ] {
            for (name, t) in tbl {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    kind,
                    shape: t.shape().to_vec(),
                });
                payload_order.push(t);
            }
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            history: self.history.clone(),
            tensors,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Internal(format!("header serialization failed: {e}")))?;

        // Assemble while hashing, then write through one buffered file.
        let mut hasher = Sha256::new();
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        let emit = |w: &mut BufWriter<File>, hasher: &mut Sha256, bytes: &[u8]| -> Result<()> {
            hasher.update(bytes);
            w.write_all(bytes)?;
            Ok(())
        };
        emit(&mut w, &mut hasher, MAGIC)?;
        emit(&mut w, &mut hasher, &FORMAT_VERSION.to_le_bytes())?;
        emit(&mut w, &mut hasher, &(header_json.len() as u64).to_le_bytes())?;
        emit(&mut w, &mut hasher, &header_json)?;
        for t in payload_order {
            for v in t.iter() {
                emit(&mut w, &mut hasher, &v.to_le_bytes())?;
            }
        }
        let digest = hasher.finalize();
        w.write_all(&digest)?;
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Load(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(Error::CorruptCheckpoint("file too short".into()));
        }

        let (body, stored_digest) = raw.split_at(raw.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_digest {
            return Err(Error::CorruptCheckpoint(
                "checksum mismatch: archive is truncated or tampered".into(),
            ));
        }

        let mut cur = body;
        let magic = take(&mut cur, 4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(&mut cur, header_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("header parse failed: {e}")))?;

        let mut params = IndexMap::new();
        let mut state = IndexMap::new();
        let mut adam_m = IndexMap::new();
        let mut adam_v = IndexMap::new();
        for entry in &header.tensors {
            let len: usize = entry.shape.iter().product();
            let bytes = take(&mut cur, len * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor {}: {e}", entry.name)))?;
            let tbl = match entry.kind {
                TensorKind::Param => &mut params,
                TensorKind::State => &mut state,
                TensorKind::AdamM => &mut adam_m,
                TensorKind::AdamV => &mut adam_v,
            };
            tbl.insert(entry.name.clone(), t);
        }
        if !cur.is_empty() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} unexpected trailing bytes",
                cur.len()
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            adam_step: header.adam_step,
            history: header.history,
            params,
            state,
            adam_m,
            adam_v,
        })
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::CorruptCheckpoint("unexpected end of archive".into()));
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
