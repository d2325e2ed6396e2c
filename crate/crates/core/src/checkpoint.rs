// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `SPDCKPT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's entries as little-endian `f64`
//! in row-major order, concatenated in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{MlpBlock, ResidualMlpModel, TargetModel, TmsModel};
use crate::tensor::DenseMatrix;

const MAGIC: &[u8; 8] = b"SPDCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: DenseMatrix) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Self::get`] but a missing tensor is an error.
    pub fn require(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name).ok_or_else(|| Error::Checkpoint {
            path: "<memory>".into(),
            reason: format!("missing tensor `{name}`"),
        })
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(8 * t.len());
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| "file too short".to_string())?;
        if &magic != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| "truncated header length".to_string())?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(format!("header length {len} exceeds file size"));
        }
        let header: Header =
            serde_json::from_slice(&r[..len]).map_err(|e| format!("bad header: {e}"))?;
        if header.format_version != FORMAT_VERSION {
            return Err(format!(
                "unsupported format version {}",
                header.format_version
            ));
        }
        let data = &r[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0u64;
        for e in header.tensors {
            if e.offset != expected {
                return Err(format!(
                    "tensor `{}` at offset {} (expected {expected})",
                    e.name, e.offset
                ));
            }
            let n = e.rows.checked_mul(e.cols).ok_or("tensor size overflow")?;
            let start = e.offset as usize;
            let end = start + 8 * n;
            let bytes = data
                .get(start..end)
                .ok_or_else(|| format!("tensor `{}` truncated", e.name))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = DenseMatrix::from_vec(e.rows, e.cols, values).map_err(|e| e.to_string())?;
            expected = end as u64;
            tensors.push((e.name, t));
        }
        if expected as usize != data.len() {
            return Err(format!("{} trailing bytes", data.len() - expected as usize));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Target checkpoint kind tag.
pub const TARGET_KIND: &str = "target";

/// Packs a target model. `extra` is merged into the metadata under `run`.
pub fn target_to_checkpoint(model: &TargetModel, extra: serde_json::Value) -> Checkpoint {
    let arch = match model {
        TargetModel::Tms(m) => serde_json::json!({
            "kind": "tms",
            "n_features": m.n_features(),
            "n_hidden": m.n_hidden(),
            "hidden_identity": m.identity.is_some(),
        }),
        TargetModel::ResidualMlp(m) => serde_json::json!({
            "kind": "residual_mlp",
            "n_features": m.n_features(),
            "d_resid": m.d_resid(),
            "n_layers": m.blocks.len(),
        }),
    };
    let mut ck = Checkpoint::new(
        TARGET_KIND,
        serde_json::json!({ "model": arch, "run": extra }),
    );
    match model {
        TargetModel::Tms(m) => {
            ck.push("W", m.w.clone());
            ck.push("b", m.b.clone());
            if let Some(i) = &m.identity {
                ck.push("I", i.clone());
            }
        }
        TargetModel::ResidualMlp(m) => {
            ck.push("W_E", m.embed.clone());
            for (l, b) in m.blocks.iter().enumerate() {
                ck.push(format!("layers.{l}.W_in"), b.w_in.clone());
                ck.push(format!("layers.{l}.b_in"), b.b_in.clone());
                ck.push(format!("layers.{l}.W_out"), b.w_out.clone());
            }
        }
    }
    ck
}

pub fn target_from_checkpoint(ck: &Checkpoint) -> Result<TargetModel> {
    let bad = |reason: String| Error::Checkpoint {
        path: "<memory>".into(),
        reason,
    };
    if ck.kind != TARGET_KIND {
        return Err(bad(format!(
            "expected a `{TARGET_KIND}` checkpoint, found `{}`",
            ck.kind
        )));
    }
    let arch = &ck.meta["model"];
    let model = match arch["kind"].as_str() {
        Some("tms") => TargetModel::Tms(TmsModel {
            w: ck.require("W")?.clone(),
            b: ck.require("b")?.clone(),
            identity: ck.get("I").cloned(),
        }),
        Some("residual_mlp") => {
            let n_layers = arch["n_layers"]
                .as_u64()
                .ok_or_else(|| bad("missing model.n_layers".into()))?
                as usize;
            let blocks = (0..n_layers)
                .map(|l| {
                    Ok(MlpBlock {
                        w_in: ck.require(&format!("layers.{l}.W_in"))?.clone(),
                        b_in: ck.require(&format!("layers.{l}.b_in"))?.clone(),
                        w_out: ck.require(&format!("layers.{l}.W_out"))?.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            TargetModel::ResidualMlp(ResidualMlpModel {
                embed: ck.require("W_E")?.clone(),
                blocks,
            })
        }
        other => return Err(bad(format!("unknown model kind {other:?}"))),
    };
    validate_target_shapes(&model).map_err(bad)?;
    Ok(model)
}

fn validate_target_shapes(model: &TargetModel) -> std::result::Result<(), String> {
    match model {
        TargetModel::Tms(m) => {
            let (h, f) = m.w.shape();
            if m.b.shape() != (1, f) {
                return Err(format!("b has shape {:?}, expected (1, {f})", m.b.shape()));
            }
            if let Some(i) = &m.identity {
                if i.shape() != (h, h) {
                    return Err(format!("I has shape {:?}, expected ({h}, {h})", i.shape()));
                }
            }
        }
        TargetModel::ResidualMlp(m) => {
            let d = m.d_resid();
            for (l, b) in m.blocks.iter().enumerate() {
                let n = b.w_in.rows();
                if b.w_in.cols() != d || b.b_in.shape() != (1, n) || b.w_out.shape() != (d, n) {
                    return Err(format!("layer {l} has inconsistent shapes"));
                }
            }
        }
    }
    Ok(())
}
