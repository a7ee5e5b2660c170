//! `CKPTv1` checkpoint files: a magic line, one JSON line with the class
//! catalog, architecture and lineage metadata, then the parameter count as
//! u64 and the parameters as f64, both little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, SegModel, Stage};
use crate::error::{Error, Result};
use crate::grid::ClassCatalog;
use crate::io::{read_bytes, write_bytes};

pub const CKPT_MAGIC: &str = "CKPTv1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Self-training iteration that produced the weights, 0 for stage one.
    pub iteration: usize,
    pub epoch: usize,
    /// Checkpoint the fine-tune started from, if any.
    pub origin: Option<String>,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub catalog: ClassCatalog,
    pub model: SegModel,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    catalog: ClassCatalog,
    arch: Arch,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            catalog: self.catalog.clone(),
            arch: *self.model.arch(),
            meta: self.meta.clone(),
        };
        let mut out = format!(
            "{CKPT_MAGIC}\n{}\n",
            serde_json::to_string(&header).expect("header serializes")
        )
        .into_bytes();
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |r: &str| Error::format(path, r.to_string());
        let magic_end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing magic"))?;
        if &bytes[..magic_end] != CKPT_MAGIC.as_bytes() {
            return Err(bad("not a CKPTv1 checkpoint"));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header: Header = serde_json::from_slice(&rest[..header_end])
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let body = &rest[header_end + 1..];
        if body.len() < 8 {
            return Err(bad("truncated parameter block"));
        }
        let count = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
        let data = &body[8..];
        if data.len() != count * 8 {
            return Err(bad("parameter count does not match payload"));
        }
        let params = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let model = SegModel::from_params(header.arch, params)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if header.arch.classes != header.catalog.channels() {
            return Err(bad("architecture output planes disagree with catalog"));
        }
        Ok(Checkpoint {
            catalog: header.catalog,
            model,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &ckpt.encode())
}

/// Load a checkpoint, rejecting it when `expected` is given and differs.
pub fn load_checkpoint(path: &Path, expected: Option<&ClassCatalog>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::decode(path, &read_bytes(path)?)?;
    if let Some(exp) = expected {
        if *exp != ckpt.catalog {
            return Err(Error::CatalogMismatch {
                expected: exp.names().to_vec(),
                found: ckpt.catalog.names().to_vec(),
            });
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let catalog = ClassCatalog::new(vec!["a".into(), "b".into()]).unwrap();
        Checkpoint {
            model: SegModel::init(Arch::standard(1, catalog.channels()), 5).unwrap(),
            catalog,
            meta: CheckpointMeta {
                stage: Stage::Finetune,
                iteration: 2,
                epoch: 17,
                origin: Some("theta0".into()),
                val_dice: Some(0.75),
            },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        save_checkpoint(&p, &c).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"CKPTv1\n"));
        assert_eq!(load_checkpoint(&p, Some(&c.catalog)).unwrap(), c);
    }

    #[test]
    fn catalog_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let other = ClassCatalog::new(vec!["a".into(), "c".into()]).unwrap();
        assert!(matches!(
            load_checkpoint(&p, Some(&other)),
            Err(Error::CatalogMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().encode();
        let p = Path::new("t.ckpt");
        assert!(Checkpoint::decode(p, &bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::decode(p, b"CKPTv2\n{}\n").is_err());
    }
}
