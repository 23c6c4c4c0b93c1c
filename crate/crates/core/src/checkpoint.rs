//! Binary tensor container (`.rvit`).
//!
//! Layout: 4-byte magic `RVIT`, format version (u32 LE), manifest length
//! (u64 LE), canonical-JSON manifest, then the payload of raw
//! little-endian float64 arrays in manifest order. Manifest offsets are
//! byte positions into the payload and must be non-overlapping and
//! payload-bounded; a round trip is bit-identical.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::report::to_exact_json;
use crate::robust::{RobustMode, RobustTokens};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RVIT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

/// Manifest section describing persisted robustification tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSection {
    /// Name of the tensor entry holding the token matrix.
    pub tensor: String,
    pub count: usize,
    pub mode: RobustMode,
    pub outer_steps: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    robust_tokens: Option<RobustSection>,
    meta: serde_json::Value,
}

/// A loaded container.
#[derive(Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub robust: Option<RobustTokens>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes tensors (and an optional robust-token section) to `path`.
pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, &Tensor)],
    robust: Option<&RobustTokens>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len() + 1);
    let mut payload: Vec<u8> = Vec::new();
    let mut push_tensor = |name: &str, t: &Tensor, payload: &mut Vec<u8>| {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            byte_len: (t.numel() * 8) as u64,
        });
    };
    for (name, t) in tensors {
        push_tensor(name, t, &mut payload);
    }
    let robust_section = robust.map(|r| {
        push_tensor("robust_tokens", &r.tokens, &mut payload);
        RobustSection {
            tensor: "robust_tokens".into(),
            count: r.count(),
            mode: r.mode,
            outer_steps: r.outer_steps,
            lr: r.lr,
            seed: r.seed,
        }
    });

    let manifest = Manifest { tensors: entries, robust_tokens: robust_section, meta };
    let manifest_json = to_exact_json(&serde_json::to_value(&manifest)?);
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(manifest_json.as_bytes())?;
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a container written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{} does not start with the RVIT magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version > VERSION {
        return Err(Error::Version { found: version, supported: VERSION });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Corrupt("manifest extends past end of file".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
    let payload = &bytes[16 + manifest_len..];

    let mut spans: Vec<(u64, u64, &str)> = manifest
        .tensors
        .iter()
        .map(|e| (e.offset, e.byte_len, e.name.as_str()))
        .collect();
    spans.sort_by_key(|&(off, _, _)| off);
    for w in spans.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(Error::Corrupt(format!(
                "tensor {} overlaps tensor {}",
                w[0].2, w[1].2
            )));
        }
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len as usize != numel * 8 {
            return Err(Error::Corrupt(format!(
                "tensor {}: shape {:?} implies {} bytes, manifest says {}",
                entry.name,
                entry.shape,
                numel * 8,
                entry.byte_len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Corrupt(format!(
                "tensor {}: payload truncated (need {end} bytes, have {})",
                entry.name,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }

    let robust = match &manifest.robust_tokens {
        None => None,
        Some(section) => {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == &section.tensor)
                .ok_or_else(|| {
                    Error::Corrupt(format!(
                        "robust section points at missing tensor {}",
                        section.tensor
                    ))
                })?;
            let (_, t) = tensors.remove(pos);
            if t.shape()[0] != section.count {
                return Err(Error::Corrupt(format!(
                    "robust tokens: section says {} rows, tensor has {}",
                    section.count,
                    t.shape()[0]
                )));
            }
            Some(RobustTokens {
                tokens: t,
                mode: section.mode,
                outer_steps: section.outer_steps,
                lr: section.lr,
                seed: section.seed,
            })
        }
    };

    Ok(Checkpoint { tensors, robust, meta: manifest.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, StreamRng};

    fn tdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tdir();
        let path = dir.path().join("m.rvit");
        let mut rng = StreamRng::from_tags(1, &[tag::MODEL_INIT]);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![7], 0.5, &mut rng);
        save_checkpoint(
            &path,
            &[("a".into(), &a), ("b".into(), &b)],
            None,
            serde_json::json!({"note": "test"}),
        )
        .unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RVIT");

        let ckpt = load_checkpoint(&path).unwrap();
        assert!(ckpt.tensor("a").unwrap().bits_eq(&a));
        assert!(ckpt.tensor("b").unwrap().bits_eq(&b));
        assert_eq!(ckpt.meta["note"], "test");
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tdir();
        let p1 = dir.path().join("x.rvit");
        let p2 = dir.path().join("y.rvit");
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.25, 1e-9]).unwrap();
        let meta = serde_json::json!({"seed": 7});
        save_checkpoint(&p1, &[("w".into(), &t)], None, meta.clone()).unwrap();
        save_checkpoint(&p2, &[("w".into(), &t)], None, meta).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn robust_section_roundtrips() {
        let dir = tdir();
        let path = dir.path().join("r.rvit");
        let tokens = Tensor::new(vec![2, 4], vec![0.1; 8]).unwrap();
        let rt = RobustTokens {
            tokens: tokens.clone(),
            mode: RobustMode::Global,
            outer_steps: 3,
            lr: 0.05,
            seed: 9,
        };
        save_checkpoint(&path, &[], Some(&rt), serde_json::json!({})).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let loaded = ckpt.robust.unwrap();
        assert!(loaded.tokens.bits_eq(&tokens));
        assert_eq!(loaded.mode, RobustMode::Global);
        assert_eq!(loaded.outer_steps, 3);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tdir();
        let path = dir.path().join("bad.rvit");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn future_version_is_version_error() {
        let dir = tdir();
        let path = dir.path().join("v.rvit");
        let t = Tensor::scalar(1.0);
        save_checkpoint(&path, &[("x".into(), &t)], None, serde_json::json!({})).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 99, supported: VERSION })
        ));
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let dir = tdir();
        let path = dir.path().join("t.rvit");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_checkpoint(&path, &[("weights".into(), &t)], None, serde_json::json!({})).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Corrupt(msg)) => assert!(msg.contains("weights"), "message: {msg}"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
