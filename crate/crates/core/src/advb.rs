//! Adversarial batch file (`.advb`): a canonical JSON header line, a
//! newline, raw little-endian float64 image data, then one label byte per
//! example.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::report::to_exact_json;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdvBatch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub config_hash: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl AdvBatch {
    pub fn count(&self) -> usize {
        self.images.len()
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "count": self.count(),
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "config_hash": self.config_hash,
        })
    }
}

pub fn write_advb(path: &Path, batch: &AdvBatch) -> Result<()> {
    if batch.images.len() != batch.labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            batch.images.len(),
            batch.labels.len()
        )));
    }
    let want = [batch.height, batch.width, batch.channels];
    for (i, img) in batch.images.iter().enumerate() {
        if img.shape() != want {
            return Err(Error::Dimension {
                op: "write_advb",
                lhs: img.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        if batch.labels[i] > u8::MAX as usize {
            return Err(Error::Input(format!("label {} does not fit in one byte", batch.labels[i])));
        }
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(to_exact_json(&batch.header()).as_bytes())?;
    f.write_all(b"\n")?;
    for img in &batch.images {
        for v in img.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    let label_bytes: Vec<u8> = batch.labels.iter().map(|&l| l as u8).collect();
    f.write_all(&label_bytes)?;
    Ok(())
}

pub fn read_advb(path: &Path) -> Result<AdvBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("no header line in adversarial batch".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(format!("bad adversarial batch header: {e}")))?;
    let get = |k: &str| -> Result<u64> {
        header
            .get(k)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("header missing integer field '{k}'")))
    };
    let count = get("count")? as usize;
    let height = get("height")? as usize;
    let width = get("width")? as usize;
    let channels = get("channels")? as usize;
    let seed = get("seed")?;
    let epsilon = header
        .get("epsilon")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format("header missing 'epsilon'".into()))?;
    let config_hash = header
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();

    let pixels_per = height * width * channels;
    let body = &bytes[newline + 1..];
    let need = count * pixels_per * 8 + count;
    if body.len() != need {
        return Err(Error::Corrupt(format!(
            "adversarial batch body has {} bytes, header implies {need}",
            body.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * pixels_per * 8;
        let data: Vec<f64> = body[start..start + pixels_per * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        images.push(Tensor::new(vec![height, width, channels], data)?);
    }
    let labels: Vec<usize> =
        body[count * pixels_per * 8..].iter().map(|&b| b as usize).collect();
    Ok(AdvBatch { height, width, channels, epsilon, seed, config_hash, images, labels })
}
