//! Procedural shapes dataset: ten geometric classes rendered at 32x32x3
//! with seeded position/scale/color jitter and additive Gaussian noise.
//! The same `(n, seed)` pair regenerates bit-identical arrays.

use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{tag, StreamRng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "circle", "square", "triangle", "cross", "ring", "hbar", "vbar", "diamond", "checker",
    "dotgrid",
];

/// Minimum absolute difference between mean foreground and background
/// intensity.
pub const MIN_CONTRAST: f64 = 0.3;

/// Std of the additive pixel noise.
pub const NOISE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices belonging to a split, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// `(image, label)` pairs of a split, cloned in dataset order.
    pub fn split_examples(&self, split: Split) -> Vec<(Tensor, usize)> {
        self.split_indices(split)
            .into_iter()
            .map(|i| (self.images[i].clone(), self.labels[i]))
            .collect()
    }
}

fn mean3(c: [f64; 3]) -> f64 {
    (c[0] + c[1] + c[2]) / 3.0
}

/// Renders one example. Class geometry is centered near the image middle
/// with jittered position and scale; colors are resampled until the
/// foreground/background contrast clears `MIN_CONTRAST`.
fn render(class: usize, rng: &mut StreamRng) -> Tensor {
    let bg = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
    let mut fg = [0.0; 3];
    let mut found = false;
    for _ in 0..64 {
        fg = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        if (mean3(fg) - mean3(bg)).abs() >= MIN_CONTRAST {
            found = true;
            break;
        }
    }
    if !found {
        fg = if mean3(bg) < 0.5 { [1.0, 1.0, 1.0] } else { [0.0, 0.0, 0.0] };
    }

    let cx = rng.uniform(12.0, 20.0);
    let cy = rng.uniform(12.0, 20.0);
    let s = rng.uniform(6.0, 10.0);

    let size = IMAGE_SIZE;
    let mut data = vec![0.0; size * size * CHANNELS];
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - cx;
            let dy = py - cy;
            let inside = match class {
                0 => dx * dx + dy * dy <= s * s,
                1 => dx.abs().max(dy.abs()) <= 0.9 * s,
                2 => dy >= -s && dy <= 0.7 * s && dx.abs() <= 0.6 * (dy + s),
                3 => (dx.abs() <= 0.3 * s && dy.abs() <= s) || (dy.abs() <= 0.3 * s && dx.abs() <= s),
                4 => {
                    let r2 = dx * dx + dy * dy;
                    r2 >= (0.55 * s) * (0.55 * s) && r2 <= s * s
                }
                5 => dy.abs() <= 0.3 * s && dx.abs() <= 1.2 * s,
                6 => dx.abs() <= 0.3 * s && dy.abs() <= 1.2 * s,
                7 => dx.abs() + dy.abs() <= 1.1 * s,
                8 => {
                    let cell = (s / 2.0).round().clamp(2.0, 5.0);
                    let ix = ((px + cx) / cell).floor() as i64;
                    let iy = ((py + cy) / cell).floor() as i64;
                    (ix + iy) % 2 == 0
                }
                9 => {
                    let pitch = 6.0;
                    let ox = (px - cx).rem_euclid(pitch) - pitch / 2.0;
                    let oy = (py - cy).rem_euclid(pitch) - pitch / 2.0;
                    ox * ox + oy * oy <= 1.5 * 1.5
                }
                _ => unreachable!("class < 10"),
            };
            let color = if inside { fg } else { bg };
            for (ch, &v) in color.iter().enumerate() {
                data[(y * size + x) * CHANNELS + ch] = v;
            }
        }
    }
    for v in &mut data {
        *v = (*v + rng.next_normal() * NOISE_STD).clamp(0.0, 1.0);
    }
    Tensor::new(vec![size, size, CHANNELS], data).expect("render produces a valid image")
}

/// Generates `n` examples (n must be a multiple of 10) with exactly
/// `n/10` per class and a stratified 80/10/10 train/val/test split.
pub fn generate_shapes_dataset(n: usize, seed: u64) -> Result<ShapesDataset> {
    if n == 0 || n % NUM_CLASSES != 0 {
        return Err(Error::Input(format!("dataset size {n} must be a positive multiple of 10")));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let block = i / NUM_CLASSES;
        let split = match block % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        };
        let mut rng = StreamRng::from_tags(seed, &[tag::DATASET, i as u64]);
        images.push(render(class, &mut rng));
        labels.push(class);
        splits.push(split);
    }
    Ok(ShapesDataset { images, labels, splits, seed })
}

/// Record length of the external real-image format: one label byte plus
/// 32*32*3 channel-planar pixel bytes.
pub const RECORD_LEN: usize = 1 + IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

/// Loads a file of fixed-length records (1 label byte + 3072 pixel bytes,
/// channel-planar) as an alternative to the synthetic set. Pixels are
/// converted to interleaved `[32,32,3]` float64 in [0,1].
pub fn load_record_file(path: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "{} is not a whole number of {RECORD_LEN}-byte records ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD_LEN;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for rec in 0..count {
        let base = rec * RECORD_LEN;
        let label = bytes[base] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::Input(format!(
                "record {rec}: label {label} out of range for {NUM_CLASSES} classes"
            )));
        }
        let pix = &bytes[base + 1..base + RECORD_LEN];
        let mut data = vec![0.0; plane * CHANNELS];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                for c in 0..CHANNELS {
                    data[(y * IMAGE_SIZE + x) * CHANNELS + c] =
                        pix[c * plane + y * IMAGE_SIZE + x] as f64 / 255.0;
                }
            }
        }
        images.push(Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)?);
        labels.push(label);
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_shapes_dataset(50, 42).unwrap();
        let b = generate_shapes_dataset(50, 42).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.bits_eq(y));
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn class_counts_are_exact() {
        let d = generate_shapes_dataset(1000, 7).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for &l in &d.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn pixels_are_clamped() {
        let d = generate_shapes_dataset(100, 3).unwrap();
        for img in &d.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_non_multiple_of_ten() {
        assert!(matches!(generate_shapes_dataset(55, 1), Err(Error::Input(_))));
    }

    #[test]
    fn splits_are_stratified() {
        let d = generate_shapes_dataset(1000, 9).unwrap();
        let train = d.split_indices(Split::Train).len();
        let val = d.split_indices(Split::Val).len();
        let test = d.split_indices(Split::Test).len();
        assert_eq!((train, val, test), (800, 100, 100));
        // Every class appears equally in the test split.
        let mut counts = [0usize; NUM_CLASSES];
        for i in d.split_indices(Split::Test) {
            counts[d.labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn record_loader_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.bin");
        let mut bytes = Vec::new();
        for rec in 0..3u8 {
            bytes.push(rec); // label
            for i in 0..(RECORD_LEN - 1) {
                bytes.push(((i + rec as usize) % 256) as u8);
            }
        }
        std::fs::write(&path, &bytes).unwrap();
        let (images, labels) = load_record_file(&path).unwrap();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(images.len(), 3);
        // Channel-planar source: pixel (0,0) channel 1 comes from plane 1.
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        assert_eq!(images[0].data()[1], (plane % 256) as f64 / 255.0);

        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(load_record_file(&path), Err(Error::Format(_))));
    }
}
