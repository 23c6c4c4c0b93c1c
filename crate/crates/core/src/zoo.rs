//! Surrogate/victim model zoo and the shared trainer.
//!
//! The zoo holds one ViT surrogate plus four victims: three ViT variants
//! that differ in depth, width, and seed, and one small CNN. Every model
//! must clear the clean-accuracy gate before transfer experiments use it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cnn::{CnnConfig, CnnParams};
use crate::data::{ShapesDataset, Split};
use crate::error::{Error, Result};
use crate::redundancy::BlockModSchedule;
use crate::rng::{stream_id, tag, StreamRng};
use crate::tensor::{backward, Tape, Tensor};
use crate::vit::{cross_entropy, vit_forward, ViTConfig, ViTParams};

/// Clean test accuracy a model must reach to join transfer experiments.
pub const ACCURACY_GATE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelArch {
    Vit(ViTConfig),
    Cnn(CnnConfig),
}

#[derive(Clone, Debug)]
pub enum ModelParams {
    Vit(ViTParams),
    Cnn(CnnParams),
}

impl ModelParams {
    pub fn arch(&self) -> ModelArch {
        match self {
            ModelParams::Vit(p) => ModelArch::Vit(p.config.clone()),
            ModelParams::Cnn(p) => ModelArch::Cnn(p.config.clone()),
        }
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        match self {
            ModelParams::Vit(p) => p.logits(image),
            ModelParams::Cnn(p) => p.logits(image),
        }
    }

    /// Argmax prediction; ties break to the lowest index.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }

    pub fn as_vit(&self) -> Option<&ViTParams> {
        match self {
            ModelParams::Vit(p) => Some(p),
            ModelParams::Cnn(_) => None,
        }
    }

    fn to_vec(&self) -> Vec<Tensor> {
        match self {
            ModelParams::Vit(p) => p.to_vec(),
            ModelParams::Cnn(p) => p.to_vec(),
        }
    }

    fn from_vec(arch: &ModelArch, tensors: Vec<Tensor>) -> Result<Self> {
        Ok(match arch {
            ModelArch::Vit(c) => ModelParams::Vit(ViTParams::from_vec(c, tensors)?),
            ModelArch::Cnn(c) => ModelParams::Cnn(CnnParams::from_vec(c, tensors)?),
        })
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            ModelParams::Vit(p) => p.named_tensors(),
            ModelParams::Cnn(p) => p.named_tensors(),
        }
    }

    fn init(arch: &ModelArch, seed: u64) -> Self {
        match arch {
            ModelArch::Vit(c) => ModelParams::Vit(ViTParams::init(c, seed)),
            ModelArch::Cnn(c) => ModelParams::Cnn(CnnParams::init(c, seed)),
        }
    }

    /// Loss and parameter gradients (canonical order) for one example.
    fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let (loss, tracked_vec) = match self {
            ModelParams::Vit(p) => {
                let tracked = p.watch_all(&tape);
                let neutral = BlockModSchedule::neutral(p.config.num_layers);
                let logits = vit_forward(image, &tracked, &neutral, None)?;
                (cross_entropy(&logits, label)?, tracked.to_vec())
            }
            ModelParams::Cnn(p) => {
                let tracked = p.watch_all(&tape);
                let logits = tracked.logits(image)?;
                (cross_entropy(&logits, label)?, tracked.to_vec())
            }
        };
        let value = loss.scalar_value()?;
        let grads = backward(&loss)?;
        let out: Result<Vec<Vec<f64>>> =
            tracked_vec.iter().map(|t| Ok(grads.wrt(t)?.data().to_vec())).collect();
        Ok((value, out?))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 32, lr: 0.15, momentum: 0.9 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub val_accuracy: f64,
}

/// Mini-batch gradient descent with momentum on cross-entropy. Per-example
/// gradients within a batch are computed in parallel but reduced in index
/// order, so results are bit-identical to the sequential loop.
pub fn train_model(
    dataset: &ShapesDataset,
    arch: &ModelArch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Input("dataset must provide train and val splits".into()));
    }

    let mut params = ModelParams::init(arch, seed);
    let mut velocity: Vec<Vec<f64>> =
        params.to_vec().iter().map(|t| vec![0.0; t.numel()]).collect();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = StreamRng::from_tags(seed, &[tag::TRAIN_SHUFFLE, epoch as u64]);
        rng.shuffle(&mut order);

        for batch in order.chunks(cfg.batch_size.max(1)) {
            let per_example: Result<Vec<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&i| params.loss_and_grads(&dataset.images[i], dataset.labels[i]))
                .collect();
            let per_example = per_example?;

            let inv = 1.0 / batch.len() as f64;
            let mut mean_loss = 0.0;
            let mut mean_grads: Vec<Vec<f64>> =
                velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for (loss, grads) in per_example {
                mean_loss += loss * inv;
                for (acc, g) in mean_grads.iter_mut().zip(grads) {
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += gv * inv;
                    }
                }
            }
            if !mean_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch} (arch {arch:?}, cfg {cfg:?}, seed {seed})"
                )));
            }

            let tensors = params.to_vec();
            let mut updated = Vec::with_capacity(tensors.len());
            for ((t, v), g) in tensors.iter().zip(&mut velocity).zip(&mean_grads) {
                let data: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(v.iter_mut().zip(g))
                    .map(|(&p, (vel, &gv))| {
                        *vel = cfg.momentum * *vel - cfg.lr * gv;
                        p + *vel
                    })
                    .collect();
                updated.push(Tensor::new(t.shape().to_vec(), data)?);
            }
            params = ModelParams::from_vec(arch, updated)?;
        }
    }

    let val_accuracy = accuracy(&params, dataset, &val_idx)?;
    Ok(TrainedModel { params, val_accuracy })
}

/// Fraction of correctly classified examples at the given indices.
pub fn accuracy(params: &ModelParams, dataset: &ShapesDataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("accuracy over an empty index set".into()));
    }
    let hits: Result<Vec<bool>> = indices
        .par_iter()
        .map(|&i| Ok(params.predict(&dataset.images[i])? == dataset.labels[i]))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / indices.len() as f64)
}

/// One trained, named zoo member.
#[derive(Clone, Debug)]
pub struct ZooModel {
    pub name: String,
    pub params: ModelParams,
    pub clean_accuracy: f64,
}

impl ZooModel {
    pub fn gate_check(&self) -> Result<()> {
        if self.clean_accuracy < ACCURACY_GATE {
            return Err(Error::Training(format!(
                "model {} has clean accuracy {:.3}, below the {ACCURACY_GATE} gate",
                self.name, self.clean_accuracy
            )));
        }
        Ok(())
    }
}

/// The surrogate plus its four victims.
#[derive(Clone, Debug)]
pub struct ModelZoo {
    pub surrogate: ZooModel,
    pub victims: Vec<ZooModel>,
}

impl ModelZoo {
    pub fn all_models(&self) -> Vec<&ZooModel> {
        let mut out = vec![&self.surrogate];
        out.extend(self.victims.iter());
        out
    }

    pub fn surrogate_vit(&self) -> Result<&ViTParams> {
        self.surrogate
            .params
            .as_vit()
            .ok_or_else(|| Error::Contract("zoo surrogate is not a transformer".into()))
    }
}

/// The fixed zoo composition: names, architectures, and per-model seed
/// tags (hashed with the run seed).
pub fn zoo_roster(base: &ViTConfig) -> Vec<(&'static str, ModelArch)> {
    let mut deep = base.clone();
    deep.num_layers = 6;
    let mut wide = base.clone();
    wide.hidden_dim = 48;
    wide.ffn_hidden = 96;
    vec![
        ("vit_base", ModelArch::Vit(base.clone())),
        ("vit_twin", ModelArch::Vit(base.clone())),
        ("vit_deep", ModelArch::Vit(deep)),
        ("vit_wide", ModelArch::Vit(wide)),
        ("cnn_small", ModelArch::Cnn(CnnConfig::toy())),
    ]
}

/// Trains the full zoo: `vit_base` becomes the surrogate, the rest are
/// victims. Clean accuracy is measured on the test split.
pub fn train_zoo(
    dataset: &ShapesDataset,
    base: &ViTConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelZoo> {
    let test_idx = dataset.split_indices(Split::Test);
    let mut models = Vec::new();
    for (idx, (name, arch)) in zoo_roster(base).into_iter().enumerate() {
        let model_seed = stream_id(seed, &[0x2000 + idx as u64]);
        let trained = train_model(dataset, &arch, cfg, model_seed)?;
        let clean_accuracy = accuracy(&trained.params, dataset, &test_idx)?;
        models.push(ZooModel { name: name.to_string(), params: trained.params, clean_accuracy });
    }
    let surrogate = models.remove(0);
    Ok(ModelZoo { surrogate, victims: models })
}

/// Saves a model checkpoint with its architecture and accuracy in the
/// manifest metadata.
pub fn save_model(path: &Path, model: &ZooModel, config_hash: &str, seed: u64) -> Result<()> {
    let meta = serde_json::json!({
        "name": model.name,
        "arch": serde_json::to_value(model.params.arch())?,
        "clean_accuracy": model.clean_accuracy,
        "config_hash": config_hash,
        "seed": seed,
    });
    save_checkpoint(path, &model.params.named_tensors(), None, meta)
}

/// Loads a model checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ZooModel> {
    let ckpt = load_checkpoint(path)?;
    let meta = &ckpt.meta;
    let name = meta
        .get("name")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("model checkpoint missing 'name' metadata".into()))?
        .to_string();
    let arch: ModelArch = serde_json::from_value(
        meta.get("arch")
            .cloned()
            .ok_or_else(|| Error::Format("model checkpoint missing 'arch' metadata".into()))?,
    )?;
    let clean_accuracy = meta
        .get("clean_accuracy")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format("model checkpoint missing 'clean_accuracy'".into()))?;
    let tensors = ckpt.tensors.into_iter().map(|(_, t)| t).collect();
    Ok(ZooModel { name, params: ModelParams::from_vec(&arch, tensors)?, clean_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_shapes_dataset(100, 11).unwrap();
        let mut tiny = ViTConfig::toy();
        tiny.num_layers = 1;
        tiny.hidden_dim = 8;
        tiny.num_heads = 2;
        tiny.ffn_hidden = 16;
        let cfg = TrainConfig { epochs: 1, batch_size: 16, ..Default::default() };
        let a = train_model(&data, &ModelArch::Vit(tiny.clone()), &cfg, 3).unwrap();
        let b = train_model(&data, &ModelArch::Vit(tiny), &cfg, 3).unwrap();
        for (x, y) in a.params.to_vec().iter().zip(b.params.to_vec()) {
            assert!(x.bits_eq(&y));
        }
        assert_eq!(a.val_accuracy, b.val_accuracy);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let data = generate_shapes_dataset(200, 5).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let mut accs = Vec::new();
        for seed in 0..10 {
            let m = train_model(&data, &ModelArch::Vit(ViTConfig::toy()), &cfg, seed).unwrap();
            accs.push(m.val_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(
            (0.02..=0.25).contains(&mean),
            "untrained accuracy {mean} outside the chance band"
        );
    }
}
