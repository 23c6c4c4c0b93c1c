//! A compact convolutional classifier used as the non-transformer victim
//! in the model zoo: three 3x3 same-padded conv+ReLU stages, each followed
//! by 2x2 average pooling, then a linear head on the flattened features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, StreamRng};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub image_size: usize,
    pub channels: usize,
    pub widths: [usize; 3],
    pub num_classes: usize,
}

impl CnnConfig {
    pub fn toy() -> Self {
        Self { image_size: 32, channels: 3, widths: [8, 16, 32], num_classes: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8 (three pooling stages)",
                self.image_size
            )));
        }
        if self.channels == 0 || self.num_classes == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("all CNN dimensions must be positive".into()));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let side = self.image_size / 8;
        side * side * self.widths[2]
    }
}

#[derive(Clone, Debug)]
pub struct CnnParams {
    pub config: CnnConfig,
    pub conv_w: [Tensor; 3],
    pub conv_b: [Tensor; 3],
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl CnnParams {
    pub fn init(config: &CnnConfig, seed: u64) -> Self {
        config.validate().expect("valid config");
        let mut rng = StreamRng::from_tags(seed, &[tag::MODEL_INIT]);
        let chans = [config.channels, config.widths[0], config.widths[1]];
        let mut conv_w = Vec::with_capacity(3);
        let mut conv_b = Vec::with_capacity(3);
        for i in 0..3 {
            // He-style scale keeps activations from shrinking through ReLU.
            let fan_in = (3 * 3 * chans[i]) as f64;
            let std = (2.0 / fan_in).sqrt();
            conv_w.push(Tensor::randn(vec![3, 3, chans[i], config.widths[i]], std, &mut rng));
            conv_b.push(Tensor::zeros(vec![config.widths[i]]));
        }
        let flat = config.flat_dim();
        let fc_w = Tensor::randn(vec![flat, config.num_classes], (1.0 / flat as f64).sqrt(), &mut rng);
        Self {
            config: config.clone(),
            conv_w: conv_w.try_into().expect("three stages"),
            conv_b: conv_b.try_into().expect("three stages"),
            fc_w,
            fc_b: Tensor::zeros(vec![config.num_classes]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..3 {
            out.push((format!("conv.{i}.w"), &self.conv_w[i]));
            out.push((format!("conv.{i}.b"), &self.conv_b[i]));
        }
        out.push(("fc_w".into(), &self.fc_w));
        out.push(("fc_b".into(), &self.fc_b));
        out
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn from_vec(config: &CnnConfig, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 8 {
            return Err(Error::Input(format!("expected 8 parameter tensors, got {}", tensors.len())));
        }
        let template = Self::init(config, 0);
        for ((name, t), new) in template.named_tensors().iter().zip(&tensors) {
            if t.shape() != new.shape() {
                return Err(Error::Input(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    t.shape(),
                    new.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let conv = [
            (next(), next()),
            (next(), next()),
            (next(), next()),
        ];
        let [c0, c1, c2] = conv;
        Ok(Self {
            config: config.clone(),
            conv_w: [c0.0, c1.0, c2.0],
            conv_b: [c0.1, c1.1, c2.1],
            fc_w: next(),
            fc_b: next(),
        })
    }

    pub fn watch_all(&self, tape: &Tape) -> Self {
        let tensors = self.to_vec().iter().map(|t| tape.watch(t)).collect();
        Self::from_vec(&self.config, tensors).expect("same shapes")
    }

    /// Flat logits for an `[H,W,C]` image.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let want = [self.config.image_size, self.config.image_size, self.config.channels];
        if image.shape() != want {
            return Err(Error::Dimension {
                op: "cnn_forward",
                lhs: image.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut h = image.clone();
        for i in 0..3 {
            h = h.conv2d_same(&self.conv_w[i], &self.conv_b[i])?.relu().avg_pool2()?;
        }
        let flat = h.reshape(vec![1, self.config.flat_dim()])?;
        flat.matmul(&self.fc_w)?.add_row(&self.fc_b)?.reshape(vec![self.config.num_classes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = CnnConfig::toy();
        let params = CnnParams::init(&cfg, 5);
        let mut rng = StreamRng::from_tags(1, &[tag::DATASET]);
        let img = Tensor::new(
            vec![32, 32, 3],
            (0..32 * 32 * 3).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let a = params.logits(&img).unwrap();
        let b = params.logits(&img).unwrap();
        assert_eq!(a.shape(), &[10]);
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let params = CnnParams::init(&CnnConfig::toy(), 5);
        let img = Tensor::zeros(vec![16, 16, 3]);
        assert!(matches!(params.logits(&img), Err(Error::Dimension { .. })));
    }
}
