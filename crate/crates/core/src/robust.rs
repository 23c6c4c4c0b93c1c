//! Robustification tokens: trainable rows appended after the patch tokens
//! and adversarially trained before an attack runs. The outer loop
//! minimizes the classification loss of the token-augmented model against
//! perturbations produced by an inner momentum sign attack, so only the
//! tokens move; model weights are untouched.

use serde::{Deserialize, Serialize};

use crate::attack::{mi_fgsm_core, AttackConfig};
use crate::error::{Error, Result};
use crate::redundancy::BlockModSchedule;
use crate::rng::{tag, StreamRng};
use crate::tensor::ops::concat_rows;
use crate::tensor::{backward, Tape, Tensor};
use crate::vit::{cross_entropy, vit_forward, TokenRole, TokenSequence, ViTParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustMode {
    /// Tokens trained per input, at attack time.
    Dynamic,
    /// One token set trained on a calibration slice and reused everywhere.
    Global,
}

/// Robust-token hyperparameters as they appear in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustParams {
    /// Token count; 0 disables robustification.
    pub n_r: usize,
    pub mode: RobustMode,
    /// Outer gradient-descent rounds (dynamic) or epochs (global).
    pub outer_steps: usize,
    /// Steps of the inner attack that generates each round's perturbation.
    pub inner_steps: usize,
    /// Outer learning rate.
    pub lr: f64,
    /// Std of the token init.
    pub init_std: f64,
    /// Calibration mini-batch size (global mode).
    pub batch_size: usize,
    /// Calibration slice size drawn from the train split (global mode).
    pub calibration: usize,
}

impl Default for RobustParams {
    fn default() -> Self {
        Self {
            n_r: 0,
            mode: RobustMode::Dynamic,
            outer_steps: 10,
            inner_steps: 5,
            lr: 0.05,
            init_std: 0.02,
            batch_size: 16,
            calibration: 128,
        }
    }
}

/// Trained robustification tokens plus their training provenance.
#[derive(Clone, Debug)]
pub struct RobustTokens {
    /// `[n_r, D]`.
    pub tokens: Tensor,
    pub mode: RobustMode,
    pub outer_steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl RobustTokens {
    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Appends raw robust rows (`[n_r, D]`) after the existing tokens.
pub fn append_robust_rows(seq: &TokenSequence, rows: &Tensor) -> Result<TokenSequence> {
    let d = seq.tokens.shape()[1];
    if rows.shape().len() != 2 || rows.shape()[1] != d {
        return Err(Error::Dimension {
            op: "append_robust_rows",
            lhs: rows.shape().to_vec(),
            rhs: vec![seq.len(), d],
        });
    }
    let tokens = concat_rows(&[&seq.tokens, rows])?;
    let mut roles = seq.roles.clone();
    roles.extend(std::iter::repeat(TokenRole::Robust).take(rows.shape()[0]));
    Ok(TokenSequence { tokens, roles })
}

/// Appends a trained token set; with zero tokens the sequence is returned
/// unchanged.
pub fn append_robust_tokens(seq: &TokenSequence, rt: &RobustTokens) -> Result<TokenSequence> {
    if rt.count() == 0 {
        return Ok(seq.clone());
    }
    append_robust_rows(seq, &rt.tokens)
}

/// Draws the `N(0, init_std^2)` token init for a run seed.
fn init_tokens(params: &ViTParams, cfg: &RobustParams, seed: u64) -> Tensor {
    let mut rng = StreamRng::from_tags(seed, &[tag::ROBUST_INIT]);
    Tensor::randn(vec![cfg.n_r, params.config.hidden_dim], cfg.init_std, &mut rng)
}

/// One adversarial-training round for a single image: generate a fresh
/// perturbation against the current tokens with the inner attack (plain
/// momentum sign steps, so the round is fully deterministic), then return
/// the token gradient of the loss at that perturbed input.
fn round_token_grad(
    image: &Tensor,
    label: usize,
    params: &ViTParams,
    attack: &AttackConfig,
    robust_cfg: &RobustParams,
    tokens: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let neutral = BlockModSchedule::neutral(params.config.num_layers);
    let mut inner_cfg = attack.clone();
    inner_cfg.steps = robust_cfg.inner_steps;
    inner_cfg.alpha = None;
    let (x_adv, _) = mi_fgsm_core(image, &inner_cfg, |x_adv, _t| {
        let tape = Tape::new();
        let xt = tape.watch(x_adv);
        let logits = vit_forward(&xt, params, &neutral, Some(tokens))?;
        let loss = cross_entropy(&logits, label)?;
        let grads = backward(&loss)?;
        Ok((loss.scalar_value()?, grads.wrt(&xt)?))
    })?;

    let tape = Tape::new();
    let tt = tape.watch(tokens);
    let logits = vit_forward(&x_adv, params, &neutral, Some(&tt))?;
    let loss = cross_entropy(&logits, label)?;
    let grads = backward(&loss)?;
    Ok((loss.scalar_value()?, grads.wrt(&tt)?.data().to_vec()))
}

/// Per-instance (test-time) robustification: `outer_steps` rounds of
/// {inner attack against the current tokens; one descent step on the
/// tokens}. Model weights never change.
pub fn robustify_dynamic(
    image: &Tensor,
    label: usize,
    params: &ViTParams,
    attack: &AttackConfig,
    cfg: &RobustParams,
    seed: u64,
) -> Result<RobustTokens> {
    if cfg.n_r == 0 {
        return Err(Error::Config("robustify_dynamic called with n_r = 0".into()));
    }
    let mut tokens = init_tokens(params, cfg, seed);
    for _round in 0..cfg.outer_steps {
        let (_, grad) = round_token_grad(image, label, params, attack, cfg, &tokens)?;
        let updated: Vec<f64> =
            tokens.data().iter().zip(&grad).map(|(t, g)| t - cfg.lr * g).collect();
        tokens = Tensor::new(tokens.shape().to_vec(), updated)?;
    }
    Ok(RobustTokens {
        tokens,
        mode: RobustMode::Dynamic,
        outer_steps: cfg.outer_steps,
        lr: cfg.lr,
        seed,
    })
}

/// Offline robustification over a calibration slice: the same round
/// structure, but each outer step averages the token gradient over a
/// mini-batch. With a single calibration image and batch size 1 the
/// trajectory reduces to [`robustify_dynamic`] at equal round counts.
pub fn robustify_global(
    calibration: &[(Tensor, usize)],
    params: &ViTParams,
    attack: &AttackConfig,
    cfg: &RobustParams,
    seed: u64,
) -> Result<RobustTokens> {
    if calibration.is_empty() {
        return Err(Error::Input("robustify_global needs a non-empty calibration slice".into()));
    }
    if cfg.n_r == 0 {
        return Err(Error::Config("robustify_global called with n_r = 0".into()));
    }
    let batch = cfg.batch_size.max(1);
    let mut tokens = init_tokens(params, cfg, seed);
    for _epoch in 0..cfg.outer_steps {
        for chunk in calibration.chunks(batch) {
            let mut mean_grad = vec![0.0; tokens.numel()];
            for (image, label) in chunk {
                let (_, grad) = round_token_grad(image, *label, params, attack, cfg, &tokens)?;
                for (m, g) in mean_grad.iter_mut().zip(&grad) {
                    *m += g;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let updated: Vec<f64> = tokens
                .data()
                .iter()
                .zip(&mean_grad)
                .map(|(t, g)| t - cfg.lr * g * inv)
                .collect();
            tokens = Tensor::new(tokens.shape().to_vec(), updated)?;
        }
    }
    Ok(RobustTokens {
        tokens,
        mode: RobustMode::Global,
        outer_steps: cfg.outer_steps,
        lr: cfg.lr,
        seed,
    })
}
