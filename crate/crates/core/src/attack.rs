//! Momentum sign-gradient attacks and the schedule-sampling attack driver.
//!
//! The base iteration accumulates the L1-normalized loss gradient into a
//! momentum buffer, steps by `alpha * sign(momentum)`, and projects back
//! into the L-infinity ball intersected with `[0,1]`. The full driver
//! additionally trains (or loads) robustification tokens, captures a clean
//! context, samples a per-block operation schedule from a policy every
//! iteration, and feeds each iteration's loss back into the policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{OpPolicy, PolicyParams};
use crate::redundancy::{compose_block_mods, BlockModSchedule, BlockSchedule, OpInstance, OpKind, OpSpec};
use crate::rng::{stream_id, tag, StreamRng};
use crate::robust::{robustify_dynamic, RobustMode, RobustParams, RobustTokens};
use crate::tensor::{backward, Tape, Tensor};
use crate::vit::{capture_clean_context, cross_entropy, vit_forward, vit_forward_full, ViTParams};

/// L-infinity budget used throughout: 16/255.
pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    /// Plain momentum sign attack.
    Mi,
    /// Momentum sign attack with robust tokens, sampled block operations,
    /// and online policy updates.
    Ours,
}

/// Per-op parameters as they appear in experiment configs (`"ops"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpsParams {
    pub sparsify: SparsifyParams,
    pub permute: PermuteParams,
    pub clean: CleanParams,
    pub moe: MoeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsifyParams {
    pub r: f64,
    pub mode: crate::redundancy::MaskMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermuteParams {
    pub p: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanParams {
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeParams {
    #[serde(rename = "E")]
    pub experts: usize,
    pub d: f64,
}

impl Default for SparsifyParams {
    fn default() -> Self {
        Self { r: 0.2, mode: crate::redundancy::MaskMode::Multiplicative }
    }
}

impl Default for PermuteParams {
    fn default() -> Self {
        Self { p: 0.3, r: 0.5 }
    }
}

impl Default for CleanParams {
    fn default() -> Self {
        Self { r: 0.3 }
    }
}

impl Default for MoeParams {
    fn default() -> Self {
        Self { experts: 3, d: 0.3 }
    }
}

impl Default for OpsParams {
    fn default() -> Self {
        Self {
            sparsify: SparsifyParams::default(),
            permute: PermuteParams::default(),
            clean: CleanParams::default(),
            moe: MoeParams::default(),
        }
    }
}

impl OpsParams {
    /// Every operation at its neutral setting.
    pub fn neutral() -> Self {
        Self {
            sparsify: SparsifyParams { r: 0.0, mode: crate::redundancy::MaskMode::Multiplicative },
            permute: PermuteParams { p: 0.0, r: 0.0 },
            clean: CleanParams { r: 0.0 },
            moe: MoeParams { experts: 1, d: 0.0 },
        }
    }

    /// Binds a sampled kind to its configured parameters and stream.
    pub fn materialize(&self, kind: OpKind, stream: u64) -> OpInstance {
        let spec = match kind {
            OpKind::Identity => OpSpec::Identity,
            OpKind::SparsifyAttention => {
                OpSpec::Sparsify { ratio: self.sparsify.r, mode: self.sparsify.mode }
            }
            OpKind::PermuteHeads => {
                OpSpec::Permute { layer_prob: self.permute.p, head_ratio: self.permute.r }
            }
            OpKind::CleanInject => OpSpec::CleanInject { ratio: self.clean.r },
            OpKind::GhostMoe => OpSpec::GhostMoe { experts: self.moe.experts, drop: self.moe.d },
        };
        OpInstance { spec, stream }
    }
}

/// Attack configuration (the `"attack"` config section plus the op,
/// policy, and robust-token sections it drives).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity radius in pixel units.
    pub epsilon: f64,
    /// Iteration count T.
    pub steps: usize,
    /// Step size; `None` means `epsilon / steps`.
    pub alpha: Option<f64>,
    /// Momentum decay.
    pub mu: f64,
    pub method: AttackMethod,
    pub ops: OpsParams,
    pub policy: PolicyParams,
    pub robust: RobustParams,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            steps: 10,
            alpha: None,
            mu: 1.0,
            method: AttackMethod::Mi,
            ops: OpsParams::default(),
            policy: PolicyParams::default(),
            robust: RobustParams::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        let alpha = self.step_size();
        if !(alpha > 0.0) && self.epsilon > 0.0 {
            return Err(Error::Config(format!("step size {alpha} must be positive")));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / self.steps as f64)
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `x_adv` into the epsilon ball around `x`, then into `[0,1]`.
pub fn clip_project(x_adv: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    if x_adv.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "clip_project",
            lhs: x_adv.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let out: Vec<f64> = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &c)| a.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

/// Slack allowed by the ball-membership check.
pub const BALL_SLACK: f64 = 1e-12;

fn check_ball(x_adv: &Tensor, x: &Tensor, epsilon: f64, iteration: usize) -> Result<()> {
    for (&a, &c) in x_adv.data().iter().zip(x.data()) {
        if (a - c).abs() > epsilon + BALL_SLACK || !(0.0..=1.0).contains(&a) {
            return Err(Error::Numeric(format!(
                "iterate left the feasible region at step {iteration}: value {a}, clean {c}"
            )));
        }
    }
    Ok(())
}

/// The shared attack iteration. `grad_fn(x_adv, t)` returns the loss and
/// its gradient with respect to the current iterate; the loop handles
/// momentum, stepping, projection, and feasibility checking, and returns
/// the final iterate with the per-iteration losses.
pub fn mi_fgsm_core<F>(x: &Tensor, cfg: &AttackConfig, mut grad_fn: F) -> Result<(Tensor, Vec<f64>)>
where
    F: FnMut(&Tensor, usize) -> Result<(f64, Tensor)>,
{
    cfg.validate()?;
    let alpha = cfg.step_size();
    let mut momentum = vec![0.0; x.numel()];
    let mut x_adv = x.detach();
    let mut losses = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let (loss, grad) = grad_fn(&x_adv, t)?;
        if grad.shape() != x.shape() {
            return Err(Error::Dimension {
                op: "mi_fgsm_core",
                lhs: grad.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {t}")));
        }
        let l1: f64 = grad.data().iter().map(|v| v.abs()).sum();
        for (m, &g) in momentum.iter_mut().zip(grad.data()) {
            let unit = if l1 > 0.0 { g / l1 } else { 0.0 };
            *m = cfg.mu * *m + unit;
        }
        let stepped: Vec<f64> = x_adv
            .data()
            .iter()
            .zip(&momentum)
            .map(|(&v, &m)| v + alpha * sign(m))
            .collect();
        x_adv = clip_project(&Tensor::new(x.shape().to_vec(), stepped)?, x, cfg.epsilon)?;
        check_ball(&x_adv, x, cfg.epsilon, t)?;
        losses.push(loss);
    }
    Ok((x_adv, losses))
}

/// Plain momentum sign attack on a ViT surrogate. `mods_provider` supplies
/// the block schedule for each iteration (neutral for the baseline attack).
pub fn mi_fgsm_attack<P>(
    x: &Tensor,
    label: usize,
    params: &ViTParams,
    cfg: &AttackConfig,
    mut mods_provider: P,
) -> Result<(Tensor, Vec<f64>)>
where
    P: FnMut(usize) -> Result<BlockModSchedule>,
{
    mi_fgsm_core(x, cfg, |x_adv, t| {
        let mods = mods_provider(t)?;
        let tape = Tape::new();
        let xt = tape.watch(x_adv);
        let logits = vit_forward(&xt, params, &mods, None)?;
        let loss = cross_entropy(&logits, label)?;
        let grads = backward(&loss)?;
        Ok((loss.scalar_value()?, grads.wrt(&xt)?))
    })
}

/// [`mi_fgsm_attack`] with every block neutral.
pub fn mi_fgsm_plain(
    x: &Tensor,
    label: usize,
    params: &ViTParams,
    cfg: &AttackConfig,
) -> Result<(Tensor, Vec<f64>)> {
    let neutral = BlockModSchedule::neutral(params.config.num_layers);
    mi_fgsm_attack(x, label, params, cfg, |_| Ok(neutral.clone()))
}

/// Everything the full attack produces beyond the adversarial image.
#[derive(Debug)]
pub struct RedundantOutcome {
    pub x_adv: Tensor,
    pub policy: OpPolicy,
    pub losses: Vec<f64>,
    pub robust: Option<RobustTokens>,
}

/// Materializes one iteration's sampled kinds into per-block schedules.
/// Stream ids follow the crate-wide rule: hash(seed, image, iteration,
/// block, op kind).
fn build_schedule(
    sampled: &[Vec<OpKind>],
    ops: &OpsParams,
    seed: u64,
    image_idx: u64,
    iteration: usize,
) -> Result<BlockModSchedule> {
    let mut blocks = Vec::with_capacity(sampled.len());
    for (block, kinds) in sampled.iter().enumerate() {
        if kinds.is_empty() {
            blocks.push(BlockSchedule::empty());
            continue;
        }
        let instances: Vec<OpInstance> = kinds
            .iter()
            .map(|&kind| {
                let stream = stream_id(
                    seed,
                    &[tag::OP_DRAW, image_idx, iteration as u64, block as u64, kind.stream_tag()],
                );
                ops.materialize(kind, stream)
            })
            .collect();
        blocks.push(compose_block_mods(instances)?);
    }
    Ok(BlockModSchedule { blocks })
}

/// The full redundancy-scheduled attack:
///
/// 1. train dynamic robust tokens (or take provided global ones; skip when
///    the configured count is zero);
/// 2. capture the clean context with the same token layout;
/// 3. per iteration: sample a schedule from the policy, differentiate the
///    modified forward pass, take a momentum sign step, and update the
///    policy with the iteration's loss.
///
/// With every operation at its neutral setting and zero robust tokens the
/// produced image is bit-identical to [`mi_fgsm_plain`].
pub fn run_redundant_attack(
    x: &Tensor,
    label: usize,
    params: &ViTParams,
    cfg: &AttackConfig,
    image_idx: u64,
    global_tokens: Option<&RobustTokens>,
) -> Result<RedundantOutcome> {
    cfg.validate()?;
    let robust: Option<RobustTokens> = if cfg.robust.n_r == 0 {
        None
    } else {
        match cfg.robust.mode {
            RobustMode::Dynamic => {
                Some(robustify_dynamic(x, label, params, cfg, &cfg.robust, cfg.seed)?)
            }
            RobustMode::Global => Some(
                global_tokens
                    .cloned()
                    .ok_or_else(|| Error::State("global robust tokens not provided".into()))?,
            ),
        }
    };
    let token_rows = robust.as_ref().map(|r| &r.tokens);
    let clean = capture_clean_context(x, params, token_rows)?;
    let mut policy = OpPolicy::standard(params.config.num_layers, &cfg.policy)?;

    let (x_adv, losses) = mi_fgsm_core(x, cfg, |x_adv, t| {
        let mut rng =
            StreamRng::from_tags(cfg.seed, &[tag::POLICY_SAMPLE, image_idx, t as u64]);
        let sampled = policy.sample_schedule(&mut rng);
        let schedule = build_schedule(&sampled, &cfg.ops, cfg.seed, image_idx, t)?;

        let tape = Tape::new();
        let xt = tape.watch(x_adv);
        let logits =
            vit_forward_full(&xt, params, &schedule, token_rows, Some(&clean), None, None)?;
        let loss_t = cross_entropy(&logits, label)?;
        let grads = backward(&loss_t)?;
        let grad = grads.wrt(&xt)?;
        let loss = loss_t.scalar_value()?;
        policy.reinforce_update(&sampled, loss)?;
        Ok((loss, grad))
    })?;

    Ok(RedundantOutcome { x_adv, policy, losses, robust })
}
