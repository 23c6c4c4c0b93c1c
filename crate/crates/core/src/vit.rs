//! A toy pre-norm Vision Transformer with per-block hook points.
//!
//! The forward pass is built from tape primitives, so gradients with
//! respect to the input image, the robustification tokens, or the full
//! parameter set are all available from one [`backward`](crate::backward)
//! sweep. Block transforms attach through a [`BlockModSchedule`]; probe
//! ablations (token drop, head drop, FFN unit drop) attach through an
//! [`AblationPlan`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::redundancy::{
    ghost_moe, inject_clean_tokens, permute_heads, sparsify_attention, BlockModSchedule,
    BlockSchedule, CleanContext, OpKind, OpSpec,
};
use crate::rng::{tag, StreamRng};
use crate::tensor::ops::{concat_cols, concat_rows};
use crate::tensor::{Tape, Tensor};

/// Variance guard added inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Scale of the normal init for all learned weights and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// The desk-scale default: 32x32x3 inputs, 16 patches, 4 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            hidden_dim: 32,
            num_layers: 4,
            num_heads: 4,
            ffn_hidden: 64,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.hidden_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_hidden,
            self.num_classes,
        ];
        if fields.iter().any(|&f| f == 0) {
            return Err(Error::Config("all ViT dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Base sequence length T = 1 + N (class token plus patches).
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All learnable weights of the toy ViT.
#[derive(Clone, Debug)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_embed: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_f_scale: Tensor,
    pub ln_f_shift: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ViTParams {
    /// Seeded init: weights and embeddings N(0, `INIT_STD`); layer-norm
    /// scales one, shifts and biases zero.
    pub fn init(config: &ViTConfig, seed: u64) -> Self {
        Self::init_with_scale(config, seed, INIT_STD)
    }

    /// Init with an explicit weight scale (gradient checks use a larger
    /// one so input gradients stay well away from the noise floor).
    pub fn init_with_scale(config: &ViTConfig, seed: u64, std: f64) -> Self {
        config.validate().expect("valid config");
        let mut rng = StreamRng::from_tags(seed, &[tag::MODEL_INIT]);
        let d = config.hidden_dim;
        let f = config.ffn_hidden;
        let mut mat = |r: usize, c: usize| Tensor::randn(vec![r, c], std, &mut rng);

        let patch_embed = mat(config.patch_dim(), d);
        let cls_token = mat(1, d);
        let pos_embed = mat(config.num_patches(), d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                ln1_scale: Tensor::full(vec![d], 1.0),
                ln1_shift: Tensor::zeros(vec![d]),
                w_q: mat(d, d),
                w_k: mat(d, d),
                w_v: mat(d, d),
                w_o: mat(d, d),
                ln2_scale: Tensor::full(vec![d], 1.0),
                ln2_shift: Tensor::zeros(vec![d]),
                w1: mat(d, f),
                b1: Tensor::zeros(vec![f]),
                w2: mat(f, d),
                b2: Tensor::zeros(vec![d]),
            });
        }
        let head_w = mat(d, config.num_classes);
        Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            ln_f_scale: Tensor::full(vec![d], 1.0),
            ln_f_shift: Tensor::zeros(vec![d]),
            head_w,
            head_b: Tensor::zeros(vec![config.num_classes]),
        }
    }

    /// `(name, tensor)` pairs in the crate-wide canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (field, t) in [
                ("ln1_scale", &l.ln1_scale),
                ("ln1_shift", &l.ln1_shift),
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("ln2_scale", &l.ln2_scale),
                ("ln2_shift", &l.ln2_shift),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out.push(("ln_f_scale".into(), &self.ln_f_scale));
        out.push(("ln_f_shift".into(), &self.ln_f_shift));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// All parameter tensors, cloned, in canonical order.
    pub fn to_vec(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Rebuilds params from tensors in canonical order (shapes must match).
    pub fn from_vec(config: &ViTConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let template = Self::init(config, 0);
        let expected = template.named_tensors().len();
        if tensors.len() != expected {
            return Err(Error::Input(format!(
                "expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
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
        let patch_embed = next();
        let cls_token = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                ln1_scale: next(),
                ln1_shift: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_scale: next(),
                ln2_shift: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            ln_f_scale: next(),
            ln_f_shift: next(),
            head_w: next(),
            head_b: next(),
        })
    }

    /// A copy whose every tensor is watched as a leaf on `tape`.
    pub fn watch_all(&self, tape: &Tape) -> Self {
        let tensors = self.to_vec().iter().map(|t| tape.watch(t)).collect();
        Self::from_vec(&self.config, tensors).expect("same shapes")
    }

    /// Neutral-mods logits (convenience for evaluation).
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        vit_forward(image, self, &BlockModSchedule::neutral(self.config.num_layers), None)
    }
}

/// Role of each index in a token sequence. Index 0 is always the class token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Cls,
    Patch,
    Robust,
    InjectedClean,
}

/// Tokens plus their per-index roles.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub roles: Vec<TokenRole>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// Structural drops used by the redundancy probes. All fields empty means
/// no ablation.
#[derive(Clone, Debug, Default)]
pub struct BlockAblation {
    /// Heads whose output slot is zeroed before the output projection.
    pub drop_heads: Vec<usize>,
    /// FFN hidden units zeroed after the activation (no rescaling).
    pub drop_ffn_units: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    /// Embedded-token indices to keep (0 = class token, which must be
    /// present). `None` keeps everything.
    pub token_keep: Option<Vec<usize>>,
    /// One entry per block.
    pub blocks: Vec<BlockAblation>,
}

impl AblationPlan {
    pub fn none(num_layers: usize) -> Self {
        Self { token_keep: None, blocks: vec![BlockAblation::default(); num_layers] }
    }
}

/// Embeds an `[H,W,C]` image in `[0,1]` into `1 + N` tokens: the class
/// token followed by linearly projected patches with positional terms.
pub fn patch_embed(image: &Tensor, params: &ViTParams) -> Result<TokenSequence> {
    let cfg = &params.config;
    let want = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != want {
        return Err(Error::Dimension {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let patches = image.extract_patches(cfg.patch_size)?;
    let embedded = patches.matmul(&params.patch_embed)?.add(&params.pos_embed)?;
    let tokens = concat_rows(&[&params.cls_token, &embedded])?;
    let mut roles = vec![TokenRole::Cls];
    roles.extend(std::iter::repeat(TokenRole::Patch).take(cfg.num_patches()));
    Ok(TokenSequence { tokens, roles })
}

/// Per-head attention logits for already-normalized tokens, with the
/// block's attention-stage modifiers applied in canonical order.
fn attention_logits(
    tokens: &Tensor,
    params: &ViTParams,
    layer: usize,
    sched: &BlockSchedule,
) -> Result<(Vec<Tensor>, Tensor)> {
    let cfg = &params.config;
    let lp = &params.layers[layer];
    let dk = cfg.head_dim();
    let q = tokens.matmul(&lp.w_q)?;
    let k = tokens.matmul(&lp.w_k)?;
    let v = tokens.matmul(&lp.w_v)?;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut logits = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = q.slice_cols(h * dk, (h + 1) * dk)?;
        let kh = k.slice_cols(h * dk, (h + 1) * dk)?;
        logits.push(qh.matmul(&kh.transpose()?)?.scale(scale));
    }

    for inst in sched.ops() {
        match inst.spec {
            OpSpec::Permute { layer_prob, head_ratio } => {
                logits = permute_heads(logits, layer_prob, head_ratio, inst.stream)?;
            }
            OpSpec::Sparsify { ratio, mode } => {
                logits = sparsify_attention(&logits, ratio, mode, inst.stream)?;
            }
            _ => {}
        }
    }
    Ok((logits, v))
}

/// Post-softmax attention weights per head (diagnostics and tests).
pub fn mha_attention(
    tokens: &Tensor,
    params: &ViTParams,
    layer: usize,
    sched: &BlockSchedule,
) -> Result<Vec<Tensor>> {
    check_layer(params, layer)?;
    let (logits, _) = attention_logits(tokens, params, layer, sched)?;
    Ok(logits.iter().map(|l| l.softmax_rows()).collect())
}

fn check_layer(params: &ViTParams, layer: usize) -> Result<()> {
    if layer >= params.config.num_layers {
        return Err(Error::Contract(format!(
            "layer {layer} out of range for depth {}",
            params.config.num_layers
        )));
    }
    Ok(())
}

/// Multi-head attention over already-normalized tokens: per-head softmax
/// of the (possibly modified) logits, value aggregation, concatenation,
/// and the output projection.
pub fn mha_forward(
    tokens: &Tensor,
    params: &ViTParams,
    layer: usize,
    sched: &BlockSchedule,
    ablation: Option<&BlockAblation>,
) -> Result<Tensor> {
    check_layer(params, layer)?;
    let cfg = &params.config;
    let dk = cfg.head_dim();
    let (logits, v) = attention_logits(tokens, params, layer, sched)?;

    let mut head_outs = Vec::with_capacity(cfg.num_heads);
    for (h, logit) in logits.iter().enumerate() {
        let attn = logit.softmax_rows();
        let vh = v.slice_cols(h * dk, (h + 1) * dk)?;
        let mut out = attn.matmul(&vh)?;
        if let Some(ab) = ablation {
            if ab.drop_heads.contains(&h) {
                out = out.scale(0.0);
            }
        }
        head_outs.push(out);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    concat_cols(&refs)?.matmul(&params.layers[layer].w_o)
}

/// The plain two-layer FFN, with optional probe unit drops after GELU.
pub fn ffn_dense(z: &Tensor, lp: &LayerParams, drop_units: Option<&[usize]>) -> Result<Tensor> {
    let mut hidden = z.matmul(&lp.w1)?.add_row(&lp.b1)?.gelu();
    if let Some(units) = drop_units {
        if !units.is_empty() {
            let (t, f) = (hidden.shape()[0], hidden.shape()[1]);
            let mut row = vec![1.0; f];
            for &u in units {
                if u >= f {
                    return Err(Error::Input(format!("ffn unit {u} out of range for width {f}")));
                }
                row[u] = 0.0;
            }
            let mut full = Vec::with_capacity(t * f);
            for _ in 0..t {
                full.extend_from_slice(&row);
            }
            hidden = hidden.mul(&Tensor::new(vec![t, f], full)?)?;
        }
    }
    hidden.matmul(&lp.w2)?.add_row(&lp.b2)
}

/// FFN stage of one block: the dense path, or the ghost mixture-of-experts
/// when the schedule activates it.
pub fn ffn_forward(
    z: &Tensor,
    params: &ViTParams,
    layer: usize,
    sched: &BlockSchedule,
    ablation: Option<&BlockAblation>,
) -> Result<Tensor> {
    check_layer(params, layer)?;
    let lp = &params.layers[layer];
    if let Some(inst) = sched.find(OpKind::GhostMoe) {
        if let OpSpec::GhostMoe { experts, drop } = inst.spec {
            return ghost_moe(z, lp, experts, drop, inst.stream);
        }
    }
    let drop_units = ablation.map(|a| a.drop_ffn_units.as_slice());
    ffn_dense(z, lp, drop_units)
}

/// One pre-norm block: `a = z + MHA(LN(z)); out = a + FFN(LN(a))`.
/// Injected clean tokens extend the sequence before attention and are
/// stripped afterwards, so the sequence length is restored.
pub fn block_forward(
    seq: &TokenSequence,
    params: &ViTParams,
    layer: usize,
    sched: &BlockSchedule,
    clean: Option<&CleanContext>,
    ablation: Option<&BlockAblation>,
) -> Result<TokenSequence> {
    check_layer(params, layer)?;
    let lp = &params.layers[layer];
    let t_in = seq.len();

    let mut work = seq.clone();
    if let Some(inst) = sched.find(OpKind::CleanInject) {
        if let OpSpec::CleanInject { ratio } = inst.spec {
            let ctx = clean.ok_or_else(|| {
                Error::State("clean-token injection scheduled but no clean context captured".into())
            })?;
            work = inject_clean_tokens(&work, ctx, layer, ratio, inst.stream)?;
        }
    }

    let zn = work.tokens.layer_norm(&lp.ln1_scale, &lp.ln1_shift, LN_EPS)?;
    let att = mha_forward(&zn, params, layer, sched, ablation)?;
    let a = work.tokens.add(&att)?;
    let an = a.layer_norm(&lp.ln2_scale, &lp.ln2_shift, LN_EPS)?;
    let f = ffn_forward(&an, params, layer, sched, ablation)?;
    let out = a.add(&f)?;

    let tokens = if out.shape()[0] > t_in { out.slice_rows(0, t_in)? } else { out };
    Ok(TokenSequence { tokens, roles: seq.roles.clone() })
}

/// Full forward pass returning flat logits (`[num_classes]`). The
/// classifier reads only the class token after a final layer norm.
pub fn vit_forward(
    image: &Tensor,
    params: &ViTParams,
    mods: &BlockModSchedule,
    robust: Option<&Tensor>,
) -> Result<Tensor> {
    vit_forward_full(image, params, mods, robust, None, None, None)
}

/// [`vit_forward`] with the full set of hooks: clean context for injection,
/// probe ablations, and capture of per-block clean inputs.
pub fn vit_forward_full(
    image: &Tensor,
    params: &ViTParams,
    mods: &BlockModSchedule,
    robust: Option<&Tensor>,
    clean: Option<&CleanContext>,
    ablation: Option<&AblationPlan>,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let cfg = &params.config;
    if mods.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "schedule has {} blocks, model has {}",
            mods.len(),
            cfg.num_layers
        )));
    }
    if let Some(plan) = ablation {
        if plan.blocks.len() != cfg.num_layers {
            return Err(Error::Config(format!(
                "ablation plan has {} blocks, model has {}",
                plan.blocks.len(),
                cfg.num_layers
            )));
        }
    }

    let mut seq = patch_embed(image, params)?;
    if let Some(rt) = robust {
        seq = crate::robust::append_robust_rows(&seq, rt)?;
    }
    if let Some(keep) = ablation.and_then(|p| p.token_keep.as_ref()) {
        if keep.first() != Some(&0) {
            return Err(Error::Contract("token_keep must retain the class token at index 0".into()));
        }
        let tokens = seq.tokens.gather_rows(keep)?;
        let roles = keep.iter().map(|&i| seq.roles[i]).collect();
        seq = TokenSequence { tokens, roles };
    }

    let capture_rows = cfg.seq_len().min(seq.len());
    for layer in 0..cfg.num_layers {
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(seq.tokens.slice_rows(0, capture_rows)?.detach());
        }
        let block_ab = ablation.map(|p| &p.blocks[layer]);
        seq = block_forward(&seq, params, layer, &mods.blocks[layer], clean, block_ab)?;
    }

    let cls = seq.tokens.slice_rows(0, 1)?;
    let normed = cls.layer_norm(&params.ln_f_scale, &params.ln_f_shift, LN_EPS)?;
    let logits = normed.matmul(&params.head_w)?.add_row(&params.head_b)?;
    logits.reshape(vec![cfg.num_classes])
}

/// Runs a benign pass (neutral mods, same robust tokens) and captures the
/// class+patch activations entering every block.
pub fn capture_clean_context(
    image: &Tensor,
    params: &ViTParams,
    robust: Option<&Tensor>,
) -> Result<CleanContext> {
    let mut captured = Vec::with_capacity(params.config.num_layers);
    let neutral = BlockModSchedule::neutral(params.config.num_layers);
    vit_forward_full(image, params, &neutral, robust, None, None, Some(&mut captured))?;
    Ok(CleanContext { layers: captured })
}

/// Cross-entropy of logits against an integer label.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor> {
    logits.cross_entropy_logits(label)
}
