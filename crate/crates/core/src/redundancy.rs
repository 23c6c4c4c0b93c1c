//! Block-level redundancy operations.
//!
//! Each operation is a pure transform parameterized by ratios and a
//! dedicated RNG stream id: re-applying an instance reproduces its draws
//! exactly, so a frozen schedule gives a deterministic, differentiable
//! forward pass. Within one block the canonical application order is
//! clean-token injection (sequence extension), head permutation, attention
//! sparsification, then the ghost mixture-of-experts on the FFN stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::ops::concat_rows;
use crate::tensor::Tensor;
use crate::vit::{LayerParams, TokenRole, TokenSequence};

/// Operation kinds, in pool order. `Identity` is a real pool member that
/// contributes no transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Identity,
    SparsifyAttention,
    PermuteHeads,
    CleanInject,
    GhostMoe,
}

/// The operation pool in its fixed serialization order.
pub const OP_POOL: [OpKind; 5] = [
    OpKind::Identity,
    OpKind::SparsifyAttention,
    OpKind::PermuteHeads,
    OpKind::CleanInject,
    OpKind::GhostMoe,
];

impl OpKind {
    /// Index within [`OP_POOL`].
    pub fn index(self) -> usize {
        match self {
            OpKind::Identity => 0,
            OpKind::SparsifyAttention => 1,
            OpKind::PermuteHeads => 2,
            OpKind::CleanInject => 3,
            OpKind::GhostMoe => 4,
        }
    }

    /// Stable discriminant used as the op tag in stream derivation.
    pub fn stream_tag(self) -> u64 {
        0x100 + self.index() as u64
    }

    /// Position in the canonical within-block application order.
    /// `Identity` sorts last and is dropped by composition.
    fn canonical_rank(self) -> usize {
        match self {
            OpKind::CleanInject => 0,
            OpKind::PermuteHeads => 1,
            OpKind::SparsifyAttention => 2,
            OpKind::GhostMoe => 3,
            OpKind::Identity => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::SparsifyAttention => "sparsify",
            OpKind::PermuteHeads => "permute",
            OpKind::CleanInject => "clean",
            OpKind::GhostMoe => "moe",
        }
    }
}

/// How dropped attention logits are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Dropped logits become 0 (they still contribute exp(0) after softmax).
    Multiplicative,
    /// Dropped logits become -1e9, removing them from the softmax.
    NegInf,
}

/// An operation with bound parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum OpSpec {
    Identity,
    Sparsify { ratio: f64, mode: MaskMode },
    Permute { layer_prob: f64, head_ratio: f64 },
    CleanInject { ratio: f64 },
    GhostMoe { experts: usize, drop: f64 },
}

impl OpSpec {
    pub fn kind(&self) -> OpKind {
        match self {
            OpSpec::Identity => OpKind::Identity,
            OpSpec::Sparsify { .. } => OpKind::SparsifyAttention,
            OpSpec::Permute { .. } => OpKind::PermuteHeads,
            OpSpec::CleanInject { .. } => OpKind::CleanInject,
            OpSpec::GhostMoe { .. } => OpKind::GhostMoe,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OpSpec::Identity => true,
            OpSpec::Sparsify { ratio, .. } => (0.0..=1.0).contains(&ratio),
            OpSpec::Permute { layer_prob, head_ratio } => {
                (0.0..=1.0).contains(&layer_prob) && (0.0..=1.0).contains(&head_ratio)
            }
            OpSpec::CleanInject { ratio } => (0.0..=1.0).contains(&ratio),
            OpSpec::GhostMoe { experts, drop } => experts >= 1 && (0.0..1.0).contains(&drop),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("operation parameters out of range: {self:?}")))
        }
    }
}

/// One sampled operation bound to its RNG stream.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub spec: OpSpec,
    pub stream: u64,
}

/// The active transforms of one block, in canonical order.
#[derive(Clone, Debug, Default)]
pub struct BlockSchedule {
    ops: Vec<OpInstance>,
}

impl BlockSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn ops(&self) -> &[OpInstance] {
        &self.ops
    }

    pub fn find(&self, kind: OpKind) -> Option<&OpInstance> {
        self.ops.iter().find(|i| i.spec.kind() == kind)
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// Per-block schedules for one forward pass; length equals the model depth.
#[derive(Clone, Debug)]
pub struct BlockModSchedule {
    pub blocks: Vec<BlockSchedule>,
}

impl BlockModSchedule {
    /// All blocks untouched.
    pub fn neutral(num_layers: usize) -> Self {
        Self { blocks: (0..num_layers).map(|_| BlockSchedule::empty()).collect() }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Sorts sampled operations into canonical order, dropping `Identity`.
/// Duplicate kinds are a contract error; parameters are range-checked.
pub fn compose_block_mods(sampled: Vec<OpInstance>) -> Result<BlockSchedule> {
    for inst in &sampled {
        inst.spec.validate()?;
    }
    let mut kinds: Vec<OpKind> = sampled.iter().map(|i| i.spec.kind()).collect();
    kinds.sort_by_key(|k| k.index());
    if kinds.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Contract(format!("duplicate operation kinds in block schedule: {kinds:?}")));
    }
    let mut ops: Vec<OpInstance> =
        sampled.into_iter().filter(|i| i.spec.kind() != OpKind::Identity).collect();
    ops.sort_by_key(|i| i.spec.kind().canonical_rank());
    Ok(BlockSchedule { ops })
}

/// Clean activations captured from a benign pass of the same image:
/// one `[1+N, D]` tensor (class token plus patch tokens) per block input.
/// Captured under neutral mods; must be refreshed whenever the
/// robustification tokens change.
#[derive(Clone, Debug)]
pub struct CleanContext {
    pub layers: Vec<Tensor>,
}

impl CleanContext {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Multiplies every pre-softmax logit by an independent Bernoulli(1-r)
/// draw. `r = 0` is the neutral setting and returns the input unchanged;
/// in `NegInf` mode dropped entries are replaced with -1e9 instead.
pub fn sparsify_attention(
    logits: &[Tensor],
    ratio: f64,
    mode: MaskMode,
    stream: u64,
) -> Result<Vec<Tensor>> {
    OpSpec::Sparsify { ratio, mode }.validate()?;
    if ratio == 0.0 {
        return Ok(logits.to_vec());
    }
    let mut rng = StreamRng::from_stream_id(stream);
    let mut out = Vec::with_capacity(logits.len());
    for head in logits {
        let keep: Vec<f64> =
            (0..head.numel()).map(|_| if rng.bernoulli(1.0 - ratio) { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::new(head.shape().to_vec(), keep.clone())?;
        let masked = head.mul(&mask)?;
        out.push(match mode {
            MaskMode::Multiplicative => masked,
            MaskMode::NegInf => {
                let penalty: Vec<f64> =
                    keep.iter().map(|&k| if k == 0.0 { -1e9 } else { 0.0 }).collect();
                masked.add(&Tensor::new(head.shape().to_vec(), penalty)?)?
            }
        });
    }
    Ok(out)
}

/// With probability `layer_prob` (one draw per call), selects
/// `ceil(head_ratio * H)` heads without replacement and applies a uniform
/// random permutation to their whole logit matrices. Value projections are
/// untouched by construction: the permutation happens before softmax and
/// value aggregation.
pub fn permute_heads(
    logits: Vec<Tensor>,
    layer_prob: f64,
    head_ratio: f64,
    stream: u64,
) -> Result<Vec<Tensor>> {
    OpSpec::Permute { layer_prob, head_ratio }.validate()?;
    let mut rng = StreamRng::from_stream_id(stream);
    if !rng.bernoulli(layer_prob) {
        return Ok(logits);
    }
    let heads = logits.len();
    let k = (head_ratio * heads as f64).ceil() as usize;
    if k < 2 {
        return Ok(logits);
    }
    let selected = rng.sample_without_replacement(heads, k);
    let perm = rng.permutation(k);
    let mut out = logits.clone();
    for (slot, &src) in perm.iter().enumerate() {
        out[selected[slot]] = logits[selected[src]].clone();
    }
    Ok(out)
}

/// Appends `ceil(ratio * N)` clean patch-token activations for this layer
/// (uniform sample without replacement, class token excluded). The clean
/// rows are constants: no gradient flows back into the context.
pub fn inject_clean_tokens(
    seq: &TokenSequence,
    clean: &CleanContext,
    layer: usize,
    ratio: f64,
    stream: u64,
) -> Result<TokenSequence> {
    OpSpec::CleanInject { ratio }.validate()?;
    let ctx = clean.layers.get(layer).ok_or_else(|| {
        Error::State(format!(
            "clean context has {} layers, block {layer} requested",
            clean.layers.len()
        ))
    })?;
    let n_patches = ctx.shape()[0] - 1;
    let k = (ratio * n_patches as f64).ceil() as usize;
    if k == 0 {
        return Ok(seq.clone());
    }
    let mut rng = StreamRng::from_stream_id(stream);
    let idx: Vec<usize> =
        rng.sample_without_replacement(n_patches, k).into_iter().map(|i| i + 1).collect();
    let picked = ctx.detach().gather_rows(&idx)?;
    let tokens = concat_rows(&[&seq.tokens, &picked])?;
    let mut roles = seq.roles.clone();
    roles.extend(std::iter::repeat(TokenRole::InjectedClean).take(k));
    Ok(TokenSequence { tokens, roles })
}

/// Ghost mixture-of-experts replacement for the FFN: draws
/// `q ~ U{1..experts}` and averages `q` passes of the shared FFN, each with
/// an independent inverted-dropout mask (scale `1/(1-drop)`) applied to the
/// hidden activations after GELU. Masks are shared across tokens within an
/// expert and independent across experts.
pub fn ghost_moe(
    z: &Tensor,
    layer: &LayerParams,
    experts: usize,
    drop: f64,
    stream: u64,
) -> Result<Tensor> {
    OpSpec::GhostMoe { experts, drop }.validate()?;
    let mut rng = StreamRng::from_stream_id(stream);
    let q = 1 + rng.next_below(experts as u64) as usize;

    let hidden = z.matmul(&layer.w1)?.add_row(&layer.b1)?.gelu();
    let (t, f) = (hidden.shape()[0], hidden.shape()[1]);
    let scale = 1.0 / (1.0 - drop);

    let mut sum: Option<Tensor> = None;
    for _ in 0..q {
        let row: Vec<f64> =
            (0..f).map(|_| if rng.bernoulli(1.0 - drop) { scale } else { 0.0 }).collect();
        let mut full = Vec::with_capacity(t * f);
        for _ in 0..t {
            full.extend_from_slice(&row);
        }
        let mask = Tensor::new(vec![t, f], full)?;
        let expert = hidden.mul(&mask)?.matmul(&layer.w2)?.add_row(&layer.b2)?;
        sum = Some(match sum {
            None => expert,
            Some(acc) => acc.add(&expert)?,
        });
    }
    Ok(sum.expect("at least one expert").scale(1.0 / q as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_id, tag};

    fn head(vals: Vec<f64>, t: usize) -> Tensor {
        Tensor::new(vec![t, t], vals).unwrap()
    }

    #[test]
    fn compose_orders_canonically() {
        let inst = |spec| OpInstance { spec, stream: 1 };
        let sched = compose_block_mods(vec![
            inst(OpSpec::GhostMoe { experts: 2, drop: 0.1 }),
            inst(OpSpec::Sparsify { ratio: 0.2, mode: MaskMode::Multiplicative }),
        ])
        .unwrap();
        let kinds: Vec<OpKind> = sched.ops().iter().map(|i| i.spec.kind()).collect();
        assert_eq!(kinds, vec![OpKind::SparsifyAttention, OpKind::GhostMoe]);

        let sched = compose_block_mods(vec![
            inst(OpSpec::CleanInject { ratio: 0.5 }),
            inst(OpSpec::Permute { layer_prob: 1.0, head_ratio: 1.0 }),
            inst(OpSpec::Sparsify { ratio: 0.2, mode: MaskMode::Multiplicative }),
        ])
        .unwrap();
        let kinds: Vec<OpKind> = sched.ops().iter().map(|i| i.spec.kind()).collect();
        assert_eq!(
            kinds,
            vec![OpKind::CleanInject, OpKind::PermuteHeads, OpKind::SparsifyAttention]
        );
    }

    #[test]
    fn compose_identity_absorbs_nothing() {
        let sched = compose_block_mods(vec![OpInstance { spec: OpSpec::Identity, stream: 0 }]).unwrap();
        assert!(sched.is_empty());
    }

    #[test]
    fn compose_rejects_duplicates() {
        let inst = |r| OpInstance {
            spec: OpSpec::Sparsify { ratio: r, mode: MaskMode::Multiplicative },
            stream: 0,
        };
        let err = compose_block_mods(vec![inst(0.1), inst(0.2)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sparsify_neutral_returns_input() {
        let h = head(vec![0.3, -0.4, 0.5, 0.9], 2);
        let out = sparsify_attention(&[h.clone()], 0.0, MaskMode::Multiplicative, 7).unwrap();
        assert!(out[0].bits_eq(&h));
    }

    #[test]
    fn sparsify_full_drop_zeroes_all_logits() {
        let h = head(vec![0.3, -0.4, 0.5, 0.9], 2);
        let out = sparsify_attention(&[h], 1.0, MaskMode::Multiplicative, 7).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.0));
        let attn = out[0].softmax_rows();
        for row in attn.data().chunks(2) {
            assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sparsify_hand_example() {
        // Row [2, 1] with mask [1, 0] -> [2, 0] -> softmax [0.880797, 0.119203].
        let masked = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap().softmax_rows();
        assert!((masked.data()[0] - 0.880797).abs() < 1e-6);
        assert!((masked.data()[1] - 0.119203).abs() < 1e-6);
        // A seeded draw that actually produces mask [1, 0] on a 1x2 head.
        let mut found = false;
        for s in 0..64 {
            let h = Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap();
            let out = sparsify_attention(&[h], 0.5, MaskMode::Multiplicative, s).unwrap();
            if out[0].data() == [2.0, 0.0] {
                let sm = out[0].softmax_rows();
                assert!((sm.data()[0] - 0.880797).abs() < 1e-6);
                found = true;
                break;
            }
        }
        assert!(found, "no seed in 0..64 produced mask [1,0]");
    }

    #[test]
    fn sparsify_neginf_removes_entries() {
        let h = head(vec![2.0, 1.0, 0.5, -0.5], 2);
        let out = sparsify_attention(&[h], 1.0, MaskMode::NegInf, 3).unwrap();
        assert!(out[0].data().iter().all(|&v| v == -1e9));
        // Softmax over an all-dropped row is still a valid distribution.
        let sm = out[0].softmax_rows();
        for row in sm.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_neutral_prob_is_identity() {
        let a = head(vec![1.0, 2.0, 3.0, 4.0], 2);
        let b = head(vec![5.0, 6.0, 7.0, 8.0], 2);
        let out = permute_heads(vec![a.clone(), b.clone()], 0.0, 1.0, 9).unwrap();
        assert!(out[0].bits_eq(&a) && out[1].bits_eq(&b));
    }

    #[test]
    fn permute_preserves_head_multiset() {
        let heads: Vec<Tensor> =
            (0..4).map(|i| head(vec![i as f64, 1.0, 2.0, 3.0], 2)).collect();
        let stream = stream_id(5, &[tag::OP_DRAW, 0, 0, 1]);
        let out = permute_heads(heads.clone(), 1.0, 1.0, stream).unwrap();
        // Every input head appears exactly once in the output.
        let mut matched = vec![false; 4];
        for o in &out {
            let pos = heads
                .iter()
                .position(|h| h.bits_eq(o))
                .expect("output head not found in inputs");
            assert!(!matched[pos]);
            matched[pos] = true;
        }
    }

    #[test]
    fn permute_is_reproducible() {
        let heads: Vec<Tensor> =
            (0..4).map(|i| head(vec![i as f64, -1.0, 0.5, 2.0], 2)).collect();
        let a = permute_heads(heads.clone(), 1.0, 0.5, 42).unwrap();
        let b = permute_heads(heads, 1.0, 0.5, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn ghost_moe_neutral_is_plain_ffn() {
        use crate::vit::{ffn_dense, ViTConfig, ViTParams};
        let cfg = ViTConfig::toy();
        let params = ViTParams::init(&cfg, 3);
        let mut rng = StreamRng::from_tags(4, &[tag::OP_DRAW]);
        let z = Tensor::randn(vec![5, cfg.hidden_dim], 1.0, &mut rng);
        let plain = ffn_dense(&z, &params.layers[0], None).unwrap();
        let moe = ghost_moe(&z, &params.layers[0], 1, 0.0, 77).unwrap();
        assert!(moe.bits_eq(&plain));
    }

    #[test]
    fn ghost_moe_zero_drop_matches_ffn_for_any_expert_count() {
        use crate::vit::{ffn_dense, ViTConfig, ViTParams};
        let cfg = ViTConfig::toy();
        let params = ViTParams::init(&cfg, 3);
        let mut rng = StreamRng::from_tags(9, &[tag::OP_DRAW]);
        let z = Tensor::randn(vec![5, cfg.hidden_dim], 1.0, &mut rng);
        let plain = ffn_dense(&z, &params.layers[1], None).unwrap();
        for stream in [1u64, 2, 3, 4, 5] {
            let moe = ghost_moe(&z, &params.layers[1], 5, 0.0, stream).unwrap();
            assert!(moe.max_abs_diff(&plain).unwrap() < 1e-12);
        }
    }

    #[test]
    fn ghost_moe_matches_explicit_mask_average() {
        use crate::vit::{ViTConfig, ViTParams};
        let cfg = ViTConfig::toy();
        let params = ViTParams::init(&cfg, 3);
        let lp = &params.layers[0];
        let mut rng = StreamRng::from_tags(8, &[tag::OP_DRAW]);
        let z = Tensor::randn(vec![4, cfg.hidden_dim], 1.0, &mut rng);
        let (experts, drop, stream) = (3usize, 0.3f64, 123u64);

        let moe = ghost_moe(&z, lp, experts, drop, stream).unwrap();

        // Replay the stream: q, then per-expert masks, then a dense-loop FFN.
        let mut replay = StreamRng::from_stream_id(stream);
        let q = 1 + replay.next_below(experts as u64) as usize;
        let f = cfg.ffn_hidden;
        let t = 4;
        let hidden = z.matmul(&lp.w1).unwrap().add_row(&lp.b1).unwrap().gelu();
        let scale = 1.0 / (1.0 - drop);
        let mut acc = vec![0.0; t * cfg.hidden_dim];
        for _ in 0..q {
            let mask: Vec<f64> =
                (0..f).map(|_| if replay.bernoulli(1.0 - drop) { scale } else { 0.0 }).collect();
            for i in 0..t {
                for o in 0..cfg.hidden_dim {
                    let mut v = lp.b2.data()[o];
                    for j in 0..f {
                        v += hidden.data()[i * f + j] * mask[j] * lp.w2.data()[j * cfg.hidden_dim + o];
                    }
                    acc[i * cfg.hidden_dim + o] += v;
                }
            }
        }
        for a in &mut acc {
            *a /= q as f64;
        }
        let oracle = Tensor::new(vec![t, cfg.hidden_dim], acc).unwrap();
        assert!(moe.max_abs_diff(&oracle).unwrap() < 1e-10, "q={q}");
    }
}
