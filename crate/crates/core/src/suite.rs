//! The gradient-integrity suite behind the `gradcheck` command: every
//! differentiable primitive is compared against central differences at
//! seeded random points, then the full model is checked end to end with
//! every block modifier active under frozen streams and with the
//! robustification tokens as a second leaf.

use crate::error::Result;
use crate::redundancy::{compose_block_mods, BlockModSchedule, MaskMode, OpInstance, OpSpec};
use crate::rng::{stream_id, tag, StreamRng};
use crate::tensor::gradcheck::{finite_diff_check, finite_diff_check_split};
use crate::tensor::ops::{concat_cols, concat_rows};
use crate::tensor::Tensor;
use crate::vit::{capture_clean_context, cross_entropy, vit_forward_full, ViTConfig, ViTParams};

/// Per-primitive tolerance at 20 random points.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// End-to-end tolerance for the full model.
pub const MODEL_TOL: f64 = 1e-5;
/// Central-difference step for the end-to-end checks.
pub const MODEL_H: f64 = 1e-6;
/// Gradient magnitude below which a coordinate's central difference is
/// rounding noise; such coordinates are held to an absolute bound instead.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;
/// Absolute bound for the near-zero-gradient coordinates.
pub const SMALL_ABS_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn sweep<F>(name: &str, stream: u64, shape: Vec<usize>, h: f64, f: F) -> Result<GradcheckEntry>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut rng = StreamRng::from_tags(0x6c0de, &[tag::GRADCHECK, stream]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Tensor::randn(shape.clone(), 1.0, &mut rng);
        worst = worst.max(finite_diff_check(&f, &x, h)?);
    }
    Ok(GradcheckEntry {
        name: name.to_string(),
        max_rel: worst,
        tolerance: PRIMITIVE_TOL,
        passed: worst < PRIMITIVE_TOL,
    })
}

/// Shape-derived fixed readout weights in +-[0.5, 1.5]: keeps every input
/// gradient of a structural op away from zero while remaining sensitive
/// to wiring mistakes.
fn readout(t: &Tensor) -> Result<Tensor> {
    let mut rng = StreamRng::from_tags(0xbeef, &[tag::GRADCHECK, t.numel() as u64]);
    let weights: Vec<f64> = (0..t.numel())
        .map(|_| {
            let mag = rng.uniform(0.5, 1.5);
            if rng.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let w = Tensor::new(t.shape().to_vec(), weights)?;
    t.mul(&w)?.mean_all().pick(0)
}

/// Normal draws redrawn away from the GELU derivative zero, where the
/// relative error of a central difference is ill-conditioned.
fn smooth_draw(shape: Vec<usize>, rng: &mut StreamRng) -> Tensor {
    const GELU_GRAD_ZERO: f64 = -0.751791606282;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = rng.next_normal();
            if (v - GELU_GRAD_ZERO).abs() > 2e-3 && v.abs() > 1e-4 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid draw")
}

fn sweep_smooth<F>(name: &str, stream: u64, shape: Vec<usize>, f: F) -> Result<GradcheckEntry>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut rng = StreamRng::from_tags(0x6c0de, &[tag::GRADCHECK, stream]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = smooth_draw(shape.clone(), &mut rng);
        worst = worst.max(finite_diff_check(&f, &x, MODEL_H)?);
    }
    Ok(GradcheckEntry {
        name: name.to_string(),
        max_rel: worst,
        tolerance: PRIMITIVE_TOL,
        passed: worst < PRIMITIVE_TOL,
    })
}

/// Runs every per-primitive check. Linear-operand checks use a larger
/// step (their truncation error is zero, so the larger step only removes
/// rounding noise).
pub fn primitive_checks() -> Result<Vec<GradcheckEntry>> {
    const H: f64 = 1e-6;
    const H_LIN: f64 = 1e-4;
    let mut rng = StreamRng::from_tags(0xf1f0, &[tag::GRADCHECK]);
    let b_mat = Tensor::randn(vec![4, 3], 1.0, &mut rng);
    let a_mat = Tensor::randn(vec![5, 3], 1.0, &mut rng);
    let other = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let mask = {
        let vals: Vec<f64> =
            (0..12).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![3, 4], vals)?
    };
    let gamma = Tensor::randn(vec![6], 1.0, &mut rng);
    let beta = Tensor::randn(vec![6], 1.0, &mut rng);
    let x_ln = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    let conv_w = Tensor::randn(vec![3, 3, 2, 3], 0.5, &mut rng);
    let conv_b = Tensor::randn(vec![3], 1.0, &mut rng);
    let conv_x = Tensor::randn(vec![6, 6, 2], 1.0, &mut rng);
    let row_v = Tensor::randn(vec![5], 1.0, &mut rng);
    let row_x = Tensor::randn(vec![3, 5], 1.0, &mut rng);

    Ok(vec![
        sweep("matmul (lhs)", 1, vec![2, 4], H_LIN, |x| readout(&x.matmul(&b_mat)?))?,
        sweep("matmul (rhs)", 2, vec![3, 2], H_LIN, |x| readout(&a_mat.matmul(x)?))?,
        sweep("add", 3, vec![3, 4], H, |x| Ok(x.add(&other)?.mean_all()))?,
        sweep("sub", 4, vec![3, 4], H, |x| Ok(other.sub(x)?.mean_all()))?,
        sweep("elementwise multiply", 5, vec![3, 4], H, |x| Ok(x.mul(&other)?.mean_all()))?,
        sweep("mask multiply", 6, vec![3, 4], H, |x| Ok(x.mul(&mask)?.sum_all()))?,
        sweep("scale", 7, vec![3, 4], H, |x| Ok(x.scale(-1.75).mean_all()))?,
        sweep("add_row (matrix)", 8, vec![3, 5], H_LIN, |x| readout(&x.add_row(&row_v)?))?,
        sweep("add_row (vector)", 9, vec![5], H_LIN, |v| readout(&row_x.add_row(v)?))?,
        sweep("layer_norm (x)", 10, vec![4, 6], H, |x| {
            Ok(x.layer_norm(&gamma, &beta, 1e-5)?.mean_all())
        })?,
        sweep("layer_norm (scale)", 11, vec![6], H, |g| {
            Ok(x_ln.layer_norm(g, &beta, 1e-5)?.mean_all())
        })?,
        sweep("layer_norm (shift)", 12, vec![6], H, |b| {
            Ok(x_ln.layer_norm(&gamma, b, 1e-5)?.mean_all())
        })?,
        sweep_smooth("gelu", 13, vec![3, 5], |x| Ok(x.gelu().mean_all()))?,
        sweep_smooth("relu", 14, vec![3, 5], |x| Ok(x.relu().sum_all()))?,
        sweep("softmax", 15, vec![3, 5], H, |x| x.softmax_rows().pick(2))?,
        sweep("mean", 16, vec![7], H, |x| Ok(x.mean_all()))?,
        sweep("sum", 17, vec![7], H, |x| Ok(x.sum_all()))?,
        sweep("concatenate (rows)", 18, vec![2, 4], H_LIN, |x| {
            readout(&concat_rows(&[x, &other.slice_rows(0, 2)?])?)
        })?,
        sweep("concatenate (cols)", 19, vec![3, 2], H_LIN, |x| {
            readout(&concat_cols(&[&other, x])?)
        })?,
        sweep("slice (rows)", 20, vec![4, 4], H_LIN, |x| readout(&x.slice_rows(1, 3)?))?,
        sweep("slice (cols)", 21, vec![4, 4], H_LIN, |x| readout(&x.slice_cols(0, 2)?))?,
        sweep("transpose", 22, vec![3, 4], H_LIN, |x| readout(&x.transpose()?))?,
        sweep("reshape", 23, vec![3, 4], H_LIN, |x| readout(&x.reshape(vec![4, 3])?))?,
        sweep("permute along axis", 24, vec![4, 3], H_LIN, |x| {
            readout(&x.gather_rows(&[3, 0, 2, 1])?)
        })?,
        sweep("gather with repeats", 25, vec![4, 3], H_LIN, |x| {
            readout(&x.gather_rows(&[1, 1, 2])?)
        })?,
        sweep("pick", 26, vec![3], H_LIN, |x| x.pick(1))?,
        sweep("extract_patches", 27, vec![8, 8, 2], H_LIN, |x| readout(&x.extract_patches(4)?))?,
        sweep("cross_entropy", 28, vec![6], H, |x| x.cross_entropy_logits(2))?,
        sweep("conv2d (input)", 29, vec![6, 6, 2], H_LIN, |x| {
            readout(&x.conv2d_same(&conv_w, &conv_b)?)
        })?,
        sweep("conv2d (weight)", 30, vec![3, 3, 2, 3], H_LIN, |w| {
            readout(&conv_x.conv2d_same(w, &conv_b)?)
        })?,
        sweep("conv2d (bias)", 31, vec![3], H_LIN, |b| {
            readout(&conv_x.conv2d_same(&conv_w, b)?)
        })?,
        sweep("avg_pool", 32, vec![6, 6, 2], H_LIN, |x| readout(&x.avg_pool2()?))?,
    ])
}

/// End-to-end checks: the plain model, then the model with every modifier
/// active (both mask modes) under frozen streams, against both the image
/// and the robust-token leaves.
pub fn model_checks() -> Result<Vec<GradcheckEntry>> {
    let cfg = ViTConfig::toy();
    // A larger weight scale keeps input gradients well above the
    // central-difference noise floor; the autodiff path is identical.
    let params = ViTParams::init_with_scale(&cfg, 0xa11, 0.25);
    let mut rng = StreamRng::from_tags(0xa12, &[tag::GRADCHECK]);
    let image =
        Tensor::new(vec![32, 32, 3], (0..3072).map(|_| rng.next_f64()).collect())?;
    let robust = Tensor::randn(vec![4, cfg.hidden_dim], 1.0, &mut rng);
    let clean = capture_clean_context(&image, &params, Some(&robust))?;
    let label = 3;

    let schedule = |mode: MaskMode| -> Result<BlockModSchedule> {
        let blocks = (0..cfg.num_layers)
            .map(|b| {
                compose_block_mods(vec![
                    OpInstance {
                        spec: OpSpec::CleanInject { ratio: 0.3 },
                        stream: stream_id(0xa13, &[b as u64, 1]),
                    },
                    OpInstance {
                        spec: OpSpec::Permute { layer_prob: 1.0, head_ratio: 1.0 },
                        stream: stream_id(0xa13, &[b as u64, 2]),
                    },
                    OpInstance {
                        spec: OpSpec::Sparsify { ratio: 0.3, mode },
                        stream: stream_id(0xa13, &[b as u64, 3]),
                    },
                    OpInstance {
                        spec: OpSpec::GhostMoe { experts: 3, drop: 0.3 },
                        stream: stream_id(0xa13, &[b as u64, 4]),
                    },
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockModSchedule { blocks })
    };

    let mut pixel_rng = StreamRng::from_tags(0xa14, &[tag::GRADCHECK]);
    let pixel_coords: Vec<usize> = pixel_rng.sample_without_replacement(3072, 30);
    let token_coords: Vec<usize> = (0..robust.numel()).collect();

    let mut entries = Vec::new();
    let mut push_split = |name: &str, split: crate::tensor::gradcheck::SplitCheck| {
        let passed = split.max_rel < MODEL_TOL && split.max_abs_small < SMALL_ABS_TOL;
        entries.push(GradcheckEntry {
            name: name.to_string(),
            max_rel: split.max_rel,
            tolerance: MODEL_TOL,
            passed,
        });
    };

    let neutral = BlockModSchedule::neutral(cfg.num_layers);
    let split = finite_diff_check_split(
        |x| cross_entropy(&vit_forward_full(x, &params, &neutral, None, None, None, None)?, label),
        &image,
        MODEL_H,
        &pixel_coords,
        MAGNITUDE_FLOOR,
    )?;
    push_split("vit loss d/d(image), neutral blocks", split);

    for mode in [MaskMode::Multiplicative, MaskMode::NegInf] {
        let sched = schedule(mode)?;
        let name_img = format!("vit loss d/d(image), all modifiers ({mode:?})");
        let split = finite_diff_check_split(
            |x| {
                cross_entropy(
                    &vit_forward_full(x, &params, &sched, Some(&robust), Some(&clean), None, None)?,
                    label,
                )
            },
            &image,
            MODEL_H,
            &pixel_coords,
            MAGNITUDE_FLOOR,
        )?;
        push_split(&name_img, split);

        let name_tok = format!("vit loss d/d(robust tokens), all modifiers ({mode:?})");
        let split = finite_diff_check_split(
            |t| {
                cross_entropy(
                    &vit_forward_full(&image, &params, &sched, Some(t), Some(&clean), None, None)?,
                    label,
                )
            },
            &robust,
            MODEL_H,
            &token_coords,
            MAGNITUDE_FLOOR,
        )?;
        push_split(&name_tok, split);
    }
    Ok(entries)
}

/// The full suite: primitives then model-level checks.
pub fn gradcheck_suite() -> Result<Vec<GradcheckEntry>> {
    let mut entries = primitive_checks()?;
    entries.extend(model_checks()?);
    Ok(entries)
}
