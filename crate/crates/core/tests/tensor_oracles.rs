//! Hand-computed and finite-difference oracles for every tensor primitive.

use rvit_core::rng::{tag, StreamRng};
use rvit_core::tensor::gradcheck::finite_diff_check;
use rvit_core::tensor::ops::{concat_cols, concat_rows};
use rvit_core::tensor::{backward, Tape, Tensor};
use rvit_core::Error;

const FD_H: f64 = 1e-6;
const FD_TOL: f64 = 1e-6;
const POINTS: usize = 20;

/// Zero of the GELU derivative; draws this close to it make the relative
/// finite-difference error ill-conditioned irrespective of correctness.
const GELU_GRAD_ZERO: f64 = -0.751791606282;

fn rand_tensor(shape: Vec<usize>, rng: &mut StreamRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal draws conditioned away from the listed points (redraw within
/// `band`), so every checked coordinate has a well-conditioned gradient.
fn rand_tensor_avoiding(
    shape: Vec<usize>,
    rng: &mut StreamRng,
    avoid: &[f64],
    band: f64,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = rng.next_normal();
            if avoid.iter().all(|a| (v - a).abs() > band) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Linear readout with fixed, shape-derived weights in +-[0.5, 1.5]:
/// every output position gets a distinct nonvanishing weight, so wiring
/// bugs change the value while every input gradient stays well away from
/// zero.
fn readout(t: &Tensor) -> rvit_core::Result<Tensor> {
    let mut rng = StreamRng::from_tags(7777, &[tag::GRADCHECK, t.numel() as u64]);
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
    Ok(t.mul(&w)?.mean_all())
}

/// Runs `finite_diff_check` at `POINTS` random inputs drawn from a
/// per-sweep stream and returns the worst relative error.
fn sweep_tagged<F>(stream: u64, shape: Vec<usize>, f: F) -> f64
where
    F: Fn(&Tensor) -> rvit_core::Result<Tensor>,
{
    sweep_h(stream, shape, FD_H, f)
}

/// `sweep_tagged` with an explicit step. Operations that are linear in the
/// checked operand have zero truncation error, so a larger step there
/// strictly reduces rounding noise.
fn sweep_h<F>(stream: u64, shape: Vec<usize>, h: f64, f: F) -> f64
where
    F: Fn(&Tensor) -> rvit_core::Result<Tensor>,
{
    let mut rng = StreamRng::from_tags(2024, &[tag::GRADCHECK, stream]);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = rand_tensor(shape.clone(), &mut rng);
        let err = finite_diff_check(&f, &x, h).expect("check runs");
        worst = worst.max(err);
    }
    worst
}

const FD_H_LINEAR: f64 = 1e-4;

/// `sweep_tagged` with input coordinates conditioned away from the given
/// ill-conditioned points.
fn sweep_avoiding<F>(stream: u64, shape: Vec<usize>, avoid: &[f64], f: F) -> f64
where
    F: Fn(&Tensor) -> rvit_core::Result<Tensor>,
{
    let mut rng = StreamRng::from_tags(2024, &[tag::GRADCHECK, stream]);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = rand_tensor_avoiding(shape.clone(), &mut rng, avoid, 2e-3);
        let err = finite_diff_check(&f, &x, FD_H).expect("check runs");
        worst = worst.max(err);
    }
    worst
}

#[test]
fn matmul_identity_and_zero_cases() {
    let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(a.matmul(&eye).unwrap().bits_eq(&a));

    let z = Tensor::zeros(vec![3, 3]);
    let b = Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 3]).unwrap();
    let out = z.matmul(&b).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_hand_oracle() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![4, 2]);
    match a.matmul(&b) {
        Err(Error::Dimension { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_trivial_cases() {
    let row = Tensor::new(vec![1, 4], vec![0.7; 4]).unwrap().softmax_rows();
    for &v in row.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let single = Tensor::new(vec![1, 1], vec![123.4]).unwrap().softmax_rows();
    assert_eq!(single.data(), &[1.0]);
}

#[test]
fn softmax_hand_oracle() {
    let out = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap().softmax_rows();
    assert!((out.data()[0] - 0.880797).abs() < 1e-6);
    assert!((out.data()[1] - 0.119203).abs() < 1e-6);
}

#[test]
fn softmax_rows_sum_to_one_and_stay_in_unit_interval() {
    let mut rng = StreamRng::from_tags(1, &[tag::GRADCHECK]);
    for _ in 0..50 {
        let x = Tensor::randn(vec![5, 7], 30.0, &mut rng);
        let y = x.softmax_rows();
        for row in y.data().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn backward_sum_of_squares() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let xt = tape.watch(&x);
    let loss = xt.mul(&xt).unwrap().sum_all();
    let grads = backward(&loss).unwrap();
    assert_eq!(grads.wrt(&xt).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_constant_gives_zero_gradient() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let tape = Tape::new();
    let xt = tape.watch(&x);
    let c = tape.watch(&Tensor::scalar(5.0));
    let grads = backward(&c).unwrap();
    assert_eq!(grads.wrt(&xt).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_requires_scalar_and_tape() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let xt = tape.watch(&x);
    assert!(matches!(backward(&xt), Err(Error::Contract(_))));
    assert!(matches!(backward(&x.mul(&x).unwrap()), Err(Error::State(_))));
}

#[test]
fn backward_consumes_the_tape() {
    let x = Tensor::scalar(2.0);
    let tape = Tape::new();
    let xt = tape.watch(&x);
    let y = xt.mul(&xt).unwrap();
    backward(&y).unwrap();
    assert!(matches!(backward(&y), Err(Error::State(_))));
    assert!(matches!(xt.mul(&xt), Err(Error::State(_))));
}

#[test]
fn backward_is_linear_in_the_output() {
    // grad(a*f + b*g) == a*grad(f) + b*grad(g) within 1e-10.
    let mut rng = StreamRng::from_tags(9, &[tag::GRADCHECK]);
    for _ in 0..10 {
        let x = rand_tensor(vec![6], &mut rng);
        let a = rng.uniform(-2.0, 2.0);
        let b = rng.uniform(-2.0, 2.0);

        let grad_of = |build: &dyn Fn(&Tensor) -> Tensor| -> Vec<f64> {
            let tape = Tape::new();
            let xt = tape.watch(&x);
            let out = build(&xt);
            backward(&out).unwrap().wrt(&xt).unwrap().data().to_vec()
        };

        let f = |t: &Tensor| t.mul(t).unwrap().sum_all();
        let g = |t: &Tensor| t.gelu().mean_all();
        let combined = grad_of(&|t| f(t).scale(a).add(&g(t).scale(b)).unwrap());
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        for i in 0..6 {
            let want = a * gf[i] + b * gg[i];
            assert!((combined[i] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn finite_diff_detects_nondeterminism() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let counter = AtomicU64::new(0);
    let x = Tensor::scalar(1.0);
    let err = finite_diff_check(
        |t| {
            let bump = counter.fetch_add(1, Ordering::SeqCst) as f64;
            Ok(t.scale(1.0 + bump * 1e-9).sum_all())
        },
        &x,
        FD_H,
    );
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn finite_diff_polynomial_is_exact_to_rounding() {
    let mut rng = StreamRng::from_tags(5, &[tag::GRADCHECK]);
    let x = rand_tensor(vec![5], &mut rng);
    let err = finite_diff_check(|t| Ok(t.mul(t)?.sum_all()), &x, FD_H).unwrap();
    assert!(err < 1e-9, "sum of squares FD error {err}");
}

#[test]
fn finite_diff_softmax_pick_first() {
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
    let err = finite_diff_check(|t| t.softmax_rows().pick(0), &x, FD_H).unwrap();
    assert!(err < 1e-6, "softmax-pick FD error {err}");
}

#[test]
fn fd_matmul_both_sides() {
    let mut rng = StreamRng::from_tags(11, &[tag::GRADCHECK]);
    let fixed = rand_tensor(vec![4, 3], &mut rng);
    let err = sweep_h(1, vec![2, 4], FD_H_LINEAR, |x| readout(&x.matmul(&fixed)?));
    assert!(err < FD_TOL, "matmul lhs {err}");
    let fixed = rand_tensor(vec![5, 3], &mut rng);
    let err = sweep_h(2, vec![3, 2], FD_H_LINEAR, |x| readout(&fixed.matmul(x)?));
    assert!(err < FD_TOL, "matmul rhs {err}");
}

#[test]
fn fd_elementwise_ops() {
    let mut rng = StreamRng::from_tags(12, &[tag::GRADCHECK]);
    let other = rand_tensor(vec![3, 4], &mut rng);
    assert!(sweep_tagged(3, vec![3, 4], |x| Ok(x.add(&other)?.mean_all())) < FD_TOL);
    assert!(sweep_tagged(4, vec![3, 4], |x| Ok(other.sub(x)?.mean_all())) < FD_TOL);
    assert!(sweep_tagged(5, vec![3, 4], |x| Ok(x.mul(&other)?.mean_all())) < FD_TOL);
    assert!(sweep_tagged(6, vec![3, 4], |x| Ok(x.mul(x)?.mean_all())) < FD_TOL);
    assert!(sweep_tagged(7, vec![3, 4], |x| Ok(x.scale(-1.75).mean_all())) < FD_TOL);
}

#[test]
fn fd_mask_multiply() {
    // Binary mask as the constant operand.
    let mut rng = StreamRng::from_tags(13, &[tag::GRADCHECK]);
    let mask_vals: Vec<f64> =
        (0..12).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::new(vec![3, 4], mask_vals).unwrap();
    assert!(sweep_tagged(8, vec![3, 4], |x| Ok(x.mul(&mask)?.sum_all())) < FD_TOL);
}

#[test]
fn fd_layer_norm_all_inputs() {
    let mut rng = StreamRng::from_tags(14, &[tag::GRADCHECK]);
    let gamma = rand_tensor(vec![6], &mut rng);
    let beta = rand_tensor(vec![6], &mut rng);
    let x0 = rand_tensor(vec![4, 6], &mut rng);
    assert!(
        sweep_tagged(9, vec![4, 6], |x| Ok(x.layer_norm(&gamma, &beta, 1e-5)?.mean_all())) < FD_TOL,
        "layer_norm wrt x"
    );
    assert!(
        sweep_tagged(10, vec![6], |g| Ok(x0.layer_norm(g, &beta, 1e-5)?.mean_all())) < FD_TOL,
        "layer_norm wrt gamma"
    );
    assert!(
        sweep_tagged(11, vec![6], |b| Ok(x0.layer_norm(&gamma, b, 1e-5)?.mean_all())) < FD_TOL,
        "layer_norm wrt beta"
    );
}

#[test]
fn fd_activations_and_reductions() {
    assert!(
        sweep_avoiding(12, vec![3, 5], &[GELU_GRAD_ZERO], |x| Ok(x.gelu().mean_all())) < FD_TOL,
        "gelu"
    );
    assert!(
        sweep_avoiding(13, vec![3, 5], &[0.0], |x| Ok(x.relu().sum_all())) < FD_TOL,
        "relu"
    );
    assert!(sweep_tagged(14, vec![3, 5], |x| x.softmax_rows().pick(2)) < FD_TOL, "softmax");
    assert!(sweep_tagged(15, vec![7], |x| Ok(x.mean_all())) < FD_TOL, "mean");
    assert!(sweep_tagged(16, vec![7], |x| Ok(x.sum_all())) < FD_TOL, "sum");
}

#[test]
fn fd_shape_ops() {
    let mut rng = StreamRng::from_tags(15, &[tag::GRADCHECK]);
    let other = rand_tensor(vec![2, 4], &mut rng);
    assert!(
        sweep_tagged(17, vec![2, 4], |x| readout(&concat_rows(&[x, &other])?)) < FD_TOL,
        "concat_rows"
    );
    assert!(
        sweep_tagged(18, vec![2, 4], |x| readout(&concat_cols(&[&other, x])?)) < FD_TOL,
        "concat_cols"
    );
    assert!(
        sweep_tagged(19, vec![4, 4], |x| readout(&x.slice_rows(1, 3)?)) < FD_TOL,
        "slice_rows"
    );
    assert!(
        sweep_tagged(20, vec![4, 4], |x| readout(&x.slice_cols(0, 2)?)) < FD_TOL,
        "slice_cols"
    );
    assert!(sweep_tagged(21, vec![3, 4], |x| readout(&x.transpose()?)) < FD_TOL, "transpose");
    assert!(
        sweep_tagged(22, vec![3, 4], |x| readout(&x.reshape(vec![4, 3])?)) < FD_TOL,
        "reshape"
    );
    // permute-along-axis via gather_rows with a permutation (includes
    // duplicate-free reorder) and with repeats (accumulation path).
    assert!(
        sweep_tagged(23, vec![4, 3], |x| readout(&x.gather_rows(&[3, 0, 2, 1])?)) < FD_TOL,
        "gather_rows permutation"
    );
    assert!(
        sweep_tagged(24, vec![4, 3], |x| readout(&x.gather_rows(&[1, 1, 2])?)) < FD_TOL,
        "gather_rows repeats"
    );
    assert!(sweep_tagged(25, vec![2], |x| Ok(x.pick(1)?)) < FD_TOL, "pick");
}

#[test]
fn fd_patches_conv_pool() {
    let mut rng = StreamRng::from_tags(16, &[tag::GRADCHECK]);
    assert!(
        sweep_tagged(26, vec![8, 8, 2], |x| readout(&x.extract_patches(4)?)) < FD_TOL,
        "extract_patches"
    );
    let w = Tensor::randn(vec![3, 3, 2, 3], 0.5, &mut rng);
    let b = rand_tensor(vec![3], &mut rng);
    let x0 = rand_tensor(vec![6, 6, 2], &mut rng);
    assert!(
        sweep_h(27, vec![6, 6, 2], FD_H_LINEAR, |x| readout(&x.conv2d_same(&w, &b)?)) < FD_TOL,
        "conv2d wrt input"
    );
    assert!(
        sweep_h(28, vec![3, 3, 2, 3], FD_H_LINEAR, |wt| readout(&x0.conv2d_same(wt, &b)?)) < FD_TOL,
        "conv2d wrt weight"
    );
    assert!(
        sweep_h(29, vec![3], FD_H_LINEAR, |bias| readout(&x0.conv2d_same(&w, bias)?)) < FD_TOL,
        "conv2d wrt bias"
    );
    assert!(sweep_tagged(30, vec![6, 6, 2], |x| readout(&x.avg_pool2()?)) < FD_TOL, "avg_pool2");
}

#[test]
fn fd_add_row_and_cross_entropy() {
    let mut rng = StreamRng::from_tags(17, &[tag::GRADCHECK]);
    let v = rand_tensor(vec![5], &mut rng);
    let x0 = rand_tensor(vec![3, 5], &mut rng);
    assert!(sweep_tagged(31, vec![3, 5], |x| readout(&x.add_row(&v)?)) < FD_TOL, "add_row x");
    assert!(sweep_tagged(32, vec![5], |b| readout(&x0.add_row(b)?)) < FD_TOL, "add_row v");
    assert!(sweep_tagged(33, vec![6], |x| x.cross_entropy_logits(2)) < FD_TOL, "cross_entropy");
}

#[test]
fn cross_entropy_reference_values() {
    let uniform = Tensor::new(vec![10], vec![0.25; 10]).unwrap();
    let loss = uniform.cross_entropy_logits(3).unwrap().scalar_value().unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);

    let mut vals = vec![0.0; 10];
    vals[4] = 50.0;
    let saturated = Tensor::new(vec![10], vals).unwrap();
    let loss = saturated.cross_entropy_logits(4).unwrap().scalar_value().unwrap();
    assert!(loss >= 0.0 && loss < 1e-12, "saturated loss {loss}");

    let logits = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let loss = logits.cross_entropy_logits(0).unwrap().scalar_value().unwrap();
    assert!((loss - 2.407606).abs() < 1e-6);

    assert!(matches!(logits.cross_entropy_logits(3), Err(Error::Input(_))));
}

#[test]
fn deterministic_composite_pipeline() {
    let run = || {
        let mut rng = StreamRng::from_tags(77, &[tag::GRADCHECK, 4]);
        let x = rand_tensor(vec![6, 6, 2], &mut rng);
        let w = rand_tensor(vec![3, 3, 2, 2], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        x.conv2d_same(&w, &b)
            .unwrap()
            .relu()
            .avg_pool2()
            .unwrap()
            .reshape(vec![1, 18])
            .unwrap()
            .softmax_rows()
            .sum_all()
            .scalar_value()
            .unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn mixed_tape_operands_are_a_contract_error() {
    let x = Tensor::scalar(1.0);
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.watch(&x);
    let b = t2.watch(&x);
    assert!(matches!(a.add(&b), Err(Error::Contract(_))));
}
