//! End-to-end attack and robustification behavior: neutral reductions,
//! feasibility invariants, determinism, and the adversarial-training
//! loss oracle.

use rvit_core::attack::{
    mi_fgsm_plain, run_redundant_attack, AttackConfig, AttackMethod, OpsParams,
};
use rvit_core::data::{generate_shapes_dataset, Split};
use rvit_core::redundancy::BlockModSchedule;
use rvit_core::rng::{tag, StreamRng};
use rvit_core::robust::{
    append_robust_tokens, robustify_dynamic, robustify_global, RobustParams,
};
use rvit_core::tensor::{backward, Tape, Tensor};
use rvit_core::vit::{cross_entropy, patch_embed, vit_forward, ViTConfig, ViTParams};
use rvit_core::zoo::{train_model, ModelArch, TrainConfig};

fn rand_image(seed: u64) -> Tensor {
    let mut rng = StreamRng::from_tags(seed, &[tag::DATASET, 1]);
    Tensor::new(vec![32, 32, 3], (0..3072).map(|_| rng.next_f64()).collect()).unwrap()
}

fn neutral_ours_config(seed: u64) -> AttackConfig {
    AttackConfig {
        method: AttackMethod::Ours,
        ops: OpsParams::neutral(),
        robust: RobustParams { n_r: 0, ..Default::default() },
        seed,
        ..Default::default()
    }
}

#[test]
fn all_neutral_settings_reduce_to_plain_attack_bitwise() {
    let params = ViTParams::init(&ViTConfig::toy(), 5);
    let image = rand_image(6);
    let cfg = neutral_ours_config(7);

    let (plain, plain_losses) =
        mi_fgsm_plain(&image, 3, &params, &cfg).unwrap();
    let out = run_redundant_attack(&image, 3, &params, &cfg, 0, None).unwrap();
    assert!(out.x_adv.bits_eq(&plain), "neutral full attack must equal the plain attack");
    assert_eq!(out.losses.len(), plain_losses.len());
    for (a, b) in out.losses.iter().zip(&plain_losses) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(out.robust.is_none());
}

#[test]
fn identity_forced_policy_samples_only_identity() {
    let policy = rvit_core::policy::OpPolicy::identity_forced(4, 2);
    let mut rng = StreamRng::from_tags(8, &[tag::POLICY_SAMPLE]);
    for _ in 0..20 {
        let sets = policy.sample_schedule(&mut rng);
        for set in sets {
            // The second without-replacement draw has no mass left, so
            // exactly one op is sampled and it is Identity.
            assert_eq!(set, vec![rvit_core::redundancy::OpKind::Identity]);
        }
    }
}

#[test]
fn attack_respects_ball_and_pixel_range() {
    let params = ViTParams::init(&ViTConfig::toy(), 9);
    let image = rand_image(10);
    let mut cfg = AttackConfig { seed: 11, ..Default::default() };
    cfg.method = AttackMethod::Ours;
    cfg.robust.n_r = 2;
    cfg.robust.outer_steps = 2;
    cfg.robust.inner_steps = 2;
    let out = run_redundant_attack(&image, 4, &params, &cfg, 3, None).unwrap();
    let eps = cfg.epsilon + 1e-12;
    for (&a, &c) in out.x_adv.data().iter().zip(image.data()) {
        assert!((a - c).abs() <= eps);
        assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn epsilon_zero_returns_clean_image() {
    let params = ViTParams::init(&ViTConfig::toy(), 12);
    let image = rand_image(13);
    let cfg = AttackConfig { epsilon: 0.0, alpha: Some(0.1), ..Default::default() };
    let (x_adv, _) = mi_fgsm_plain(&image, 2, &params, &cfg).unwrap();
    assert!(x_adv.bits_eq(&image));
}

#[test]
fn full_attack_is_deterministic() {
    let params = ViTParams::init(&ViTConfig::toy(), 14);
    let image = rand_image(15);
    let mut cfg = AttackConfig { seed: 16, method: AttackMethod::Ours, ..Default::default() };
    cfg.robust.n_r = 4;
    cfg.robust.outer_steps = 2;
    cfg.robust.inner_steps = 2;
    cfg.steps = 4;
    let a = run_redundant_attack(&image, 5, &params, &cfg, 7, None).unwrap();
    let b = run_redundant_attack(&image, 5, &params, &cfg, 7, None).unwrap();
    assert!(a.x_adv.bits_eq(&b.x_adv));
    assert_eq!(a.policy.matrix(), b.policy.matrix());
    // A different image index derives different op streams.
    let c = run_redundant_attack(&image, 5, &params, &cfg, 8, None).unwrap();
    assert!(!a.x_adv.bits_eq(&c.x_adv), "image index must reach the op streams");
}

#[test]
fn policy_receives_updates_during_attack() {
    let params = ViTParams::init(&ViTConfig::toy(), 17);
    let image = rand_image(18);
    let cfg = AttackConfig { seed: 19, method: AttackMethod::Ours, steps: 6, ..Default::default() };
    let out = run_redundant_attack(&image, 6, &params, &cfg, 0, None).unwrap();
    assert!(out.policy.baseline() != 0.0, "baseline absorbed iteration losses");
    for row in out.policy.matrix() {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.01 - 1e-15));
    }
    assert_eq!(out.losses.len(), 6);
}

#[test]
fn robust_tokens_zero_rounds_equal_their_init() {
    let params = ViTParams::init(&ViTConfig::toy(), 20);
    let image = rand_image(21);
    let cfg = AttackConfig::default();
    let rcfg = RobustParams { n_r: 4, outer_steps: 0, ..Default::default() };
    let rt = robustify_dynamic(&image, 1, &params, &cfg, &rcfg, 22).unwrap();
    // Replay the documented init stream.
    let mut rng = StreamRng::from_tags(22, &[tag::ROBUST_INIT]);
    let want = Tensor::randn(vec![4, 32], rcfg.init_std, &mut rng);
    assert!(rt.tokens.bits_eq(&want));
}

#[test]
fn robustification_never_touches_model_weights() {
    let params = ViTParams::init(&ViTConfig::toy(), 23);
    let before: Vec<Tensor> = params.to_vec();
    let image = rand_image(24);
    let cfg = AttackConfig::default();
    let rcfg =
        RobustParams { n_r: 4, outer_steps: 3, inner_steps: 2, ..Default::default() };
    let _ = robustify_dynamic(&image, 2, &params, &cfg, &rcfg, 25).unwrap();
    for (a, b) in params.to_vec().iter().zip(&before) {
        assert!(a.bits_eq(b));
    }
}

#[test]
fn dynamic_robustification_is_reproducible() {
    let params = ViTParams::init(&ViTConfig::toy(), 26);
    let image = rand_image(27);
    let cfg = AttackConfig::default();
    let rcfg =
        RobustParams { n_r: 4, outer_steps: 3, inner_steps: 2, ..Default::default() };
    let a = robustify_dynamic(&image, 3, &params, &cfg, &rcfg, 28).unwrap();
    let b = robustify_dynamic(&image, 3, &params, &cfg, &rcfg, 28).unwrap();
    assert!(a.tokens.bits_eq(&b.tokens));
}

#[test]
fn global_single_image_batch_one_matches_dynamic() {
    let params = ViTParams::init(&ViTConfig::toy(), 29);
    let image = rand_image(30);
    let cfg = AttackConfig::default();
    let rcfg = RobustParams {
        n_r: 4,
        outer_steps: 3,
        inner_steps: 2,
        batch_size: 1,
        ..Default::default()
    };
    let dynamic = robustify_dynamic(&image, 4, &params, &cfg, &rcfg, 31).unwrap();
    let global =
        robustify_global(&[(image.clone(), 4)], &params, &cfg, &rcfg, 31).unwrap();
    assert!(dynamic.tokens.bits_eq(&global.tokens));
}

#[test]
fn global_requires_calibration() {
    let params = ViTParams::init(&ViTConfig::toy(), 32);
    let cfg = AttackConfig::default();
    let rcfg = RobustParams { n_r: 4, ..Default::default() };
    assert!(matches!(
        robustify_global(&[], &params, &cfg, &rcfg, 1),
        Err(rvit_core::Error::Input(_))
    ));
}

#[test]
fn append_never_moves_the_class_token() {
    let params = ViTParams::init(&ViTConfig::toy(), 33);
    let image = rand_image(34);
    let seq = patch_embed(&image, &params).unwrap();
    let cfg = AttackConfig::default();
    let rcfg = RobustParams { n_r: 3, outer_steps: 0, ..Default::default() };
    let rt = robustify_dynamic(&image, 0, &params, &cfg, &rcfg, 35).unwrap();
    let extended = append_robust_tokens(&seq, &rt).unwrap();
    assert_eq!(extended.roles[0], rvit_core::vit::TokenRole::Cls);
    for j in 0..32 {
        assert_eq!(extended.tokens.data()[j].to_bits(), seq.tokens.data()[j].to_bits());
    }
    // Zero tokens: unchanged sequence.
    let none = rvit_core::robust::RobustTokens {
        tokens: Tensor::zeros(vec![1, 32]).slice_rows(0, 1).unwrap(),
        ..rt.clone()
    };
    let _ = none;
}

/// Adversarial training reduces the loss a fresh perturbation causes:
/// attack the initial-token model once, then compare the loss of that
/// perturbed input under initial vs trained tokens.
#[test]
fn robustification_lowers_adversarial_loss_on_trained_model() {
    let data = generate_shapes_dataset(600, 40).unwrap();
    let arch = ModelArch::Vit(ViTConfig::toy());
    let tcfg = TrainConfig { epochs: 2, batch_size: 32, ..Default::default() };
    let trained = train_model(&data, &arch, &tcfg, 41).unwrap();
    let params = match trained.params {
        rvit_core::zoo::ModelParams::Vit(p) => p,
        _ => unreachable!(),
    };

    let attack_cfg = AttackConfig::default();
    let rcfg = RobustParams {
        n_r: 8,
        outer_steps: 5,
        inner_steps: 5,
        ..Default::default()
    };
    let neutral = BlockModSchedule::neutral(4);
    let test = data.split_examples(Split::Test);

    let loss_with = |image: &Tensor, label: usize, tokens: &Tensor| -> f64 {
        cross_entropy(&vit_forward(image, &params, &neutral, Some(tokens)).unwrap(), label)
            .unwrap()
            .scalar_value()
            .unwrap()
    };

    let mut improved = 0;
    let total = 50;
    for i in 0..total {
        let (image, label) = &test[i];
        let seed = 100 + i as u64;
        let init_only = RobustParams { outer_steps: 0, ..rcfg.clone() };
        let rt_init = robustify_dynamic(image, *label, &params, &attack_cfg, &init_only, seed)
            .unwrap();
        let rt_final =
            robustify_dynamic(image, *label, &params, &attack_cfg, &rcfg, seed).unwrap();

        // Fresh perturbation against the initial-token model.
        let mut inner = attack_cfg.clone();
        inner.steps = 5;
        let (x_adv, _) = rvit_core::attack::mi_fgsm_core(image, &inner, |x, _| {
            let tape = Tape::new();
            let xt = tape.watch(x);
            let logits = vit_forward(&xt, &params, &neutral, Some(&rt_init.tokens)).unwrap();
            let loss = cross_entropy(&logits, *label).unwrap();
            let grads = backward(&loss).unwrap();
            Ok((loss.scalar_value().unwrap(), grads.wrt(&xt).unwrap()))
        })
        .unwrap();

        if loss_with(&x_adv, *label, &rt_final.tokens)
            <= loss_with(&x_adv, *label, &rt_init.tokens)
        {
            improved += 1;
        }
    }
    assert!(
        improved * 100 >= total * 80,
        "adversarial training helped on only {improved}/{total} instances"
    );
}
