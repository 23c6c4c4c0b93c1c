//! Subcommand implementations. Every artifact embeds the effective
//! config hash and seed, so reruns with the same pair are byte-identical.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rvit_core::advb::{read_advb, write_advb, AdvBatch};
use rvit_core::attack::AttackMethod;
use rvit_core::checkpoint::{load_checkpoint, save_checkpoint};
use rvit_core::config::ExperimentConfig;
use rvit_core::data::{generate_shapes_dataset, load_record_file, ShapesDataset, Split};
use rvit_core::eval::{
    attack_batch, attack_success_rate, redundancy_probe, ProbeKind, TransferReport,
};
use rvit_core::report::{write_probe_csv, write_report, ReportFormat};
use rvit_core::robust::{robustify_global, RobustMode};
use rvit_core::suite::gradcheck_suite;
use rvit_core::zoo::{load_model, save_model, train_zoo as train_zoo_models, ZooModel};
use rvit_core::Tensor;

fn ensure_out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn build_dataset(cfg: &ExperimentConfig) -> anyhow::Result<ShapesDataset> {
    match &cfg.dataset.external_path {
        None => Ok(generate_shapes_dataset(cfg.dataset.n, cfg.dataset.seed)?),
        Some(path) => {
            let (images, labels) = load_record_file(path)?;
            let splits = (0..images.len())
                .map(|i| match (i / 10) % 10 {
                    8 => Split::Val,
                    9 => Split::Test,
                    _ => Split::Train,
                })
                .collect();
            Ok(ShapesDataset { images, labels, splits, seed: cfg.dataset.seed })
        }
    }
}

fn zoo_dir(out: &Path) -> PathBuf {
    out.join("zoo")
}

fn zoo_model_path(out: &Path, name: &str) -> PathBuf {
    zoo_dir(out).join(format!("{name}.rvit"))
}

fn load_zoo(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(ZooModel, Vec<ZooModel>)> {
    let roster = rvit_core::zoo::zoo_roster(&cfg.model);
    let mut models = Vec::new();
    for (name, _) in &roster {
        let path = zoo_model_path(out, name);
        if !path.exists() {
            bail!("missing checkpoint {}; run `rvit train-zoo` first", path.display());
        }
        models.push(load_model(&path)?);
    }
    let surrogate = models.remove(0);
    Ok((surrogate, models))
}

fn test_slice(data: &ShapesDataset, count: usize) -> anyhow::Result<Vec<(Tensor, usize)>> {
    let test = data.split_examples(Split::Test);
    if test.len() < count {
        bail!("test split has {} examples, config asks for {count}", test.len());
    }
    Ok(test.into_iter().take(count).collect())
}

fn robust_tokens_path(out: &Path) -> PathBuf {
    out.join("robust_tokens.rvit")
}

fn method_name(method: AttackMethod) -> &'static str {
    match method {
        AttackMethod::Mi => "mi",
        AttackMethod::Ours => "ours",
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = ensure_out_dir(cfg)?;
    let data = build_dataset(cfg)?;
    let path = out.join("dataset.advb");
    let batch = AdvBatch {
        height: 32,
        width: 32,
        channels: 3,
        epsilon: 0.0,
        seed: cfg.dataset.seed,
        config_hash: cfg.config_hash(),
        images: data.images.clone(),
        labels: data.labels.clone(),
    };
    write_advb(&path, &batch)?;
    let (train, val, test) = (
        data.split_indices(Split::Train).len(),
        data.split_indices(Split::Val).len(),
        data.split_indices(Split::Test).len(),
    );
    println!(
        "wrote {} ({} images: {train} train / {val} val / {test} test)",
        path.display(),
        data.len()
    );
    Ok(())
}

pub fn train_zoo(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = ensure_out_dir(cfg)?;
    std::fs::create_dir_all(zoo_dir(&out))?;
    let data = build_dataset(cfg)?;
    let zoo = train_zoo_models(&data, &cfg.model, &cfg.train, cfg.seed)?;
    let hash = cfg.config_hash();
    for model in zoo.all_models() {
        let path = zoo_model_path(&out, &model.name);
        save_model(&path, model, &hash, cfg.seed)?;
        let gate = if model.clean_accuracy >= rvit_core::zoo::ACCURACY_GATE { "pass" } else { "BELOW GATE" };
        println!(
            "{:<10} clean accuracy {:.3} ({gate}) -> {}",
            model.name,
            model.clean_accuracy,
            path.display()
        );
    }
    Ok(())
}

pub fn attack(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = ensure_out_dir(cfg)?;
    let (surrogate, _) = load_zoo(cfg, &out)?;
    surrogate.gate_check()?;
    let data = build_dataset(cfg)?;
    let examples = test_slice(&data, cfg.attack.count)?;
    let attack_cfg = cfg.attack_config();

    let global_tokens = if attack_cfg.method == AttackMethod::Ours
        && attack_cfg.robust.n_r > 0
        && attack_cfg.robust.mode == RobustMode::Global
    {
        let path = robust_tokens_path(&out);
        if !path.exists() {
            bail!("global robust tokens missing at {}; run `rvit robustify` first", path.display());
        }
        let ckpt = load_checkpoint(&path)?;
        Some(ckpt.robust.context("checkpoint has no robust_tokens section")?)
    } else {
        None
    };

    let vit = surrogate.params.as_vit().context("surrogate is not a transformer")?;
    let batch = attack_batch(vit, &examples, &attack_cfg, global_tokens.as_ref())?;

    let name = method_name(attack_cfg.method);
    let advb_path = out.join(format!("adv_{name}.advb"));
    write_advb(
        &advb_path,
        &AdvBatch {
            height: 32,
            width: 32,
            channels: 3,
            epsilon: attack_cfg.epsilon,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            images: batch.adversarial.clone(),
            labels: batch.labels.clone(),
        },
    )?;

    let mut report = TransferReport::new(cfg.echo(), cfg.config_hash(), vec![cfg.seed]);
    report.policy = batch.mean_policy.clone();
    report.iteration_losses = Some(batch.mean_losses.clone());
    let report_path = out.join("attack_report.json");
    write_report(&report, &report_path, ReportFormat::Json)?;

    println!(
        "attacked {} images with method {name}; wrote {} and {}",
        batch.adversarial.len(),
        advb_path.display(),
        report_path.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig, batch_path: Option<&Path>) -> anyhow::Result<()> {
    let out = ensure_out_dir(cfg)?;
    let default_path = out.join(format!("adv_{}.advb", method_name(cfg.attack.method)));
    let batch_path = batch_path.map(Path::to_path_buf).unwrap_or(default_path);
    let batch = read_advb(&batch_path)
        .with_context(|| format!("reading adversarial batch {}", batch_path.display()))?;

    let (surrogate, victims) = load_zoo(cfg, &out)?;
    for v in &victims {
        v.gate_check()?;
    }
    let data = build_dataset(cfg)?;
    let clean: Vec<Tensor> = test_slice(&data, batch.count())?
        .into_iter()
        .map(|(x, _)| x)
        .collect();

    let mut report = TransferReport::new(cfg.echo(), cfg.config_hash(), vec![cfg.seed]);
    report.victims = victims.iter().map(|v| v.name.clone()).collect();
    let mut cells = Vec::new();
    for victim in &victims {
        let asr = attack_success_rate(
            &victim.params,
            &batch.images,
            &batch.labels,
            cfg.eval.filter,
            Some(&clean),
        )?;
        println!("{:<10} attack success rate {:.4}", victim.name, asr);
        cells.push(asr);
    }
    report.push_row(&surrogate.name, cells);

    let json_path = out.join("transfer.json");
    let csv_path = out.join("transfer.csv");
    write_report(&report, &json_path, ReportFormat::Json)?;
    write_report(&report, &csv_path, ReportFormat::Csv)?;
    println!("mean ASR {:.4}; wrote {} and {}", report.row_avg[0], json_path.display(), csv_path.display());
    Ok(())
}

pub fn probe(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = ensure_out_dir(cfg)?;
    let (surrogate, _) = load_zoo(cfg, &out)?;
    surrogate.gate_check()?;
    let data = build_dataset(cfg)?;
    let slice = test_slice(&data, cfg.probe.count)?;

    let mut curves = Vec::new();
    for kind in ProbeKind::ALL {
        let curve = redundancy_probe(
            &surrogate,
            kind,
            &cfg.probe.ratios,
            &slice,
            cfg.probe.draws,
            cfg.seed,
        )?;
        println!(
            "{:<10} accuracy {:.3} -> {:.3} over ratios {:?}",
            curve.probe,
            curve.points.first().map(|p| p.accuracy).unwrap_or(f64::NAN),
            curve.points.last().map(|p| p.accuracy).unwrap_or(f64::NAN),
            cfg.probe.ratios
        );
        curves.push(curve);
    }
    let path = out.join("probes.csv");
    write_probe_csv(&curves, &cfg.config_hash(), cfg.seed, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn robustify(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = ensure_out_dir(cfg)?;
    let (surrogate, _) = load_zoo(cfg, &out)?;
    surrogate.gate_check()?;
    if cfg.robust.n_r == 0 {
        bail!("robust.n_r is 0; nothing to train");
    }
    let data = build_dataset(cfg)?;
    let train = data.split_examples(Split::Train);
    if train.len() < cfg.robust.calibration {
        bail!("train split has {} examples, calibration needs {}", train.len(), cfg.robust.calibration);
    }
    let calibration: Vec<(Tensor, usize)> =
        train.into_iter().take(cfg.robust.calibration).collect();

    let vit = surrogate.params.as_vit().context("surrogate is not a transformer")?;
    let attack_cfg = cfg.attack_config();
    let tokens = robustify_global(&calibration, vit, &attack_cfg, &cfg.robust, cfg.seed)?;

    let path = robust_tokens_path(&out);
    save_checkpoint(
        &path,
        &[],
        Some(&tokens),
        serde_json::json!({
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "calibration": cfg.robust.calibration,
        }),
    )?;
    println!(
        "trained {} global robust tokens over {} calibration images; wrote {}",
        tokens.count(),
        cfg.robust.calibration,
        path.display()
    );
    Ok(())
}

pub fn gradcheck(_cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let entries = gradcheck_suite()?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed { "pass" } else { "FAIL" };
        println!("{status}  {:<48} max rel err {:.3e} (tol {:.0e})", e.name, e.max_rel, e.tolerance);
        if !e.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}
