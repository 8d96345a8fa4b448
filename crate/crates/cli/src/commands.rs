//! Subcommand implementations. Every command writes its run manifest into the
//! output directory before doing any real work.

use crate::config::AppConfig;
use crate::CliError;
use riqa_core::checkpoint::{load_checkpoint, save_checkpoint};
use riqa_core::corpus::{generate_corpus, load_corpus, Corpus};
use riqa_core::dataset::{load_labeled_dataset, mos_for_level, patch_size_warning, split_reference_ids};
use riqa_core::distort::{synthesize_ranked_group, DistortionKind, DistortionSpec};
use riqa_core::fixtures::reference_set;
use riqa_core::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
use riqa_core::loss::{
    allpairs_gradient, max_relative_error, naive_pairwise_gradient, RankingScoreLoss,
};
use riqa_core::metrics::{
    evaluate_model, level_means, score_histograms, write_eval_csv, write_histogram_csv,
};
use riqa_core::net::{NetworkSpec, ParameterStore};
use riqa_core::trainer::{
    finetune_regression, resume_train_ranking, train_ranking, train_ranking_randompair_baseline,
    RankStrategy, RegressionScoreLoss, TrainReport,
};
use riqa_core::{seeded_rng, Tensor};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: String,
    config_path: String,
    seed: u64,
    out_dir: String,
    tool_version: &'static str,
    resolved: &'a AppConfig,
}

/// Written before any long-running work; the embedded resolved config is
/// enough to reproduce the run exactly.
fn write_run_manifest(cfg: &AppConfig, command: &str, config_path: Option<&Path>) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::User(format!("cannot create output dir {}: {e}", cfg.out.display())))?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config_path
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "(builtin defaults)".to_string()),
        seed: cfg.seed,
        out_dir: cfg.out.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION"),
        resolved: cfg,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| CliError::Internal(anyhow::anyhow!("manifest serialization: {e}")))?;
    let path = cfg.out.join(format!("run_manifest_{command}.toml"));
    std::fs::write(&path, text)
        .map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn load_references(cfg: &AppConfig) -> Result<Vec<(String, Tensor)>, CliError> {
    let refs = &cfg.references;
    if refs.synthetic {
        if refs.count == 0 {
            return Err(CliError::User("references.count must be positive".into()));
        }
        return Ok(reference_set(refs.count, refs.width, refs.height, cfg.seed));
    }
    let dir = refs
        .dir
        .as_ref()
        .ok_or_else(|| CliError::User("references.dir must be set when synthetic = false".into()))?;
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::User(format!("cannot read reference dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::User(format!(
            "no .pgm reference images found in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p
            .file_stem()
            .map(|v| v.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ref".into());
        let image = riqa_core::pgm::read_pgm(&p)?;
        out.push((id, image));
    }
    Ok(out)
}

pub fn generate(cfg: &AppConfig, config_path: Option<&Path>) -> Result<(), CliError> {
    write_run_manifest(cfg, "generate", config_path)?;
    let references = load_references(cfg)?;
    let kinds = cfg.distortions.resolve()?;
    let corpus_dir = cfg.corpus_dir();
    let manifest = generate_corpus(&references, &kinds, cfg.seed, &corpus_dir)?;
    println!(
        "corpus: {} references x {} kinds -> {} distorted images at {}",
        manifest.references.len(),
        manifest.kinds.len(),
        manifest.distorted_image_count(),
        corpus_dir.display()
    );
    Ok(())
}

fn load_corpus_or_user_error(cfg: &AppConfig) -> Result<Corpus, CliError> {
    let dir = cfg.corpus_dir();
    load_corpus(&dir).map_err(|e| {
        CliError::User(format!(
            "cannot load corpus at {} (run `riqa generate` first): {e}",
            dir.display()
        ))
    })
}

fn report_summary(report: &TrainReport, what: &str) {
    println!(
        "{what}: {} iterations, final loss {:.6}, mean tail loss {:.6}, {} forward passes, {:.1}s",
        report.rows.len(),
        report.final_loss(),
        report.mean_tail_loss(50),
        report.total_forward_passes(),
        report.wall_seconds
    );
}

pub fn train_rank(
    cfg: &AppConfig,
    config_path: Option<&Path>,
    strategy_flag: Option<&str>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    write_run_manifest(cfg, "train-rank", config_path)?;
    let corpus = load_corpus_or_user_error(cfg)?;
    let (train_ids, _) = split_reference_ids(
        &corpus.reference_ids(),
        cfg.eval.test_fraction,
        corpus.manifest.seed,
    );
    let groups = corpus.groups_for(&train_ids);

    if let Some(warning) = patch_size_warning(corpus.min_image_side(), cfg.train.patch) {
        eprintln!("warning: {warning}");
    }

    let strategy: RankStrategy = match strategy_flag {
        Some(s) => s.parse().map_err(|e: riqa_core::Error| CliError::User(e.to_string()))?,
        None => cfg.train.strategy()?,
    };
    let train_cfg = cfg.train.to_train_config(cfg.seed);
    let spec = NetworkSpec::desk_default();

    let (ckpt, report) = match (resume, strategy) {
        (Some(path), RankStrategy::Efficient) => {
            let loaded = load_checkpoint(path)?;
            resume_train_ranking(loaded, &groups, train_cfg.iterations)?
        }
        (Some(_), RankStrategy::RandomPair) => {
            return Err(CliError::User(
                "--resume is only supported for the efficient strategy".into(),
            ));
        }
        (None, RankStrategy::Efficient) => train_ranking(&spec, &groups, &train_cfg)?,
        (None, RankStrategy::RandomPair) => {
            train_ranking_randompair_baseline(&spec, &groups, &train_cfg)?
        }
    };

    let ckpt_path = cfg.out.join(format!("rank_{strategy}.riqa"));
    save_checkpoint(&ckpt_path, &ckpt)?;
    report.write_csv(&cfg.out.join(format!("rank_{strategy}_report.csv")))?;
    report_summary(&report, &format!("train-rank[{strategy}]"));
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

pub fn finetune(cfg: &AppConfig, config_path: Option<&Path>) -> Result<(), CliError> {
    write_run_manifest(cfg, "finetune", config_path)?;
    let init_path = cfg
        .finetune
        .init_from
        .clone()
        .unwrap_or_else(|| cfg.out.join("rank_efficient.riqa"));
    let start = load_checkpoint(&init_path).map_err(|e| {
        CliError::User(format!(
            "cannot load ranking checkpoint {} (run `riqa train-rank` first): {e}",
            init_path.display()
        ))
    })?;

    let dataset = load_labeled_dataset(&cfg.labels_path())?;
    let (train_samples, _) = dataset.split(cfg.eval.test_fraction);
    let train_cfg = cfg.finetune.to_train_config(cfg.seed);
    let (ckpt, report) = finetune_regression(&start, &train_samples, &train_cfg)?;

    let ckpt_path = cfg.out.join("finetune.riqa");
    save_checkpoint(&ckpt_path, &ckpt)?;
    report.write_csv(&cfg.out.join("finetune_report.csv"))?;
    report_summary(&report, "finetune");
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

pub fn eval(cfg: &AppConfig, config_path: Option<&Path>) -> Result<(), CliError> {
    write_run_manifest(cfg, "eval", config_path)?;
    let ckpt_path = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("finetune.riqa"));
    let ckpt = load_checkpoint(&ckpt_path).map_err(|e| {
        CliError::User(format!("cannot load checkpoint {}: {e}", ckpt_path.display()))
    })?;

    let dataset = load_labeled_dataset(&cfg.labels_path())?;
    let (train_samples, test_samples) = dataset.split(cfg.eval.test_fraction);
    let samples = match cfg.eval.split.as_str() {
        "test" => test_samples,
        "train" => train_samples,
        "all" => dataset.samples.iter().collect(),
        other => return Err(CliError::User(format!("eval.split must be test|train|all, got `{other}`"))),
    };

    let result = evaluate_model(
        &ckpt.spec,
        &ckpt.params,
        &samples,
        cfg.eval.crops_per_image,
        cfg.eval.patch,
        cfg.seed,
    )?;
    println!("eval[{}]: {}", cfg.eval.split, result.summary_line());
    for note in &result.notes {
        println!("note: {note}");
    }
    write_eval_csv(&cfg.out.join("eval.csv"), &result)?;

    // level-separation histograms over the same reference split
    if let Ok(corpus) = load_corpus(&cfg.corpus_dir()) {
        let ids: Vec<String> = samples
            .iter()
            .map(|s| s.reference_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let groups = corpus.groups_for(&ids);
        if !groups.is_empty() {
            let hists = score_histograms(
                &ckpt.spec,
                &ckpt.params,
                &groups,
                cfg.eval.crops_per_image,
                cfg.eval.patch,
                cfg.seed,
            )?;
            write_histogram_csv(&cfg.out.join("histograms.csv"), &hists)?;
            for kind_entry in &corpus.manifest.kinds {
                let means = level_means(&hists, &kind_entry.kind);
                let line: Vec<String> =
                    means.iter().map(|(l, m)| format!("L{l}={m:.4}")).collect();
                println!("mean score by level [{}]: {}", kind_entry.kind, line.join(" "));
            }
        }
    }
    Ok(())
}

pub fn bench(cfg: &AppConfig, config_path: Option<&Path>) -> Result<(), CliError> {
    write_run_manifest(cfg, "bench", config_path)?;
    let corpus = load_corpus_or_user_error(cfg)?;
    let first = corpus
        .groups
        .first()
        .ok_or_else(|| CliError::User("corpus has no groups".into()))?;
    let reference = first.reference.clone();

    let spec = NetworkSpec::desk_default();
    let params = ParameterStore::init(&spec, cfg.seed);

    println!("n  efficient  naive  ratio  eff_ms  naive_ms  max_rel_err");
    let mut csv = String::from("n,efficient_passes,naive_passes,ratio,efficient_ms,naive_ms,max_rel_err\n");

    for &n in &cfg.bench.levels {
        if n < 2 {
            return Err(CliError::User(format!("bench level count {n} must be at least 2")));
        }
        let sigmas: Vec<f32> = (1..=n).map(|v| v as f32).collect();
        let dspec = DistortionSpec::new(DistortionKind::GaussianBlur, sigmas, corpus.manifest.seed)
            .map_err(|e| CliError::User(e.to_string()))?;
        let group = synthesize_ranked_group(&reference, &first.reference_id, &dspec)?;

        let mut rng = seeded_rng(cfg.seed);
        let batch =
            riqa_core::dataset::assemble_minibatch(&[&group], cfg.bench.patch, 1.0, &mut rng)?;

        let t0 = Instant::now();
        let eff = allpairs_gradient(&spec, &params, &batch.images, &batch.labels)?;
        let eff_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let naive = naive_pairwise_gradient(&spec, &params, &batch.images, &batch.labels)?;
        let naive_ms = t1.elapsed().as_secs_f64() * 1e3;

        let rel = max_relative_error(&eff.grads, &naive.grads);
        if rel >= 1e-6 {
            return Err(CliError::Internal(anyhow::anyhow!(
                "gradient routes disagree at n={n}: relative error {rel:.3e}"
            )));
        }
        if eff.forward_passes != n || naive.forward_passes != n * n - n {
            return Err(CliError::Internal(anyhow::anyhow!(
                "pass accounting broken at n={n}: {} vs {}",
                eff.forward_passes,
                naive.forward_passes
            )));
        }
        let ratio = naive.forward_passes / eff.forward_passes;
        println!(
            "{n}  {:9}  {:5}  {:5}  {eff_ms:6.1}  {naive_ms:8.1}  {rel:.2e}",
            eff.forward_passes, naive.forward_passes, ratio
        );
        csv.push_str(&format!(
            "{n},{},{},{ratio},{eff_ms},{naive_ms},{rel}\n",
            eff.forward_passes, naive.forward_passes
        ));
    }

    let path = cfg.out.join("bench.csv");
    std::fs::write(&path, csv).map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))?;
    println!("wall-time ratios are informational; the pass counts are the verified quantity");
    Ok(())
}

fn print_gradcheck(report: &GradCheckReport, what: &str) {
    println!(
        "{what}: {} entries checked, {} valid, max rel err {:.3e} (tolerance {:.0e})",
        report.total_checked(),
        report.total_valid(),
        report.max_rel_err(),
        report.tolerance
    );
    for p in &report.params {
        let status = if p.within { "ok" } else { "FAIL" };
        println!(
            "  {:18} checked={:4} kinked={:3} max_rel={:.3e}  {status}",
            p.name, p.checked, p.kinked, p.max_rel_err
        );
    }
}

pub fn gradcheck(cfg: &AppConfig, config_path: Option<&Path>) -> Result<(), CliError> {
    write_run_manifest(cfg, "gradcheck", config_path)?;
    let gc = &cfg.gradcheck;
    let spec = NetworkSpec::desk_default();
    let params = ParameterStore::init(&spec, cfg.seed);

    // one ranked blur group as the probe batch
    let reference = riqa_core::fixtures::synthetic_reference(64, 64, cfg.seed);
    let sigmas: Vec<f32> = (1..=gc.batch.max(2)).map(|v| v as f32).collect();
    let levels = sigmas.len();
    let dspec = DistortionSpec::new(DistortionKind::GaussianBlur, sigmas, cfg.seed)
        .map_err(|e| CliError::User(e.to_string()))?;
    let group = synthesize_ranked_group(&reference, "gradcheck", &dspec)?;
    let mut rng = seeded_rng(cfg.seed);
    let batch = riqa_core::dataset::assemble_minibatch(&[&group], gc.patch, 1.0, &mut rng)?;

    let check_cfg = GradCheckConfig {
        step: gc.step,
        tolerance: gc.tolerance,
        max_samples_per_param: Some(gc.samples_per_param),
        seed: cfg.seed,
    };

    let ranking = RankingScoreLoss { labels: &batch.labels };
    let rank_report = gradient_check(&spec, &params, &batch.images, &ranking, &check_cfg)?;
    print_gradcheck(&rank_report, "ranking loss");

    let targets: Vec<f32> = batch
        .level_indices
        .iter()
        .map(|l| mos_for_level(*l, levels))
        .collect();
    let regression = RegressionScoreLoss { targets };
    let ft_report = gradient_check(&spec, &params, &batch.images, &regression, &check_cfg)?;
    print_gradcheck(&ft_report, "fine-tuning loss");

    if rank_report.all_within() && ft_report.all_within() {
        println!("gradcheck: all parameters within tolerance");
        Ok(())
    } else {
        Err(CliError::Internal(anyhow::anyhow!(
            "gradcheck flagged parameters beyond tolerance"
        )))
    }
}
