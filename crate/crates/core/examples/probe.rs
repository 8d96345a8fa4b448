use riqa_core::dataset::{mos_for_level, split_reference_ids, LabeledSample};
use riqa_core::distort::{synthesize_ranked_group, DistortionKind, DistortionSpec, RankedGroup};
use riqa_core::fixtures::reference_set;
use riqa_core::metrics::{evaluate_model, level_means, score_histograms, strictly_monotone_decreasing};
use riqa_core::net::NetworkSpec;
use riqa_core::trainer::{finetune_regression, train_ranking, train_ranking_randompair_baseline, TrainConfig, TrainPhase};
use std::time::Instant;

fn blur_corpus(refs: usize, size: usize, seed: u64, grid: Vec<f32>) -> Vec<RankedGroup> {
    reference_set(refs, size, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let spec = DistortionSpec::new(DistortionKind::GaussianBlur, grid.clone(), seed ^ i as u64)
                .unwrap();
            synthesize_ranked_group(&img, &id, &spec).unwrap()
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let iters: u64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(2000);
    let patch: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(48);
    let groups_per_batch: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(2);
    let seed: u64 = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(11);

    let nrefs: usize = std::env::args().nth(6).and_then(|v| v.parse().ok()).unwrap_or(20);
    let geometric = std::env::args().nth(10).map(|v| v == "geo").unwrap_or(false);
    let grid = if geometric { vec![0.5, 1.0, 2.0, 4.0, 8.0] } else { vec![1.0, 2.0, 3.0, 4.0, 5.0] };
    let groups = blur_corpus(nrefs, 96, 500, grid);
    let ids: Vec<String> = groups.iter().map(|g| g.reference_id.clone()).collect();
    let mut uniq = ids.clone();
    uniq.dedup();
    let (train_ids, test_ids) = split_reference_ids(&uniq, 0.2, 42);
    let train_groups: Vec<&RankedGroup> = groups
        .iter()
        .filter(|g| train_ids.contains(&g.reference_id))
        .collect();
    let test_groups: Vec<&RankedGroup> = groups
        .iter()
        .filter(|g| test_ids.contains(&g.reference_id))
        .collect();
    println!("train refs {} test refs {}", train_ids.len(), test_ids.len());

    let wd: f64 = args.get(7).and_then(|v| v.parse().ok()).unwrap_or(5e-4);
    let margin: f32 = args.get(8).and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let eval_patch: usize = args.get(9).and_then(|v| v.parse().ok()).unwrap_or(patch);
    let cfg = TrainConfig {
        iterations: iters,
        learning_rate: lr,
        lr_step: 800,
        patch,
        groups_per_batch,
        seed,
        weight_decay: wd,
        margin,
        ..TrainConfig::desk_rank(seed)
    };
    let spec = NetworkSpec::desk_default();

    let t0 = Instant::now();
    let (ckpt, rep) = train_ranking(&spec, &train_groups, &cfg).unwrap();
    println!(
        "efficient: {:?} final={:.4} tail={:.4} passes={} time={:.0}s",
        (lr, iters, patch, groups_per_batch),
        rep.final_loss(),
        rep.mean_tail_loss(100),
        rep.total_forward_passes(),
        t0.elapsed().as_secs_f64()
    );
    for row in rep.rows.iter().step_by((iters as usize / 10).max(1)) {
        println!("  iter {:5} loss {:.4}", row.iteration, row.loss);
    }

    let t1 = Instant::now();
    let (_, base) = train_ranking_randompair_baseline(&spec, &train_groups, &cfg).unwrap();
    println!(
        "baseline:  final={:.4} tail={:.4} passes={} time={:.0}s",
        base.final_loss(),
        base.mean_tail_loss(100),
        base.total_forward_passes(),
        t1.elapsed().as_secs_f64()
    );

    // level separation on held-out refs
    let hists = score_histograms(&ckpt.spec, &ckpt.params, &test_groups, 30, eval_patch, 1).unwrap();
    let means = level_means(&hists, "gaussian_blur");
    println!("held-out level means: {means:?}");
    println!("strictly monotone: {}", strictly_monotone_decreasing(&means));

    // srocc(score, quality rank)
    let samples: Vec<LabeledSample> = test_groups
        .iter()
        .flat_map(|g| {
            g.distorted.iter().map(|(level, img)| LabeledSample {
                path: format!("{}/{level}", g.reference_id),
                reference_id: g.reference_id.clone(),
                image: img.clone(),
                mos: mos_for_level(*level, g.level_count()),
            })
        })
        .collect();
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    let eval = evaluate_model(&ckpt.spec, &ckpt.params, &refs, 30, eval_patch, 2).unwrap();
    println!("held-out rank eval: {}", eval.summary_line());

    // within-group SROCC per held-out reference
    use riqa_core::metrics::srocc;
    let mut per_group = Vec::new();
    for g in &test_groups {
        let rows: Vec<&riqa_core::metrics::EvalRow> = eval
            .rows
            .iter()
            .filter(|r| r.id.starts_with(&format!("{}/", g.reference_id)))
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.y_hat).collect();
        per_group.push((g.reference_id.clone(), srocc(&y, &p).unwrap_or(f64::NAN)));
    }
    println!("within-group srocc: {per_group:?}");

    // train-set pooled srocc at fresh crops
    let tr_samples: Vec<LabeledSample> = train_groups
        .iter()
        .flat_map(|g| {
            g.distorted.iter().map(|(level, img)| LabeledSample {
                path: format!("{}/{level}", g.reference_id),
                reference_id: g.reference_id.clone(),
                image: img.clone(),
                mos: mos_for_level(*level, g.level_count()),
            })
        })
        .collect();
    let tr_refs: Vec<&LabeledSample> = tr_samples.iter().collect();
    let tr_eval = evaluate_model(&ckpt.spec, &ckpt.params, &tr_refs, 30, eval_patch, 3).unwrap();
    println!("train rank eval: {}", tr_eval.summary_line());

    // phase 2: fine-tune on synthetic absolute scores from the train split
    let ft_train: Vec<LabeledSample> = train_groups
        .iter()
        .flat_map(|g| {
            g.distorted.iter().map(|(level, img)| LabeledSample {
                path: format!("{}/{level}", g.reference_id),
                reference_id: g.reference_id.clone(),
                image: img.clone(),
                mos: mos_for_level(*level, g.level_count()),
            })
        })
        .collect();
    let ft_refs: Vec<&LabeledSample> = ft_train.iter().collect();
    let ft_cfg = TrainConfig {
        phase: TrainPhase::Finetune,
        iterations: std::env::args().nth(11).and_then(|v| v.parse().ok()).unwrap_or(1000),
        learning_rate: std::env::args().nth(12).and_then(|v| v.parse().ok()).unwrap_or(1e-4),
        lr_step: 800,
        patch,
        batch_size: 10,
        seed,
        ..TrainConfig::desk_finetune(seed)
    };
    let t2 = Instant::now();
    let (ft_ckpt, ft_rep) = finetune_regression(&ckpt, &ft_refs, &ft_cfg).unwrap();
    println!(
        "finetune: final={:.2} tail={:.2} time={:.0}s",
        ft_rep.final_loss(),
        ft_rep.mean_tail_loss(100),
        t2.elapsed().as_secs_f64()
    );
    let ft_eval = evaluate_model(&ft_ckpt.spec, &ft_ckpt.params, &refs, 30, eval_patch, 2).unwrap();
    println!("finetuned held-out eval: {}", ft_eval.summary_line());

    // convergence comparison at equal budget
    let eff_curve = rep.smoothed_by_budget(50);
    let base_curve = base.smoothed_by_budget(50);
    let base_final = base_curve.last().unwrap().1;
    let cross = eff_curve.iter().find(|(_, l)| *l <= base_final);
    println!(
        "baseline final(smoothed)={base_final:.4}; efficient reaches it at {:?} of {} budget",
        cross.map(|(fp, _)| *fp),
        rep.total_forward_passes()
    );
}
