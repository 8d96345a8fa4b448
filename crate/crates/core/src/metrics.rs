//! Evaluation metrics (LCC, SROCC) and the multi-crop test protocol.
//!
//! SROCC is computed from the rank-difference form with the standard tie
//! correction terms, which for tie-free inputs reduces to
//! `1 - 6 sum(d^2) / (N (N^2 - 1))` and with ties equals the Pearson
//! correlation of average-rank vectors; the test suite cross-checks the two
//! routes against each other.

use crate::dataset::LabeledSample;
use crate::distort::RankedGroup;
use crate::error::{Error, Result};
use crate::net::{forward, NetworkSpec, ParameterStore};
use crate::parallel::map_indexed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::UndefinedMetric("rank input contains NaN".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].partial_cmp(&values[*b]).expect("no NaN"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    Ok(ranks)
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::UndefinedMetric("need at least 2 samples".into()));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("metric input contains non-finite values".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation undefined for a constant input vector".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Linear correlation between ground truth and predictions.
pub fn lcc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    pearson(y, y_hat)
}

/// Sum of `(t^3 - t) / 12` over tie groups.
fn tie_term(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += (t * t * t - t) / 12.0;
        i = j + 1;
    }
    total
}

/// Spearman rank-order correlation with average ranks for ties.
pub fn srocc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let vr = average_ranks(y)?;
    let pr = average_ranks(y_hat)?;
    let n = y.len() as f64;
    let base = (n * n * n - n) / 12.0;
    let ty = tie_term(y);
    let tp = tie_term(y_hat);
    let svv = base - ty;
    let spp = base - tp;
    if svv <= 0.0 || spp <= 0.0 {
        return Err(Error::UndefinedMetric(
            "rank correlation undefined when one side is entirely tied".into(),
        ));
    }
    let d2: f64 = vr.iter().zip(&pr).map(|(v, p)| (v - p) * (v - p)).sum();
    Ok((2.0 * base - ty - tp - d2) / (2.0 * (svv * spp).sqrt()))
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub y: f64,
    pub y_hat: f64,
}

/// Evaluation over a labeled set. A metric that is undefined for the given
/// predictions (constant output) is reported as `None` with a note instead of
/// failing the run.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub lcc: Option<f64>,
    pub srocc: Option<f64>,
    pub rows: Vec<EvalRow>,
    pub n: usize,
    pub notes: Vec<String>,
}

impl EvalResult {
    pub fn summary_line(&self) -> String {
        let fmt = |v: &Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "undefined".to_string(),
        };
        format!("n={} LCC={} SROCC={}", self.n, fmt(&self.lcc), fmt(&self.srocc))
    }
}

/// Scores one image as the mean network output over `crops` random
/// sub-images; each image gets its own rng stream derived from `seed`, so
/// results do not depend on evaluation order.
fn predict_scores(
    spec: &NetworkSpec,
    params: &ParameterStore,
    images: &[&Tensor],
    crops: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = map_indexed(images.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let image = images[i];
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if patch > h || patch > w {
            return Err(Error::Config(format!(
                "evaluation patch {patch} does not fit a {h}x{w} image"
            )));
        }
        let mut crop_batch = Vec::with_capacity(crops);
        for _ in 0..crops {
            let oy = rng.gen_range(0..=h - patch);
            let ox = rng.gen_range(0..=w - patch);
            let mut data = Vec::with_capacity(patch * patch);
            for y in 0..patch {
                let base = (oy + y) * w + ox;
                data.extend_from_slice(&image.data()[base..base + patch]);
            }
            let mut window = Tensor::from_vec(&[patch, patch], data)?;
            crate::dataset::center_patch(&mut window);
            crop_batch.push(window);
        }
        let refs: Vec<&Tensor> = crop_batch.iter().collect();
        let batch = Tensor::stack(&refs)?.reshaped(&[crops, 1, patch, patch])?;
        let (scores, _) = forward(spec, params, &batch)?;
        Ok(scores.data().iter().map(|v| *v as f64).sum::<f64>() / crops as f64)
    });
    results.into_iter().collect()
}

/// Multi-crop evaluation protocol: per-image prediction is the mean output
/// over `crops_per_image` random sub-images, then LCC and SROCC against the
/// ground-truth scores.
pub fn evaluate_model(
    spec: &NetworkSpec,
    params: &ParameterStore,
    samples: &[&LabeledSample],
    crops_per_image: usize,
    patch: usize,
    seed: u64,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty sample list".into()));
    }
    if crops_per_image == 0 {
        return Err(Error::Config("crops_per_image must be at least 1".into()));
    }

    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_scores(spec, params, &images, crops_per_image, patch, seed)?;

    let rows: Vec<EvalRow> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalRow {
            id: s.path.clone(),
            y: s.mos as f64,
            y_hat: *p,
        })
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let y_hat: Vec<f64> = rows.iter().map(|r| r.y_hat).collect();

    let mut notes = Vec::new();
    let lcc = match lcc(&y, &y_hat) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("LCC: {e}"));
            None
        }
    };
    let srocc = match srocc(&y, &y_hat) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("SROCC: {e}"));
            None
        }
    };

    Ok(EvalResult {
        lcc,
        srocc,
        n: rows.len(),
        rows,
        notes,
    })
}

#[derive(Debug, Clone)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Score distribution of one (kind, level) cell of the corpus.
#[derive(Debug, Clone)]
pub struct ScoreHistogram {
    pub kind: String,
    pub level: usize,
    pub count: usize,
    pub mean: f64,
    pub bins: Vec<HistogramBin>,
}

pub const HISTOGRAM_BINS: usize = 30;

/// Scores every distorted image of the given groups and buckets the scores
/// per (kind, level). Bins are shared across the levels of one kind so the
/// level distributions can be compared side by side.
pub fn score_histograms(
    spec: &NetworkSpec,
    params: &ParameterStore,
    groups: &[&RankedGroup],
    crops_per_image: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<ScoreHistogram>> {
    if groups.is_empty() {
        return Err(Error::Config("no groups to score".into()));
    }
    if crops_per_image == 0 {
        return Err(Error::Config("crops_per_image must be at least 1".into()));
    }

    let mut images: Vec<&Tensor> = Vec::new();
    let mut tags: Vec<(&'static str, usize)> = Vec::new();
    for group in groups {
        for (level, img) in &group.distorted {
            images.push(img);
            tags.push((group.kind.as_str(), *level));
        }
    }
    let scores = predict_scores(spec, params, &images, crops_per_image, patch, seed)?;

    // kind -> per-level score lists, kinds and levels in first-seen order
    let mut kinds: Vec<(&str, Vec<(usize, Vec<f64>)>)> = Vec::new();
    for ((kind, level), score) in tags.iter().zip(&scores) {
        let kind_entry = match kinds.iter_mut().find(|(k, _)| k == kind) {
            Some(e) => &mut e.1,
            None => {
                kinds.push((kind, Vec::new()));
                &mut kinds.last_mut().unwrap().1
            }
        };
        match kind_entry.iter_mut().find(|(l, _)| l == level) {
            Some((_, list)) => list.push(*score),
            None => kind_entry.push((*level, vec![*score])),
        }
    }

    let mut out = Vec::new();
    for (kind, mut levels) in kinds {
        levels.sort_by_key(|(l, _)| *l);
        let all: Vec<f64> = levels.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (level, scores) in levels {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let bins = if span == 0.0 {
                vec![HistogramBin { lo, hi, count: scores.len() }]
            } else {
                let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
                    .map(|b| HistogramBin {
                        lo: lo + span * b as f64 / HISTOGRAM_BINS as f64,
                        hi: lo + span * (b + 1) as f64 / HISTOGRAM_BINS as f64,
                        count: 0,
                    })
                    .collect();
                for s in &scores {
                    let b = (((s - lo) / span) * HISTOGRAM_BINS as f64) as usize;
                    bins[b.min(HISTOGRAM_BINS - 1)].count += 1;
                }
                bins
            };
            out.push(ScoreHistogram {
                kind: kind.to_string(),
                level,
                count: scores.len(),
                mean,
                bins,
            });
        }
    }
    Ok(out)
}

/// Mean score per level for one kind, ordered by level.
pub fn level_means(histograms: &[ScoreHistogram], kind: &str) -> Vec<(usize, f64)> {
    let mut means: Vec<(usize, f64)> = histograms
        .iter()
        .filter(|h| h.kind == kind)
        .map(|h| (h.level, h.mean))
        .collect();
    means.sort_by_key(|(l, _)| *l);
    means
}

/// True when the mean score strictly decreases as the level index rises.
pub fn strictly_monotone_decreasing(means: &[(usize, f64)]) -> bool {
    means.windows(2).all(|w| w[0].1 > w[1].1)
}

pub fn write_eval_csv(path: &Path, result: &EvalResult) -> Result<()> {
    let mut out = String::from("id,y,y_hat\n");
    for row in &result.rows {
        out.push_str(&format!("{},{},{}\n", row.id, row.y, row.y_hat));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_histogram_csv(path: &Path, histograms: &[ScoreHistogram]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "kind,level,bin_lo,bin_hi,count").expect("vec write");
    for h in histograms {
        for b in &h.bins {
            writeln!(out, "{},{},{},{},{}", h.kind, h.level, b.lo, b.hi, b.count).expect("vec write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;
    use proptest::prelude::*;

    #[test]
    fn lcc_closed_forms() {
        let y = [1.0, 2.0, 3.0];
        let affine: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((lcc(&y, &affine).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((lcc(&y, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((lcc(&y, &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            lcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(lcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn srocc_closed_forms() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!((srocc(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((srocc(&y, &rev).unwrap() + 1.0).abs() < 1e-12);
        // prediction ranks (1, 2, 4, 3): 1 - 6*2/60 = 0.8
        let swapped = [0.1, 0.2, 0.9, 0.5];
        assert!((srocc(&y, &swapped).unwrap() - 0.8).abs() < 1e-12);
        assert!(srocc(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn srocc_with_ties_equals_pearson_of_average_ranks() {
        let y = [1.0, 1.0, 2.0, 3.0, 3.0, 3.0];
        let p = [0.5, 0.2, 0.2, 0.9, 0.9, 1.4];
        let direct = srocc(&y, &p).unwrap();
        let via_ranks = pearson(&average_ranks(&y).unwrap(), &average_ranks(&p).unwrap()).unwrap();
        assert!((direct - via_ranks).abs() < 1e-12, "{direct} vs {via_ranks}");
    }

    #[test]
    fn average_ranks_handle_ties() {
        let r = average_ranks(&[10.0, 20.0, 20.0, 30.0]).unwrap();
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
        assert!(average_ranks(&[f64::NAN, 1.0]).is_err());
    }

    /// conv1x1(w=1) -> relu -> gap scores a mean-centered checkerboard of
    /// amplitude `a` as exactly `a/2`: a perfect texture-energy predictor.
    fn energy_net() -> (NetworkSpec, ParameterStore) {
        let spec = NetworkSpec::new(vec![
            LayerSpec::Conv2d { kernel: 1, in_ch: 1, out_ch: 1, stride: 1, pad: 0 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
        ]);
        let mut params = ParameterStore::init(&spec, 0);
        params.params_mut()[0].value.data_mut()[0] = 1.0;
        params.params_mut()[1].value.data_mut()[0] = 0.0;
        (spec, params)
    }

    fn checkerboard_samples(amplitudes: &[f32]) -> Vec<LabeledSample> {
        amplitudes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut t = Tensor::zeros(&[16, 16]);
                for y in 0..16 {
                    for x in 0..16 {
                        let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        t.data_mut()[y * 16 + x] = 0.5 + sign * a;
                    }
                }
                LabeledSample {
                    path: format!("img_{i}.pgm"),
                    reference_id: format!("r{i}"),
                    image: t,
                    mos: a * 100.0,
                }
            })
            .collect()
    }

    #[test]
    fn energy_net_is_a_perfect_amplitude_predictor() {
        let (spec, params) = energy_net();
        let samples = checkerboard_samples(&[0.1, 0.2, 0.3, 0.4, 0.45]);
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        // whole-image patch, one crop: fully deterministic
        let result = evaluate_model(&spec, &params, &refs, 1, 16, 0).unwrap();
        assert!((result.srocc.unwrap() - 1.0).abs() < 1e-12);
        assert!((result.lcc.unwrap() - 1.0).abs() < 1e-6);
        for (row, a) in result.rows.iter().zip([0.1f32, 0.2, 0.3, 0.4, 0.45]) {
            assert!((row.y_hat - a as f64 / 2.0).abs() < 1e-5);
        }
        let again = evaluate_model(&spec, &params, &refs, 1, 16, 123).unwrap();
        for (a, b) in result.rows.iter().zip(&again.rows) {
            assert_eq!(a.y_hat, b.y_hat);
        }
    }

    #[test]
    fn constant_predictor_reports_undefined_metrics() {
        // all samples carry identical texture, so every prediction ties
        let (spec, params) = energy_net();
        let samples = checkerboard_samples(&[0.25, 0.25, 0.25, 0.25]);
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let result = evaluate_model(&spec, &params, &refs, 2, 8, 1).unwrap();
        assert!(result.lcc.is_none());
        assert!(result.srocc.is_none());
        assert_eq!(result.notes.len(), 2);
        assert!(result.summary_line().contains("undefined"));
        assert!(evaluate_model(&spec, &params, &[], 2, 8, 1).is_err());
    }

    #[test]
    fn histograms_bucket_by_kind_and_level() {
        use crate::distort::{synthesize_ranked_group, DistortionKind, DistortionSpec};
        use crate::fixtures::synthetic_reference;
        let (spec, params) = energy_net();
        let img = synthetic_reference(32, 32, 4);
        let blur = synthesize_ranked_group(
            &img,
            "r0",
            &DistortionSpec::new(DistortionKind::GaussianBlur, vec![1.0, 2.0, 3.0], 0).unwrap(),
        )
        .unwrap();
        let hists = score_histograms(&spec, &params, &[&blur], 2, 16, 0).unwrap();
        assert_eq!(hists.len(), 3);
        for h in &hists {
            assert_eq!(h.kind, "gaussian_blur");
            assert_eq!(h.count, 1);
            assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 1);
        }
        let means = level_means(&hists, "gaussian_blur");
        assert_eq!(means.len(), 3);

        // degenerate single-level corpus: histogram still produced
        let single = RankedGroup {
            reference_id: "r1".into(),
            kind: DistortionKind::GaussianBlur,
            reference: img.clone(),
            distorted: vec![(0, img.clone())],
        };
        let hs = score_histograms(&spec, &params, &[&single], 1, 16, 0).unwrap();
        assert_eq!(hs.len(), 1);
        assert_eq!(hs[0].bins.len(), 1);
    }

    #[test]
    fn monotonicity_helper() {
        assert!(strictly_monotone_decreasing(&[(0, 3.0), (1, 2.0), (2, 1.0)]));
        assert!(!strictly_monotone_decreasing(&[(0, 3.0), (1, 3.0), (2, 1.0)]));
        assert!(!strictly_monotone_decreasing(&[(0, 1.0), (1, 2.0)]));
    }

    proptest! {
        /// Dual-route identity: rank-difference form with tie corrections
        /// against Pearson of average ranks, over heavily tied vectors.
        #[test]
        fn srocc_matches_pearson_of_ranks(
            ya in proptest::collection::vec(0i32..6, 4..40),
            yb in proptest::collection::vec(0i32..6, 4..40),
        ) {
            let n = ya.len().min(yb.len());
            let y: Vec<f64> = ya[..n].iter().map(|v| *v as f64).collect();
            let p: Vec<f64> = yb[..n].iter().map(|v| *v as f64).collect();
            let direct = srocc(&y, &p);
            let via = (|| -> Result<f64> {
                pearson(&average_ranks(&y)?, &average_ranks(&p)?)
            })();
            match (direct, via) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}"),
                (Err(_), Err(_)) => {} // both undefined (constant side)
                (a, b) => prop_assert!(false, "route disagreement: {a:?} vs {b:?}"),
            }
        }

        /// Both metrics are invariant under positive affine transforms;
        /// SROCC also under any strictly monotone transform.
        #[test]
        fn invariance_under_transforms(
            y in proptest::collection::vec(-50.0f64..50.0, 3..20),
            scale in 0.1f64..10.0,
            offset in -100.0f64..100.0,
        ) {
            let y_hat: Vec<f64> = y.iter().map(|v| v * 1.7 + 0.3).collect();
            let affine: Vec<f64> = y_hat.iter().map(|v| v * scale + offset).collect();
            let monotone: Vec<f64> = y_hat.iter().map(|v| v.exp().min(1e300)).collect();
            if let (Ok(l0), Ok(l1)) = (lcc(&y, &y_hat), lcc(&y, &affine)) {
                prop_assert!((l0 - l1).abs() < 1e-9);
            }
            if let (Ok(s0), Ok(s1), Ok(s2)) = (srocc(&y, &y_hat), srocc(&y, &affine), srocc(&y, &monotone)) {
                prop_assert!((s0 - s1).abs() < 1e-9);
                prop_assert!((s0 - s2).abs() < 1e-9);
            }
        }
    }
}
