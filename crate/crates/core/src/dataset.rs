//! Mini-batch assembly from ranked groups, and labeled data for the
//! fine-tuning and evaluation phases.
//!
//! Comparability is strict: two batch samples are ordered only when they come
//! from the same reference image and distortion kind at different levels.
//! Everything else is labeled 0, which realizes the block-diagonal
//! multi-distortion structure as zeroed cross-block labels.

use crate::distort::{DistortionKind, RankedGroup};
use crate::error::{Error, Result};
use crate::loss::ComparabilityMatrix;
use crate::pgm;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Axis-aligned crop at a uniformly random valid offset; no interpolation.
pub fn sample_subimage(image: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    let (oy, ox) = sample_offset(h, w, size, rng)?;
    Ok(crop(image, oy, ox, size))
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    if image.shape().len() != 2 {
        return Err(Error::Shape(format!("expected [H, W] image, got {:?}", image.shape())));
    }
    Ok((image.shape()[0], image.shape()[1]))
}

fn sample_offset(h: usize, w: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::Config(format!("patch size {size} does not fit a {h}x{w} image")));
    }
    let oy = rng.gen_range(0..=h - size);
    let ox = rng.gen_range(0..=w - size);
    Ok((oy, ox))
}

fn crop(image: &Tensor, oy: usize, ox: usize, size: usize) -> Tensor {
    let w = image.shape()[1];
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        let base = (oy + y) * w + ox;
        data.extend_from_slice(&image.data()[base..base + size]);
    }
    Tensor::from_vec(&[size, size], data).expect("crop size")
}

/// Subtracts the patch mean in place. Network inputs are centered this way
/// everywhere (training, fine-tuning, evaluation): the scoring branch should
/// react to structure, not to the crop's brightness.
pub fn center_patch(patch: &mut Tensor) {
    let mean = patch.data().iter().sum::<f32>() / patch.len() as f32;
    for v in patch.data_mut() {
        *v -= mean;
    }
}

/// Crop followed by mean centering: the standard route from an image to a
/// network input.
pub fn sample_network_input(image: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut patch = sample_subimage(image, size, rng)?;
    center_patch(&mut patch);
    Ok(patch)
}

/// Sub-images should keep enough context; warn when the patch covers less
/// than a third of the shorter image side.
pub fn patch_size_warning(min_image_side: usize, patch: usize) -> Option<String> {
    (patch * 3 < min_image_side).then(|| {
        format!(
            "patch size {patch} is below 1/3 of the image side {min_image_side}; \
             sub-images this small lose context"
        )
    })
}

/// One training mini-batch: images stacked [M, 1, h, w] with per-sample group
/// and level tags, derived comparability labels, and per-kind counts.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub images: Tensor,
    /// Batch-local group slot per sample.
    pub group_ids: Vec<usize>,
    pub level_indices: Vec<usize>,
    pub labels: ComparabilityMatrix,
    /// Number of samples per distortion kind present; sums to M.
    pub kind_counts: Vec<(DistortionKind, usize)>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.group_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_ids.is_empty()
    }

    /// Distinct distortion kinds in the batch.
    pub fn kind_count(&self) -> usize {
        self.kind_counts.len()
    }
}

/// Crops one aligned patch position per group (the same offset across all of
/// a group's levels, so within-group order survives cropping) and derives the
/// comparability labels.
pub fn assemble_minibatch(
    groups: &[&RankedGroup],
    patch: usize,
    margin: f32,
    rng: &mut ChaCha8Rng,
) -> Result<MiniBatch> {
    if groups.is_empty() {
        return Err(Error::Config("cannot assemble a mini-batch from zero groups".into()));
    }

    let mut crops: Vec<Tensor> = Vec::new();
    let mut tags: Vec<(usize, usize)> = Vec::new();
    let mut group_ids = Vec::new();
    let mut level_indices = Vec::new();

    for (slot, group) in groups.iter().enumerate() {
        let (h, w) = image_dims(&group.reference)?;
        let (oy, ox) = sample_offset(h, w, patch, rng)?;
        for (level, image) in &group.distorted {
            let mut window = crop(image, oy, ox, patch);
            center_patch(&mut window);
            crops.push(window);
            tags.push((slot, *level));
            group_ids.push(slot);
            level_indices.push(*level);
        }
    }

    let refs: Vec<&Tensor> = crops.iter().collect();
    let m = refs.len();
    let images = Tensor::stack(&refs)?.reshaped(&[m, 1, patch, patch])?;
    let labels = ComparabilityMatrix::from_sample_groups(&tags, margin)?;

    let mut kind_counts: Vec<(DistortionKind, usize)> = Vec::new();
    for group in groups {
        match kind_counts.iter_mut().find(|(k, _)| *k == group.kind) {
            Some((_, n)) => *n += group.distorted.len(),
            None => kind_counts.push((group.kind, group.distorted.len())),
        }
    }

    Ok(MiniBatch {
        images,
        group_ids,
        level_indices,
        labels,
        kind_counts,
    })
}

/// An image with its ground-truth quality score.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// Manifest-relative path; doubles as the sample id in reports.
    pub path: String,
    pub reference_id: String,
    pub image: Tensor,
    pub mos: f32,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
    pub score_range: (f32, f32),
    pub split_seed: u64,
}

impl LabeledDataset {
    /// Reference-id 80/20-style split; every sample of one reference lands on
    /// exactly one side, so no image can appear in both.
    pub fn split(&self, test_fraction: f64) -> (Vec<&LabeledSample>, Vec<&LabeledSample>) {
        let mut ids: Vec<&str> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.reference_id.as_str()) {
                ids.push(&s.reference_id);
            }
        }
        let test_ids = pick_test_ids(&ids, test_fraction, self.split_seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &self.samples {
            if test_ids.iter().any(|t| *t == s.reference_id) {
                test.push(s);
            } else {
                train.push(s);
            }
        }
        (train, test)
    }
}

/// Splits reference ids with a recorded seed; returns (train, test).
pub fn split_reference_ids(ids: &[String], test_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let borrowed: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    let test = pick_test_ids(&borrowed, test_fraction, seed);
    let train = ids
        .iter()
        .filter(|id| !test.iter().any(|t| t == *id))
        .cloned()
        .collect();
    (train, test)
}

fn pick_test_ids(ids: &[&str], test_fraction: f64, seed: u64) -> Vec<String> {
    if ids.len() < 2 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
    order[..n_test].iter().map(|i| ids[*i].to_string()).collect()
}

/// Synthetic quality score for a distortion level: the negated level index
/// rescaled to [0, 100], so the cleanest level scores 100.
pub fn mos_for_level(level_index: usize, level_count: usize) -> f32 {
    if level_count <= 1 {
        return 100.0;
    }
    100.0 * (1.0 - level_index as f32 / (level_count - 1) as f32)
}

const LABELS_MAGIC: &str = "riqa-labels 1";

/// Writes the labeled-dataset manifest: a fixed header (score range, split
/// seed) followed by `<relative_path> <mos>` lines.
pub fn write_labels_manifest(
    path: &Path,
    entries: &[(String, f32)],
    score_range: (f32, f32),
    split_seed: u64,
) -> Result<()> {
    let mut text = String::new();
    text.push_str(LABELS_MAGIC);
    text.push('\n');
    text.push_str(&format!("score_range {} {}\n", score_range.0, score_range.1));
    text.push_str(&format!("split_seed {split_seed}\n"));
    for (rel, mos) in entries {
        text.push_str(&format!("{rel} {mos}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a labeled-dataset manifest and every image it references. Paths are
/// relative to the manifest's directory; the reference id of a sample is its
/// parent directory name (or the file stem for top-level files).
pub fn load_labeled_dataset(manifest_path: &Path) -> Result<LabeledDataset> {
    let origin = manifest_path.display().to_string();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(&origin, e))?;
    let mut lines = text.lines().enumerate();

    match lines.next() {
        Some((_, line)) if line.trim() == LABELS_MAGIC => {}
        _ => return Err(Error::format(&origin, format!("first line must be `{LABELS_MAGIC}`"))),
    }

    let mut score_range: Option<(f32, f32)> = None;
    let mut split_seed: Option<u64> = None;
    let mut entries: Vec<(usize, String, f32)> = Vec::new();

    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let first = parts.next().unwrap_or_default();
        match first {
            "score_range" => {
                let lo = parts.next().and_then(|v| v.parse().ok());
                let hi = parts.next().and_then(|v| v.parse().ok());
                score_range = match (lo, hi) {
                    (Some(lo), Some(hi)) if lo < hi => Some((lo, hi)),
                    _ => return Err(Error::format(&origin, format!("line {}: bad score_range", no + 1))),
                };
            }
            "split_seed" => {
                split_seed = Some(parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| {
                    Error::format(&origin, format!("line {}: bad split_seed", no + 1))
                })?);
            }
            rel_path => {
                let mos: f32 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(&origin, format!("line {}: expected `<path> <mos>`", no + 1)))?;
                entries.push((no + 1, rel_path.to_string(), mos));
            }
        }
    }

    let score_range =
        score_range.ok_or_else(|| Error::format(&origin, "missing score_range header"))?;
    let split_seed = split_seed.ok_or_else(|| Error::format(&origin, "missing split_seed header"))?;
    if entries.is_empty() {
        return Err(Error::format(&origin, "manifest lists no samples"));
    }

    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut missing = Vec::new();
    let mut samples = Vec::new();
    for (no, rel, mos) in entries {
        if !mos.is_finite() || mos < score_range.0 || mos > score_range.1 {
            return Err(Error::format(
                &origin,
                format!("line {no}: mos {mos} outside declared range {score_range:?}"),
            ));
        }
        let full = base.join(&rel);
        match pgm::read_pgm(&full) {
            Ok(image) => {
                let p = Path::new(&rel);
                let reference_id = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .or_else(|| p.file_stem())
                    .map(|v| v.to_string_lossy().into_owned())
                    .unwrap_or_else(|| rel.clone());
                samples.push(LabeledSample {
                    path: rel,
                    reference_id,
                    image,
                    mos,
                });
            }
            Err(_) => missing.push(rel),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }

    Ok(LabeledDataset {
        samples,
        score_range,
        split_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distort::{synthesize_ranked_group, DistortionSpec};
    use crate::fixtures::synthetic_reference;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn blur_group(seed: u64, levels: usize) -> RankedGroup {
        let img = synthetic_reference(64, 64, seed);
        let sigmas: Vec<f32> = (1..=levels).map(|v| v as f32).collect();
        let spec = DistortionSpec::new(DistortionKind::GaussianBlur, sigmas, seed).unwrap();
        synthesize_ranked_group(&img, &format!("ref_{seed:03}"), &spec).unwrap()
    }

    fn noise_group(seed: u64, levels: usize) -> RankedGroup {
        let img = synthetic_reference(64, 64, seed);
        let sigmas: Vec<f32> = (1..=levels).map(|v| v as f32 * 0.05).collect();
        let spec = DistortionSpec::new(DistortionKind::GaussianNoise, sigmas, seed).unwrap();
        synthesize_ranked_group(&img, &format!("ref_{seed:03}"), &spec).unwrap()
    }

    #[test]
    fn whole_image_patch_is_identity() {
        let img = synthetic_reference(32, 32, 1);
        let patch = sample_subimage(&img, 32, &mut rng(0)).unwrap();
        assert_eq!(patch.data(), img.data());
    }

    #[test]
    fn offsets_stay_in_bounds() {
        let img = synthetic_reference(64, 64, 2);
        let mut r = rng(3);
        for _ in 0..1000 {
            let patch = sample_subimage(&img, 32, &mut r).unwrap();
            assert_eq!(patch.shape(), &[32, 32]);
            assert!(patch.data().iter().all(|v| v.is_finite()));
        }
        assert!(sample_subimage(&img, 65, &mut r).is_err());
        assert!(sample_subimage(&img, 0, &mut r).is_err());
    }

    #[test]
    fn patch_warning_fires_below_one_third() {
        assert!(patch_size_warning(100, 32).is_some());
        assert!(patch_size_warning(100, 34).is_none());
        assert!(patch_size_warning(96, 48).is_none());
    }

    #[test]
    fn one_group_batch_has_all_within_group_pairs() {
        let group = blur_group(1, 5);
        let batch = assemble_minibatch(&[&group], 48, 1.0, &mut rng(5)).unwrap();
        assert_eq!(batch.len(), 5);
        assert_eq!(batch.images.shape(), &[5, 1, 48, 48]);
        assert_eq!(batch.labels.comparable_pair_count(), 10);
        assert_eq!(batch.kind_counts, vec![(DistortionKind::GaussianBlur, 5)]);
    }

    #[test]
    fn two_kind_batch_is_block_diagonal() {
        let a = blur_group(1, 5);
        let b = noise_group(2, 5);
        let batch = assemble_minibatch(&[&a, &b], 48, 1.0, &mut rng(6)).unwrap();
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.kind_count(), 2);
        assert_eq!(
            batch.kind_counts,
            vec![(DistortionKind::GaussianBlur, 5), (DistortionKind::GaussianNoise, 5)]
        );
        // cross-kind labels are zero, within-kind pairs are ordered
        assert_eq!(batch.labels.comparable_pair_count(), 20);
        for i in 0..5 {
            for j in 5..10 {
                assert_eq!(batch.labels.label(i, j), 0);
            }
        }
        assert_eq!(batch.labels.label(0, 1), 1);
        assert_eq!(batch.labels.label(6, 5), -1);
    }

    #[test]
    fn same_seed_same_batch() {
        let a = blur_group(1, 5);
        let b = noise_group(2, 5);
        let x = assemble_minibatch(&[&a, &b], 40, 1.0, &mut rng(9)).unwrap();
        let y = assemble_minibatch(&[&a, &b], 40, 1.0, &mut rng(9)).unwrap();
        assert_eq!(x.images.data(), y.images.data());
        assert!(assemble_minibatch(&[], 40, 1.0, &mut rng(9)).is_err());
    }

    #[test]
    fn group_crops_are_aligned() {
        // distorted variants replaced by one fixed pseudo-random pattern
        // shifted by a per-level constant; after mean centering, crops are
        // identical across levels iff they came from the same window
        let mut group = blur_group(3, 4);
        let pattern = synthetic_reference(64, 64, 99);
        for (level, img) in group.distorted.iter_mut() {
            let mut t = pattern.clone();
            t.data_mut().iter_mut().for_each(|v| *v += *level as f32);
            *img = t;
        }
        let batch = assemble_minibatch(&[&group], 16, 1.0, &mut rng(4)).unwrap();
        let per = 16 * 16;
        let first = &batch.images.data()[0..per];
        for s in 1..4 {
            let other = &batch.images.data()[s * per..(s + 1) * per];
            for (a, b) in first.iter().zip(other) {
                assert!((a - b).abs() < 1e-5, "crop windows differ across levels");
            }
        }

        // and crops of the same pattern at different offsets do differ
        let mut r = rng(5);
        let a = sample_network_input(&pattern, 16, &mut r).unwrap();
        let b = sample_network_input(&pattern, 16, &mut r).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn network_inputs_are_mean_centered() {
        let img = synthetic_reference(32, 32, 6);
        let patch = sample_network_input(&img, 16, &mut rng(7)).unwrap();
        let mean: f32 = patch.data().iter().sum::<f32>() / patch.len() as f32;
        assert!(mean.abs() < 1e-6);
        let batch = assemble_minibatch(&[&blur_group(1, 3)], 16, 1.0, &mut rng(8)).unwrap();
        for s in 0..batch.len() {
            let per = 16 * 16;
            let m: f32 = batch.images.data()[s * per..(s + 1) * per].iter().sum::<f32>() / per as f32;
            assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn labels_manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("blur").join("ref_000");
        std::fs::create_dir_all(&img_dir).unwrap();
        let img = synthetic_reference(24, 24, 8);
        crate::pgm::write_pgm(&img_dir.join("level_0.pgm"), &img).unwrap();
        crate::pgm::write_pgm(&img_dir.join("level_1.pgm"), &img).unwrap();

        let manifest = dir.path().join("labels.txt");
        write_labels_manifest(
            &manifest,
            &[
                ("blur/ref_000/level_0.pgm".into(), 100.0),
                ("blur/ref_000/level_1.pgm".into(), 75.0),
            ],
            (0.0, 100.0),
            42,
        )
        .unwrap();

        let ds = load_labeled_dataset(&manifest).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.split_seed, 42);
        assert_eq!(ds.samples[0].reference_id, "ref_000");
        assert_eq!(ds.samples[0].mos, 100.0);

        // missing file is named in the error
        write_labels_manifest(
            &manifest,
            &[("blur/ref_000/level_9.pgm".into(), 10.0)],
            (0.0, 100.0),
            42,
        )
        .unwrap();
        match load_labeled_dataset(&manifest) {
            Err(Error::MissingFiles(files)) => assert_eq!(files, vec!["blur/ref_000/level_9.pgm"]),
            other => panic!("expected MissingFiles, got {other:?}"),
        }

        // mos outside declared range
        write_labels_manifest(
            &manifest,
            &[("blur/ref_000/level_0.pgm".into(), 150.0)],
            (0.0, 100.0),
            42,
        )
        .unwrap();
        assert!(load_labeled_dataset(&manifest).is_err());
    }

    #[test]
    fn reference_split_is_disjoint_and_seeded() {
        let ids: Vec<String> = (0..10).map(|i| format!("ref_{i:03}")).collect();
        let (train, test) = split_reference_ids(&ids, 0.2, 7);
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        for t in &test {
            assert!(!train.contains(t));
        }
        let (train2, test2) = split_reference_ids(&ids, 0.2, 7);
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (_, test3) = split_reference_ids(&ids, 0.2, 8);
        assert_ne!(test, test3);
    }

    #[test]
    fn synthetic_mos_is_monotone() {
        assert_eq!(mos_for_level(0, 5), 100.0);
        assert_eq!(mos_for_level(4, 5), 0.0);
        assert_eq!(mos_for_level(2, 5), 50.0);
        assert_eq!(mos_for_level(0, 1), 100.0);
    }

    proptest! {
        #[test]
        fn split_disjoint_for_every_seed(seed in 0u64..500, n in 2usize..30) {
            let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
            let (train, test) = split_reference_ids(&ids, 0.2, seed);
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(!test.is_empty());
            prop_assert!(!train.is_empty());
            for t in &test {
                prop_assert!(!train.contains(t));
            }
        }
    }
}
