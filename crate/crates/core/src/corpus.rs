//! Generated-corpus directory layout and manifest.
//!
//! Layout under the corpus root:
//!
//! ```text
//! references/<reference_id>.pgm
//! <kind>/<reference_id>/level_<k>.pgm
//! manifest.toml
//! labels.txt          # synthetic quality scores per distorted image
//! ```

use crate::dataset::{mos_for_level, write_labels_manifest};
use crate::distort::{synthesize_ranked_group, DistortionKind, DistortionSpec, RankedGroup};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::pgm;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KindEntry {
    pub kind: String,
    pub levels: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReferenceEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub kinds: Vec<KindEntry>,
    pub references: Vec<ReferenceEntry>,
}

impl CorpusManifest {
    pub fn distorted_image_count(&self) -> usize {
        self.references.len() * self.kinds.iter().map(|k| k.levels.len()).sum::<usize>()
    }
}

/// Per-(reference, kind) noise stream derived from the corpus seed.
fn group_seed(corpus_seed: u64, ref_idx: usize, kind_idx: usize) -> u64 {
    let mut z = corpus_seed
        ^ (ref_idx as u64).wrapping_mul(0xd1342543de82ef95)
        ^ (kind_idx as u64).wrapping_mul(0xaf251af3b0f025b5);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Synthesizes and writes the full corpus: every reference distorted at every
/// level of every kind, plus manifest and synthetic labels. Returns the
/// manifest. Synthesis runs in parallel across references.
pub fn generate_corpus(
    references: &[(String, Tensor)],
    kinds: &[(DistortionKind, Vec<f32>)],
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    if references.is_empty() {
        return Err(Error::Config("no reference images to distort".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Config("no distortion kinds configured".into()));
    }
    for (kind, levels) in kinds {
        DistortionSpec::new(*kind, levels.clone(), seed)?;
    }

    std::fs::create_dir_all(out_dir.join("references"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    // one work item per reference, parallel; file targets are disjoint
    let results: Vec<Result<()>> = map_indexed(references.len(), |ref_idx| {
        let (id, image) = &references[ref_idx];
        pgm::write_pgm(&out_dir.join("references").join(format!("{id}.pgm")), image)?;
        for (kind_idx, (kind, levels)) in kinds.iter().enumerate() {
            let spec = DistortionSpec::new(*kind, levels.clone(), group_seed(seed, ref_idx, kind_idx))?;
            let group = synthesize_ranked_group(image, id, &spec)?;
            let dir = out_dir.join(kind.as_str()).join(id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            for (level, distorted) in &group.distorted {
                pgm::write_pgm(&dir.join(format!("level_{level}.pgm")), distorted)?;
            }
        }
        Ok(())
    });
    for r in results {
        r?;
    }

    let manifest = CorpusManifest {
        version: 1,
        seed,
        kinds: kinds
            .iter()
            .map(|(k, levels)| KindEntry {
                kind: k.as_str().to_string(),
                levels: levels.clone(),
            })
            .collect(),
        references: references
            .iter()
            .map(|(id, img)| ReferenceEntry {
                id: id.clone(),
                width: img.shape()[1],
                height: img.shape()[0],
            })
            .collect(),
    };
    write_manifest(&manifest, out_dir)?;

    // synthetic quality labels, the negated level index rescaled to [0, 100]
    let mut labels = Vec::new();
    for (kind, levels) in kinds {
        for (id, _) in references {
            for level in 0..levels.len() {
                labels.push((
                    format!("{}/{}/level_{}.pgm", kind.as_str(), id, level),
                    mos_for_level(level, levels.len()),
                ));
            }
        }
    }
    write_labels_manifest(&out_dir.join(LABELS_FILE), &labels, (0.0, 100.0), seed)?;

    Ok(manifest)
}

fn write_manifest(manifest: &CorpusManifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(manifest)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: CorpusManifest =
        toml::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if manifest.version != 1 {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

/// A corpus loaded back into memory, groups ordered kind-major then by
/// reference, matching the manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub groups: Vec<RankedGroup>,
}

impl Corpus {
    pub fn reference_ids(&self) -> Vec<String> {
        self.manifest.references.iter().map(|r| r.id.clone()).collect()
    }

    /// Groups whose reference id is in `ids`.
    pub fn groups_for<'a>(&'a self, ids: &[String]) -> Vec<&'a RankedGroup> {
        self.groups
            .iter()
            .filter(|g| ids.iter().any(|id| *id == g.reference_id))
            .collect()
    }

    pub fn min_image_side(&self) -> usize {
        self.manifest
            .references
            .iter()
            .map(|r| r.width.min(r.height))
            .min()
            .unwrap_or(0)
    }
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let mut missing = Vec::new();
    let mut groups = Vec::new();

    for kind_entry in &manifest.kinds {
        let kind: DistortionKind = kind_entry.kind.parse()?;
        for reference in &manifest.references {
            let ref_path = dir.join("references").join(format!("{}.pgm", reference.id));
            let ref_image = match pgm::read_pgm(&ref_path) {
                Ok(img) => img,
                Err(_) => {
                    missing.push(ref_path.display().to_string());
                    continue;
                }
            };
            let mut distorted = Vec::with_capacity(kind_entry.levels.len());
            for level in 0..kind_entry.levels.len() {
                let path = dir
                    .join(&kind_entry.kind)
                    .join(&reference.id)
                    .join(format!("level_{level}.pgm"));
                match pgm::read_pgm(&path) {
                    Ok(img) => distorted.push((level, img)),
                    Err(_) => missing.push(path.display().to_string()),
                }
            }
            groups.push(RankedGroup {
                reference_id: reference.id.clone(),
                kind,
                reference: ref_image,
                distorted,
            });
        }
    }

    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(Corpus { manifest, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::reference_set;

    fn default_kinds() -> Vec<(DistortionKind, Vec<f32>)> {
        DistortionKind::ALL
            .iter()
            .map(|k| (*k, DistortionSpec::default_levels(*k)))
            .collect()
    }

    #[test]
    fn generate_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let refs = reference_set(3, 48, 48, 100);
        let manifest = generate_corpus(&refs, &default_kinds(), 5, dir.path()).unwrap();
        assert_eq!(manifest.distorted_image_count(), 3 * 3 * 5);

        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.manifest, manifest);
        assert_eq!(corpus.groups.len(), 9);
        for group in &corpus.groups {
            assert_eq!(group.level_count(), 5);
            assert_eq!(group.reference.shape(), &[48, 48]);
        }

        // labels manifest loads and references every distorted file
        let labels = crate::dataset::load_labeled_dataset(&dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(labels.samples.len(), 45);
        assert_eq!(labels.split_seed, 5);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let refs = reference_set(2, 32, 32, 7);
        generate_corpus(&refs, &default_kinds(), 9, dir_a.path()).unwrap();
        generate_corpus(&refs, &default_kinds(), 9, dir_b.path()).unwrap();

        let a = load_corpus(dir_a.path()).unwrap();
        let b = load_corpus(dir_b.path()).unwrap();
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            assert_eq!(ga.reference_id, gb.reference_id);
            for ((_, ia), (_, ib)) in ga.distorted.iter().zip(&gb.distorted) {
                assert_eq!(ia.data(), ib.data());
            }
        }

        // different corpus seed changes the stochastic kinds
        let dir_c = tempfile::tempdir().unwrap();
        generate_corpus(&refs, &default_kinds(), 10, dir_c.path()).unwrap();
        let c = load_corpus(dir_c.path()).unwrap();
        let noise_a = a.groups.iter().find(|g| g.kind == DistortionKind::GaussianNoise).unwrap();
        let noise_c = c.groups.iter().find(|g| g.kind == DistortionKind::GaussianNoise).unwrap();
        assert_ne!(noise_a.distorted[0].1.data(), noise_c.distorted[0].1.data());
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let refs = reference_set(2, 32, 32, 3);
        generate_corpus(&refs, &default_kinds(), 1, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("gaussian_blur/ref_000/level_2.pgm")).unwrap();
        std::fs::remove_file(dir.path().join("jpeg_proxy/ref_001/level_0.pgm")).unwrap();
        match load_corpus(dir.path()) {
            Err(Error::MissingFiles(files)) => assert_eq!(files.len(), 2),
            other => panic!("expected MissingFiles, got {other:?}"),
        }
        assert!(load_corpus(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn empty_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(&[], &default_kinds(), 0, dir.path()).is_err());
        let refs = reference_set(1, 32, 32, 0);
        assert!(generate_corpus(&refs, &[], 0, dir.path()).is_err());
    }
}
