//! Versioned model checkpoints.
//!
//! File layout: magic `RIQA`, one version byte, a little-endian u32 header
//! length, a TOML header (architecture descriptor, trainer state, config
//! snapshot, rng state, parameter table), then the raw little-endian f32
//! parameter blocks in store order. Round trips are bit-exact and writes are
//! atomic (temp file then rename).

use crate::error::{Error, Result};
use crate::net::{NetworkSpec, ParameterStore};
use crate::trainer::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"RIQA";
pub const VERSION: u8 = 1;

/// Serializable ChaCha stream position; restoring reproduces the generator
/// bit-for-bit, which is what makes resumed runs identical to uninterrupted
/// ones.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::Config("rng seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| Error::Config("bad rng seed hex".into()))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::Config("bad rng seed hex".into()))?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrainerState {
    pub iteration: u64,
    pub learning_rate: f64,
    pub forward_passes: u64,
}

/// Network architecture, parameters and training state: everything needed to
/// resume training or to hand the branch to the next phase.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub spec: NetworkSpec,
    pub params: ParameterStore,
    pub state: TrainerState,
    pub config: TrainConfig,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: String,
    state: TrainerState,
    config: TrainConfig,
    rng: RngState,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let header = Header {
        arch: ckpt.spec.descriptor(),
        state: ckpt.state,
        config: ckpt.config.clone(),
        rng: ckpt.rng.clone(),
        params: ckpt
            .params
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let header_bytes = header_text.as_bytes();

    let mut bytes =
        Vec::with_capacity(9 + header_bytes.len() + 4 * ckpt.params.scalar_count());
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header_bytes);
    for p in ckpt.params.params() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("riqa.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let origin = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&origin, e))?;

    if bytes.len() < 9 {
        return Err(Error::format(&origin, "file too short for a checkpoint"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(&origin, "bad magic bytes (not a checkpoint)"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            &origin,
            format!("checkpoint version {} unsupported (expected {VERSION})", bytes[4]),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(Error::format(&origin, "truncated header"));
    }
    let header_text = std::str::from_utf8(&bytes[9..9 + header_len])
        .map_err(|_| Error::format(&origin, "header is not UTF-8"))?;
    let header: Header =
        toml::from_str(header_text).map_err(|e| Error::format(&origin, e.to_string()))?;

    let spec = NetworkSpec::parse_descriptor(&header.arch)?;
    let mut params = ParameterStore::init(&spec, 0);
    if params.params().len() != header.params.len() {
        return Err(Error::format(
            &origin,
            format!(
                "parameter table lists {} tensors, architecture needs {}",
                header.params.len(),
                params.params().len()
            ),
        ));
    }

    let mut offset = 9 + header_len;
    for (param, meta) in params.params_mut().iter_mut().zip(&header.params) {
        if param.name != meta.name || param.value.shape() != meta.shape.as_slice() {
            return Err(Error::format(
                &origin,
                format!("parameter table mismatch at `{}`", meta.name),
            ));
        }
        let n = param.value.len();
        if bytes.len() < offset + 4 * n {
            return Err(Error::format(&origin, "truncated parameter data"));
        }
        for (i, v) in param.value.data_mut().iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[offset + 4 * i..offset + 4 * i + 4].try_into().unwrap());
        }
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(Error::format(&origin, "trailing bytes after parameter data"));
    }

    Ok(ModelCheckpoint {
        spec,
        params,
        state: header.state,
        config: header.config,
        rng: header.rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;
    use rand::RngCore;

    fn sample_checkpoint() -> ModelCheckpoint {
        let spec = NetworkSpec::desk_default();
        let params = ParameterStore::init(&spec, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(1);
        rng.next_u64();
        rng.next_u64();
        ModelCheckpoint {
            spec,
            params,
            state: TrainerState {
                iteration: 123,
                learning_rate: 1e-3,
                forward_passes: 1230,
            },
            config: TrainConfig::desk_rank(9),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.riqa");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.spec, ckpt.spec);
        assert_eq!(loaded.state, ckpt.state);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.rng, ckpt.rng);
        for (a, b) in loaded.params.params().iter().zip(ckpt.params.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }

        // save(load(x)) produces identical bytes
        let path2 = dir.path().join("model2.riqa");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        // no temp file left behind
        assert!(!dir.path().join("model.riqa.tmp").exists());
    }

    #[test]
    fn rng_state_restores_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        rng.set_stream(3);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.riqa");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let good = std::fs::read(&path).unwrap();

        // truncation anywhere fails without partial state
        for cut in [4usize, 8, 40, good.len() - 5] {
            std::fs::write(&path, &good[..cut]).unwrap();
            assert!(load_checkpoint(&path).is_err(), "cut at {cut}");
        }

        // trailing garbage
        let mut long = good.clone();
        long.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, &long).unwrap();
        assert!(load_checkpoint(&path).is_err());

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());

        // version bump is detected and named
        let mut v2 = good.clone();
        v2[4] = 2;
        std::fs::write(&path, &v2).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
