use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

use super::optim::AdamW;
use super::trainer::TrainState;
use super::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// `u128` does not survive every JSON reader, so it is kept as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    optimizer_t: u64,
    rng: RngState,
    blob: String,
    blob_bytes: usize,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `state` to directory `dir` (created if missing): a JSON manifest and one
/// little-endian `f32` blob holding parameters and both optimizer moments.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = state.model.params();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
            sha256: sha_hex(&blob[offset..]),
        });
    };
    for id in params.ids() {
        push(format!("param/{}", params.name(id)), params.get(id));
    }
    for id in params.ids() {
        push(format!("adam_m/{}", params.name(id)), &state.optimizer.m[id.0]);
    }
    for id in params.ids() {
        push(format!("adam_v/{}", params.name(id)), &state.optimizer.v[id.0]);
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        model_config: state.model.config().clone(),
        train_config: state.config.clone(),
        step: state.step,
        optimizer_t: state.optimizer.t,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        blob: BLOB.into(),
        blob_bytes: blob.len(),
        blob_sha256: sha_hex(&blob),
        tensors,
    };
    let tmp_blob = dir.join(format!("{BLOB}.tmp"));
    std::fs::write(&tmp_blob, &blob)?;
    std::fs::rename(&tmp_blob, dir.join(BLOB))?;
    let tmp_manifest = dir.join(format!("{MANIFEST}.tmp"));
    std::fs::write(&tmp_manifest, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(&tmp_manifest, dir.join(MANIFEST))?;
    Ok(())
}

/// Restores a state written by [`save_checkpoint`]. Every length and checksum is
/// verified before anything is returned.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let bad = |m: String| Error::Checkpoint(m);
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| bad(format!("cannot read {}: {e}", manifest_path.display())))?;
    let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(format!("invalid manifest: {e}")))?;
    match version.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        other => {
            return Err(bad(format!(
                "unsupported checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"
            )))
        }
    }
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("invalid manifest: {e}")))?;
    let blob = std::fs::read(dir.join(&manifest.blob))?;
    if blob.len() != manifest.blob_bytes {
        return Err(bad(format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if sha_hex(&blob) != manifest.blob_sha256 {
        return Err(bad("blob checksum mismatch".into()));
    }

    let mut model = Model::<f32>::new(manifest.model_config.clone(), 0).map_err(|e| bad(e.to_string()))?;
    let mut optimizer = AdamW::new(model.params(), manifest.train_config.weight_decay);
    optimizer.t = manifest.optimizer_t;
    let ids: Vec<_> = model.params().ids().collect();
    if manifest.tensors.len() != 3 * ids.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, model needs {}",
            manifest.tensors.len(),
            3 * ids.len()
        )));
    }
    let mut entries = manifest.tensors.iter();
    for role in ["param", "adam_m", "adam_v"] {
        for &id in &ids {
            let e = entries.next().expect("length checked");
            let want = format!("{role}/{}", model.params().name(id));
            if e.name != want {
                return Err(bad(format!("tensor {} found where {want} was expected", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            if e.shape != model.params().get(id).shape() || e.bytes != numel * 4 {
                return Err(bad(format!("tensor {} has unexpected shape {:?}", e.name, e.shape)));
            }
            let bytes = e
                .offset
                .checked_add(e.bytes)
                .and_then(|end| blob.get(e.offset..end))
                .ok_or_else(|| bad(format!("tensor {} lies outside the blob", e.name)))?;
            if sha_hex(bytes) != e.sha256 {
                return Err(bad(format!("checksum mismatch for {}", e.name)));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            match role {
                "param" => model.params_mut().set(id, t),
                "adam_m" => optimizer.m[id.0] = t,
                _ => optimizer.v[id.0] = t,
            }
        }
    }

    let seed_bytes = hex::decode(&manifest.rng.seed).map_err(|e| bad(format!("bad rng seed: {e}")))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|e| bad(format!("bad rng position: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        config: manifest.train_config,
        model,
        optimizer,
        step: manifest.step,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Corpus;

    fn state() -> TrainState {
        let mc = ModelConfig {
            d_model: 16,
            n_layers: 2,
            group_size: 1,
            n_heads: 1,
            d_head: 8,
            n_att_experts: 2,
            k_att: 1,
            d_expert: 8,
            n_experts: 4,
            k: 2,
            vocab_size: 10,
            context_length: 8,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch_size: 2,
            context_length: 8,
            steps: 4,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        TrainState::new(mc, tc).unwrap()
    }

    fn corpus() -> Corpus {
        Corpus {
            tokens: (0..200).map(|i| (i * 3 + i / 7) % 10).collect(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state();
        s.step_on(&corpus()).unwrap();
        save_checkpoint(&s, dir.path()).unwrap();
        let r = load_checkpoint(dir.path()).unwrap();
        assert_eq!(r.step, s.step);
        assert_eq!(r.optimizer, s.optimizer);
        assert_eq!(r.rng, s.rng);
        assert_eq!(r.config, s.config);
        for id in s.model.params().ids() {
            let a: Vec<u32> = s.model.params().get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = r.model.params().get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state(), dir.path()).unwrap();
        let p = dir.path().join(BLOB);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupted_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state(), dir.path()).unwrap();
        let p = dir.path().join(BLOB);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[10] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        v["version"] = 99.into();
        std::fs::write(&p, v.to_string()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
