//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic `GFEMCKP1`, u32 LE format version, u64 LE index
//! length, UTF-8 JSON index, then the concatenated tensor data as f64 LE.
//! The index records every tensor's name, shape and element offset into the
//! data region, the frozen parameter names, and an arbitrary caller-supplied
//! config snapshot, so a checkpoint is self-describing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ndarray::IxDyn;

use gfem_autodiff::{Arr, ParamStore};

use crate::error::{GfemError, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GFEMCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the data region.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    entries: Vec<IndexEntry>,
    frozen: Vec<String>,
    config: serde_json::Value,
}

/// Serialize every parameter (trainable and frozen) plus a config snapshot.
pub fn save_checkpoint(
    store: &ParamStore,
    config: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut data = Vec::new();
    let mut offset = 0u64;
    for (name, value) in store.iter() {
        entries.push(IndexEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.len() as u64;
        for &v in value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let frozen = store
        .names()
        .filter(|n| store.is_frozen(n))
        .cloned()
        .collect();
    let index = serde_json::to_vec(&Index {
        entries,
        frozen,
        config: config.clone(),
    })
    .map_err(|e| GfemError::json(path, e))?;

    let mut bytes = Vec::with_capacity(8 + 4 + 8 + index.len() + data.len());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(index.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&index);
    bytes.extend_from_slice(&data);
    std::fs::write(path, bytes).map_err(|e| GfemError::io(path, e))
}

/// Load a checkpoint back into a fresh [`ParamStore`] (freezes restored) plus
/// the stored config snapshot.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| GfemError::io(path, e))?;
    let corrupt = |msg: String| GfemError::CheckpointCorrupt(format!("{}: {msg}", path.display()));

    if bytes.len() < 20 {
        return Err(corrupt(format!("only {} bytes, header needs 20", bytes.len())));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            CHECKPOINT_MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(GfemError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let index_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20 + index_len;
    if bytes.len() < data_start {
        return Err(corrupt(format!(
            "index claims {index_len} bytes but only {} remain",
            bytes.len() - 20
        )));
    }
    let index: Index = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| corrupt(format!("index does not parse: {e}")))?;
    let data = &bytes[data_start..];
    let n_elems = data.len() / 8;

    let mut store = ParamStore::new();
    for entry in &index.entries {
        let len: usize = entry.shape.iter().product();
        let end = entry.offset as usize + len;
        if data.len() % 8 != 0 || end > n_elems {
            return Err(corrupt(format!(
                "entry '{}' needs elements {}..{end} but data region holds {n_elems}",
                entry.name, entry.offset
            )));
        }
        let start = entry.offset as usize * 8;
        let values: Vec<f64> = data[start..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| corrupt(format!("entry '{}': {e}", entry.name)))?;
        store.insert(entry.name.clone(), arr);
    }
    for name in &index.frozen {
        if !store.contains(name) {
            return Err(corrupt(format!("frozen name '{name}' has no tensor")));
        }
        // Full names are valid freeze prefixes; no parameter name is a
        // proper prefix of another in this codebase.
        store.freeze_prefix(name);
    }
    Ok((store, index.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in [
            ("alpha.weight", vec![3usize, 4]),
            ("alpha.bias", vec![4]),
            ("beta.scalarish", vec![1, 1]),
            ("perceptual.conv0.weight", vec![2, 2, 3, 3, 3]),
        ] {
            store.insert(
                name,
                Arr::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-2.0..2.0)),
            );
        }
        store
    }

    fn bits(a: &Arr) -> Vec<u64> {
        a.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn roundtrip_is_bit_exact_and_restores_freeze() {
        let mut store = random_store(1);
        store.freeze_prefix("perceptual.");
        let config = serde_json::json!({"encoder_channels": [8, 16, 32], "note": "desk"});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &config, &path).unwrap();

        let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded.len(), store.len());
        for (name, value) in store.iter() {
            assert_eq!(loaded.get(name).shape(), value.shape(), "{name}");
            assert_eq!(bits(loaded.get(name)), bits(value), "{name} bits differ");
        }
        assert!(loaded.is_frozen("perceptual.conv0.weight"));
        assert_eq!(loaded.trainable_names(), store.trainable_names());
    }

    #[test]
    fn special_values_survive() {
        let mut store = ParamStore::new();
        store.insert(
            "edge",
            Arr::from_shape_vec(
                IxDyn(&[4]),
                vec![-0.0, f64::MIN_POSITIVE, 1.0 + f64::EPSILON, -1e300],
            )
            .unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edge.ckpt");
        save_checkpoint(&store, &serde_json::Value::Null, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(bits(loaded.get("edge")), bits(store.get("edge")));
    }

    #[test]
    fn version_mismatch_is_reported_with_both_versions() {
        let store = random_store(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.ckpt");
        save_checkpoint(&store, &serde_json::Value::Null, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path).err().unwrap() {
            GfemError::CheckpointVersion { found, expected } => {
                assert_eq!((found, expected), (2, 1));
            }
            other => panic!("expected version error, got {other}"),
        }
    }

    #[test]
    fn truncation_names_the_broken_entry() {
        let store = random_store(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        save_checkpoint(&store, &serde_json::Value::Null, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        let err = load_checkpoint(&path).err().unwrap();
        let msg = err.to_string();
        assert!(
            matches!(err, GfemError::CheckpointCorrupt(_)),
            "expected corrupt, got {msg}"
        );
        assert!(
            msg.contains("perceptual.conv0.weight"),
            "must name the entry that no longer fits: {msg}"
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a.ckpt");
        std::fs::write(&path, b"NOTMAGIC________________________").unwrap();
        assert!(matches!(
            load_checkpoint(&path).err().unwrap(),
            GfemError::CheckpointCorrupt(_)
        ));
    }

    #[test]
    fn generator_forward_identical_after_roundtrip() {
        use crate::config::GeneratorConfig;
        use crate::generator::GeneratorModel;
        use crate::volume::Volume;

        let cfg = GeneratorConfig {
            encoder_channels: [2, 3, 4],
            patch_size: 1,
            vit_depth: 1,
            vit_heads: 2,
            group_norm_groups: 1,
            perceptual_channels: [2, 2, 2],
            ..GeneratorConfig::desk()
        };
        let model = GeneratorModel::new(cfg, [8, 8, 8]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        model.init_generator_params(&mut store, &mut rng);

        let mut rng_in = ChaCha12Rng::seed_from_u64(5);
        let mri = Volume::new(Arr::from_shape_fn(IxDyn(&[1, 8, 8, 8]), |_| {
            rng_in.random_range(0.0..1.0)
        }))
        .unwrap();
        let before = model.generate_volume(&store, &mri).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        save_checkpoint(&store, &serde_json::Value::Null, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let after = model.generate_volume(&loaded, &mri).unwrap();
        assert_eq!(
            bits(&before.pet.data),
            bits(&after.pet.data),
            "forward pass must be bit-identical after the roundtrip"
        );
        assert_eq!(bits(&before.x_lmp.tokens), bits(&after.x_lmp.tokens));
    }
}
