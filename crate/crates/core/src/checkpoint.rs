//! Checkpoint directories: `manifest.json` plus little-endian `f32` tensors in
//! `params.bin`.

use std::collections::HashMap;
use std::path::Path;

use roadtraj_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig, Normalizer};
use crate::{Error, Result};

const FORMAT: &str = "roadtraj-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(model.params.num_values() * 4);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, name, t) in model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config,
        normalizer: model.normalizer,
        tensors,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join("params.bin");
    std::fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read(&mpath)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", mpath.display())))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Rebuilds the network from the manifest hyper-parameters and fills every
/// tensor from `params.bin`; any name, shape or length disagreement fails.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest = read_manifest(dir)?;
    let ppath = dir.join("params.bin");
    let bytes = std::fs::read(&ppath).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", ppath.display())))?;
    let mut model = Model::<f32>::new(manifest.config, manifest.normalizer, 0)?;
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if entries.len() != manifest.tensors.len() || entries.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, network has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let expected_bytes = model.params.num_values() * 4;
    if bytes.len() != expected_bytes {
        return Err(Error::Checkpoint(format!(
            "params.bin has {} bytes, expected {expected_bytes}",
            bytes.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let entry = entries.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
        let current = model.params.get(id);
        if entry.dtype != "f32" || entry.shape != current.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: manifest {:?} {}, network {:?}",
                entry.shape,
                entry.dtype,
                current.shape()
            )));
        }
        let n = current.len();
        let end = entry.offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor {name} runs past the end of params.bin")));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)?;
        model.params.set(id, t)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LngLat;
    use crate::trajdata::BBox;

    fn model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig { dim: 8, heads: 2, layers: 1, num_segments: 4, delta_m: 50.0, ffn_mult: 2 };
        let bbox = BBox { min: LngLat::new(1.0, 2.0), max: LngLat::new(1.1, 2.1) };
        Model::new(cfg, Normalizer::new(bbox, 60.0), seed).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(5);
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for ((_, a, x), (_, b, y)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(back.config, m.config);
        assert_eq!(back.normalizer, m.normalizer);
    }

    #[test]
    fn truncated_params_fail() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(1), dir.path()).unwrap();
        let p = dir.path().join("params.bin");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(1), dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors[0].shape = vec![2, 2];
        std::fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
