//! On-disk model archive: a directory holding `manifest.json` plus one
//! headerless little-endian binary32 file per tensor, `<name>.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::{check_tensor_name, validate, GraphInfo, ModelManifest};
use crate::tensor::TensorRecord;

pub const MANIFEST_FILE: &str = "manifest.json";

pub type TensorMap = BTreeMap<String, TensorRecord>;

/// A validated manifest together with its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub manifest: ModelManifest,
    pub tensors: TensorMap,
}

impl Model {
    pub fn new(manifest: ModelManifest, tensors: TensorMap) -> Result<Self> {
        validate(&manifest, &tensors)?;
        Ok(Model { manifest, tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = load_archive(path)?;
        Ok(Model { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_archive(&self.manifest, &self.tensors, path)
    }

    pub fn graph(&self) -> Result<GraphInfo> {
        self.manifest.analyze()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.manifest, &self.tensors)
    }

    pub fn tensor(&self, name: &str) -> &TensorRecord {
        &self.tensors[name]
    }
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<(ModelManifest, TensorMap)> {
    let dir = path.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::json(mpath.display().to_string(), e))?;
    manifest.analyze()?;

    let mut tensors = TensorMap::new();
    for (_, name, shape) in manifest.tensor_refs() {
        check_tensor_name(name)?;
        if tensors.contains_key(name) {
            continue;
        }
        let tpath = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let t = TensorRecord::from_le_bytes(name, shape, &bytes)?;
        tensors.insert(name.to_string(), t);
    }
    validate(&manifest, &tensors)?;
    Ok((manifest, tensors))
}

pub fn save_archive(manifest: &ModelManifest, tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    validate(manifest, tensors)?;
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest_json(manifest)).map_err(|e| Error::io(&mpath, e))?;
    for (name, t) in tensors {
        let tpath = dir.join(format!("{name}.bin"));
        fs::write(&tpath, t.to_le_bytes()).map_err(|e| Error::io(&tpath, e))?;
    }
    Ok(())
}

/// Canonical pretty-printed manifest text, newline terminated.
pub fn manifest_json(manifest: &ModelManifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}

/// SHA-256 over the canonical manifest and every tensor's name, shape and
/// bytes, in name order.
pub fn fingerprint(manifest: &ModelManifest, tensors: &TensorMap) -> String {
    let mut h = Sha256::new();
    h.update(manifest_json(manifest).as_bytes());
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn one_conv() -> (ModelManifest, TensorMap) {
        let m: ModelManifest = serde_json::from_value(json!({
            "input_shape": [3, 5, 5],
            "layers": [{"id": "conv1", "kind": "conv2d", "inputs": ["input"], "prunable": true,
                "params": {"out_channels": 4, "in_channels": 3, "kernel": 3, "stride": 1, "padding": 1,
                           "has_bias": true, "weight": "conv1.weight", "bias": "conv1.bias"}}]
        }))
        .unwrap();
        let mut t = TensorMap::new();
        let w: Vec<f32> = (0..108).map(|i| i as f32 * 0.01).collect();
        t.insert("conv1.weight".into(), TensorRecord::new("conv1.weight", vec![4, 3, 3, 3], w).unwrap());
        t.insert("conv1.bias".into(), TensorRecord::new("conv1.bias", vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        (m, t)
    }

    #[test]
    fn minimal_archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = one_conv();
        save_archive(&m, &t, dir.path()).unwrap();
        let (m2, t2) = load_archive(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(t, t2);
        let info = m2.analyze().unwrap();
        assert_eq!(info.units.len(), 1);
        assert_eq!(m2.layers[0].out_width(), Some(4));
    }

    #[test]
    fn short_weight_file_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = one_conv();
        save_archive(&m, &t, dir.path()).unwrap();
        fs::write(dir.path().join("conv1.weight.bin"), vec![0u8; 107 * 4]).unwrap();
        let err = load_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
        assert!(err.to_string().contains("conv1.weight"), "{err}");
    }

    #[test]
    fn missing_tensor_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = one_conv();
        save_archive(&m, &t, dir.path()).unwrap();
        fs::remove_file(dir.path().join("conv1.bias.bin")).unwrap();
        let err = load_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing file"), "{err}");
        assert!(matches!(load_archive(dir.path().join("nope")).unwrap_err(), Error::MissingFile(_)));
    }

    #[test]
    fn non_finite_weights_rejected_on_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let (m, mut t) = one_conv();
        save_archive(&m, &t, dir.path()).unwrap();
        t.get_mut("conv1.weight").unwrap().data[5] = f32::NAN;
        let err = save_archive(&m, &t, dir.path()).unwrap_err();
        assert!(err.to_string().contains("non-finite weight"), "{err}");

        let mut bytes = fs::read(dir.path().join("conv1.bias.bin")).unwrap();
        bytes[0..4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(dir.path().join("conv1.bias.bin"), bytes).unwrap();
        assert!(matches!(load_archive(dir.path()).unwrap_err(), Error::NonFinite { .. }));
    }

    #[test]
    fn empty_tensor_map_is_dangling() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = one_conv();
        let err = save_archive(&m, &TensorMap::new(), dir.path()).unwrap_err();
        assert!(err.to_string().contains("dangling reference"), "{err}");
    }

    #[test]
    fn extra_tensor_rejected() {
        let (m, mut t) = one_conv();
        t.insert("stray".into(), TensorRecord::zeros("stray", vec![2]).unwrap());
        assert!(matches!(validate(&m, &t).unwrap_err(), Error::UnreferencedTensor(_)));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let (m, mut t) = one_conv();
        let a = fingerprint(&m, &t);
        t.get_mut("conv1.bias").unwrap().data[0] = 0.5;
        assert_ne!(a, fingerprint(&m, &t));
        assert_eq!(a.len(), 64);
    }
}
