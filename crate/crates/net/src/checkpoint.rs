//! Checkpoints: `manifest.json` (architecture, parameter index, seeds,
//! provenance) next to `params.bin`, a flat little-endian `f32` blob.
//!
//! Parameters are addressed by name (`foundation.<layer>.weight` or
//! `prompt.<layer>.bias`, ...), so a blob can be reloaded into freshly built
//! networks regardless of initialization seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::foundation::{BackboneConfig, FoundationModel};
use crate::params::{ParamKind, ParamStore};
use crate::pipeline::PipelineConfig;
use crate::prompt::{PromptConfig, PromptModule};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const SCHEMA_VERSION: u32 = 1;

const FOUNDATION_PREFIX: &str = "foundation.";
const PROMPT_PREFIX: &str = "prompt.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub pipeline: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Free-form training provenance (variant, epochs, final loss, ...).
    pub provenance: BTreeMap<String, String>,
    pub parameter_count: usize,
    pub params: Vec<BlobEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub foundation: FoundationModel,
    pub prompt: PromptModule,
    pub pipeline: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub provenance: BTreeMap<String, String>,
}

fn index(store: &ParamStore, prefix: &str, base: usize, out: &mut Vec<BlobEntry>) {
    for e in store.entries() {
        out.push(BlobEntry {
            name: format!("{prefix}{}", e.name),
            offset: base + e.offset,
            shape: e.shape.clone(),
            kind: e.kind,
            trainable: e.trainable,
        });
    }
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let mut params = Vec::new();
        let f = self.foundation.store();
        index(f, FOUNDATION_PREFIX, 0, &mut params);
        index(self.prompt.store(), PROMPT_PREFIX, f.len(), &mut params);
        Manifest {
            schema_version: SCHEMA_VERSION,
            backbone: *self.foundation.config(),
            prompt: *self.prompt.config(),
            pipeline: self.pipeline,
            seeds: self.seeds.clone(),
            provenance: self.provenance.clone(),
            parameter_count: f.len() + self.prompt.store().len(),
            params,
        }
    }

    /// Every parameter, foundation first, as little-endian bytes.
    pub fn blob(&self) -> Vec<u8> {
        self.foundation
            .store()
            .values()
            .iter()
            .chain(self.prompt.store().values())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let mpath = dir.join(MANIFEST_FILE);
        std::fs::write(&mpath, manifest).map_err(|e| NetError::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        std::fs::write(&bpath, self.blob()).map_err(|e| NetError::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| NetError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bpath = dir.join(BLOB_FILE);
        let bytes = std::fs::read(&bpath).map_err(|e| NetError::io(&bpath, e))?;
        Self::from_parts(&manifest, &bytes)
    }

    pub fn from_parts(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported schema version {}",
                manifest.schema_version
            )));
        }
        if blob.len() != manifest.parameter_count * 4 {
            return Err(NetError::Checkpoint(format!(
                "blob holds {} bytes, manifest declares {} parameters",
                blob.len(),
                manifest.parameter_count
            )));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut foundation = FoundationModel::new(manifest.backbone, 0);
        let mut prompt = PromptModule::new(manifest.prompt, &manifest.backbone, 0)?;
        let by_name: BTreeMap<&str, &BlobEntry> = manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
        restore(foundation.store_mut(), FOUNDATION_PREFIX, &by_name, &values)?;
        restore(prompt.store_mut(), PROMPT_PREFIX, &by_name, &values)?;
        let expected = foundation.store().len() + prompt.store().len();
        if expected != manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() {
            return Err(NetError::Checkpoint(
                "manifest lists parameters the architecture does not have".into(),
            ));
        }
        Ok(Self {
            foundation,
            prompt,
            pipeline: manifest.pipeline,
            seeds: manifest.seeds.clone(),
            provenance: manifest.provenance.clone(),
        })
    }
}

fn restore(
    store: &mut ParamStore,
    prefix: &str,
    by_name: &BTreeMap<&str, &BlobEntry>,
    values: &[f32],
) -> Result<()> {
    let mut flat = store.values().to_vec();
    let mut trainable = BTreeMap::new();
    for e in store.entries() {
        let name = format!("{prefix}{}", e.name);
        let Some(src) = by_name.get(name.as_str()) else {
            return Err(NetError::Checkpoint(format!("missing parameter {name}")));
        };
        if src.shape != e.shape || src.kind != e.kind {
            return Err(NetError::Checkpoint(format!(
                "parameter {name}: stored {:?} {:?}, expected {:?} {:?}",
                src.kind, src.shape, e.kind, e.shape
            )));
        }
        let end = src.offset + e.len;
        if end > values.len() {
            return Err(NetError::Checkpoint(format!("parameter {name} runs past the blob")));
        }
        flat[e.offset..e.offset + e.len].copy_from_slice(&values[src.offset..end]);
        trainable.insert(e.name.clone(), src.trainable);
    }
    store.load_values(flat).map_err(NetError::Checkpoint)?;
    store.set_trainable(|e| trainable[&e.name]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::apply_bias_tuning;

    fn sample() -> Checkpoint {
        let bb = BackboneConfig::default();
        Checkpoint {
            foundation: apply_bias_tuning(FoundationModel::new(bb, 11)).unwrap(),
            prompt: PromptModule::new(PromptConfig::default(), &bb, 12).unwrap(),
            pipeline: PipelineConfig::default(),
            seeds: BTreeMap::from([("init".to_string(), 11)]),
            provenance: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.blob(), ck.blob());
        assert_eq!(back.foundation, ck.foundation);
        assert_eq!(back.prompt, ck.prompt);
        assert_eq!(back.manifest(), ck.manifest());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let ck = sample();
        let blob = ck.blob();
        let err = Checkpoint::from_parts(&ck.manifest(), &blob[..blob.len() - 4]);
        assert!(matches!(err, Err(NetError::Checkpoint(_))));
    }

    #[test]
    fn missing_entry_is_rejected() {
        let ck = sample();
        let mut m = ck.manifest();
        m.params.retain(|e| e.name != "prompt.head.bias");
        assert!(Checkpoint::from_parts(&m, &ck.blob()).is_err());
    }
}
