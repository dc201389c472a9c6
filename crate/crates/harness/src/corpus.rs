//! Synthetic scene corpus: deterministic per-split scene seeds, optionally
//! materialized on disk.
//!
//! Layout of a written corpus:
//!
//! ```text
//! <dir>/manifest.json                     index (config + scene seeds per split)
//! <dir>/<split>/scene_<id>.img.dpr         3-channel image
//! <dir>/<split>/scene_<id>.gt.dpr          dense ground truth
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use depthprompt_core::io::{read_image, read_raster, write_image, write_raster, RasterFormat};
use depthprompt_core::{generate_scene, DepthRaster, Execution, ImageRaster, SceneSpec};

use crate::config::{CorpusConfig, SplitSeeds};
use crate::error::{HarnessError, Result};

pub const INDEX_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    /// Scene generator seed; also keys per-scene sensor draws.
    pub seed: u64,
    pub image: ImageRaster,
    pub gt: DepthRaster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub config: CorpusConfig,
    pub splits: SplitSeeds,
    pub scene_seeds: BTreeMap<Split, Vec<u64>>,
}

fn split_seed(seeds: &SplitSeeds, split: Split) -> u64 {
    match split {
        Split::Pretrain => seeds.pretrain,
        Split::Train => seeds.train,
        Split::Val => seeds.val,
        Split::Test => seeds.test,
    }
}

fn split_len(cfg: &CorpusConfig, split: Split) -> usize {
    match split {
        Split::Pretrain => cfg.n_pretrain,
        Split::Train => cfg.n_train,
        Split::Val => cfg.n_val,
        Split::Test => cfg.n_test,
    }
}

/// Scene seeds of every split: split seed plus scene index. Fails if two
/// splits would share a scene.
pub fn build_index(cfg: &CorpusConfig, seeds: &SplitSeeds) -> Result<CorpusIndex> {
    let mut scene_seeds = BTreeMap::new();
    let mut seen = HashSet::new();
    for split in Split::ALL {
        let base = split_seed(seeds, split);
        let list: Vec<u64> = (0..split_len(cfg, split) as u64).map(|i| base.wrapping_add(i)).collect();
        for &s in &list {
            if !seen.insert(s) {
                return Err(HarnessError::Config(format!(
                    "scene seed {s} appears in more than one split"
                )));
            }
        }
        scene_seeds.insert(split, list);
    }
    Ok(CorpusIndex {
        config: cfg.clone(),
        splits: *seeds,
        scene_seeds,
    })
}

fn scene_spec(cfg: &CorpusConfig, seed: u64) -> SceneSpec {
    SceneSpec::new(cfg.height, cfg.width, cfg.n_planes, cfg.depth_range, seed)
}

/// Scenes of one split, synthesized in memory.
pub fn synthesize(cfg: &CorpusConfig, seeds: &SplitSeeds, split: Split, exec: Execution) -> Result<Vec<Scene>> {
    let index = build_index(cfg, seeds)?;
    let list = &index.scene_seeds[&split];
    exec.map_range(list.len(), |id| {
        let seed = list[id];
        let (image, gt) = generate_scene(&scene_spec(cfg, seed))?;
        Ok(Scene { id, seed, image, gt })
    })
    .into_iter()
    .collect()
}

/// Writes every split plus the index under `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, seeds: &SplitSeeds, exec: Execution) -> Result<CorpusIndex> {
    let index = build_index(cfg, seeds)?;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
        for scene in synthesize(cfg, seeds, split, exec)? {
            write_image(&scene.image, sub.join(format!("scene_{:05}.img.dpr", scene.id)))?;
            write_raster(
                &scene.gt,
                sub.join(format!("scene_{:05}.gt.dpr", scene.id)),
                RasterFormat::Float32Raster,
            )?;
        }
    }
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index)?;
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<CorpusIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads one split of a written corpus.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Scene>> {
    let index = read_index(dir)?;
    let sub = dir.join(split.name());
    index.scene_seeds[&split]
        .iter()
        .enumerate()
        .map(|(id, &seed)| {
            let image = read_image(sub.join(format!("scene_{id:05}.img.dpr")))?;
            let gt = read_raster(sub.join(format!("scene_{id:05}.gt.dpr")), RasterFormat::Float32Raster)?;
            Ok(Scene { id, seed, image, gt })
        })
        .collect()
}

/// One split, from disk when the config names a corpus directory.
pub fn load_split(cfg: &CorpusConfig, seeds: &SplitSeeds, split: Split, exec: Execution) -> Result<Vec<Scene>> {
    match &cfg.path {
        Some(dir) => {
            if !dir.join(INDEX_FILE).is_file() {
                return Err(HarnessError::io(
                    dir.join(INDEX_FILE),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "corpus index not found"),
                ));
            }
            read_split(dir, split)
        }
        None => synthesize(cfg, seeds, split, exec),
    }
}
