//! JSON scene files and the dataset manifest.
//!
//! Scene file layout (`format_version` 1):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "id": "scene_00000",
//!   "room_extent": [2.0, 2.0, 2.0],
//!   "channels": ["x", "y", "z", "r", "g", "b"],
//!   "points": [[x, y, z, r, g, b], ...],
//!   "instances": [{"class": 2, "bbox": {"vmin": [..], "vmax": [..]}, "points": [0, 1, ...]}]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GenConfig, Instance, Scene};
use crate::error::{Error, Result};
use crate::geometry::{BBox, PointCloud};

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    class: usize,
    bbox: BBox,
    points: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    format_version: u32,
    id: String,
    room_extent: [f64; 3],
    channels: Vec<String>,
    points: Vec<Vec<f64>>,
    instances: Vec<InstanceRecord>,
}

fn channel_names(k: usize) -> Vec<String> {
    const NAMES: [&str; 6] = ["x", "y", "z", "r", "g", "b"];
    (0..k)
        .map(|i| NAMES.get(i).map_or_else(|| format!("c{i}"), |s| s.to_string()))
        .collect()
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let record = SceneRecord {
        format_version: SCENE_FORMAT_VERSION,
        id: scene.id.clone(),
        room_extent: scene.room_extent,
        channels: channel_names(scene.cloud.channels()),
        points: scene.cloud.points().rows().into_iter().map(|r| r.to_vec()).collect(),
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceRecord {
                class: i.class,
                bbox: i.bbox,
                points: i.points.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&record).map_err(|e| Error::config("scene", e.to_string()))
}

pub fn scene_from_json(text: &str, origin: &Path) -> Result<Scene> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        message,
    };
    let record: SceneRecord = serde_json::from_str(text).map_err(|e| {
        parse_err(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    if record.format_version != SCENE_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: record.format_version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let k = record.channels.len();
    if let Some((i, row)) = record.points.iter().enumerate().find(|(_, r)| r.len() != k) {
        return Err(parse_err(format!(
            "points[{i}] has {} values, expected {k}",
            row.len()
        )));
    }
    let flat: Vec<f64> = record.points.iter().flatten().copied().collect();
    let points = Array2::from_shape_vec((record.points.len(), k), flat)
        .map_err(|e| parse_err(e.to_string()))?;
    let scene = Scene {
        id: record.id,
        cloud: PointCloud::new(points)?,
        instances: record
            .instances
            .into_iter()
            .map(|i| Instance {
                bbox: i.bbox,
                points: i.points,
                class: i.class,
            })
            .collect(),
        room_extent: record.room_extent,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_atomic(path, scene_to_json(scene)?.as_bytes())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub split: Split,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub gen_config: GenConfig,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "dataset.json";

    pub fn new(gen_config: GenConfig) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            gen_config,
            scenes: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::config("manifest", e.to_string()))?;
        write_atomic(&dir.join(Self::FILE_NAME), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: m.format_version,
                expected: MANIFEST_FORMAT_VERSION,
            });
        }
        Ok(m)
    }

    pub fn files(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        self.scenes
            .iter()
            .filter(|s| s.split == split)
            .map(|s| dir.join(&s.file))
            .collect()
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<Scene>> {
        self.files(dir, split).iter().map(|p| load_scene(p)).collect()
    }
}
