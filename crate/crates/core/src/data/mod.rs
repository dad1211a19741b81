//! Synthetic indoor scenes: axis-aligned object instances resting above a
//! floor of background points.

mod blocks;
mod io;

pub use blocks::{
    featurize_9d, sample_block_points, split_blocks, Block, BlockInstance, BlockingConfig, Sample,
};
pub use io::{
    load_scene, save_scene, scene_from_json, scene_to_json, DatasetManifest, SceneEntry, Split, MANIFEST_FORMAT_VERSION,
    SCENE_FORMAT_VERSION,
};
pub(crate) use io::write_atomic;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, PointCloud};
use crate::seed::{derive, streams};

/// Class id carried by points that belong to no instance.
pub const BACKGROUND_CLASS: usize = 0;

/// Smallest allowed per-axis extent of an instance box, in meters.
pub const MIN_INSTANCE_EXTENT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub points: Vec<usize>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// Points with xyz in room coordinates followed by rgb.
    pub cloud: PointCloud,
    pub instances: Vec<Instance>,
    pub room_extent: [f64; 3],
}

impl Scene {
    pub fn n_instances(&self) -> usize {
        self.instances.len()
    }

    /// Per-point semantic class; uncovered points are background.
    pub fn semantic_labels(&self) -> Vec<usize> {
        let mut labels = vec![BACKGROUND_CLASS; self.cloud.n_points()];
        for inst in &self.instances {
            for &p in &inst.points {
                labels[p] = inst.class;
            }
        }
        labels
    }

    /// Checks disjointness, index range and closed-box containment.
    pub fn validate(&self) -> Result<()> {
        let n = self.cloud.n_points();
        let mut owner = vec![usize::MAX; n];
        for (t, inst) in self.instances.iter().enumerate() {
            inst.bbox.validate_ground_truth()?;
            if inst.points.is_empty() {
                return Err(Error::config(format!("instances[{t}]"), "has no points"));
            }
            for &p in &inst.points {
                if p >= n {
                    return Err(Error::IndexOutOfRange {
                        context: "instance point",
                        index: p,
                        len: n,
                    });
                }
                if owner[p] != usize::MAX {
                    return Err(Error::config(
                        format!("instances[{t}]"),
                        format!("point {p} also belongs to instance {}", owner[p]),
                    ));
                }
                owner[p] = t;
                if !inst.bbox.contains(self.cloud.xyz(p)) {
                    return Err(Error::config(
                        format!("instances[{t}]"),
                        format!("point {p} lies outside the instance box"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceShape {
    /// Points uniform inside the box.
    UniformBox,
    /// Axis-aligned Gaussian around the box center, truncated to the box.
    GaussianBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub room_extent_min: [f64; 3],
    pub room_extent_max: [f64; 3],
    pub instances_min: usize,
    pub instances_max: usize,
    pub points_per_instance_min: usize,
    pub points_per_instance_max: usize,
    pub background_points: usize,
    pub shapes: Vec<InstanceShape>,
    /// Semantic classes including the background class 0.
    pub num_classes: usize,
    pub instance_extent_min: f64,
    pub instance_extent_max: f64,
    /// Minimum gap between instance boxes; negative allows overlapping boxes.
    pub min_separation: f64,
    /// Background points occupy `z` in `[0, floor_thickness]`.
    pub floor_thickness: f64,
    /// Instance boxes start at or above this height.
    pub object_clearance: f64,
    pub color_jitter: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            room_extent_min: [2.0, 2.0, 2.0],
            room_extent_max: [2.0, 2.0, 2.0],
            instances_min: 1,
            instances_max: 4,
            points_per_instance_min: 512,
            points_per_instance_max: 512,
            background_points: 256,
            shapes: vec![InstanceShape::UniformBox, InstanceShape::GaussianBlob],
            num_classes: 4,
            instance_extent_min: 0.25,
            instance_extent_max: 0.8,
            min_separation: 0.1,
            floor_thickness: 0.02,
            object_clearance: 0.05,
            color_jitter: 0.03,
            max_attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.room_extent_min[a] > 0.0) {
                return Err(Error::config("room_extent_min", "must be positive"));
            }
            if self.room_extent_min[a] > self.room_extent_max[a] {
                return Err(Error::config("room_extent", "min exceeds max"));
            }
        }
        if self.instances_min > self.instances_max {
            return Err(Error::config("instances_min", "exceeds instances_max"));
        }
        if self.points_per_instance_min > self.points_per_instance_max {
            return Err(Error::config(
                "points_per_instance_min",
                "exceeds points_per_instance_max",
            ));
        }
        if self.instances_max > 0 && self.points_per_instance_min < 2 {
            return Err(Error::config("points_per_instance_min", "must be >= 2"));
        }
        if self.instances_max == 0 && self.background_points == 0 {
            return Err(Error::config("background_points", "scene would be empty"));
        }
        if self.instances_max > 0 && self.shapes.is_empty() {
            return Err(Error::config("shapes", "needs at least one shape"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "needs background plus one class"));
        }
        if self.instance_extent_min < MIN_INSTANCE_EXTENT {
            return Err(Error::config(
                "instance_extent_min",
                format!("must be >= {MIN_INSTANCE_EXTENT}"),
            ));
        }
        if self.instance_extent_min > self.instance_extent_max {
            return Err(Error::config("instance_extent_min", "exceeds instance_extent_max"));
        }
        if self.floor_thickness < 0.0 || self.object_clearance <= self.floor_thickness {
            return Err(Error::config(
                "object_clearance",
                "must exceed floor_thickness so background stays outside instance boxes",
            ));
        }
        if self.color_jitter < 0.0 {
            return Err(Error::config("color_jitter", "must be >= 0"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts", "must be >= 1"));
        }
        Ok(())
    }

    /// Deterministic base color per class; class 0 is grey.
    pub fn palette(class: usize) -> [f64; 3] {
        const COLORS: [[f64; 3]; 8] = [
            [0.5, 0.5, 0.5],
            [0.85, 0.2, 0.15],
            [0.15, 0.7, 0.25],
            [0.2, 0.3, 0.85],
            [0.9, 0.8, 0.1],
            [0.6, 0.2, 0.7],
            [0.1, 0.75, 0.8],
            [0.95, 0.5, 0.1],
        ];
        if class < COLORS.len() {
            COLORS[class]
        } else {
            let t = class as f64 * 0.618_033_988_75;
            [t.fract(), (t * 2.0).fract(), (t * 3.0).fract()]
        }
    }
}

fn boxes_clear(a: &BBox, b: &BBox, gap: f64) -> bool {
    (0..3).any(|k| a.vmax[k] + gap <= b.vmin[k] || b.vmax[k] + gap <= a.vmin[k])
}

fn colored(rng: &mut ChaCha8Rng, jitter: &Option<Normal<f64>>, class: usize) -> [f64; 3] {
    let base = GenConfig::palette(class);
    let mut c = base;
    if let Some(j) = jitter {
        for v in &mut c {
            *v = (*v + j.sample(rng)).clamp(0.0, 1.0);
        }
    }
    c
}

fn sample_instance_points(
    rng: &mut ChaCha8Rng,
    shape: InstanceShape,
    region: &BBox,
    count: usize,
) -> Vec<[f64; 3]> {
    let ext = region.extent();
    match shape {
        InstanceShape::UniformBox => (0..count)
            .map(|_| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = region.vmin[a] + rng.random::<f64>() * ext[a];
                }
                p
            })
            .collect(),
        InstanceShape::GaussianBlob => {
            let mut out = Vec::with_capacity(count);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            while out.len() < count {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let center = 0.5 * (region.vmin[a] + region.vmax[a]);
                    p[a] = center + normal.sample(rng) * ext[a] / 6.0;
                }
                if region.contains(p) {
                    out.push(p);
                }
            }
            out
        }
    }
}

/// Generates scene `index` of the stream defined by `cfg.seed`.
pub fn generate_scene(cfg: &GenConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, streams::SCENE, index));
    let mut room = [0.0; 3];
    for a in 0..3 {
        room[a] = if cfg.room_extent_min[a] == cfg.room_extent_max[a] {
            cfg.room_extent_min[a]
        } else {
            rng.random_range(cfg.room_extent_min[a]..=cfg.room_extent_max[a])
        };
    }
    let n_instances = rng.random_range(cfg.instances_min..=cfg.instances_max);
    let jitter = (cfg.color_jitter > 0.0)
        .then(|| Normal::new(0.0, cfg.color_jitter).expect("positive jitter"));

    let mut rows: Vec<[f64; 6]> = Vec::new();
    let mut instances = Vec::with_capacity(n_instances);
    let mut regions: Vec<BBox> = Vec::new();
    for t in 0..n_instances {
        let class = rng.random_range(1..cfg.num_classes);
        let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let count = rng.random_range(cfg.points_per_instance_min..=cfg.points_per_instance_max);
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let mut ext = [0.0; 3];
            let mut vmin = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let floor = if a == 2 { cfg.object_clearance } else { 0.0 };
                let room_span = room[a] - floor;
                let hi = cfg.instance_extent_max.min(room_span);
                if hi < cfg.instance_extent_min {
                    fits = false;
                    break;
                }
                ext[a] = rng.random_range(cfg.instance_extent_min..=hi);
                vmin[a] = floor + rng.random::<f64>() * (room_span - ext[a]);
            }
            if !fits {
                break;
            }
            let region = BBox::new(vmin, [vmin[0] + ext[0], vmin[1] + ext[1], vmin[2] + ext[2]]);
            if cfg.min_separation >= 0.0
                && !regions.iter().all(|r| boxes_clear(r, &region, cfg.min_separation))
            {
                continue;
            }
            let pts = sample_instance_points(&mut rng, shape, &region, count);
            let tight = BBox::bounding(pts.iter().copied()).expect("count >= 2");
            if tight.extent().iter().any(|&e| e < MIN_INSTANCE_EXTENT) {
                continue;
            }
            placed = Some((region, tight, pts));
            break;
        }
        let Some((region, tight, pts)) = placed else {
            return Err(Error::Infeasible(format!(
                "could not place instance {t} of {n_instances} after {} attempts",
                cfg.max_attempts
            )));
        };
        regions.push(region);
        let start = rows.len();
        for p in pts {
            let c = colored(&mut rng, &jitter, class);
            rows.push([p[0], p[1], p[2], c[0], c[1], c[2]]);
        }
        instances.push(Instance {
            bbox: tight,
            points: (start..rows.len()).collect(),
            class,
        });
    }
    for _ in 0..cfg.background_points {
        let p = [
            rng.random::<f64>() * room[0],
            rng.random::<f64>() * room[1],
            rng.random::<f64>() * cfg.floor_thickness.min(room[2]),
        ];
        let c = colored(&mut rng, &jitter, BACKGROUND_CLASS);
        rows.push([p[0], p[1], p[2], c[0], c[1], c[2]]);
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let cloud = PointCloud::new(
        Array2::from_shape_vec((rows.len(), 6), flat).expect("rows have six channels"),
    )?;
    let scene = Scene {
        id: format!("scene_{index:05}"),
        cloud,
        instances,
        room_extent: room,
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::hard_membership;

    #[test]
    fn deterministic_per_index() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 3).unwrap());
        assert_ne!(
            generate_scene(&cfg, 3).unwrap().cloud,
            generate_scene(&cfg, 4).unwrap().cloud
        );
    }

    #[test]
    fn instances_contained_and_disjoint() {
        let cfg = GenConfig::default();
        for i in 0..10 {
            let s = generate_scene(&cfg, i).unwrap();
            assert!((1..=4).contains(&s.n_instances()));
            for inst in &s.instances {
                let hm = hard_membership(&s.cloud, &inst.bbox).unwrap();
                assert!(inst.points.iter().all(|&p| hm.0[p]));
                // Background and other instances stay outside.
                assert_eq!(hm.count(), inst.points.len());
                assert!(inst.bbox.extent().iter().all(|&e| e >= MIN_INSTANCE_EXTENT));
            }
            s.validate().unwrap();
        }
    }

    #[test]
    fn empty_scene() {
        let cfg = GenConfig {
            instances_min: 0,
            instances_max: 0,
            ..GenConfig::default()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        assert_eq!(s.n_instances(), 0);
        assert_eq!(s.cloud.n_points(), 256);
        assert!(s.semantic_labels().iter().all(|&l| l == BACKGROUND_CLASS));
    }

    #[test]
    fn infeasible_placement_reported() {
        let cfg = GenConfig {
            room_extent_min: [1.0, 1.0, 1.0],
            room_extent_max: [1.0, 1.0, 1.0],
            instances_min: 6,
            instances_max: 6,
            instance_extent_min: 0.7,
            instance_extent_max: 0.8,
            ..GenConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn config_validation() {
        let bad = GenConfig {
            instances_min: 5,
            instances_max: 2,
            ..GenConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { .. })));
        let bad = GenConfig {
            instance_extent_min: 0.05,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
