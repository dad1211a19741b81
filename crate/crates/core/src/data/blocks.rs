//! Splitting rooms into overlapping square blocks, point sampling and the
//! 9-channel per-point featurization.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scene, BACKGROUND_CLASS};
use crate::error::{Error, Result};
use crate::geometry::{BBox, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockingConfig {
    /// Side of the square block footprint, meters.
    pub block_size: f64,
    pub stride: f64,
    /// Points per block during training.
    pub train_points: usize,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        Self {
            block_size: 1.0,
            stride: 0.5,
            train_points: 4096,
        }
    }
}

impl BlockingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.block_size > 0.0) {
            return Err(Error::config("block_size", "must be positive"));
        }
        if !(self.stride > 0.0) {
            return Err(Error::config("stride", "must be positive"));
        }
        if self.train_points == 0 {
            return Err(Error::config("train_points", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockInstance {
    /// Tight box of the member points, in block-local coordinates.
    pub bbox: BBox,
    /// Indices into the block's points.
    pub points: Vec<usize>,
    pub class: usize,
    /// Index of the instance in the parent scene.
    pub scene_instance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub scene_id: String,
    /// `(x, y)` of the footprint's min corner, room coordinates.
    pub origin: [f64; 2],
    pub size: f64,
    /// Index of each block point in the parent scene.
    pub point_indices: Vec<usize>,
    /// Points in room coordinates, as in the parent scene.
    pub cloud: PointCloud,
    pub instances: Vec<BlockInstance>,
    pub labels: Vec<usize>,
    pub room_extent: [f64; 3],
}

const TOL: f64 = 1e-9;

fn axis_origins(room: f64, block: f64, stride: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let o = k as f64 * stride;
        if o + block >= room - TOL {
            out.push((room - block).max(0.0).min(o));
            break;
        }
        out.push(o);
        k += 1;
    }
    out
}

impl Block {
    pub fn n_points(&self) -> usize {
        self.point_indices.len()
    }

    /// Offset that maps room coordinates to block-local ones.
    pub fn local_offset(&self) -> [f64; 3] {
        [-self.origin[0], -self.origin[1], 0.0]
    }

    /// Block-local positions in meters: `(x - ox, y - oy, z)`.
    pub fn local_positions(&self) -> Array2<f64> {
        let mut pos = self.cloud.positions();
        for mut row in pos.rows_mut() {
            row[0] -= self.origin[0];
            row[1] -= self.origin[1];
        }
        pos
    }

    /// Keeps the given block-local point indices (repeats allowed).
    fn subset(&self, keep: &[usize]) -> Result<Block> {
        let cloud = PointCloud::new(self.cloud.points().select(Axis(0), keep))?;
        let point_indices = keep.iter().map(|&i| self.point_indices[i]).collect();
        let labels = keep.iter().map(|&i| self.labels[i]).collect();
        let mut owner = vec![usize::MAX; self.n_points()];
        for (t, inst) in self.instances.iter().enumerate() {
            for &p in &inst.points {
                owner[p] = t;
            }
        }
        let instances = rebuild_instances(&cloud, keep.iter().map(|&i| owner[i]), &self.instances, self.origin);
        Ok(Block {
            scene_id: self.scene_id.clone(),
            origin: self.origin,
            size: self.size,
            point_indices,
            cloud,
            instances,
            labels,
            room_extent: self.room_extent,
        })
    }
}

/// Groups points by owning instance, keeping instances in their original order.
fn rebuild_instances(
    cloud: &PointCloud,
    owners: impl Iterator<Item = usize>,
    templates: &[BlockInstance],
    origin: [f64; 2],
) -> Vec<BlockInstance> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); templates.len()];
    for (i, o) in owners.enumerate() {
        if o != usize::MAX {
            members[o].push(i);
        }
    }
    templates
        .iter()
        .zip(members)
        .filter(|(_, m)| !m.is_empty())
        .map(|(tpl, m)| {
            let bbox = BBox::bounding(m.iter().map(|&p| {
                let xyz = cloud.xyz(p);
                [xyz[0] - origin[0], xyz[1] - origin[1], xyz[2]]
            }))
            .expect("non-empty member set");
            BlockInstance {
                bbox,
                points: m,
                class: tpl.class,
                scene_instance: tpl.scene_instance,
            }
        })
        .collect()
}

/// Covers the room footprint with `block x block` squares on a `stride` grid,
/// the last row and column clamped to the room edge. Blocks keep the full
/// height of the room.
pub fn split_blocks(scene: &Scene, block: f64, stride: f64) -> Result<Vec<Block>> {
    if !(block > 0.0 && stride > 0.0) {
        return Err(Error::config("block_size/stride", "must be positive"));
    }
    let [rx, ry, _] = scene.room_extent;
    if rx < block - TOL || ry < block - TOL {
        return Err(Error::config(
            "block_size",
            format!("room {rx} x {ry} is smaller than a {block} m block"),
        ));
    }
    let labels = scene.semantic_labels();
    let mut owner = vec![usize::MAX; scene.cloud.n_points()];
    for (t, inst) in scene.instances.iter().enumerate() {
        for &p in &inst.points {
            owner[p] = t;
        }
    }
    let templates: Vec<BlockInstance> = scene
        .instances
        .iter()
        .enumerate()
        .map(|(t, inst)| BlockInstance {
            bbox: inst.bbox,
            points: Vec::new(),
            class: inst.class,
            scene_instance: t,
        })
        .collect();

    let mut blocks = Vec::new();
    for &oy in &axis_origins(ry, block, stride) {
        for &ox in &axis_origins(rx, block, stride) {
            let members: Vec<usize> = (0..scene.cloud.n_points())
                .filter(|&n| {
                    let [x, y, _] = scene.cloud.xyz(n);
                    x >= ox - TOL && x <= ox + block + TOL && y >= oy - TOL && y <= oy + block + TOL
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let cloud = PointCloud::new(scene.cloud.points().select(Axis(0), &members))?;
            let instances = rebuild_instances(&cloud, members.iter().map(|&n| owner[n]), &templates, [ox, oy]);
            blocks.push(Block {
                scene_id: scene.id.clone(),
                origin: [ox, oy],
                size: block,
                labels: members.iter().map(|&n| labels[n]).collect(),
                point_indices: members,
                cloud,
                instances,
                room_extent: scene.room_extent,
            });
        }
    }
    Ok(blocks)
}

/// Training mode draws exactly `n` points: a random subset when the block is
/// large enough, otherwise every point plus draws with replacement. Test mode
/// returns the block unchanged.
pub fn sample_block_points(block: &Block, n: usize, train_mode: bool, rng: &mut impl Rng) -> Result<Block> {
    let m = block.n_points();
    if m == 0 {
        return Err(Error::Empty("block has no points"));
    }
    if !train_mode {
        return Ok(block.clone());
    }
    let mut keep: Vec<usize> = if m >= n {
        index::sample(rng, m, n).into_vec()
    } else {
        let mut k: Vec<usize> = (0..m).collect();
        k.extend((m..n).map(|_| rng.random_range(0..m)));
        k
    };
    // Stable point order keeps outputs independent of the sampler's internal order.
    keep.sort_unstable();
    block.subset(&keep)
}

/// Nine channels per point: xyz normalized inside the block (z by room
/// height), rgb, and xyz normalized inside the room.
pub fn featurize_9d(block: &Block, room_extent: [f64; 3]) -> Result<PointCloud> {
    if block.cloud.channels() < 6 {
        return Err(Error::ShapeMismatch {
            context: "featurize_9d input channels",
            expected: ">= 6 (xyz rgb)".into(),
            got: block.cloud.channels().to_string(),
        });
    }
    let n = block.n_points();
    let mut out = Array2::zeros((n, 9));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let p = block.cloud.point(i);
        row[0] = (p[0] - block.origin[0]) / block.size;
        row[1] = (p[1] - block.origin[1]) / block.size;
        row[2] = p[2] / room_extent[2];
        row[3] = p[3];
        row[4] = p[4];
        row[5] = p[5];
        row[6] = p[0] / room_extent[0];
        row[7] = p[1] / room_extent[1];
        row[8] = p[2] / room_extent[2];
    }
    PointCloud::new(out)
}

/// A model-ready block: network input plus everything the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `N x 9` network input.
    pub features: Array2<f64>,
    /// `N x 3` block-local positions in meters; boxes live in this frame.
    pub positions: Array2<f64>,
    pub gt_boxes: Vec<BBox>,
    pub gt_classes: Vec<usize>,
    /// `T x N` instance masks with entries in {0, 1}.
    pub gt_masks: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Sample {
    pub fn from_block(block: &Block) -> Result<Self> {
        let features = featurize_9d(block, block.room_extent)?.into_inner();
        let n = block.n_points();
        let t = block.instances.len();
        let mut gt_masks = Array2::zeros((t, n));
        for (j, inst) in block.instances.iter().enumerate() {
            for &p in &inst.points {
                gt_masks[[j, p]] = 1.0;
            }
        }
        Ok(Sample {
            id: format!("{}@{:.3},{:.3}", block.scene_id, block.origin[0], block.origin[1]),
            features,
            positions: block.local_positions(),
            gt_boxes: block.instances.iter().map(|i| i.bbox).collect(),
            gt_classes: block.instances.iter().map(|i| i.class).collect(),
            gt_masks,
            labels: block.labels.clone(),
        })
    }

    pub fn n_points(&self) -> usize {
        self.features.nrows()
    }

    pub fn t_gt(&self) -> usize {
        self.gt_boxes.len()
    }

    /// Same sample with ground-truth instances listed in a different order.
    pub fn permute_instances(&self, order: &[usize]) -> Sample {
        let mut s = self.clone();
        s.gt_boxes = order.iter().map(|&i| self.gt_boxes[i]).collect();
        s.gt_classes = order.iter().map(|&i| self.gt_classes[i]).collect();
        s.gt_masks = self.gt_masks.select(Axis(0), order);
        s
    }

    pub fn background_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == BACKGROUND_CLASS).count() as f64 / self.labels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Scene {
        generate_scene(&GenConfig::default(), 0).unwrap()
    }

    #[test]
    fn origins() {
        assert_eq!(axis_origins(2.0, 1.0, 0.5), vec![0.0, 0.5, 1.0]);
        assert_eq!(axis_origins(1.0, 1.0, 0.5), vec![0.0]);
        let o = axis_origins(2.2, 1.0, 0.5);
        assert_eq!(o.len(), 4);
        for (a, b) in o.iter().zip([0.0, 0.5, 1.0, 1.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_meter_room_gives_nine_blocks() {
        let s = scene();
        let blocks = split_blocks(&s, 1.0, 0.5).unwrap();
        assert_eq!(blocks.len(), 9);
        let mut seen = vec![0usize; s.cloud.n_points()];
        for b in &blocks {
            for &p in &b.point_indices {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c >= 1));
    }

    #[test]
    fn small_room_rejected() {
        let mut s = scene();
        s.room_extent = [0.8, 2.0, 2.0];
        assert!(split_blocks(&s, 1.0, 0.5).is_err());
    }

    #[test]
    fn block_instances_are_tight_and_local() {
        let s = scene();
        for b in split_blocks(&s, 1.0, 0.5).unwrap() {
            let pos = b.local_positions();
            for inst in &b.instances {
                for &p in &inst.points {
                    let xyz = [pos[[p, 0]], pos[[p, 1]], pos[[p, 2]]];
                    assert!(inst.bbox.contains(xyz));
                    assert_eq!(b.labels[p], inst.class);
                }
            }
        }
    }

    #[test]
    fn sampling_modes() {
        let s = scene();
        let block = split_blocks(&s, 2.0, 0.5).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let small = sample_block_points(&block, 100, true, &mut rng).unwrap();
        assert_eq!(small.n_points(), 100);
        assert!(small.point_indices.iter().all(|p| block.point_indices.contains(p)));
        let big = sample_block_points(&block, 4096, true, &mut rng).unwrap();
        assert_eq!(big.n_points(), 4096);
        assert!(big.point_indices.iter().all(|p| block.point_indices.contains(p)));
        let same = sample_block_points(&block, 4096, false, &mut rng).unwrap();
        assert_eq!(same, block);
    }

    #[test]
    fn featurize_ranges() {
        let s = scene();
        for b in split_blocks(&s, 1.0, 0.5).unwrap() {
            let f = featurize_9d(&b, s.room_extent).unwrap();
            assert_eq!(f.channels(), 9);
            assert!(f.points().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }
}
