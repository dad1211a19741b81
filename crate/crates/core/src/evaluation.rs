//! Turning network outputs into instance labels, merging overlapping blocks,
//! and instance-level metrics (AP at an IoU threshold, mPrec/mRec).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{split_blocks, BlockingConfig, Sample, Scene, BACKGROUND_CLASS};
use crate::error::{Error, Result};
use crate::network::{Model, Prediction};

/// Per-point instance ids plus per-instance class and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLabeling {
    /// Instance id of each point; `-1` is background.
    ids: Vec<i64>,
    classes: Vec<usize>,
    scores: Vec<f64>,
}

impl InstanceLabeling {
    /// Validates that ids are contiguous from 0 and every id owns a point.
    pub fn new(ids: Vec<i64>, classes: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if classes.len() != scores.len() {
            return Err(Error::ShapeMismatch {
                context: "instance labeling",
                expected: format!("{} scores", classes.len()),
                got: scores.len().to_string(),
            });
        }
        let m = classes.len();
        let mut used = vec![false; m];
        for &id in &ids {
            if id < -1 || id >= m as i64 {
                return Err(Error::IndexOutOfRange {
                    context: "instance id",
                    index: id.max(0) as usize,
                    len: m,
                });
            }
            if id >= 0 {
                used[id as usize] = true;
            }
        }
        if let Some(i) = used.iter().position(|&u| !u) {
            return Err(Error::InvalidConfig {
                field: "instance labeling".into(),
                reason: format!("instance {i} has no points"),
            });
        }
        Ok(Self { ids, classes, scores })
    }

    pub fn background(n_points: usize) -> Self {
        Self {
            ids: vec![-1; n_points],
            classes: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn n_points(&self) -> usize {
        self.ids.len()
    }

    pub fn n_instances(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Sorted point indices of each instance.
    pub fn instance_points(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_instances()];
        for (p, &id) in self.ids.iter().enumerate() {
            if id >= 0 {
                out[id as usize].push(p);
            }
        }
        out
    }

    pub fn instances(&self) -> Vec<InstanceSet> {
        self.instance_points()
            .into_iter()
            .enumerate()
            .map(|(i, points)| InstanceSet {
                points,
                class: self.classes[i],
                score: self.scores[i],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub score_thresh: f64,
    pub mask_thresh: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.5,
            mask_thresh: 0.5,
        }
    }
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Keeps boxes scoring at least `score_thresh`; each point joins the kept box
/// with the highest mask probability among those at or above `mask_thresh`
/// (lowest box index on ties), otherwise it is background. An instance takes
/// the majority per-point semantic class (smallest class on ties) and its
/// box score as confidence. Kept boxes that win no point are dropped.
pub fn extract_instances(pred: &Prediction, cfg: &ExtractConfig) -> Result<InstanceLabeling> {
    let (h, n) = pred.masks.dim();
    if pred.scores.len() != h || pred.logits.nrows() != n {
        return Err(Error::ShapeMismatch {
            context: "extract_instances",
            expected: format!("{h} scores and {n} logit rows"),
            got: format!("{} scores and {} logit rows", pred.scores.len(), pred.logits.nrows()),
        });
    }
    let kept: Vec<usize> = (0..h).filter(|&i| pred.scores[i] >= cfg.score_thresh).collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (p, o) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &i in &kept {
            let m = pred.masks[[i, p]];
            if m >= cfg.mask_thresh && best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        *o = best.map(|(i, _)| i);
    }
    let k = pred.logits.ncols();
    let point_class: Vec<usize> = pred.logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();

    // Ids follow kept-box order.
    let mut new_id = vec![None; h];
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    let mut votes: Vec<Vec<usize>> = Vec::new();
    for &i in &kept {
        if owner.contains(&Some(i)) {
            new_id[i] = Some(classes.len() as i64);
            classes.push(0);
            scores.push(pred.scores[i]);
            votes.push(vec![0; k]);
        }
    }
    let ids: Vec<i64> = owner
        .iter()
        .enumerate()
        .map(|(p, o)| match o.and_then(|i| new_id[i]) {
            Some(id) => {
                votes[id as usize][point_class[p]] += 1;
                id
            }
            None => -1,
        })
        .collect();
    for (c, v) in classes.iter_mut().zip(&votes) {
        *c = argmax(v.iter().map(|&x| x as f64));
    }
    InstanceLabeling::new(ids, classes, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub voxel_size: f64,
    /// Fraction of a block instance's voxels that must already carry one
    /// scene instance for the two to merge.
    pub overlap_fraction: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.25,
            overlap_fraction: 0.3,
        }
    }
}

/// Instance labels of one block, tied back to scene points.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLabeling {
    /// Scene index of every block point.
    pub point_indices: Vec<usize>,
    pub labeling: InstanceLabeling,
}

type Voxel = (i64, i64, i64);

fn voxel_of(xyz: [f64; 3], size: f64) -> Voxel {
    (
        (xyz[0] / size).floor() as i64,
        (xyz[1] / size).floor() as i64,
        (xyz[2] / size).floor() as i64,
    )
}

/// Fuses per-block labels into one scene labeling.
///
/// Blocks are visited in order. Each block instance is compared against a
/// scene-level voxel grid of already placed instances: if at least
/// `overlap_fraction` of its voxels hold the same scene instance it joins
/// that instance, otherwise it starts a new one; its voxels are then claimed
/// where still free. Every point votes for the scene instance of each block
/// instance containing it and keeps the most voted one (earliest instance on
/// ties). Merged instances take the point-weighted majority class and the
/// highest confidence; final ids are renumbered by first point.
pub fn block_merging(
    positions: &ndarray::Array2<f64>,
    blocks: &[BlockLabeling],
    cfg: &MergeConfig,
) -> Result<InstanceLabeling> {
    if !(cfg.voxel_size > 0.0) {
        return Err(Error::config("voxel_size", "must be positive"));
    }
    let n = positions.nrows();
    let mut grid: HashMap<Voxel, usize> = HashMap::new();
    let mut scene_scores: Vec<f64> = Vec::new();
    let mut scene_class_votes: Vec<BTreeMap<usize, usize>> = Vec::new();
    let mut point_votes: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];

    for block in blocks {
        if block.point_indices.len() != block.labeling.n_points() {
            return Err(Error::ShapeMismatch {
                context: "block labeling",
                expected: format!("{} labels", block.point_indices.len()),
                got: block.labeling.n_points().to_string(),
            });
        }
        if let Some(&p) = block.point_indices.iter().find(|&&p| p >= n) {
            return Err(Error::IndexOutOfRange {
                context: "scene points",
                index: p,
                len: n,
            });
        }
        for (local, members) in block.labeling.instance_points().into_iter().enumerate() {
            let scene_points: Vec<usize> = members.iter().map(|&i| block.point_indices[i]).collect();
            let voxels: BTreeSet<Voxel> = scene_points
                .iter()
                .map(|&p| voxel_of([positions[[p, 0]], positions[[p, 1]], positions[[p, 2]]], cfg.voxel_size))
                .collect();
            let mut overlap: BTreeMap<usize, usize> = BTreeMap::new();
            for v in &voxels {
                if let Some(&s) = grid.get(v) {
                    *overlap.entry(s).or_default() += 1;
                }
            }
            let best = overlap
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&s, &c)| (s, c));
            let target = match best {
                Some((s, c)) if c as f64 >= cfg.overlap_fraction * voxels.len() as f64 => s,
                _ => {
                    scene_scores.push(f64::NEG_INFINITY);
                    scene_class_votes.push(BTreeMap::new());
                    scene_scores.len() - 1
                }
            };
            for v in voxels {
                grid.entry(v).or_insert(target);
            }
            scene_scores[target] = scene_scores[target].max(block.labeling.scores()[local]);
            *scene_class_votes[target]
                .entry(block.labeling.classes()[local])
                .or_default() += scene_points.len();
            for p in scene_points {
                *point_votes[p].entry(target).or_default() += 1;
            }
        }
    }

    let mut renumber: HashMap<usize, i64> = HashMap::new();
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    let ids = point_votes
        .iter()
        .map(|votes| {
            let Some((&s, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                return -1;
            };
            *renumber.entry(s).or_insert_with(|| {
                let class = scene_class_votes[s]
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(&c, _)| c)
                    .unwrap_or(BACKGROUND_CLASS);
                classes.push(class);
                scores.push(scene_scores[s]);
                classes.len() as i64 - 1
            })
        })
        .collect();
    InstanceLabeling::new(ids, classes, scores)
}

/// `|a ∩ b| / |a ∪ b|` of two point-index sets (duplicates ignored).
pub fn mask_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return Err(Error::Empty("mask IoU of two empty sets"));
    }
    Ok(inter as f64 / union as f64)
}

/// One predicted or ground-truth instance of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSet {
    pub points: Vec<usize>,
    pub class: usize,
    /// Confidence; ignored for ground truth.
    pub score: f64,
}

pub fn ground_truth_instances(scene: &Scene) -> Vec<InstanceSet> {
    scene
        .instances
        .iter()
        .map(|i| {
            let mut points = i.points.clone();
            points.sort_unstable();
            InstanceSet {
                points,
                class: i.class,
                score: 1.0,
            }
        })
        .collect()
}

/// Greedy matching of one class across scenes: predictions in descending
/// confidence each take the highest-IoU unmatched ground truth of the scene
/// if that IoU reaches `iou`. Returns the true-positive flag per prediction
/// in visiting order and the number of ground truths.
fn greedy_match(preds: &[Vec<InstanceSet>], gts: &[Vec<InstanceSet>], class: usize, iou: f64) -> Result<(Vec<bool>, usize)> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            context: "metric inputs",
            expected: format!("{} scenes of predictions", gts.len()),
            got: preds.len().to_string(),
        });
    }
    let mut order: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ps)| {
            ps.iter()
                .enumerate()
                .filter(|(_, p)| p.class == class)
                .map(move |(i, p)| (s, i, p.score))
        })
        .collect();
    // Stable sort keeps scene/instance order among equal confidences.
    order.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let mut flags = Vec::with_capacity(order.len());
    for (s, i, _) in order {
        let pred = &preds[s][i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[s].iter().enumerate() {
            if gt.class != class || used[s][j] {
                continue;
            }
            let v = if pred.points.is_empty() && gt.points.is_empty() {
                0.0
            } else {
                mask_iou(&pred.points, &gt.points)?
            };
            if v >= iou && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[s][j] = true;
        }
        flags.push(best.is_some());
    }
    Ok((flags, n_gt))
}

/// All-point interpolated AP of one class, or `None` when it has no ground truth.
pub fn average_precision(
    preds: &[Vec<InstanceSet>],
    gts: &[Vec<InstanceSet>],
    class: usize,
    iou: f64,
) -> Result<Option<f64>> {
    let (flags, n_gt) = greedy_match(preds, gts, class, iou)?;
    if n_gt == 0 {
        return Ok(None);
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok(Some(ap))
}

/// Per-class precision and recall at `iou`, averaged over classes with
/// ground truth. A class with ground truth but no predictions has precision 0.
pub fn mprec_mrec(preds: &[Vec<InstanceSet>], gts: &[Vec<InstanceSet>], iou: f64) -> Result<(f64, f64)> {
    let per = per_class_prec_rec(preds, gts, iou)?;
    if per.is_empty() {
        return Ok((0.0, 0.0));
    }
    let k = per.len() as f64;
    Ok((
        per.values().map(|x| x.0).sum::<f64>() / k,
        per.values().map(|x| x.1).sum::<f64>() / k,
    ))
}

fn gt_classes(gts: &[Vec<InstanceSet>]) -> BTreeSet<usize> {
    gts.iter().flatten().map(|g| g.class).collect()
}

fn per_class_prec_rec(
    preds: &[Vec<InstanceSet>],
    gts: &[Vec<InstanceSet>],
    iou: f64,
) -> Result<BTreeMap<usize, (f64, f64)>> {
    let mut out = BTreeMap::new();
    for c in gt_classes(gts) {
        let (flags, n_gt) = greedy_match(preds, gts, c, iou)?;
        let tp = flags.iter().filter(|&&f| f).count() as f64;
        let prec = if flags.is_empty() { 0.0 } else { tp / flags.len() as f64 };
        out.insert(c, (prec, tp / n_gt as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: String,
    pub ground_truth: usize,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_ap: f64,
    pub mprec: f64,
    pub mrec: f64,
    pub scenes: Vec<SceneMetrics>,
}

impl EvalReport {
    pub fn from_instances(
        ids: &[String],
        preds: &[Vec<InstanceSet>],
        gts: &[Vec<InstanceSet>],
        iou: f64,
    ) -> Result<Self> {
        let pr = per_class_prec_rec(preds, gts, iou)?;
        let mut per_class = Vec::new();
        for (&class, &(precision, recall)) in &pr {
            let ap = average_precision(preds, gts, class, iou)?.expect("class has ground truth");
            per_class.push(ClassMetrics {
                class,
                ground_truth: gts.iter().flatten().filter(|g| g.class == class).count(),
                predictions: preds.iter().flatten().filter(|p| p.class == class).count(),
                ap,
                precision,
                recall,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
            }
        };
        Ok(Self {
            iou_threshold: iou,
            mean_ap: mean(|c| c.ap),
            mprec: mean(|c| c.precision),
            mrec: mean(|c| c.recall),
            scenes: ids
                .iter()
                .zip(preds.iter().zip(gts))
                .map(|(id, (p, g))| SceneMetrics {
                    id: id.clone(),
                    ground_truth: g.len(),
                    predictions: p.len(),
                })
                .collect(),
            per_class,
        })
    }

    /// Per-scene rows as CSV.
    pub fn scenes_csv(&self) -> String {
        let mut s = String::from("scene,ground_truth,predictions\n");
        for r in &self.scenes {
            s.push_str(&format!("{},{},{}\n", r.id, r.ground_truth, r.predictions));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub blocking: BlockingConfig,
    pub extract: ExtractConfig,
    pub merge: MergeConfig,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            blocking: BlockingConfig::default(),
            extract: ExtractConfig::default(),
            merge: MergeConfig::default(),
            iou_threshold: 0.5,
        }
    }
}

/// Blocks → per-block prediction and extraction → merging, for one scene.
pub fn predict_scene(model: &Model, scene: &Scene, cfg: &EvalConfig) -> Result<InstanceLabeling> {
    let blocks = split_blocks(scene, cfg.blocking.block_size, cfg.blocking.stride)?;
    let mut labeled = Vec::with_capacity(blocks.len());
    for block in blocks.iter().filter(|b| b.n_points() > 0) {
        let sample = Sample::from_block(block)?;
        let pred = model.predict_features(&sample.features)?;
        labeled.push(BlockLabeling {
            point_indices: block.point_indices.clone(),
            labeling: extract_instances(&pred, &cfg.extract)?,
        });
    }
    block_merging(&scene.cloud.positions(), &labeled, &cfg.merge)
}

/// Runs the full test-time pipeline on every scene and scores it.
pub fn evaluate(model: &Model, scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(scenes.len());
    for scene in scenes {
        preds.push(predict_scene(model, scene, cfg)?.instances());
    }
    let gts: Vec<_> = scenes.iter().map(ground_truth_instances).collect();
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    EvalReport::from_instances(&ids, &preds, &gts, cfg.iou_threshold)
}
