//! Finite-difference verification of the analytic gradients.
//!
//! Analytic gradients come from the reverse-mode graph with the assignment
//! held fixed. The reference values are central differences of the losses
//! computed by the plain-value route ([`reference_losses`]), which shares no
//! code with the graph's backward pass.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::{Assignment, EPS};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{BBox, SoftClampParams};
use crate::losses::LossReport;
use crate::network::{attach_losses, associate, reference_losses, Graph, HeadInputs, LossConfig, Model, ModelConfig, Prediction, SampleTargets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub loss_tolerance: f64,
    pub model_tolerance: f64,
    /// Random instances per loss.
    pub instances: usize,
    pub seed: u64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            loss_tolerance: 1e-4,
            model_tolerance: 1e-3,
            instances: 50,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub entries: usize,
    /// Entries where the loss is not smooth within one finite-difference
    /// step (central differences at two step sizes disagree), so no
    /// derivative exists to compare against. Excluded from the maximum.
    #[serde(default)]
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>14} {:>10}  result\n",
            "loss", "entries", "skipped", "max rel err", "tolerance"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8} {:>14.3e} {:>10.0e}  {}",
                r.name,
                r.entries,
                r.skipped,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

/// Deliberate gradient corruption, used to show the checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    /// Scales the first nonzero analytic gradient entry by 1.01.
    ScaleFirstEntry,
}

/// Loss components a row can check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Sem,
    Bbox,
    Bbs,
    Pmask,
    All,
}

impl LossComponent {
    pub const PARTS: [LossComponent; 4] = [Self::Sem, Self::Bbox, Self::Bbs, Self::Pmask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sem => "l_sem",
            Self::Bbox => "l_bbox",
            Self::Bbs => "l_bbs",
            Self::Pmask => "l_pmask",
            Self::All => "l_all",
        }
    }

    pub fn of(self, r: &LossReport) -> f64 {
        match self {
            Self::Sem => r.l_sem,
            Self::Bbox => r.l_bbox,
            Self::Bbs => r.l_bbs,
            Self::Pmask => r.l_pmask,
            Self::All => r.l_all,
        }
    }
}

/// Distance kept from every nondifferentiable point of the soft-membership
/// pipeline, measured in pre-sigmoid units.
const KINK_MARGIN: f64 = 0.05;

/// Whether the central difference at these boxes stays inside one smooth
/// piece: no clamp edge, no probability clamp edge, no change of minimizing axis.
pub fn kink_free(boxes: &[BBox], positions: &Array2<f64>, clamp: &SoftClampParams) -> bool {
    let ln_eps = (EPS / (1.0 - EPS)).ln();
    boxes.iter().all(|b| {
        positions.rows().into_iter().all(|p| {
            let mut v = [0.0; 3];
            for a in 0..3 {
                let raw = clamp.theta1 * (b.vmin[a] - p[a]) * (p[a] - b.vmax[a]);
                if (raw.abs() - clamp.theta2).abs() < KINK_MARGIN {
                    return false;
                }
                v[a] = raw.clamp(-clamp.theta2, clamp.theta2);
                if (v[a] - ln_eps).abs() < KINK_MARGIN || (v[a] + ln_eps).abs() < KINK_MARGIN {
                    return false;
                }
            }
            let m = (0..3).fold(0, |m, a| if v[a] < v[m] { a } else { m });
            (0..3).all(|a| {
                a == m || v[a] - v[m] > KINK_MARGIN || (v[a].abs() == clamp.theta2 && v[m].abs() == clamp.theta2)
            })
        })
    })
}

fn random_box(rng: &mut impl Rng, lo: f64, hi: f64, min_extent: f64) -> BBox {
    let mut vmin = [0.0; 3];
    let mut vmax = [0.0; 3];
    for a in 0..3 {
        let e = rng.random_range(min_extent..(hi - lo) * 0.6);
        vmin[a] = rng.random_range(lo..hi - e);
        vmax[a] = vmin[a] + e;
    }
    BBox::new(vmin, vmax)
}

/// A small random (prediction, sample) pair whose soft memberships are
/// away from every kink. `t` ground-truth instances, `h >= t` boxes.
pub fn random_instance(
    rng: &mut impl Rng,
    n: usize,
    h: usize,
    t: usize,
    k: usize,
    clamp: &SoftClampParams,
) -> (Prediction, Sample) {
    loop {
        let gt: Vec<BBox> = (0..t).map(|_| random_box(rng, 0.0, 1.0, 0.2)).collect();
        let mut positions = Array2::zeros((n, 3));
        for (i, mut row) in positions.rows_mut().into_iter().enumerate() {
            // Half the points inside a ground-truth box, the rest anywhere.
            let inside = t > 0 && i % 2 == 0;
            for a in 0..3 {
                row[a] = if inside {
                    let b = &gt[(i / 2) % t];
                    rng.random_range(b.vmin[a]..b.vmax[a])
                } else {
                    rng.random_range(0.0..1.0)
                };
            }
        }
        let boxes: Vec<BBox> = (0..h)
            .map(|i| {
                if i < t {
                    let b = gt[i];
                    let mut j = |x: f64| x + rng.random_range(-0.08..0.08);
                    BBox::from_slice(&[j(b.vmin[0]), j(b.vmin[1]), j(b.vmin[2]), j(b.vmax[0]), j(b.vmax[1]), j(b.vmax[2])])
                } else {
                    random_box(rng, 0.0, 1.0, 0.1)
                }
            })
            .collect();
        if !kink_free(&boxes, &positions, clamp) {
            continue;
        }
        let mut gt_masks = Array2::zeros((t, n));
        for p in 0..n {
            let xyz = [positions[[p, 0]], positions[[p, 1]], positions[[p, 2]]];
            if let Some(j) = gt.iter().position(|b| b.contains(xyz)) {
                gt_masks[[j, p]] = 1.0;
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let sample = Sample {
            id: "gradcheck".into(),
            features: Array2::from_shape_fn((n, 9), |_| rng.random_range(0.0..1.0)),
            positions,
            gt_boxes: gt,
            gt_classes: (0..t).map(|j| 1 + j % (k - 1).max(1)).collect(),
            gt_masks,
            labels,
        };
        let pred = Prediction {
            boxes,
            scores: (0..h).map(|_| rng.random_range(0.05..0.95)).collect(),
            masks: Array2::from_shape_fn((h, n), |_| rng.random_range(0.05..0.95)),
            logits: Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0)),
        };
        return (pred, sample);
    }
}

fn boxes_matrix(boxes: &[BBox]) -> Array2<f64> {
    let mut m = Array2::zeros((boxes.len(), 6));
    for (i, b) in boxes.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::arr1(&b.to_array()));
    }
    m
}

/// Analytic gradients of each loss component with respect to the four head
/// inputs, in the order boxes, scores, masks, logits (flattened row-major).
fn head_gradients(
    pred: &Prediction,
    sample: &Sample,
    cfg: &LossConfig,
    frozen: &Assignment,
    component: LossComponent,
) -> Result<Vec<f64>> {
    let targets = SampleTargets::new(sample)?;
    let mut g = Graph::new();
    let inputs = HeadInputs {
        boxes: g.leaf(boxes_matrix(&pred.boxes)),
        scores: g.leaf(Array2::from_shape_vec((pred.scores.len(), 1), pred.scores.clone()).expect("column")),
        masks: g.leaf(pred.masks.clone()),
        logits: g.leaf(pred.logits.clone()),
    };
    let lv = attach_losses(&mut g, inputs, &targets, cfg, Some(frozen))?;
    let root = match component {
        LossComponent::Sem => lv.l_sem,
        LossComponent::Bbox => lv.l_bbox,
        LossComponent::Bbs => lv.l_bbs,
        LossComponent::Pmask => lv.l_pmask,
        LossComponent::All => lv.objective,
    };
    let grads = g.backward(root);
    let mut out = Vec::new();
    for v in [inputs.boxes, inputs.scores, inputs.masks, inputs.logits] {
        match grads.get(v) {
            Some(a) => out.extend(a.iter().copied()),
            None => out.extend(std::iter::repeat_n(0.0, g.value(v).len())),
        }
    }
    Ok(out)
}

/// Applies `f` to the `idx`-th scalar of the head inputs (same order as
/// [`head_gradients`]).
fn perturb_head(pred: &Prediction, idx: usize, delta: f64) -> Prediction {
    let mut p = pred.clone();
    let nb = p.boxes.len() * 6;
    let ns = p.scores.len();
    let nm = p.masks.len();
    if idx < nb {
        let mut a = p.boxes[idx / 6].to_array();
        a[idx % 6] += delta;
        p.boxes[idx / 6] = BBox::from_slice(&a);
    } else if idx < nb + ns {
        p.scores[idx - nb] += delta;
    } else if idx < nb + ns + nm {
        let i = idx - nb - ns;
        let cols = p.masks.ncols();
        p.masks[[i / cols, i % cols]] += delta;
    } else {
        let i = idx - nb - ns - nm;
        let cols = p.logits.ncols();
        p.logits[[i / cols, i % cols]] += delta;
    }
    p
}

fn corrupt(grads: &mut [f64], how: Corruption) {
    if how == Corruption::ScaleFirstEntry {
        if let Some(g) = grads.iter_mut().find(|g| g.abs() > 1e-3) {
            *g *= 1.01;
        }
    }
}

/// Largest relative error of one loss component's head gradients over one instance.
pub fn check_head_instance(
    pred: &Prediction,
    sample: &Sample,
    loss: &LossConfig,
    component: LossComponent,
    cfg: &GradCheckConfig,
    corruption: Corruption,
) -> Result<(usize, f64)> {
    let frozen = match associate(pred, sample, loss)? {
        Some((_, a)) => a,
        None => Assignment::new(Vec::new(), pred.boxes.len())?,
    };
    let mut analytic = head_gradients(pred, sample, loss, &frozen, component)?;
    corrupt(&mut analytic, corruption);
    let mut worst = 0.0f64;
    for (idx, &a) in analytic.iter().enumerate() {
        let plus = reference_losses(&perturb_head(pred, idx, cfg.step), sample, loss, Some(&frozen))?;
        let minus = reference_losses(&perturb_head(pred, idx, -cfg.step), sample, loss, Some(&frozen))?;
        let fd = (component.of(&plus) - component.of(&minus)) / (2.0 * cfg.step);
        worst = worst.max(rel_error(a, fd, cfg.floor));
    }
    Ok((analytic.len(), worst))
}

/// Per-component checks over `cfg.instances` random small instances.
pub fn check_losses(cfg: &GradCheckConfig, corruption: Corruption) -> Result<Vec<CheckRow>> {
    let loss = LossConfig::default();
    let mut rows = Vec::new();
    for (c_idx, component) in LossComponent::PARTS.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(cfg.seed, 100 + c_idx as u64, 0));
        let mut entries = 0;
        let mut worst = 0.0f64;
        for _ in 0..cfg.instances {
            let t = rng.random_range(1..=3);
            let h = t + rng.random_range(0..=2);
            let n = rng.random_range(6..=12);
            let (pred, sample) = random_instance(&mut rng, n, h, t, 3, &loss.clamp);
            let (e, w) = check_head_instance(&pred, &sample, &loss, component, cfg, corruption)?;
            entries += e;
            worst = worst.max(w);
        }
        rows.push(CheckRow {
            name: component.name().into(),
            entries,
            skipped: 0,
            max_rel_error: worst,
            tolerance: cfg.loss_tolerance,
            passed: worst < cfg.loss_tolerance,
        });
    }
    Ok(rows)
}

/// Miniature model used by the full-model check: N=16 points, k=8, H=3, K=3.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 9,
        backbone_hidden: vec![8],
        k: 8,
        h_max: 3,
        box_hidden: vec![8, 8],
        mask_compress: 6,
        mask_fused: 6,
        mask_hidden: vec![5, 4],
        sem_hidden: 5,
        semantic_classes: 3,
        leaky_slope: 0.01,
        seed: 0,
    }
}

/// Gradient of `l_all` with respect to every model parameter, assignment frozen.
pub fn check_model(model: &Model, sample: &Sample, cfg: &GradCheckConfig, corruption: Corruption) -> Result<CheckRow> {
    let loss = LossConfig::default();
    let base = model.predict_features(&sample.features)?;
    let frozen = match associate(&base, sample, &loss)? {
        Some((_, a)) => a,
        None => Assignment::new(Vec::new(), base.boxes.len())?,
    };
    let targets = SampleTargets::new(sample)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.full_forward(&mut g, &bound, &sample.features)?;
    let lv = attach_losses(&mut g, HeadInputs::from(&out), &targets, &loss, Some(&frozen))?;
    let grads = g.backward(lv.objective);
    let mut analytic: Vec<f64> = Vec::new();
    for (id, &v) in model.params().ids().zip(bound.vars()) {
        match grads.get(v) {
            Some(a) => analytic.extend(a.iter().copied()),
            None => analytic.extend(std::iter::repeat_n(0.0, model.params().get(id).len())),
        }
    }
    corrupt(&mut analytic, corruption);

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let mut skipped = 0;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let len = model.params().get(id).len();
        for e in 0..len {
            let eval = |probe: &mut Model, delta: f64| -> Result<f64> {
                let cols = probe.params().get(id).ncols();
                probe.params_mut().get_mut(id)[[e / cols, e % cols]] += delta;
                let pred = probe.predict_features(&sample.features);
                probe.params_mut().get_mut(id)[[e / cols, e % cols]] -= delta;
                Ok(reference_losses(&pred?, sample, &loss, Some(&frozen))?.l_all)
            };
            let central = |probe: &mut Model, h: f64| -> Result<f64> {
                Ok((eval(probe, h)? - eval(probe, -h)?) / (2.0 * h))
            };
            let fd = central(&mut probe, cfg.step)?;
            let fd_half = central(&mut probe, cfg.step / 2.0)?;
            if rel_error(fd, fd_half, cfg.floor) > cfg.model_tolerance / 10.0 {
                skipped += 1;
            } else {
                worst = worst.max(rel_error(analytic[flat], fd, cfg.floor));
            }
            flat += 1;
        }
    }
    Ok(CheckRow {
        name: LossComponent::All.name().into(),
        entries: flat,
        skipped,
        max_rel_error: worst,
        tolerance: cfg.model_tolerance,
        // A handful of activation kinks is expected; many means the check
        // compared almost nothing.
        passed: worst < cfg.model_tolerance && skipped * 20 <= flat,
    })
}

/// A sample for the full-model check: `n` points, two instances, features in [0, 1].
pub fn tiny_sample(rng: &mut impl Rng, n: usize, k: usize) -> Sample {
    let (_, sample) = random_instance(rng, n, 2, 2, k, &SoftClampParams::default());
    sample
}

/// A [`tiny_sample`] on which `model`'s predicted boxes keep every soft
/// membership away from the clamp and min kinks, so central differences
/// are meaningful. Redraws up to 100 times before giving up.
pub fn model_sample(model: &Model, rng: &mut impl Rng, n: usize) -> Result<Sample> {
    let clamp = SoftClampParams::default();
    for _ in 0..100 {
        let sample = tiny_sample(rng, n, model.config().semantic_classes);
        let pred = model.predict_features(&sample.features)?;
        if kink_free(&pred.boxes, &sample.positions, &clamp) {
            return Ok(sample);
        }
    }
    Err(Error::Empty("kink-free gradient-check sample"))
}

/// Per-loss rows followed by the full-model `l_all` row.
pub fn run(model_config: &ModelConfig, cfg: &GradCheckConfig, corruption: Corruption) -> Result<GradCheckReport> {
    let mut rows = check_losses(cfg, corruption)?;
    let model = Model::new(model_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(cfg.seed, 200, 0));
    let sample = model_sample(&model, &mut rng, 16)?;
    rows.push(check_model(&model, &sample, cfg, corruption)?);
    Ok(GradCheckReport { rows })
}
