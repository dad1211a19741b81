//! Association and losses attached to a forward graph.
//!
//! The cost matrix is built inside the graph, its value is handed to the
//! Hungarian solver, and the resulting pairing selects which entries feed the
//! box loss and which mask rows and scores are positives.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::model::{ForwardVars, Prediction};
use crate::association::{build_cost_matrix, hungarian_assign, Assignment, CostMatrix, CostWeights, EPS};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SoftClampParams};
use crate::losses::{self, FocalParams, GradientMode, LossReport};

/// Which components enter the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub sem: bool,
    pub bbox: bool,
    pub bbs: bool,
    pub pmask: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            sem: true,
            bbox: true,
            bbs: true,
            pmask: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub clamp: SoftClampParams,
    pub weights: CostWeights,
    pub focal: FocalParams,
    pub gradient_mode: GradientMode,
    pub terms: LossTerms,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.clamp.validate()?;
        self.focal.validate()
    }
}

/// Differentiable network outputs the losses read.
#[derive(Debug, Clone, Copy)]
pub struct HeadInputs {
    /// `H x 6`
    pub boxes: Var,
    /// `H x 1`
    pub scores: Var,
    /// `H x N`
    pub masks: Var,
    /// `N x K`
    pub logits: Var,
}

impl From<&ForwardVars> for HeadInputs {
    fn from(f: &ForwardVars) -> Self {
        HeadInputs {
            boxes: f.boxes.boxes,
            scores: f.boxes.scores,
            masks: f.masks,
            logits: f.logits,
        }
    }
}

/// Constant per-sample tensors shared by the loss graph.
#[derive(Debug, Clone)]
pub struct SampleTargets {
    positions: Rc<Array2<f64>>,
    /// `T x 6`
    gt_boxes: Rc<Array2<f64>>,
    /// `N x T` hard box membership and its complement.
    member_t: Array2<f64>,
    outside_t: Array2<f64>,
    /// `1 x T` count of points inside each ground-truth box.
    member_count: Array2<f64>,
    gt_masks: Rc<Array2<f64>>,
    labels: Rc<Vec<usize>>,
    t_gt: usize,
}

impl SampleTargets {
    pub fn new(sample: &Sample) -> Result<Self> {
        let n = sample.n_points();
        let t = sample.t_gt();
        if sample.positions.dim() != (n, 3) {
            return Err(Error::ShapeMismatch {
                context: "sample positions",
                expected: format!("({n}, 3)"),
                got: format!("{:?}", sample.positions.dim()),
            });
        }
        if sample.gt_masks.dim() != (t, n) || sample.labels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "sample targets",
                expected: format!("masks ({t}, {n}) and {n} labels"),
                got: format!("masks {:?} and {} labels", sample.gt_masks.dim(), sample.labels.len()),
            });
        }
        let mut gt_boxes = Array2::zeros((t, 6));
        let mut member_t = Array2::zeros((n, t));
        for (j, b) in sample.gt_boxes.iter().enumerate() {
            b.validate_ground_truth()?;
            gt_boxes.row_mut(j).assign(&ndarray::arr1(&b.to_array()));
            for p in 0..n {
                let xyz = [sample.positions[[p, 0]], sample.positions[[p, 1]], sample.positions[[p, 2]]];
                if b.contains(xyz) {
                    member_t[[p, j]] = 1.0;
                }
            }
        }
        let outside_t = member_t.mapv(|v| 1.0 - v);
        let member_count = member_t.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(Self {
            positions: Rc::new(sample.positions.clone()),
            gt_boxes: Rc::new(gt_boxes),
            member_t,
            outside_t,
            member_count,
            gt_masks: Rc::new(sample.gt_masks.clone()),
            labels: Rc::new(sample.labels.clone()),
            t_gt: t,
        })
    }

    pub fn t_gt(&self) -> usize {
        self.t_gt
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostVars {
    pub ed: Var,
    pub siou: Var,
    pub ces: Var,
    /// Weighted sum, `H x T`.
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub l_sem: Var,
    pub l_bbox: Var,
    pub l_bbs: Var,
    pub l_pmask: Var,
    /// Sum of the enabled terms; this is what training differentiates.
    pub objective: Var,
    pub costs: Option<CostVars>,
    pub assignment: Assignment,
    pub report: LossReport,
}

/// Builds the `H x T` cost criteria inside the graph.
pub fn cost_graph(g: &mut Graph, boxes: Var, targets: &SampleTargets, cfg: &LossConfig) -> CostVars {
    let (h, _) = g.shape(boxes);
    let t = targets.t_gt;
    let n = targets.positions.nrows() as f64;

    let sq = g.pair_sq_dist(boxes, targets.gt_boxes.clone());
    let ed = g.scale(sq, 1.0 / 6.0);

    let q = g.soft_membership(boxes, targets.positions.clone(), cfg.clamp);
    let member = g.constant(targets.member_t.clone());
    let inter = g.matmul(q, member);
    let q_sum = g.row_sums(q);
    let q_sum = g.broadcast(q_sum, (h, t));
    let count = g.constant(targets.member_count.clone());
    let count = g.broadcast(count, (h, t));
    let union = g.add(q_sum, count);
    let union = g.sub(union, inter);
    let union = g.max_guard(union, EPS);
    let ratio = g.div(inter, union);
    let siou = g.scale(ratio, -1.0);

    let log_q = g.ln_clamped(q);
    let not_q = g.one_minus(q);
    let log_not_q = g.ln_clamped(not_q);
    let outside = g.constant(targets.outside_t.clone());
    let pos = g.matmul(log_q, member);
    let neg = g.matmul(log_not_q, outside);
    let ll = g.add(pos, neg);
    let ces = g.scale(ll, -1.0 / n);

    let w_ed = g.scale(ed, cfg.weights.ed);
    let w_siou = g.scale(siou, cfg.weights.siou);
    let w_ces = g.scale(ces, cfg.weights.ces);
    let partial = g.add(w_ed, w_siou);
    let total = g.add(partial, w_ces);
    CostVars {
        ed,
        siou,
        ces,
        total,
    }
}

/// Associates predictions with ground truth and attaches all four losses.
///
/// `frozen` replaces the Hungarian pairing, e.g. to hold it fixed while
/// probing the loss with finite differences.
pub fn attach_losses(
    g: &mut Graph,
    inputs: HeadInputs,
    targets: &SampleTargets,
    cfg: &LossConfig,
    frozen: Option<&Assignment>,
) -> Result<LossVars> {
    let (h, _) = g.shape(inputs.boxes);
    let t = targets.t_gt;
    if t > h {
        return Err(Error::TooFewPredictions {
            predicted: h,
            ground_truth: t,
        });
    }

    let l_sem = g.softmax_xent(inputs.logits, targets.labels.clone());

    let (costs, assignment, l_bbox, l_pmask) = if t == 0 {
        let zero = g.constant(Array2::zeros((1, 1)));
        (None, Assignment::new(Vec::new(), h)?, zero, zero)
    } else {
        let costs = cost_graph(g, inputs.boxes, targets, cfg);
        let assignment = match frozen {
            Some(a) => {
                if a.h_pred() != h || a.t_gt() != t {
                    return Err(Error::ShapeMismatch {
                        context: "frozen assignment",
                        expected: format!("{h} predictions, {t} ground truth"),
                        got: format!("{} predictions, {} ground truth", a.h_pred(), a.t_gt()),
                    });
                }
                a.clone()
            }
            None => hungarian_assign(&CostMatrix::new(g.value(costs.total).clone())?)?,
        };
        let st = cfg.gradient_mode.straight_through_scale();
        let l_bbox = g.assignment_select(costs.total, assignment.gt_to_pred(), st);
        let paired = g.gather_rows(inputs.masks, assignment.gt_to_pred());
        let l_pmask = g.focal_mean(paired, targets.gt_masks.clone(), cfg.focal);
        (Some(costs), assignment, l_bbox, l_pmask)
    };

    let positives = Array2::from_shape_vec(
        (h, 1),
        assignment
            .assigned_mask()
            .iter()
            .map(|&a| if a { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("one flag per prediction");
    let negatives = positives.mapv(|v| 1.0 - v);
    let log_s = g.ln_clamped(inputs.scores);
    let not_s = g.one_minus(inputs.scores);
    let log_not_s = g.ln_clamped(not_s);
    let pos = g.constant(positives);
    let neg = g.constant(negatives);
    let a = g.mul(log_s, pos);
    let b = g.mul(log_not_s, neg);
    let ll = g.add(a, b);
    let ll = g.sum_all(ll);
    let l_bbs = g.scale(ll, -1.0 / h as f64);

    let enabled: Vec<Var> = [
        (cfg.terms.sem, l_sem),
        (cfg.terms.bbox, l_bbox),
        (cfg.terms.bbs, l_bbs),
        (cfg.terms.pmask, l_pmask),
    ]
    .into_iter()
    .filter_map(|(on, v)| on.then_some(v))
    .collect();
    let mut objective = g.constant(Array2::zeros((1, 1)));
    for v in enabled {
        objective = g.add(objective, v);
    }

    let report = losses::loss_all(
        g.scalar_value(l_sem),
        g.scalar_value(l_bbox),
        g.scalar_value(l_bbs),
        g.scalar_value(l_pmask),
    );
    Ok(LossVars {
        l_sem,
        l_bbox,
        l_bbs,
        l_pmask,
        objective,
        costs,
        assignment,
        report,
    })
}

/// Reference association from plain values.
pub fn associate(pred: &Prediction, sample: &Sample, cfg: &LossConfig) -> Result<Option<(CostMatrix, Assignment)>> {
    if sample.t_gt() == 0 {
        return Ok(None);
    }
    let cloud = PointCloud::new(sample.positions.clone())?;
    let c = build_cost_matrix(&pred.boxes, &sample.gt_boxes, &cloud, &cfg.clamp, &cfg.weights)?;
    let a = hungarian_assign(&c)?;
    Ok(Some((c, a)))
}

/// The four losses computed from plain values with the reference operations.
pub fn reference_losses(
    pred: &Prediction,
    sample: &Sample,
    cfg: &LossConfig,
    assignment: Option<&Assignment>,
) -> Result<LossReport> {
    let h = pred.boxes.len();
    let l_sem = losses::loss_sem(&pred.logits, &sample.labels)?;
    if sample.t_gt() == 0 {
        let l_bbs = losses::loss_bbs(&pred.scores, 0)?;
        return Ok(losses::loss_all(l_sem, 0.0, l_bbs, 0.0));
    }
    let (c, found) = associate(pred, sample, cfg)?.expect("non-empty ground truth");
    let a = assignment.cloned().unwrap_or(found);
    let bd = c.breakdown().expect("reference cost matrix keeps its breakdown");
    let w = &cfg.weights;
    let paired: Vec<(f64, f64, f64)> = a
        .gt_to_pred()
        .iter()
        .enumerate()
        .map(|(j, &i)| (w.ed * bd.ed[[i, j]], w.siou * bd.siou[[i, j]], w.ces * bd.ces[[i, j]]))
        .collect();
    let l_bbox = losses::loss_bbox(&paired)?;
    let r = crate::association::reorder_predictions(&pred.boxes, &pred.scores, &pred.masks, &a)?;
    debug_assert_eq!(r.boxes.len(), h);
    let l_bbs = losses::loss_bbs(&r.scores, a.t_gt())?;
    let paired_masks = r.masks.slice(ndarray::s![..a.t_gt(), ..]);
    let l_pmask = losses::loss_pmask(paired_masks, sample.gt_masks.view(), &cfg.focal)?;
    Ok(losses::loss_all(l_sem, l_bbox, l_bbs, l_pmask))
}
