//! Pairing ground-truth boxes with predicted boxes.
//!
//! Three criteria score a (predicted, ground-truth) pair: squared vertex
//! distance, soft IoU over point memberships and a membership cross-entropy.
//! Their sum forms an `H x T` cost matrix, and the Hungarian algorithm picks
//! the injection from ground truth into predictions with the lowest total.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    hard_membership, soft_membership, BBox, HardMembership, PointCloud, SoftClampParams,
    SoftMembership,
};

/// Guard for logarithms and denominators.
pub const EPS: f64 = 1e-8;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Mean squared difference over the six vertex coordinates.
pub fn cost_ed(pred: &BBox, gt: &BBox) -> f64 {
    let (p, g) = (pred.to_array(), gt.to_array());
    p.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 6.0
}

fn check_len(q: usize, qbar: usize, context: &'static str) -> Result<()> {
    if q != qbar {
        return Err(Error::ShapeMismatch {
            context,
            expected: qbar.to_string(),
            got: q.to_string(),
        });
    }
    Ok(())
}

/// Negated soft IoU between a soft and a hard membership vector, in `[-1, 0]`.
pub fn cost_siou(q: &SoftMembership, qbar: &HardMembership) -> Result<f64> {
    check_len(q.len(), qbar.len(), "soft IoU")?;
    Ok(siou_raw(q.values(), &qbar.as_f64()))
}

pub(crate) fn siou_raw(q: &[f64], qbar: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sq = 0.0;
    let mut sqbar = 0.0;
    for (a, b) in q.iter().zip(qbar) {
        inter += a * b;
        sq += a;
        sqbar += b;
    }
    -inter / (sq + sqbar - inter).max(EPS)
}

/// Binary cross-entropy of the soft memberships against the hard ones, averaged over points.
pub fn cost_ces(q: &SoftMembership, qbar: &HardMembership) -> Result<f64> {
    check_len(q.len(), qbar.len(), "cross-entropy score")?;
    Ok(ces_raw(q.values(), &qbar.as_f64()))
}

pub(crate) fn ces_raw(q: &[f64], qbar: &[f64]) -> f64 {
    let n = q.len() as f64;
    let sum: f64 = q
        .iter()
        .zip(qbar)
        .map(|(&p, &t)| t * clamp_prob(p).ln() + (1.0 - t) * clamp_prob(1.0 - p).ln())
        .sum();
    -sum / n
}

/// Relative weight of each criterion in the association cost and the box loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub ed: f64,
    pub siou: f64,
    pub ces: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            ed: 1.0,
            siou: 1.0,
            ces: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    pub ed: Array2<f64>,
    pub siou: Array2<f64>,
    pub ces: Array2<f64>,
}

/// `H x T` association costs; rows are predictions, columns ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    c: Array2<f64>,
    breakdown: Option<CostBreakdown>,
}

impl CostMatrix {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        let (h, t) = c.dim();
        if t == 0 {
            return Err(Error::Empty("cost matrix has no ground-truth columns"));
        }
        if h < t {
            return Err(Error::TooFewPredictions {
                predicted: h,
                ground_truth: t,
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("cost matrix", "entries must be finite"));
        }
        Ok(Self { c, breakdown: None })
    }

    pub fn h_pred(&self) -> usize {
        self.c.nrows()
    }

    pub fn t_gt(&self) -> usize {
        self.c.ncols()
    }

    pub fn costs(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn breakdown(&self) -> Option<&CostBreakdown> {
        self.breakdown.as_ref()
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.c[[pred, gt]]
    }
}

/// Builds the full cost matrix with its per-criterion breakdown.
pub fn build_cost_matrix(
    preds: &[BBox],
    gts: &[BBox],
    cloud: &PointCloud,
    clamp: &SoftClampParams,
    weights: &CostWeights,
) -> Result<CostMatrix> {
    let (h, t) = (preds.len(), gts.len());
    if h < t {
        return Err(Error::TooFewPredictions {
            predicted: h,
            ground_truth: t,
        });
    }
    let soft: Vec<SoftMembership> = preds
        .iter()
        .map(|b| soft_membership(cloud, b, clamp))
        .collect();
    let hard = gts
        .iter()
        .map(|b| hard_membership(cloud, b))
        .collect::<Result<Vec<HardMembership>>>()?;
    let mut ed = Array2::zeros((h, t));
    let mut siou = Array2::zeros((h, t));
    let mut ces = Array2::zeros((h, t));
    for i in 0..h {
        for j in 0..t {
            ed[[i, j]] = cost_ed(&preds[i], &gts[j]);
            siou[[i, j]] = cost_siou(&soft[i], &hard[j])?;
            ces[[i, j]] = cost_ces(&soft[i], &hard[j])?;
        }
    }
    let c = &ed * weights.ed + &siou * weights.siou + &ces * weights.ces;
    let mut m = CostMatrix::new(c)?;
    m.breakdown = Some(CostBreakdown { ed, siou, ces });
    Ok(m)
}

/// Injection from ground-truth boxes into predicted boxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    gt_to_pred: Vec<usize>,
    h_pred: usize,
}

impl Assignment {
    pub fn new(gt_to_pred: Vec<usize>, h_pred: usize) -> Result<Self> {
        let mut used = vec![false; h_pred];
        for &i in &gt_to_pred {
            if i >= h_pred {
                return Err(Error::IndexOutOfRange {
                    context: "assignment",
                    index: i,
                    len: h_pred,
                });
            }
            if used[i] {
                return Err(Error::config(
                    "assignment",
                    format!("prediction {i} assigned twice"),
                ));
            }
            used[i] = true;
        }
        Ok(Self { gt_to_pred, h_pred })
    }

    pub fn gt_to_pred(&self) -> &[usize] {
        &self.gt_to_pred
    }

    pub fn h_pred(&self) -> usize {
        self.h_pred
    }

    pub fn t_gt(&self) -> usize {
        self.gt_to_pred.len()
    }

    /// `1` for predictions paired with some ground truth.
    pub fn assigned_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.h_pred];
        for &i in &self.gt_to_pred {
            m[i] = true;
        }
        m
    }

    /// Prediction order after reordering: assigned predictions in ground-truth
    /// order, then the unassigned ones in ascending index order.
    pub fn permutation(&self) -> Vec<usize> {
        let assigned = self.assigned_mask();
        let mut order = self.gt_to_pred.clone();
        order.extend((0..self.h_pred).filter(|&i| !assigned[i]));
        order
    }

    /// Sum of paired costs, accumulated in ground-truth order.
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        total_cost(c.costs(), &self.gt_to_pred)
    }
}

pub(crate) fn total_cost(c: &Array2<f64>, gt_to_pred: &[usize]) -> f64 {
    gt_to_pred
        .iter()
        .enumerate()
        .map(|(j, &i)| c[[i, j]])
        .sum()
}

/// Minimum-cost assignment of every ground-truth column to a distinct prediction row.
///
/// The `H x T` matrix is padded to `H x H` with a constant larger than every
/// real entry and solved with the O(n^3) shortest augmenting path method.
pub fn hungarian_assign(c: &CostMatrix) -> Result<Assignment> {
    let (h, t) = (c.h_pred(), c.t_gt());
    if h < t {
        return Err(Error::TooFewPredictions {
            predicted: h,
            ground_truth: t,
        });
    }
    let pad = c.costs().iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    // Square problem with the ground truth (plus padding) as rows.
    let cost = |row: usize, col: usize| -> f64 {
        if row < t {
            c.get(col, row)
        } else {
            pad
        }
    };
    let row_to_col = solve_square(h, cost);
    Assignment::new(row_to_col[..t].to_vec(), h)
}

/// Returns, for each row, the column it is matched to.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    row_to_col
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reordered {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub masks: Array2<f64>,
}

/// Permutes predictions so that position `t < T` holds the box paired with ground truth `t`.
pub fn reorder_predictions(
    preds: &[BBox],
    scores: &[f64],
    masks: &Array2<f64>,
    a: &Assignment,
) -> Result<Reordered> {
    let h = preds.len();
    if scores.len() != h || masks.nrows() != h {
        return Err(Error::ShapeMismatch {
            context: "reorder_predictions",
            expected: format!("{h} scores and {h} mask rows"),
            got: format!("{} scores and {} mask rows", scores.len(), masks.nrows()),
        });
    }
    if a.h_pred() != h {
        return Err(Error::ShapeMismatch {
            context: "reorder_predictions assignment",
            expected: h.to_string(),
            got: a.h_pred().to_string(),
        });
    }
    let order = a.permutation();
    Ok(Reordered {
        boxes: order.iter().map(|&i| preds[i]).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        masks: masks.select(Axis(0), &order),
    })
}
