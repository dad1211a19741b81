//! Training losses evaluated on plain values.
//!
//! These are the reference forms. The differentiable versions used during
//! training live in [`crate::network::heads`] and are checked against these.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::association::clamp_prob;
use crate::error::{Error, Result};

/// Components of the combined multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sem: f64,
    pub l_bbox: f64,
    pub l_bbs: f64,
    pub l_pmask: f64,
    pub l_all: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_sem, self.l_bbox, self.l_bbs, self.l_pmask, self.l_all]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Sums the four components.
pub fn loss_all(l_sem: f64, l_bbox: f64, l_bbs: f64, l_pmask: f64) -> LossReport {
    LossReport {
        l_sem,
        l_bbox,
        l_bbs,
        l_pmask,
        l_all: l_sem + l_bbox + l_bbs + l_pmask,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    /// Plain binary cross-entropy.
    pub const CROSS_ENTROPY: FocalParams = FocalParams {
        alpha: 1.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("focal.alpha", "must lie in (0, 1]"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("focal.gamma", "must be >= 0"));
        }
        Ok(())
    }
}

/// How the backward pass treats the discrete assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradientMode {
    /// The assignment is a constant: `dA/dC = 0`.
    #[default]
    ZeroThroughAssignment,
    /// `dA/dC` is replaced by `scale * I`, so every cost entry also receives
    /// `scale * C[i, j] / T` of upstream gradient.
    StraightThrough { scale: f64 },
}

impl GradientMode {
    pub fn straight_through() -> Self {
        GradientMode::StraightThrough { scale: 1.0 }
    }

    /// Extra per-entry gradient weight on the cost matrix.
    pub fn straight_through_scale(&self) -> f64 {
        match self {
            GradientMode::ZeroThroughAssignment => 0.0,
            GradientMode::StraightThrough { scale } => *scale,
        }
    }
}

/// Box loss from the per-criterion costs of the `T` paired boxes.
pub fn loss_bbox(paired: &[(f64, f64, f64)]) -> Result<f64> {
    if paired.is_empty() {
        return Err(Error::Empty("box loss needs at least one paired box"));
    }
    let sum: f64 = paired.iter().map(|(ed, siou, ces)| ed + siou + ces).sum();
    Ok(sum / paired.len() as f64)
}

/// Score loss over reordered scores: the first `t_gt` are positives, the rest negatives.
pub fn loss_bbs(scores: &[f64], t_gt: usize) -> Result<f64> {
    let h = scores.len();
    if t_gt > h {
        return Err(Error::TooFewPredictions {
            predicted: h,
            ground_truth: t_gt,
        });
    }
    if h == 0 {
        return Err(Error::Empty("score loss needs at least one score"));
    }
    let sum: f64 = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if i < t_gt {
                clamp_prob(s).ln()
            } else {
                clamp_prob(1.0 - s).ln()
            }
        })
        .sum();
    Ok(-sum / h as f64)
}

pub fn focal_loss(p: f64, y: bool, fp: &FocalParams) -> f64 {
    let pt = if y { p } else { 1.0 - p };
    let weight = if fp.gamma == 0.0 {
        1.0
    } else {
        (1.0 - pt).powf(fp.gamma)
    };
    -fp.alpha * weight * clamp_prob(pt).ln()
}

/// Mean focal loss over all `T x N` entries of the paired masks.
pub fn loss_pmask(masks: ArrayView2<f64>, gt_masks: ArrayView2<f64>, fp: &FocalParams) -> Result<f64> {
    if masks.dim() != gt_masks.dim() {
        return Err(Error::ShapeMismatch {
            context: "mask loss",
            expected: format!("{:?}", gt_masks.dim()),
            got: format!("{:?}", masks.dim()),
        });
    }
    if masks.is_empty() {
        return Err(Error::Empty("mask loss needs at least one entry"));
    }
    let sum: f64 = masks
        .iter()
        .zip(gt_masks.iter())
        .map(|(&p, &y)| focal_loss(p, y > 0.5, fp))
        .sum();
    Ok(sum / masks.len() as f64)
}

/// Mean softmax cross-entropy of per-point logits against class labels.
pub fn loss_sem(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "semantic loss labels",
            expected: n.to_string(),
            got: labels.len().to_string(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("semantic loss needs at least one point"));
    }
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        if label >= k {
            return Err(Error::IndexOutOfRange {
                context: "semantic label",
                index: label,
                len: k,
            });
        }
        total += log_sum_exp(row.iter().copied()) - row[label];
    }
    Ok(total / n as f64)
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bbox_fixtures() {
        assert_eq!(loss_bbox(&[(0.0, -1.0, 0.0)]).unwrap(), -1.0);
        let v = loss_bbox(&[(0.1, -0.5, 0.2), (0.3, -0.7, 0.4)]).unwrap();
        assert!((v + 0.1).abs() < 1e-15);
        assert!(loss_bbox(&[]).is_err());
    }

    #[test]
    fn bbs_fixtures() {
        let v = loss_bbs(&[0.9, 0.1], 1).unwrap();
        assert!((v - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!((loss_bbs(&[0.5], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(loss_bbs(&[1.0, 0.0, 0.0], 1).unwrap() < 1e-7);
        assert!(matches!(
            loss_bbs(&[0.5], 2),
            Err(Error::TooFewPredictions { .. })
        ));
    }

    #[test]
    fn focal_fixtures() {
        let fp = FocalParams::default();
        let v = focal_loss(0.9, true, &fp);
        assert!((v - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
        assert_eq!(focal_loss(0.1, false, &fp), focal_loss(0.9, true, &fp));
        let ce = focal_loss(0.3, true, &FocalParams::CROSS_ENTROPY);
        assert_eq!(ce, -(0.3f64.ln()));
    }

    #[test]
    fn pmask_fixtures() {
        let masks = Array2::from_elem((2, 3), 0.5);
        let gt = Array2::from_elem((2, 3), 1.0);
        let v = loss_pmask(masks.view(), gt.view(), &FocalParams::CROSS_ENTROPY).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_pmask(perfect.view(), perfect.view(), &FocalParams::default()).unwrap() < 1e-9);

        assert!(loss_pmask(masks.view(), perfect.view(), &FocalParams::default()).is_err());
    }

    #[test]
    fn sem_fixtures() {
        let logits = Array2::zeros((3, 4));
        assert!((loss_sem(&logits, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);

        let shifted = array![[1.0, 2.0, 3.0]];
        let a = loss_sem(&shifted, &[2]).unwrap();
        let b = loss_sem(&(shifted + 40.0), &[2]).unwrap();
        assert!((a - b).abs() < 1e-12);

        let mut last = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let v = loss_sem(&array![[margin, 0.0]], &[0]).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(loss_sem(&logits, &[0, 1, 4]).is_err());
    }

    #[test]
    fn combined() {
        assert_eq!(loss_all(1.0, 2.0, 3.0, 4.0).l_all, 10.0);
        assert_eq!(loss_all(0.0, 0.0, 0.0, 0.0).l_all, 0.0);
    }
}
