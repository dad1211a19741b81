//! Point clouds, axis-aligned boxes and point-in-box membership.
//!
//! Boxes are stored as a pair of min/max vertices. Ground-truth boxes are
//! ordered (`vmin <= vmax` per axis); predicted boxes come straight out of a
//! regression head and may have their vertices swapped on any axis.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N x k0` matrix of points. The first three channels are x, y, z.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        let (n, k0) = points.dim();
        if n == 0 {
            return Err(Error::Empty("point cloud"));
        }
        if k0 < 3 {
            return Err(Error::ShapeMismatch {
                context: "point cloud channels",
                expected: ">= 3".into(),
                got: k0.to_string(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("points", "all coordinates must be finite"));
        }
        Ok(Self { points })
    }

    /// Builds an xyz-only cloud.
    pub fn from_xyz(xyz: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = xyz.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((xyz.len(), 3), flat)
            .expect("xyz rows always have three entries");
        Self::new(points)
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn channels(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, n: usize) -> ArrayView1<'_, f64> {
        self.points.row(n)
    }

    pub fn xyz(&self, n: usize) -> [f64; 3] {
        let row = self.points.row(n);
        [row[0], row[1], row[2]]
    }

    /// Positions only, as an owned `N x 3` matrix.
    pub fn positions(&self) -> Array2<f64> {
        self.points.slice(ndarray::s![.., 0..3]).to_owned()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub vmin: [f64; 3],
    pub vmax: [f64; 3],
}

impl BBox {
    pub fn new(vmin: [f64; 3], vmax: [f64; 3]) -> Self {
        Self { vmin, vmax }
    }

    /// A ground-truth box: finite and ordered on every axis.
    pub fn ground_truth(vmin: [f64; 3], vmax: [f64; 3]) -> Result<Self> {
        let b = Self { vmin, vmax };
        b.validate_ground_truth()?;
        Ok(b)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            vmin: [v[0], v[1], v[2]],
            vmax: [v[3], v[4], v[5]],
        }
    }

    /// The six vertex coordinates, min vertex first.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.vmin[0],
            self.vmin[1],
            self.vmin[2],
            self.vmax[0],
            self.vmax[1],
            self.vmax[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn validate_ground_truth(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidBox(format!("{self:?} has non-finite vertices")));
        }
        for axis in 0..3 {
            if self.vmin[axis] > self.vmax[axis] {
                return Err(Error::InvalidBox(format!(
                    "ground-truth box has vmin > vmax on axis {axis}: {} > {}",
                    self.vmin[axis], self.vmax[axis]
                )));
            }
        }
        Ok(())
    }

    /// Tight bounds of a non-empty set of points.
    pub fn bounding(points: impl IntoIterator<Item = [f64; 3]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut vmin, mut vmax) = (first, first);
        for p in it {
            for a in 0..3 {
                vmin[a] = vmin[a].min(p[a]);
                vmax[a] = vmax[a].max(p[a]);
            }
        }
        Some(Self { vmin, vmax })
    }

    /// Closed-box containment.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.vmin[a] <= p[a] && p[a] <= self.vmax[a])
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.vmax[0] - self.vmin[0],
            self.vmax[1] - self.vmin[1],
            self.vmax[2] - self.vmin[2],
        ]
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut b = *self;
        for a in 0..3 {
            b.vmin[a] += offset[a];
            b.vmax[a] += offset[a];
        }
        b
    }
}

/// Per-axis reordering of the vertices so that `vmin <= vmax`. Idempotent.
pub fn canonicalize(b: &BBox) -> BBox {
    let mut out = *b;
    for a in 0..3 {
        out.vmin[a] = b.vmin[a].min(b.vmax[a]);
        out.vmax[a] = b.vmin[a].max(b.vmax[a]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftClampParams {
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for SoftClampParams {
    fn default() -> Self {
        Self {
            theta1: 100.0,
            theta2: 20.0,
        }
    }
}

impl SoftClampParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1.is_finite()) {
            return Err(Error::config("theta1", "must be positive and finite"));
        }
        if !(self.theta2 > 0.0 && self.theta2.is_finite()) {
            return Err(Error::config("theta2", "must be positive and finite"));
        }
        Ok(())
    }

    /// Per-axis depth `|Δ|` beyond which the clamp saturates.
    pub fn saturation_margin(&self) -> f64 {
        self.theta2 / self.theta1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMembership(pub Vec<f64>);

impl SoftMembership {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardMembership(pub Vec<bool>);

impl HardMembership {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

pub fn hard_membership(cloud: &PointCloud, gt: &BBox) -> Result<HardMembership> {
    gt.validate_ground_truth()?;
    Ok(HardMembership(
        (0..cloud.n_points())
            .map(|n| gt.contains(cloud.xyz(n)))
            .collect(),
    ))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft membership of one point plus the data needed to differentiate it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftPointTrace {
    pub q: f64,
    /// Axis that attains the minimum; ties go to the lowest axis.
    pub axis: usize,
    /// Whether the clamp is inactive on `axis`.
    pub unclamped: bool,
}

/// Point-in-box probability for one point and one (possibly unordered) box.
pub fn soft_point(p: [f64; 3], b: &BBox, clamp: &SoftClampParams) -> SoftPointTrace {
    let mut best = SoftPointTrace {
        q: f64::INFINITY,
        axis: 0,
        unclamped: false,
    };
    for a in 0..3 {
        let delta = (b.vmin[a] - p[a]) * (p[a] - b.vmax[a]);
        let scaled = clamp.theta1 * delta;
        let clamped = scaled.min(clamp.theta2).max(-clamp.theta2);
        let prob = sigmoid(clamped);
        if prob < best.q {
            best = SoftPointTrace {
                q: prob,
                axis: a,
                unclamped: scaled < clamp.theta2 && scaled > -clamp.theta2,
            };
        }
    }
    best
}

pub fn soft_membership(cloud: &PointCloud, b: &BBox, clamp: &SoftClampParams) -> SoftMembership {
    SoftMembership(
        (0..cloud.n_points())
            .map(|n| soft_point(cloud.xyz(n), b, clamp).q)
            .collect(),
    )
}
