//! Minimal reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node can only reference older nodes.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use crate::association::EPS;
use crate::geometry::{sigmoid, BBox, SoftClampParams};
use crate::losses::FocalParams;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LnClamped(Var),
    MaxGuard(Var, f64),
    SumAll(Var),
    RowSums(Var),
    ColMax(Var, Vec<usize>),
    ConcatCols(Var, Var),
    PairwiseAdd(Var, Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SoftMembership {
        boxes: Var,
        points: Rc<Array2<f64>>,
        clamp: SoftClampParams,
    },
    PairSqDist(Var, Rc<Array2<f64>>),
    SoftmaxXent {
        logits: Var,
        labels: Rc<Vec<usize>>,
    },
    FocalMean {
        probs: Var,
        targets: Rc<Array2<f64>>,
        params: FocalParams,
    },
    AssignmentSelect {
        costs: Var,
        gt_to_pred: Vec<usize>,
        straight_through: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Leaf) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operands must have identical shapes"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    /// Broadcasts a `1 x m`, `n x 1` or `1 x 1` value to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let value = self
            .value(a)
            .broadcast(shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", self.shape(a)))
            .to_owned();
        self.push(value, Op::Broadcast(a), &[a])
    }

    /// `x + b` with `b` a `1 x m` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x);
        let bb = self.broadcast(b, shape);
        self.add(x, bb)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// `ln(clamp(a, eps, 1 - eps))`; zero gradient where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(EPS, 1.0 - EPS).ln());
        self.push(value, Op::LnClamped(a), &[a])
    }

    pub fn max_guard(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor));
        self.push(value, Op::MaxGuard(a, floor), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `n x m -> n x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSums(a), &[a])
    }

    /// Column-wise maximum, `n x m -> 1 x m`. Ties route the gradient to the first row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        assert!(n > 0, "col_max over zero rows");
        let mut arg = vec![0usize; m];
        let mut best = x.row(0).to_owned();
        for r in 1..n {
            for c in 0..m {
                if x[[r, c]] > best[c] {
                    best[c] = x[[r, c]];
                    arg[c] = r;
                }
            }
        }
        let value = best.insert_axis(Axis(0));
        self.push(value, Op::ColMax(a, arg), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts must match");
        self.push(value, Op::ConcatCols(a, b), &[a, b])
    }

    /// `a: N x d`, `b: H x d` to `(H*N) x d` with row `i*N + n` equal to `a[n] + b[i]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, d) = va.dim();
        let (h, d2) = vb.dim();
        assert_eq!(d, d2, "pairwise_add: widths must match");
        let mut value = Array2::zeros((h * n, d));
        for i in 0..h {
            let mut block = value.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]);
            block.assign(va);
            block += &vb.row(i);
        }
        self.push(value, Op::PairwiseAdd(a, b), &[a, b])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape)
            .expect("reshape: element count must match");
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Point-in-box probabilities: `boxes: H x 6` against fixed `points: N x 3`, giving `H x N`.
    pub fn soft_membership(
        &mut self,
        boxes: Var,
        points: Rc<Array2<f64>>,
        clamp: SoftClampParams,
    ) -> Var {
        let b = self.value(boxes);
        assert_eq!(b.ncols(), 6, "soft_membership: boxes must be H x 6");
        let (h, n) = (b.nrows(), points.nrows());
        let mut value = Array2::zeros((h, n));
        for i in 0..h {
            let bx = BBox::from_slice(b.row(i).as_slice().expect("contiguous box row"));
            for p in 0..n {
                let pt = [points[[p, 0]], points[[p, 1]], points[[p, 2]]];
                value[[i, p]] = crate::geometry::soft_point(pt, &bx, &clamp).q;
            }
        }
        self.push(
            value,
            Op::SoftMembership {
                boxes,
                points,
                clamp,
            },
            &[boxes],
        )
    }

    /// `a: H x d` against constant `b: T x d`, giving `H x T` sums of squared differences.
    pub fn pair_sq_dist(&mut self, a: Var, b: Rc<Array2<f64>>) -> Var {
        let va = self.value(a);
        assert_eq!(va.ncols(), b.ncols(), "pair_sq_dist: widths must match");
        let mut value = Array2::zeros((va.nrows(), b.nrows()));
        for i in 0..va.nrows() {
            for j in 0..b.nrows() {
                value[[i, j]] = va
                    .row(i)
                    .iter()
                    .zip(b.row(j).iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        self.push(value, Op::PairSqDist(a, b), &[a])
    }

    /// Mean softmax cross-entropy of `N x K` logits, as a `1 x 1` value.
    pub fn softmax_xent(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), labels.len(), "softmax_xent: one label per row");
        let mut total = 0.0;
        for (row, &l) in x.rows().into_iter().zip(labels.iter()) {
            total += crate::losses::log_sum_exp(row.iter().copied()) - row[l];
        }
        let value = scalar(total / x.nrows() as f64);
        self.push(value, Op::SoftmaxXent { logits, labels }, &[logits])
    }

    /// Mean focal loss of probabilities against binary targets, as a `1 x 1` value.
    pub fn focal_mean(&mut self, probs: Var, targets: Rc<Array2<f64>>, params: FocalParams) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim(), "focal_mean: shapes must match");
        let total: f64 = p
            .iter()
            .zip(targets.iter())
            .map(|(&p, &y)| crate::losses::focal_loss(p, y > 0.5, &params))
            .sum();
        let value = scalar(total / p.len() as f64);
        self.push(
            value,
            Op::FocalMean {
                probs,
                targets,
                params,
            },
            &[probs],
        )
    }

    /// `(1/T) sum_j C[a_j, j]` for an `H x T` cost matrix and a fixed assignment.
    ///
    /// The backward pass sends `(A + s * C) / T` to the costs, where `A` is the
    /// 0/1 assignment matrix and `s` the straight-through scale (`0` freezes `A`).
    pub fn assignment_select(&mut self, costs: Var, gt_to_pred: &[usize], straight_through: f64) -> Var {
        let c = self.value(costs);
        assert_eq!(c.ncols(), gt_to_pred.len(), "assignment_select: one pairing per column");
        let total = crate::association::total_cost(c, gt_to_pred);
        let value = scalar(total / gt_to_pred.len() as f64);
        self.push(
            value,
            Op::AssignmentSelect {
                costs,
                gt_to_pred: gt_to_pred.to_vec(),
                straight_through,
            },
            &[costs],
        )
    }

    /// Backpropagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Array2::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                self.accumulate(grads, *a, g / vb);
                if self.nodes[b.0].needs_grad {
                    let gb = -(g * &node.value) / vb;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Broadcast(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = g.clone();
                if r == 1 {
                    ga = ga.sum_axis(Axis(0)).insert_axis(Axis(0));
                }
                if c == 1 {
                    ga = ga.sum_axis(Axis(1)).insert_axis(Axis(1));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|d, &s| *d *= s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::LnClamped(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    if x > EPS && x < 1.0 - EPS {
                        *d /= x
                    } else {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::MaxGuard(a, floor) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    if x < *floor {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::RowSums(a) => {
                let ga = g.broadcast(self.shape(*a)).expect("row sums broadcast").to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::ColMax(a, arg) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (c, &r) in arg.iter().enumerate() {
                    ga[[r, c]] = g[[0, c]];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::PairwiseAdd(a, b) => {
                let (n, d) = self.shape(*a);
                let h = self.shape(*b).0;
                let mut ga = Array2::zeros((n, d));
                let mut gb = Array2::zeros((h, d));
                for i in 0..h {
                    let block = g.slice(ndarray::s![i * n..(i + 1) * n, ..]);
                    ga += &block;
                    gb.row_mut(i).assign(&block.sum_axis(Axis(0)));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Reshape(a) => {
                let ga = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.shape(*a))
                    .expect("reshape backward");
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(k);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftMembership {
                boxes,
                points,
                clamp,
            } => {
                let b = self.value(*boxes);
                let mut gbox = Array2::zeros(b.dim());
                for i in 0..b.nrows() {
                    let bx = BBox::from_slice(b.row(i).as_slice().expect("contiguous box row"));
                    for p in 0..points.nrows() {
                        let up = g[[i, p]];
                        if up == 0.0 {
                            continue;
                        }
                        let pt = [points[[p, 0]], points[[p, 1]], points[[p, 2]]];
                        let tr = crate::geometry::soft_point(pt, &bx, clamp);
                        if !tr.unclamped {
                            continue;
                        }
                        let a = tr.axis;
                        // q = sigmoid(theta1 * (vmin - p)(p - vmax)) on the routing axis.
                        let common = up * tr.q * (1.0 - tr.q) * clamp.theta1;
                        gbox[[i, a]] += common * (pt[a] - bx.vmax[a]);
                        gbox[[i, a + 3]] += common * (pt[a] - bx.vmin[a]);
                    }
                }
                self.accumulate(grads, *boxes, gbox);
            }
            Op::PairSqDist(a, b) => {
                let va = self.value(*a);
                let mut ga = Array2::zeros(va.dim());
                for i in 0..va.nrows() {
                    for j in 0..b.nrows() {
                        let up = g[[i, j]];
                        for k in 0..va.ncols() {
                            ga[[i, k]] += 2.0 * up * (va[[i, k]] - b[[j, k]]);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxXent { logits, labels } => {
                let x = self.value(*logits);
                let n = x.nrows() as f64;
                let up = g[[0, 0]] / n;
                let mut gl = Array2::zeros(x.dim());
                for (r, &l) in labels.iter().enumerate() {
                    let row = x.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for c in 0..x.ncols() {
                        let p = (x[[r, c]] - m).exp() / z;
                        gl[[r, c]] = up * (p - if c == l { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::FocalMean {
                probs,
                targets,
                params,
            } => {
                let p = self.value(*probs);
                let up = g[[0, 0]] / p.len() as f64;
                let mut gp = Array2::zeros(p.dim());
                Zip::from(&mut gp)
                    .and(p)
                    .and(&**targets)
                    .for_each(|d, &p, &y| {
                        let positive = y > 0.5;
                        let pt = if positive { p } else { 1.0 - p };
                        let dpt = focal_dpt(pt, params);
                        *d = up * if positive { dpt } else { -dpt };
                    });
                self.accumulate(grads, *probs, gp);
            }
            Op::AssignmentSelect {
                costs,
                gt_to_pred,
                straight_through,
            } => {
                let c = self.value(*costs);
                let t = gt_to_pred.len() as f64;
                let up = g[[0, 0]] / t;
                let mut gc = if *straight_through != 0.0 {
                    c * (up * straight_through)
                } else {
                    Array2::zeros(c.dim())
                };
                for (j, &i) in gt_to_pred.iter().enumerate() {
                    gc[[i, j]] += up;
                }
                self.accumulate(grads, *costs, gc);
            }
        }
    }
}

/// Derivative of `-alpha (1 - pt)^gamma ln(clamp(pt))` with respect to `pt`.
fn focal_dpt(pt: f64, fp: &FocalParams) -> f64 {
    let inside = pt > EPS && pt < 1.0 - EPS;
    let log_term = pt.clamp(EPS, 1.0 - EPS).ln();
    let dlog = if inside { 1.0 / pt } else { 0.0 };
    if fp.gamma == 0.0 {
        return -fp.alpha * dlog;
    }
    let one_minus = 1.0 - pt;
    let weight = one_minus.powf(fp.gamma);
    let dweight = if one_minus > 0.0 {
        -fp.gamma * one_minus.powf(fp.gamma - 1.0)
    } else if fp.gamma < 1.0 {
        // Infinite slope at pt = 1; the clamp already zeroes the log term there.
        0.0
    } else if fp.gamma == 1.0 {
        -1.0
    } else {
        0.0
    };
    -fp.alpha * (dweight * log_term + weight * dlog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of a scalar-valued closure over every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            out[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}\n{a}\n{b}");
        }
    }

    fn check(x0: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let out = build(&mut g, v);
            let s = g.sum_all(out);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let v = g.leaf(x0.clone());
        let out = build(&mut g, v);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        assert_close(grads.get(v).unwrap(), &numeric_grad(&x0, eval), 1e-6);
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |g, v| g.sigmoid(v));
        check(sample(), |g, v| g.leaky_relu(v, 0.01));
        check(sample(), |g, v| {
            let s = g.sigmoid(v);
            g.ln_clamped(s)
        });
        check(sample(), |g, v| {
            let a = g.sigmoid(v);
            let b = g.one_minus(a);
            let m = g.mul(a, v);
            g.div(m, b)
        });
        check(sample(), |g, v| {
            let w = g.scale(v, 3.0);
            g.sub(w, v)
        });
    }

    #[test]
    fn structural_ops() {
        check(sample(), |g, v| {
            let w = g.constant(array![[1.0, -2.0], [0.5, 0.1], [2.0, 1.0]]);
            let m = g.matmul(v, w);
            g.mul(m, m)
        });
        check(sample(), |g, v| {
            let cm = g.col_max(v);
            let r = g.row_sums(v);
            let sq = g.mul(r, r);
            let b = g.broadcast(cm, (4, 3));
            let bb = g.mul(b, b);
            let x = g.sum_all(bb);
            let y = g.sum_all(sq);
            g.add(x, y)
        });
        check(sample(), |g, v| {
            let c = g.concat_cols(v, v);
            let r = g.reshape(c, (3, 4));
            let s = g.gather_rows(r, &[2, 0, 2]);
            g.mul(s, s)
        });
        check(sample(), |g, v| {
            let top = g.gather_rows(v, &[0]);
            let p = g.pairwise_add(v, top);
            let p2 = g.pairwise_add(top, v);
            let a = g.mul(p, p);
            let b = g.mul(p2, p2);
            let sa = g.sum_all(a);
            let sb = g.sum_all(b);
            g.add(sa, sb)
        });
    }

    #[test]
    fn fused_losses() {
        let labels = Rc::new(vec![2, 0]);
        check(sample(), |g, v| g.softmax_xent(v, labels.clone()));
        let targets = Rc::new(array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        for fp in [FocalParams::default(), FocalParams::CROSS_ENTROPY, FocalParams { alpha: 0.5, gamma: 0.5 }] {
            let t = targets.clone();
            check(sample(), move |g, v| {
                let p = g.sigmoid(v);
                g.focal_mean(p, t.clone(), fp)
            });
        }
        let gt = Rc::new(array![[0.0, 1.0, 0.5], [1.0, 1.0, 1.0]]);
        check(sample(), |g, v| {
            let d = g.pair_sq_dist(v, gt.clone());
            g.mul(d, d)
        });
    }

    #[test]
    fn assignment_select_modes() {
        let c0 = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.2]];
        // Zero mode: the gradient is the frozen selection.
        check(c0.clone(), |g, v| {
            let sq = g.mul(v, v);
            g.assignment_select(sq, &[1, 2], 0.0)
        });
        let mut g = Graph::new();
        let v = g.leaf(c0.clone());
        let s = g.assignment_select(v, &[1, 2], 0.0);
        assert_eq!(g.scalar_value(s), (0.5 + 0.2) / 2.0);
        let zero = g.backward(s).take(v).unwrap();
        assert_eq!(zero, array![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]);

        let mut g = Graph::new();
        let v = g.leaf(c0.clone());
        let s = g.assignment_select(v, &[1, 2], 1.0);
        assert_eq!(g.scalar_value(s), (0.5 + 0.2) / 2.0);
        let st = g.backward(s).take(v).unwrap();
        assert_eq!(st, &zero + &(&c0 * 0.5));
    }

    #[test]
    fn soft_membership_gradient() {
        let points = Rc::new(array![
            [0.05, 0.5, 0.5],
            [0.5, 0.93, 0.5],
            [0.5, 0.5, 1.04],
            [0.5, 0.5, 0.5]
        ]);
        let boxes = array![[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], [0.1, 0.2, 0.3, 0.55, 0.95, 1.02]];
        check(boxes, |g, v| g.soft_membership(v, points.clone(), SoftClampParams::default()));
    }
}
