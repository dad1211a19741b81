//! The four network branches: a shared per-point MLP backbone with global
//! max-pooling, box regression from the global feature, box-conditioned
//! point masks, and per-point semantics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Initializer, Linear, ParamId, ParamStore, SplitLinear};
use crate::error::{Error, Result};
use crate::geometry::{BBox, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input channels per point.
    pub in_channels: usize,
    /// Hidden widths of the backbone before the final `k`-wide layer.
    pub backbone_hidden: Vec<usize>,
    /// Width of local and global features.
    pub k: usize,
    /// Maximum number of predicted boxes.
    pub h_max: usize,
    pub box_hidden: Vec<usize>,
    /// Width each of the point and global features are compressed to.
    pub mask_compress: usize,
    /// Width of the fused point features.
    pub mask_fused: usize,
    /// Shared layers after fusing a box with each point.
    pub mask_hidden: Vec<usize>,
    pub sem_hidden: usize,
    pub semantic_classes: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 9,
            backbone_hidden: vec![64, 128],
            k: 128,
            h_max: 24,
            box_hidden: vec![256, 256],
            mask_compress: 256,
            mask_fused: 128,
            mask_hidden: vec![64, 32],
            sem_hidden: 64,
            semantic_classes: 13,
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("k", self.k),
            ("h_max", self.h_max),
            ("mask_compress", self.mask_compress),
            ("mask_fused", self.mask_fused),
            ("sem_hidden", self.sem_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.semantic_classes < 2 {
            return Err(Error::config("semantic_classes", "must be >= 2"));
        }
        if self.in_channels < 3 {
            return Err(Error::config("in_channels", "must be >= 3"));
        }
        if self.box_hidden.is_empty() {
            return Err(Error::config("box_hidden", "needs at least one layer"));
        }
        if self.mask_hidden.is_empty() {
            return Err(Error::config("mask_hidden", "needs at least one layer"));
        }
        let widths = self
            .backbone_hidden
            .iter()
            .chain(&self.box_hidden)
            .chain(&self.mask_hidden);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths", "must be >= 1"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layers {
    backbone: Vec<Linear>,
    box_hidden: Vec<Linear>,
    box_vertices: Linear,
    box_scores: Linear,
    mask_point: Linear,
    mask_global: Linear,
    mask_fuse: SplitLinear,
    mask_box: SplitLinear,
    mask_hidden: Vec<Linear>,
    mask_out: Linear,
    sem_hidden: SplitLinear,
    sem_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
}

/// Parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    /// `N x k`
    pub f_local: Var,
    /// `1 x k`
    pub f_global: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    /// `H x 6`, min vertex then max vertex.
    pub boxes: Var,
    /// `H x 1`
    pub scores: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub backbone: BackboneVars,
    pub boxes: BoxVars,
    /// `H x N`
    pub masks: Var,
    /// `N x K`
    pub logits: Var,
}

/// Plain-valued network outputs for one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub masks: Array2<f64>,
    pub logits: Array2<f64>,
}

impl Prediction {
    pub fn from_graph(g: &Graph, out: &ForwardVars) -> Self {
        let b = g.value(out.boxes.boxes);
        Prediction {
            boxes: b
                .rows()
                .into_iter()
                .map(|r| BBox::from_slice(&r.to_vec()))
                .collect(),
            scores: g.value(out.boxes.scores).column(0).to_vec(),
            masks: g.value(out.masks).clone(),
            logits: g.value(out.logits).clone(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);

        let mut backbone = Vec::new();
        let mut fan_in = config.in_channels;
        for (i, &w) in config
            .backbone_hidden
            .iter()
            .chain(std::iter::once(&config.k))
            .enumerate()
        {
            backbone.push(init.linear(&mut store, &format!("backbone.{i}"), fan_in, w));
            fan_in = w;
        }

        let mut box_hidden = Vec::new();
        let mut fan_in = config.k;
        for (i, &w) in config.box_hidden.iter().enumerate() {
            box_hidden.push(init.linear(&mut store, &format!("box.hidden.{i}"), fan_in, w));
            fan_in = w;
        }
        let box_vertices = init.linear(&mut store, "box.vertices", fan_in, 6 * config.h_max);
        let box_scores = init.linear(&mut store, "box.scores", fan_in, config.h_max);

        let c = config.mask_compress;
        let mask_point = init.linear(&mut store, "mask.point", config.k, c);
        let mask_global = init.linear(&mut store, "mask.global", config.k, c);
        let mask_fuse = init.split_linear(&mut store, "mask.fuse", c, c, config.mask_fused);
        let first_hidden = config.mask_hidden[0];
        let mask_box = init.split_linear(&mut store, "mask.box", config.mask_fused, 7, first_hidden);
        let mut mask_hidden = Vec::new();
        let mut fan_in = first_hidden;
        for (i, &w) in config.mask_hidden.iter().enumerate().skip(1) {
            mask_hidden.push(init.linear(&mut store, &format!("mask.hidden.{i}"), fan_in, w));
            fan_in = w;
        }
        let mask_out = init.linear(&mut store, "mask.out", fan_in, 1);

        let sem_hidden = init.split_linear(&mut store, "sem.hidden", config.k, config.k, config.sem_hidden);
        let sem_out = init.linear(&mut store, "sem.out", config.sem_hidden, config.semantic_classes);

        Ok(Self {
            config,
            params: store,
            layers: Layers {
                backbone,
                box_hidden,
                box_vertices,
                box_scores,
                mask_point,
                mask_global,
                mask_fuse,
                mask_box,
                mask_hidden,
                mask_out,
                sem_hidden,
                sem_out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Binds every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.ids().map(|id| g.leaf(self.params.get(id).clone())).collect(),
        }
    }

    /// Binds every parameter as a constant, for inference.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .ids()
                .map(|id| g.constant(self.params.get(id).clone()))
                .collect(),
        }
    }

    fn linear(&self, g: &mut Graph, p: &Bound, l: &Linear, x: Var) -> Var {
        let w = p.var(l.weight);
        let xw = g.matmul(x, w);
        g.add_row(xw, p.var(l.bias))
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        g.leaky_relu(x, self.config.leaky_slope)
    }

    /// `[a | broadcast(b)] W + bias` for `a: N x *` and a single-row `b`.
    fn split_broadcast(&self, g: &mut Graph, p: &Bound, l: &SplitLinear, a: Var, b: Var) -> Var {
        let aw = g.matmul(a, p.var(l.weight_a));
        let bw = g.matmul(b, p.var(l.weight_b));
        let row = g.add(bw, p.var(l.bias));
        g.add_row(aw, row)
    }

    pub fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                context: "input channels",
                expected: self.config.in_channels.to_string(),
                got: features.ncols().to_string(),
            });
        }
        if features.nrows() == 0 {
            return Err(Error::Empty("input cloud"));
        }
        Ok(())
    }

    pub fn backbone_forward(&self, g: &mut Graph, p: &Bound, input: Var) -> BackboneVars {
        let mut x = input;
        for l in &self.layers.backbone {
            let y = self.linear(g, p, l, x);
            x = self.act(g, y);
        }
        let f_global = g.col_max(x);
        BackboneVars {
            f_local: x,
            f_global,
        }
    }

    pub fn box_branch_forward(&self, g: &mut Graph, p: &Bound, f_global: Var) -> BoxVars {
        let mut x = f_global;
        for l in &self.layers.box_hidden {
            let y = self.linear(g, p, l, x);
            x = self.act(g, y);
        }
        let h = self.config.h_max;
        let flat = self.linear(g, p, &self.layers.box_vertices, x);
        let boxes = g.reshape(flat, (h, 6));
        let logits = self.linear(g, p, &self.layers.box_scores, x);
        let s = g.sigmoid(logits);
        let scores = g.reshape(s, (h, 1));
        BoxVars { boxes, scores }
    }

    pub fn mask_branch_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        bb: &BackboneVars,
        boxes: &BoxVars,
    ) -> Var {
        let n = g.shape(bb.f_local).0;
        let h = self.config.h_max;
        let pl = self.linear(g, p, &self.layers.mask_point, bb.f_local);
        let pl = self.act(g, pl);
        let pg = self.linear(g, p, &self.layers.mask_global, bb.f_global);
        let pg = self.act(g, pg);
        let fused = self.split_broadcast(g, p, &self.layers.mask_fuse, pl, pg);
        let fused = self.act(g, fused);

        // First shared layer over [fused point feature | 6 vertices | score]:
        // the point part is computed once, the box part once per box.
        let l = &self.layers.mask_box;
        let point_part = g.matmul(fused, p.var(l.weight_a));
        let box_feat = g.concat_cols(boxes.boxes, boxes.scores);
        let box_part = g.matmul(box_feat, p.var(l.weight_b));
        let box_part = g.add_row(box_part, p.var(l.bias));
        let x = g.pairwise_add(point_part, box_part);
        let mut x = self.act(g, x);
        for l in &self.layers.mask_hidden {
            let y = self.linear(g, p, l, x);
            x = self.act(g, y);
        }
        let logits = self.linear(g, p, &self.layers.mask_out, x);
        let probs = g.sigmoid(logits);
        g.reshape(probs, (h, n))
    }

    pub fn semantic_branch_forward(&self, g: &mut Graph, p: &Bound, bb: &BackboneVars) -> Var {
        let x = self.split_broadcast(g, p, &self.layers.sem_hidden, bb.f_local, bb.f_global);
        let x = self.act(g, x);
        self.linear(g, p, &self.layers.sem_out, x)
    }

    /// Single pass through all branches.
    pub fn full_forward(&self, g: &mut Graph, p: &Bound, features: &Array2<f64>) -> Result<ForwardVars> {
        self.check_input(features)?;
        let input = g.constant(features.clone());
        let backbone = self.backbone_forward(g, p, input);
        let boxes = self.box_branch_forward(g, p, backbone.f_global);
        let masks = self.mask_branch_forward(g, p, &backbone, &boxes);
        let logits = self.semantic_branch_forward(g, p, &backbone);
        Ok(ForwardVars {
            backbone,
            boxes,
            masks,
            logits,
        })
    }

    /// Inference on a featurized cloud.
    pub fn predict(&self, cloud: &PointCloud) -> Result<Prediction> {
        let features = cloud.points().to_owned();
        self.predict_features(&features)
    }

    pub fn predict_features(&self, features: &Array2<f64>) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g);
        let out = self.full_forward(&mut g, &p, features)?;
        Ok(Prediction::from_graph(&g, &out))
    }
}
