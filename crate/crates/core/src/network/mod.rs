//! Differentiable model: reverse-mode graph, parameters, branches and loss heads.

pub mod graph;
pub mod heads;
mod model;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use heads::{
    associate, attach_losses, cost_graph, reference_losses, CostVars, HeadInputs, LossConfig,
    LossTerms, LossVars, SampleTargets,
};
pub use model::{BackboneVars, Bound, BoxVars, ForwardVars, Model, ModelConfig, Prediction};
pub use params::{Linear, ParamId, ParamStore, SplitLinear};
