//! Model layer: parameters, the convolutional backbone with perturbation and
//! tap sites, feature-statistics perturbations, and the dual-stream model.

mod backbone;
mod checkpoint;
mod dual;
mod layers;
mod perturb;

pub use backbone::{build_backbone, Backbone, BackboneCfg, Layer};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointModel};
pub use dual::{DualActivations, DualPass, DualStreamModel, PerturbDraws, PerturbKind, SingleStream};
pub use layers::{BatchNorm2d, Conv2d, IdGen, Linear, Param};
pub use perturb::{dsu_forward, ldp_forward, mixstyle_forward, LdpSite};

/// Forward-pass mode: training uses batch statistics and stochastic
/// perturbation; evaluation is deterministic.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether parameters enter the graph with gradient tracking.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BindMode {
    Trainable,
    Frozen,
}
