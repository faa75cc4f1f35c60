//! Backbone, dual-head adapter and the incremental inference path.

mod backbone;
mod cache;
mod config;
mod dual;
mod weights;

pub use backbone::{backbone_graph, Backbone, BackboneGraph, FullForward, Position, INIT_STD};
pub use config::{BranchConfig, Condition, ModelConfig};
pub use dual::{dual_graph, fuse_logits, target_row, DualForward, DualGraph, DualHeadModel, GateMode, TargetLayout, TrainableSets};
pub use weights::{
    is_decayed, is_new_component, BackboneWeights, DualWeights, EmbedWeights, GateWeights, HeadWeights, LayerWeights,
};
pub use cache::{CacheLayout, DualStepOutput, KvCacheSet, StepOutput};
pub(crate) use dual::gate_rows;
