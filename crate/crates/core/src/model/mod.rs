//! Model specs, the preset catalog, network construction and cost accounting.

mod cost;
mod net;
mod presets;
mod spec;

pub use cost::{count_model, count_spec, CostRecord, CostReport, LayerCost, LayerKind, EMBED_BLOCK, HEAD_BLOCK};
pub use net::{Block, Model, ModelOutput, Stage, POS_EMBED};
pub use presets::{
    ablation, embed_schedule, preset, pyramid, tiny, toy, IMAGENET_CLASSES, IMAGENET_RESOLUTION, PRESET_NAMES,
};
pub use spec::{halve, Ablation, ModelSpec, NormKind, PatchEmbedSpec, PositionKind, StageSpec, SubsampleSpec};
