//! Network descriptions for the three architectures and their graph
//! instantiation.

mod network;
mod spec;

pub use network::{Network, LABELS, LOSS};
pub use spec::{
    build_baseline_fcn, build_hrenet, build_nrenet, irnn_matched_widths, scaled, spec_from_manifest, Arch,
    LayerKind, LayerShape, LayerSpec, ModelConfig, NetworkSpec, ParamInfo, ParamRole, DATA, DESK_MIN_SIZE,
    DESK_SCALE,
};
