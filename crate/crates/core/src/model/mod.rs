//! The multi-species convolutional network.

pub mod checkpoint;
mod config;
mod layers;
mod network;
mod params;

pub use config::{Activation, ArchConfig, BranchKind};
pub use layers::{
    check_rank, lrconv_forward, max_rank, sbn_forward, Branch, LowRankConvParams, Mode, NormLayer, NormSlot,
    RunningStats, Segment, SpconvLayer, StatUpdate,
};
pub use network::{argmax, CkspModel, ForwardOutput, Head, ParamReport, SpeciesInput};
pub use params::{Init, Param, ParamId, ParamKind, ParamStore};
