//! Rotation-equivariant Siamese tracking.
//!
//! Filters are linear combinations of circular harmonics, so rotating them
//! by a group angle is a phase shift. Stacked lifting and group
//! convolutions give an encoder that commutes with quarter turns (for the
//! cyclic group of order 4) or any rotation in its group. The tracker
//! correlates search features against a bank of rotated exemplars and reads
//! the target's relative orientation off the winning bank entry.

pub mod basis;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use basis::{steer, FilterWeights, SteerableBasis};
pub use dataset::{Annotation, DiskSequence, FrameSource, InMemorySequence};
pub use error::{Error, Result};
pub use eval::{EvalResult, SrEntry};
pub use geometry::{iou, BBox};
pub use net::{
    Encoder, GroupSpec, LayerKind, LayerSpec, Model, NetParams, Network, NetworkSpec, PlainCnn,
    PoolMode,
};
pub use synth::{DatasetConfig, Split, SynthConfig, SyntheticSequence};
pub use tensor::{ImagePatch, Interpolation, Tensor};
pub use tracker::{ResultRow, TrackState, Tracker, TrackerConfig};
pub use train::{LossRecord, TrainConfig, TrainOutcome};
