//! Screen-aligned 3D keypoint traces: geometry, dataset forging, synthetic
//! scenes, conditioning, a flow-matching trace model and evaluation.

pub mod error;
pub mod eval;
pub mod forge;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod model;
pub mod synth;
pub mod sample;
pub mod trace;

pub use error::{Error, Result};
pub use geometry::{CameraModel, Intrinsics, ScreenPoint};
pub use sample::{DepthMap, TraceSample};
pub use trace::{increments_from_trace, trace_from_increments, GridSpec, NormStats, ScreenTrace, TraceIncrements};
