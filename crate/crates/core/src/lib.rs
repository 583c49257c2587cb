//! Lossless LiDAR point-cloud geometry codec.
//!
//! Occupancy symbols of an octree are entropy-coded with a learned model
//! split into a heavy non-causal backbone, run once per window, and a
//! lightweight causal predictor whose stage count trades compression for
//! decode parallelism — down to a single pass (S = 1) or up to full
//! autoregression (AR sentinel), all from one checkpoint.

pub mod backbone;
pub mod bench;
pub mod codec;
pub mod coder;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod octree;
pub mod optim;
pub mod predictor;
pub mod scan_io;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use codec::{
    decode_frame, encode_frame, verify_round_trip, BitstreamHeader, CodecConfig, DecodedFrame,
    FrameStats,
};
pub use error::{LoccError, Result};
pub use geom::{PreprocessMode, QuantizationParams, SensorIntrinsics};
pub use model::{Model, ModelConfig, RunCounters};
pub use octree::{build_octree, reconstruct_points, OctreeLevels};
