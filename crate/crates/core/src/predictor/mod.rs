//! Multimodal decoupled beam predictor.

pub mod checkpoint;
pub mod mat;
pub mod model;
pub mod sensors;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use mat::Mat;
pub use model::{
    backbone_forward, fuse_tokens, heads_forward, pga_attend, select_future, ForwardVars, ModelConfig, ModelInput,
    PredictionBundle, Predictor,
};
pub use sensors::{
    add_query_offsets, encode_kinematics, image_spatial_bias, lidar_spatial_bias, synth_sensor_tokens, CameraIntrinsics, KinematicSequence,
    SensorConfig, SensorTokens, SpatialBias,
};
pub use tape::{ParamId, ParamStore, Tape, Var};
