//! Egocentric depth sensor simulation and procedural motion.

pub mod motion;
pub mod rig;
pub mod sequence;

pub use motion::{gen_motion, Motion, Protocol, ThreePointFrame, FPS, X_DIM};
pub use rig::{
    corrupt, depth_weighted_sample, label_points, SensorPose, SensorRig, ShiftProfile,
};
pub use sequence::{
    domain_shift, simulate_sequence, to_pseudo_real, Domain, SampledCloud, SensorFrame,
    SequenceSample, SimConfig,
};
