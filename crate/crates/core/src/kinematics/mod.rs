//! Skeletons, 6D rotations, forward kinematics and the capsule body proxy.
//!
//! Coordinates are meters with +y up; the rest pose faces +z and the body's
//! left side is +x.

pub mod capsule;
pub mod fk;
pub mod rot6d;
pub mod skeleton;

pub use capsule::{body_capsules, closest_joint, sample_capsules, surface_sample, Capsule};
pub use fk::{fk, fk_full, fk_matrices, fk_scaled, FkOp, FkOutput, Pose, RootFrame};
pub use rot6d::{matrix_to_rot6d, rot6d_to_matrix, GramSchmidtOp, Rot6D};
pub use skeleton::{BodyShape, Skeleton};
