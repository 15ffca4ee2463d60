//! Multi-modal full body tracking from head/wrist tracking and egocentric
//! depth point clouds.

pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod mpe;
pub mod optim;
pub mod sensor;
pub mod spc;
pub mod synthesis;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{Scalar, Tensor};
