//! Mesh-bound deformable Gaussian splatting.
//!
//! Gaussians live in the local frame of a rig triangle, follow the rig
//! coarsely through blendshapes and linear blend skinning, and receive a
//! learned fine correction from a tri-plane + MLP morph adjuster. Everything
//! is differentiable end to end with hand-written backward passes.

pub mod adjuster;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod density;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod imageio;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod rig;
pub mod rigfile;
pub mod schedule;
pub mod toy;
pub mod trainer;

pub use buffer::Image;
pub use error::{Error, Result};
