//! Gaussian action fields: a Gaussian-splatting scene whose primitives carry a
//! displacement over a fixed interval, fitted to multi-view images at two
//! timesteps. Rigid end-effector actions are read off the moving gripper
//! Gaussians and refined by a DDIM-style denoiser.

pub mod action;
pub mod error;
pub mod field;
pub mod fitter;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod refine;
pub mod renderer;
pub mod testing;

pub use error::*;
pub use field::{FieldDelta, GaussianField, GaussianPoint};
pub use geometry::{Camera, Quaternion, Se3, Twist};
pub use image::Image;
pub use renderer::{render, render_backward, render_reference, RenderConfig, RenderOutput};
