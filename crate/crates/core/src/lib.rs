//! Synchronized multi-view diffusion texturing for triangle meshes.
//!
//! Views of a mesh are denoised jointly: at each early sampling step the
//! per-view predictions are baked into a shared UV atlas, filled, and
//! rendered back so all views agree on the texture they are converging to.

pub mod atlas;
pub mod backend;
pub mod camera;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod geometry;
pub mod grid;
pub mod guidance;
pub mod imageio;
pub mod pipeline;
pub mod raster;
