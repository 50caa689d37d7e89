//! Dynamic surface reconstruction from a single RGB-D video.
//!
//! A monocular RGB-D sequence of a deforming object is fit by two coupled
//! neural fields: a deformation field warping each observed point into a
//! canonical space (with an extra ambient coordinate to absorb topology
//! changes), and a canonical signed-distance/color field rendered through
//! VolSDF-style volume rendering. Observed views supervise photometric,
//! depth, mask, and SDF losses; unobserved views are supervised by score
//! distillation from a view-conditioned diffusion prior so the full 360°
//! surface is recovered.
//!
//! The crate is CPU-only, double precision, and bit-deterministic: training
//! draws all randomness from one counter-based RNG whose state is
//! checkpointed, so a resumed run reproduces an uninterrupted one exactly.
//!
//! Module map:
//! - [`geometry`]: camera model, poses, rays, polar parameterization.
//! - [`gradcheck`]: finite-difference validation of every loss gradient.
//! - [`autodiff`]: reverse-mode tape over dense buffers.
//! - [`encoding`]: frequency, temporal-grid, and hash-grid encodings with
//!   coarse-to-fine schedules.
//! - [`fields`]: the deformation/topology/SDF/color networks and their
//!   initialization.
//! - [`render`]: ray sampling, occupancy grid, volume rendering.
//! - [`prior`]: noise schedule, denoiser interface (in-process toy and
//!   remote HTTP), score-distillation loss.
//! - [`losses`]: the full training objective.
//! - [`training`]: optimizer, EMA, schedules, checkpointing, training loop.
//! - [`dataio`]: dataset manifest, image I/O, preprocessing, synthetic
//!   scene generation.
//! - [`evaluation`]: level-set mesh extraction, mesh metrics, culling.

pub mod autodiff;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod fields;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod prior;
pub mod render;
pub mod training;

pub use error::{Error, Result};
