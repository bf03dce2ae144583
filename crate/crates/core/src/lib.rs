//! Dense tracking of deforming triangle-mesh sequences.
//!
//! A template mesh is propagated frame to frame: each target scan is
//! normalized to the unit cube, the template is aligned to it with a
//! landmark-seeded similarity ICP, and then refined by a non-rigid ICP whose
//! per-vertex affine transforms are regularized by stiffness, landmark and
//! motion-history terms. The motion targets come from per-vertex Kalman
//! filters over the previously fitted frames. Because every fitted frame
//! shares the template topology, vertex `i` of every frame is the same
//! surface point: dense correspondence comes for free.

pub mod cli;
pub mod container;
pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod kalman;
pub mod kdtree;
pub mod mesh;
pub mod morphable;
pub mod nicp;
pub mod pipeline;
pub mod similarity;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
pub use mesh::{LandmarkSet, Mesh, Vec3};
