//! Evaluation tooling for monocular dynamic view synthesis.
//!
//! The crate measures how much multi-view signal a monocular capture carries
//! (the full and angular effective multi-view factors), builds co-visibility
//! masks from optical flow, and scores renderings with masked image metrics
//! and keypoint transfer accuracy. Supporting geometry lives alongside:
//! camera projection, depth alignment, warp inversion and rig registration.
//!
//! Conventions shared by every module:
//!
//! * camera orientation maps world to camera coordinates, +z looks forward;
//! * depth is z-depth along the optical axis, values `<= 0` are invalid;
//! * pixel centres sit at integer coordinates, `u` in `0..width`;
//! * angular quantities in reports are degrees (per second).

// negated comparisons throughout deliberately treat NaN as failing the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod covis;
pub mod depth;
pub mod emf;
pub mod error;
pub mod flow;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod sequence;
pub mod synth;
pub mod warp;

mod rng;

pub use error::{Error, ErrorKind, Result};
