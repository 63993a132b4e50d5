//! Self-supervised enhancement of a lightweight multizone ToF reading into a
//! dense metric depth map, using paired RGB video.
//!
//! The numeric core is generic over [`scalar::Scalar`]; training and
//! inference run in `f32`, gradient checks in `f64`. The aliases below fix
//! the working precision.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod maps;
pub mod models;
pub mod scalar;
pub mod scale;
pub mod tensor;
pub mod tofsim;
pub mod train;

pub use error::{Error, Result};

/// Working precision of training and inference.
pub type Real = f32;

pub type Image = maps::Image<Real>;
pub type DepthMap = maps::DepthMap<Real>;
pub type ZoneGrid = tofsim::ZoneGrid<Real>;
pub type Intrinsics = geometry::Intrinsics<Real>;
pub type RigidTransform = geometry::RigidTransform<Real>;
pub type FrameTriplet = data::FrameTriplet<Real>;
pub type Models = models::Models<Real>;
pub type Trainer = train::Trainer<Real>;
pub type Checkpoint = train::Checkpoint<Real>;
pub type EvalSample = eval::EvalSample<Real>;
