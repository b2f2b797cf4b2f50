//! Rotation regression of rigid objects from point-cloud segments.
//!
//! The crate is `no_std` (with `alloc`). It carries the numerical core:
//! SO(3) math and the geodesic loss ([`so3`]), segment construction and
//! neighbour graphs ([`geometry`]), a small reverse-mode autodiff engine with
//! batch norm and Adam ([`tensor`]), the PointNet-style and dynamic-graph
//! encoders ([`model`], [`train`]), synthetic data ([`data`]) and the metric
//! suite ([`eval`]). File formats and the command line live in the `rotreg`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod so3;
pub mod tensor;
pub mod train;

mod rng;

pub use error::{Error, Result};
pub use so3::{AxisAngle, RotationMatrix, SkewMatrix};
