//! Numerics for value distribution of quasiregular maps on H-type Carnot groups.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algebra;
pub mod capacity;
pub mod curves;
pub mod error;
pub mod flow;
pub mod group;
pub mod maps;
pub mod norm;
pub mod quadrature;
pub mod report;
pub mod sampling;
pub mod value_distribution;

pub use algebra::HTypeAlgebra;
pub use curves::{Curve, SphereSet};
pub use error::{Error, Result};
pub use group::GroupPoint;
pub use maps::{MapDescriptor, QRMap};
pub use norm::KaplanNorm;
pub use quadrature::SphereQuadrature;
