//! Particle-level Wasserstein gradient flows under disturbances, with
//! numerical certificates of distributional input-to-state stability.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flows;
pub mod functionals;
pub mod kde;
pub mod measures;
pub mod monitor;
pub mod rng;
pub mod sdot;
pub mod transport;

pub use error::{Error, Result};
pub use measures::{BoxDomain, GridDensity, GridLayout, ParticleEnsemble, PointSet, TargetSet};
