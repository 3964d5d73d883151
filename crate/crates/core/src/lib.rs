//! Harmonic map flow into spheres and the geometric machinery around its
//! singular set: monotone densities, quantitative strata, displacement and
//! Reifenberg checks, and good/bad covering trees.

pub mod covering;
pub mod densities;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gmt;
pub mod io;
pub mod source;
pub mod strata;

pub use error::{Error, Result};
pub use geometry::{
    parabolic_distance, sample_field, FieldSnapshot, Grid, ParabolicBall, SpaceTimeField,
    SpaceTimePoint, SpacePoint, SpatialBall, StepRecord,
};
pub use source::{AnalyticField, AnalyticKind, FieldSource};
