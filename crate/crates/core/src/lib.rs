//! Dynamic survival analysis for predicting when a road link returns to
//! normal after a traffic incident.

pub mod baseline;
pub mod calendar;
pub mod curve;
pub mod datagen;
pub mod dataset;
pub mod dist;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod fit;
pub mod grid;
pub mod hitnet;
pub mod landmark;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod rsf;
pub mod special;
pub mod survclassic;

pub use curve::{HazardCurve, SurvivalCurve};
pub use dist::ParametricDist;
pub use error::{Error, Result};
pub use grid::TimeGrid;
