//! Tabletop simulator, reward/success expression language and policy
//! trainer of the skill-learning system.
//!
//! Everything here is generic
//! over the scalar type; the aliases below fix it to `f64`, which is what
//! the learning loop, the library and the command line use.

pub mod dsl;
pub mod num;
pub mod sim;
pub mod trainer;

pub use num::{Scalar, Vec3};

pub type SceneState = sim::SceneState<f64>;
pub type Trajectory = sim::Trajectory<f64>;
pub type TabletopEnv = sim::TabletopEnv<f64>;
pub type PolicyParams = trainer::PolicyParams<f64>;
