//! Kinematics, serial/parallel mappings and a desk-scale control harness for a two-motor
//! closed-chain parallel ankle.
pub mod control;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod kinematics;
pub mod mapping;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::{AnkleGeometry, AnklePose, AnkleRates, Side};
pub use kinematics::{IkSolution, JacobianPair, MotorState};
