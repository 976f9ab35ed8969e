pub mod config;
pub mod controller;
pub mod error;
pub mod features;
pub mod harness;
pub mod kinematics;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod plant;
pub mod training;
pub mod validate;

pub use error::{Error, Result};
