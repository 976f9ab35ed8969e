//! The guide in `book/` is plain mdbook, which cannot test its listings.
//! Each chapter is included here as module docs so `cargo test` runs every
//! Rust block as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/kinematics.md")]
pub mod kinematics {}
#[doc = include_str!("../../../book/src/plant.md")]
pub mod plant {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/controller.md")]
pub mod controller {}
#[doc = include_str!("../../../book/src/planner.md")]
pub mod planner {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/live.md")]
pub mod live {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
