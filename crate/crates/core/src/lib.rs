//! Reweighted in-context learning for softmax regression.

pub mod bench;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod inner;
pub mod laricl;
pub mod linalg;
pub mod reweight;
pub mod ricl;
pub mod rng;
pub mod softmax;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
