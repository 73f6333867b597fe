//! Local SGD, minibatch SGD and SCAFFOLD under intermittent communication,
//! on synthetic smoothed-Huber regression problems with controlled
//! heterogeneity.

pub mod algorithms;
pub mod conditioning;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod oracle;
pub mod problem;
pub mod theory;

pub use error::{Error, Result};
