pub mod admittance;
pub mod cli;
pub mod error;
pub mod geom;
pub mod memory;
pub mod qp;
pub mod robot;
pub mod rollout;
pub mod sim;
pub mod wbc;

pub use error::{Error, Result};
