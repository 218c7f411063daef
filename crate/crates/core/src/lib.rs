//! Estimation of causal effects of curve-valued treatments under modified
//! treatment policies.

pub mod error;
pub mod fgrid;
pub mod fpca;
pub mod glm;
pub mod outcome;
pub mod policy;
pub mod util;
pub mod weights;
pub mod estimators;
pub mod simgen;
pub mod cli;

pub use error::{MftpError, Result};
