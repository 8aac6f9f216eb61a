//! Origin-destination flow reconstruction on city graphs.

pub mod error;
pub mod autodiff;
pub mod epidriver;
pub mod geodata;
pub mod graphflow;
pub mod metrics;
pub mod netlink;
pub mod physcore;
pub mod segregation;
pub mod synthcity;
pub mod trainer;

pub use error::{Error, Result};
