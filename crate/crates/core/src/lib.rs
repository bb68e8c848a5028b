pub mod analysis;
pub mod bath;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod noise;
pub mod ode;
pub mod oracle;
pub mod quadrature;
pub mod special;

pub use error::{Error, Result};
