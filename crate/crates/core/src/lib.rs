pub mod error;
pub mod estimators;
pub mod init;
pub mod io;
pub mod jet;
pub mod lie;
pub mod metrics;
pub mod preint;
pub mod residuals;
pub mod sim;
pub mod solver;
pub mod spline;

pub use error::{Error, Result};
