//! Meta-learned discovery of ordinary differential equations.
//!
//! A shared sparse structure over a dictionary of candidate terms is
//! learned jointly from many trajectories that follow the same physics
//! under different parameters; at test time only per-task coefficients
//! are fitted to a short observed prefix before forecasting.

pub mod adapt;
pub mod basis;
pub mod equation;
pub mod error;
pub mod io;
mod linalg;
pub mod model;
pub mod ode_sim;
pub mod sindy;
pub mod systems;
pub mod trainer;

pub use error::{Error, Result};
