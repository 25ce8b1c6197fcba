//! Global calibration of programmable photonic meshes.
//!
//! The chip is modelled as a layered, lossy linear network whose hardware
//! parameters (heater phase-current coefficients, splitter reflectivities,
//! transfer and coupling efficiencies) are fitted to measured output
//! distributions by gradient descent. Around that core sit a quantum-walk
//! reference model, state-level metrics and maximum-likelihood tomography.
//!
//! Runnable walkthroughs live in `examples/`; `piccal` is the command-line
//! front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod forward;
pub mod gauge;
pub mod grad;
pub mod linalg;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod qw;
pub mod tomo;

pub use error::{Error, Result};
pub use forward::{ParamGroup, Parameters};
pub use mesh::{build_qw_mesh, CircuitSpec};
