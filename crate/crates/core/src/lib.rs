//! Entanglement-optimized quantum trajectories.
//!
//! Unravels Lindblad dynamics of 1D chains into stochastic pure-state
//! trajectories stored as matrix product states, choosing per channel and
//! per step between photon counting and homodyne detection so that the
//! ensemble-averaged entanglement stays small.
//!
//! Module map:
//! - [`mps`]: Vidal-form MPS (stored as `B = Γλ`), TEBD gates, Schmidt data
//! - [`dense`]: exact state-vector / density-matrix reference implementation
//! - [`propagators`]: Kraus propagators for counting and homodyne unravellings
//! - [`rates`]: analytic entanglement change rates and the optimal choice
//! - [`models`]: Bell, random Brownian circuit, Ising and EIT chains
//! - [`ensemble`]: trajectory engine, seeding and ensemble statistics
//! - [`io`]: run configuration and CSV/JSON output
//! - [`experiments`]: Bell and random-circuit studies shared by the CLI and tests

pub mod dense;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod models;
pub mod mps;
pub mod propagators;
pub mod rates;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
