//! Inverse-Bogoliubov-transform thermofield dynamics for one physical mode
//! and its tilde partner.
//!
//! The crate propagates the two-mode iBT-picture wavefunction on a Fourier
//! grid, extracts exact and approximate thermal reduced quantities of the
//! physical mode (densities, 1-RDMs, Wigner distributions), reconstructs
//! densities from finite moment sets with a Hermite expansion, and drives
//! the thermalized quartic-oscillator experiment.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod grid;
pub mod moments;
pub mod optimize;
pub mod propagator;
pub mod rdm;
pub mod thermo;
pub mod units;
pub mod wavefunction;

pub use error::{Result, TfdError};
pub use grid::{bilinear_sample, integrate_1d, FftAxis, Field2D, Grid1D};
pub use thermo::{InverseTemperature, Statistics, ThermalParams};
pub use wavefunction::WavefunctionGrid;
