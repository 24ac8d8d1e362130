//! Desk-scale simulator and signal chain for shot-noise-limited
//! interferometric monitoring of a single trapped ion's motion, and for
//! phase-locking that motion to an external reference through the trap
//! frequency.
//!
//! The chain runs: [`oscillator`] (Langevin motion) → [`detection`]
//! (fringe transduction and Poisson photocounts) → [`dsp`] (spectra,
//! homodyne quadratures, fits, calibration, g² spectroscopy) →
//! [`control`] (phase-locked loop acting on the trap frequency). The
//! [`harness`] module wires these into named experiments with file output.

pub mod consts;
pub mod control;
pub mod detection;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod oscillator;
pub mod pipeline;

pub use error::{Error, Result};
