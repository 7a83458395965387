//! Monte Carlo simulator and analytic photon-statistics library for a
//! silicon photomultiplier (SiPM) used as a photon counter.
//!
//! The simulation chain is
//!
//! ```text
//! source -> device -> analog -> discriminate
//! ```
//!
//! where [`source`] produces photon arrival times at the detector plane,
//! [`device`] turns them into pixel avalanches (detection efficiency, pixel
//! recovery, dark counts, optical cross-talk), [`analog`] synthesizes the
//! summed output voltage and applies the high-pass "derivative" filter, and
//! [`discriminate`] counts threshold crossings or measures triggered pulse
//! heights. [`stats`] holds the closed-form models the Monte Carlo is checked
//! against, and [`experiments`] wires everything into reproducible runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analog;
pub mod config;
pub mod device;
pub mod discriminate;
pub mod error;
pub mod experiments;
pub mod io;
pub mod plot;
pub mod rng;
pub mod source;
pub mod stats;

pub use error::{Error, Result};
