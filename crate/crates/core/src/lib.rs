//! Characterization of gated single-photon detectors operated in saturation.
//!
//! - [`count_model`]: stationary count probability with afterpulsing, in
//!   closed form and by fixed-point iteration.
//! - [`photon_budget`]: optical power to mean photon number conversions and
//!   effective gate-window extraction.
//! - [`detector_sim`]: gate-level renewal chain, its exact stationary rate,
//!   Monte Carlo sampling and synthetic datasets.
//! - [`fit`]: simultaneous multi-rate fit of efficiency, afterpulsing
//!   constant and detrap time.

pub mod count_model;
pub mod detector_sim;
pub mod error;
pub mod fit;
pub mod photon_budget;

pub use count_model::{DetectorParams, GateRate, SourceKind, SourceTerm};
pub use error::{Error, Result};
