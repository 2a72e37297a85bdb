use thiserror::Error;

/// Errors raised by the detector model, simulator and fitter.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its domain ({expected})")]
    Domain {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error(
        "fixed-point iteration did not converge after {iterations} iterations \
         (last p_c = {last}, residual = {residual:e})"
    )]
    NonConvergence {
        iterations: u64,
        last: f64,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid sweep: {0}")]
    Sweep(String),

    #[error("invalid fit problem: {0}")]
    Problem(String),

    #[error("no dark-count probability given for rate {0} Hz")]
    MissingDarkRate(f64),

    #[error("parameter vector has length {got}, expected {expected}")]
    Decode { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit_closed(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Domain {
            name,
            value,
            expected: "[0, 1]",
        })
    }
}

pub(crate) fn check_unit_half_open(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Domain {
            name,
            value,
            expected: "[0, 1)",
        })
    }
}

pub(crate) fn check_positive(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Domain {
            name,
            value,
            expected: "finite and > 0",
        })
    }
}
