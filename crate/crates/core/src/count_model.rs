//! Count probability of a gated single-photon detector in the saturation
//! regime, with exponentially decaying afterpulsing.
//!
//! The model has four physical inputs: efficiency `eta`, per-gate dark-count
//! probability `p_dc`, afterpulsing constant `q0` and detrap time `tau_s`.
//! After a registered count, the probability of an afterpulse exactly `n`
//! gates later (given no count in between) is `q0 * exp(-n / (R * tau))`.
//!
//! The stationary count probability is the root in `[0, 1]` of
//!
//! ```text
//! r*y^2 + y*[1 - r*(2 - B*(1 - q0))] - (1 - B)*(1 - r) = 0
//! ```
//!
//! with `B = (1 - p_dc)(1 - p_ph)` and `r = exp(-1/(R*tau))`. This is the
//! usual closed form multiplied through by `r`, which keeps it finite when
//! `R*tau` is small. [`p_count_fixed_point`] reaches the same value by
//! iterating the afterpulse recurrence from a cold start and serves as an
//! oracle for [`p_count_closed`].

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, check_unit_closed, check_unit_half_open, Error, Result};

/// Largest accepted `R * tau`. At `R * tau -> inf` the gate-to-gate decay
/// ratio reaches 1 and the quadratic degenerates.
pub const MAX_RATE_TAU: f64 = 1e6;

/// Default convergence threshold of [`p_count_fixed_point`].
pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-14;

/// Default iteration cap of [`p_count_fixed_point`].
pub const DEFAULT_FIXED_POINT_MAX_ITER: u64 = 1_000_000;

/// Physical parameters of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Detection efficiency.
    pub eta: f64,
    /// Dark-count probability per gate.
    pub p_dc: f64,
    /// Afterpulsing constant (conditional afterpulse probability at t = 0).
    pub q0: f64,
    /// Detrap time in seconds.
    pub tau_s: f64,
}

impl DetectorParams {
    pub fn new(eta: f64, p_dc: f64, q0: f64, tau_s: f64) -> Result<Self> {
        let params = DetectorParams {
            eta,
            p_dc,
            q0,
            tau_s,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_closed("eta", self.eta)?;
        check_unit_half_open("p_dc", self.p_dc)?;
        check_unit_half_open("q0", self.q0)?;
        check_positive("tau_s", self.tau_s)?;
        Ok(())
    }

    /// Closed-form stationary count probability for a given source and rate.
    pub fn p_count(&self, source: SourceTerm, rate: GateRate) -> Result<f64> {
        let p_ph = p_photon(source, self.eta)?;
        p_count_closed(self.p_dc, p_ph, self.q0, self.tau_s, rate)
    }

    /// Count probability without afterpulsing.
    pub fn p_count_no_afterpulse(&self, source: SourceTerm) -> Result<f64> {
        let p_ph = p_photon(source, self.eta)?;
        p_count_simple(self.p_dc, p_ph)
    }
}

/// Photon statistics of the light source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Attenuated coherent light: Poisson-distributed single photons.
    PoissonSingle,
    /// Low-power Poisson source of photon pairs.
    PoissonPair,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::PoissonSingle => "poisson-single",
            SourceKind::PoissonPair => "poisson-pair",
        }
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson-single" => Ok(SourceKind::PoissonSingle),
            "poisson-pair" => Ok(SourceKind::PoissonPair),
            other => Err(Error::Config(format!(
                "unknown source kind {other:?} (expected poisson-single or poisson-pair)"
            ))),
        }
    }
}

/// A source together with its mean photon number per gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTerm {
    pub kind: SourceKind,
    pub mu: f64,
}

impl SourceTerm {
    pub fn new(kind: SourceKind, mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Domain {
                name: "mu",
                value: mu,
                expected: "finite and >= 0",
            });
        }
        Ok(SourceTerm { kind, mu })
    }

    pub fn single(mu: f64) -> Result<Self> {
        Self::new(SourceKind::PoissonSingle, mu)
    }

    pub fn pair(mu: f64) -> Result<Self> {
        Self::new(SourceKind::PoissonPair, mu)
    }
}

/// Trigger (gate) repetition rate in Hz.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GateRate(f64);

impl GateRate {
    pub fn new(rate_hz: f64) -> Result<Self> {
        check_positive("rate_hz", rate_hz).map(GateRate)
    }

    pub fn hz(self) -> f64 {
        self.0
    }

    /// Gate period in seconds.
    pub fn period_s(self) -> f64 {
        1.0 / self.0
    }
}

impl TryFrom<f64> for GateRate {
    type Error = Error;

    fn try_from(rate_hz: f64) -> Result<Self> {
        GateRate::new(rate_hz)
    }
}

impl From<GateRate> for f64 {
    fn from(rate: GateRate) -> f64 {
        rate.0
    }
}

/// Probability that the source alone triggers an avalanche in one gate.
pub fn p_photon(source: SourceTerm, eta: f64) -> Result<f64> {
    check_unit_closed("eta", eta)?;
    if !(source.mu >= 0.0 && source.mu.is_finite()) {
        return Err(Error::Domain {
            name: "mu",
            value: source.mu,
            expected: "finite and >= 0",
        });
    }
    let exponent = match source.kind {
        SourceKind::PoissonSingle => source.mu * eta,
        SourceKind::PoissonPair => source.mu * eta * (2.0 - eta),
    };
    Ok(-(-exponent).exp_m1())
}

/// Count probability without afterpulsing: `1 - (1 - p_dc)(1 - p_ph)`.
pub fn p_count_simple(p_dc: f64, p_ph: f64) -> Result<f64> {
    check_unit_closed("p_dc", p_dc)?;
    check_unit_closed("p_ph", p_ph)?;
    Ok(p_dc + p_ph - p_dc * p_ph)
}

/// Ratio `Q_{n+1} / Q_n = exp(-1 / (R * tau))`.
pub fn decay_ratio(tau_s: f64, rate: GateRate) -> Result<f64> {
    check_positive("tau_s", tau_s)?;
    let rate_tau = rate.hz() * tau_s;
    if rate_tau > MAX_RATE_TAU {
        return Err(Error::Domain {
            name: "rate_hz * tau_s",
            value: rate_tau,
            expected: "<= 1e6",
        });
    }
    Ok((-1.0 / rate_tau).exp())
}

/// Conditional afterpulse probability `n` gates after the last count.
pub fn afterpulse_qn(q0: f64, tau_s: f64, rate: GateRate, n: u64) -> Result<f64> {
    check_unit_half_open("q0", q0)?;
    if n < 1 {
        return Err(Error::Domain {
            name: "n",
            value: n as f64,
            expected: ">= 1",
        });
    }
    decay_ratio(tau_s, rate)?;
    Ok(q0 * (-(n as f64) / (rate.hz() * tau_s)).exp())
}

/// Stationary marginal afterpulse probability given the stationary count
/// probability `p_c`.
pub fn p_afterpulse_stationary(p_c: f64, q0: f64, tau_s: f64, rate: GateRate) -> Result<f64> {
    check_unit_closed("p_c", p_c)?;
    check_unit_half_open("q0", q0)?;
    let r = decay_ratio(tau_s, rate)?;
    let q1 = q0 * r;
    Ok(p_c * q1 / (1.0 - (1.0 - p_c) * r))
}

/// Stationary count probability including afterpulsing.
///
/// Always returns a value in `[0, 1]` that is at least
/// `p_count_simple(p_dc, p_ph)`.
pub fn p_count_closed(p_dc: f64, p_ph: f64, q0: f64, tau_s: f64, rate: GateRate) -> Result<f64> {
    check_unit_closed("p_dc", p_dc)?;
    check_unit_closed("p_ph", p_ph)?;
    check_unit_half_open("q0", q0)?;
    let r = decay_ratio(tau_s, rate)?;
    let one_minus_r = -(-1.0 / (rate.hz() * tau_s)).exp_m1();
    let survive = (1.0 - p_dc) * (1.0 - p_ph);
    let primary = p_dc + p_ph - p_dc * p_ph;
    if primary == 0.0 {
        // No primary events: the chain never leaves the no-count state.
        return Ok(0.0);
    }
    if q0 == 0.0 {
        return Ok(primary);
    }

    // Coefficients written without the subtractions 1 - B and 1 - r.
    let a = r;
    let b = one_minus_r - r * (primary + survive * q0);
    let c = -primary * one_minus_r;
    // c <= 0 < a, so the discriminant is non-negative and the roots have
    // opposite signs.
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let root = if b >= 0.0 {
        let q = -0.5 * (b + disc.sqrt());
        c / q
    } else {
        let q = -0.5 * (b - disc.sqrt());
        q / a
    };
    Ok(root.clamp(0.0, 1.0))
}

/// Stationary count probability obtained by iterating the afterpulse
/// recurrence from `P_ap = 0`.
///
/// The iteration stops once the step falls below `tol` and the geometric
/// estimate of the remaining distance to the limit, `step * rho / (1 - rho)`
/// with `rho` the observed ratio of successive steps, is also below `tol`,
/// or once the step is at the rounding floor of `p_c`.
pub fn p_count_fixed_point(
    p_dc: f64,
    p_ph: f64,
    q0: f64,
    tau_s: f64,
    rate: GateRate,
    tol: f64,
    max_iter: u64,
) -> Result<f64> {
    check_unit_closed("p_dc", p_dc)?;
    check_unit_closed("p_ph", p_ph)?;
    check_unit_half_open("q0", q0)?;
    check_positive("tol", tol)?;
    if max_iter < 1 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    let r = decay_ratio(tau_s, rate)?;
    let q1 = q0 * r;
    let survive = (1.0 - p_dc) * (1.0 - p_ph);
    // 1 - survive without cancellation, so small p_c keeps full precision.
    let primary = p_dc + p_ph - p_dc * p_ph;

    let mut p_ap = 0.0;
    let mut p_c = primary;
    let mut prev_step = f64::NAN;
    for iteration in 1..=max_iter {
        p_ap = p_c * q1 + p_ap * (1.0 - p_c) * r;
        let next = primary + survive * p_ap;
        let step = (next - p_c).abs();
        p_c = next;

        if step <= 4.0 * f64::EPSILON * p_c {
            return Ok(p_c);
        }
        if step < tol {
            let rho = step / prev_step;
            if rho < 1.0 && step * rho / (1.0 - rho) < tol {
                return Ok(p_c);
            }
        }
        prev_step = step;
        if iteration == max_iter {
            return Err(Error::NonConvergence {
                iterations: max_iter,
                last: p_c,
                residual: step,
            });
        }
    }
    unreachable!("loop returns on its final iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rate_for_unit_x(tau_s: f64) -> GateRate {
        // 1 / (R * tau) = 1
        GateRate::new(1.0 / tau_s).unwrap()
    }

    /// The published closed form, including its `exp(+1/(R*tau))` factor.
    fn literal_closed_form(p_dc: f64, p_ph: f64, q0: f64, tau_s: f64, rate: GateRate) -> f64 {
        let e = (1.0 / (rate.hz() * tau_s)).exp();
        let survive = (1.0 - p_dc) * (1.0 - p_ph);
        let lead = 2.0 - e - survive * (1.0 - q0);
        lead / 2.0 + 0.5 * (lead * lead + 4.0 * (e - 1.0) * (1.0 - survive)).sqrt()
    }

    #[test]
    fn p_photon_examples() {
        assert_eq!(
            p_photon(SourceTerm::single(0.0).unwrap(), 0.21).unwrap(),
            0.0
        );
        let p = p_photon(SourceTerm::single(3.0).unwrap(), 0.21).unwrap();
        assert_relative_eq!(p, 1.0 - (-0.63f64).exp(), max_relative = 1e-15);
        assert!((p - 0.467408).abs() < 5e-7);
        let pair = p_photon(SourceTerm::pair(1.0).unwrap(), 1.0).unwrap();
        assert_relative_eq!(pair, 1.0 - (-1.0f64).exp(), max_relative = 1e-15);
        assert!((pair - 0.632121).abs() < 5e-7);
    }

    #[test]
    fn p_photon_domain_errors() {
        let src = SourceTerm {
            kind: SourceKind::PoissonSingle,
            mu: -1.0,
        };
        assert!(matches!(
            p_photon(src, 0.2),
            Err(Error::Domain { name: "mu", .. })
        ));
        assert!(SourceTerm::single(-0.5).is_err());
        let src = SourceTerm::single(1.0).unwrap();
        assert!(p_photon(src, 1.5).is_err());
        assert!(p_photon(src, -0.1).is_err());
    }

    #[test]
    fn p_count_simple_examples() {
        assert_eq!(p_count_simple(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(p_count_simple(1e-5, 0.0).unwrap(), 1e-5);
        let p = p_count_simple(1e-5, 0.467408).unwrap();
        assert!((p - 0.467413).abs() < 5e-7, "{p}");
        assert!(p_count_simple(1.2, 0.0).is_err());
        assert!(p_count_simple(0.0, -0.2).is_err());
    }

    #[test]
    fn afterpulse_qn_examples() {
        let rate = GateRate::new(250e3).unwrap();
        let q1 = afterpulse_qn(0.03, 3e-6, rate, 1).unwrap();
        assert_relative_eq!(q1, 0.03 * (-4.0f64 / 3.0).exp(), max_relative = 1e-15);
        assert!((q1 - 7.9079e-3).abs() < 5e-8);
        assert_eq!(afterpulse_qn(0.0, 1e-6, rate, 17).unwrap(), 0.0);
        assert!(afterpulse_qn(0.03, 3e-6, rate, 100).unwrap() < 1e-50);
        assert!(afterpulse_qn(0.03, 3e-6, rate, 0).is_err());
    }

    #[test]
    fn afterpulse_qn_decreasing() {
        let rate = GateRate::new(1e6).unwrap();
        let mut last = 0.05;
        for n in 1..50 {
            let q = afterpulse_qn(0.05, 2.5e-6, rate, n).unwrap();
            assert!(q < last);
            last = q;
        }
    }

    #[test]
    fn stationary_afterpulse_examples() {
        let tau = 2e-6;
        let rate = rate_for_unit_x(tau);
        assert_eq!(p_afterpulse_stationary(0.37, 0.0, tau, rate).unwrap(), 0.0);
        let p_ap = p_afterpulse_stationary(0.502262, 0.02, tau, rate).unwrap();
        // Consistent with p_c = 0.5 + p_ap / 2 at p_dc = 0, p_ph = 0.5.
        assert!((p_ap - 0.0045238).abs() < 5e-8, "{p_ap}");
        let full = p_afterpulse_stationary(1.0, 0.02, tau, rate).unwrap();
        assert_relative_eq!(full, 0.02 * (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let tau = 3e-6;
        let rate = rate_for_unit_x(tau);
        let p = p_count_closed(0.0, 0.5, 0.02, tau, rate).unwrap();
        assert!((p - 0.5022619).abs() < 5e-8, "{p}");
        assert_eq!(p_count_closed(0.0, 1.0, 0.1, tau, rate).unwrap(), 1.0);
        assert_eq!(p_count_closed(0.0, 0.0, 0.1, tau, rate).unwrap(), 0.0);
        let simple = p_count_simple(1e-4, 0.3).unwrap();
        assert!((p_count_closed(1e-4, 0.3, 0.0, tau, rate).unwrap() - simple).abs() <= 1e-15);
    }

    #[test]
    fn closed_form_is_self_consistent() {
        let tau = 3e-6;
        let rate = rate_for_unit_x(tau);
        let p_c = p_count_closed(0.0, 0.5, 0.02, tau, rate).unwrap();
        let p_ap = p_afterpulse_stationary(p_c, 0.02, tau, rate).unwrap();
        let back = 1.0 - 0.5 * (1.0 - p_ap);
        assert!((back - p_c).abs() <= 1e-12);
    }

    #[test]
    fn closed_form_matches_literal_expression() {
        let rates = [1e5, 2.5e5, 1e6];
        for &rate_hz in &rates {
            for &tau in &[0.5e-6, 3e-6, 20e-6] {
                for &p_ph in &[1e-3, 0.1, 0.5, 0.95] {
                    for &q0 in &[0.0, 0.01, 0.1] {
                        let rate = GateRate::new(rate_hz).unwrap();
                        let stable = p_count_closed(1e-5, p_ph, q0, tau, rate).unwrap();
                        let literal = literal_closed_form(1e-5, p_ph, q0, tau, rate);
                        // The literal form cancels terms of size exp(1/(R*tau)).
                        let scale = (1.0 / (rate_hz * tau)).exp();
                        assert!(
                            (stable - literal).abs() < 1e-14 * scale,
                            "R={rate_hz} tau={tau} p_ph={p_ph} q0={q0}: {stable} vs {literal}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn closed_form_tiny_rate_tau_reduces_to_simple() {
        // exp(+1/(R*tau)) overflows here; the stable form does not.
        let rate = GateRate::new(1e5).unwrap();
        let tau = 1e-12;
        assert!(!literal_closed_form(1e-5, 0.3, 0.1, tau, rate).is_finite());
        let p = p_count_closed(1e-5, 0.3, 0.1, tau, rate).unwrap();
        assert_eq!(p, p_count_simple(1e-5, 0.3).unwrap());
    }

    #[test]
    fn rate_tau_cap_is_enforced() {
        let rate = GateRate::new(1e6).unwrap();
        assert!(p_count_closed(0.0, 0.3, 0.02, 2.0, rate).is_err());
        assert!(p_count_closed(0.0, 0.3, 0.02, 1.0, rate).is_ok());
    }

    #[test]
    fn fixed_point_examples() {
        let tau = 3e-6;
        let rate = rate_for_unit_x(tau);
        let fp = p_count_fixed_point(0.0, 0.5, 0.02, tau, rate, 1e-14, 1_000_000).unwrap();
        let closed = p_count_closed(0.0, 0.5, 0.02, tau, rate).unwrap();
        assert!((fp - 0.5022619).abs() < 5e-8);
        assert!((fp - closed).abs() <= 1e-12);

        let simple = p_count_simple(1e-3, 0.2).unwrap();
        let fp = p_count_fixed_point(1e-3, 0.2, 0.0, tau, rate, 1e-14, 1).unwrap();
        assert!((fp - simple).abs() <= 1e-16);

        let rate = GateRate::new(250e3).unwrap();
        let fp = p_count_fixed_point(1e-5, 0.467408, 0.03, 3e-6, rate, 1e-14, 1_000_000).unwrap();
        let closed = p_count_closed(1e-5, 0.467408, 0.03, 3e-6, rate).unwrap();
        assert!((fp - closed).abs() <= 1e-12);
    }

    #[test]
    fn fixed_point_reports_non_convergence() {
        let rate = GateRate::new(1e6).unwrap();
        let err = p_count_fixed_point(0.0, 0.01, 0.1, 100e-6, rate, 1e-14, 5).unwrap_err();
        match err {
            Error::NonConvergence {
                iterations,
                last,
                residual,
            } => {
                assert_eq!(iterations, 5);
                assert!(last > 0.0 && last < 1.0);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn params_validation() {
        assert!(DetectorParams::new(0.2, 1e-5, 0.02, 3e-6).is_ok());
        assert!(DetectorParams::new(1.1, 1e-5, 0.02, 3e-6).is_err());
        assert!(DetectorParams::new(0.2, 1.0, 0.02, 3e-6).is_err());
        assert!(DetectorParams::new(0.2, 1e-5, 1.0, 3e-6).is_err());
        assert!(DetectorParams::new(0.2, 1e-5, 0.02, 0.0).is_err());
        assert!(GateRate::new(0.0).is_err());
        assert!(GateRate::new(f64::NAN).is_err());
    }

    #[test]
    fn closed_form_keeps_digits_at_small_dark_counts() {
        let rate = GateRate::new(1e6).unwrap();
        for p_dc in [1e-5, 1e-9, 1e-14] {
            let p = p_count_closed(p_dc, 0.0, 0.0, 3e-6, rate).unwrap();
            assert_relative_eq!(p, p_dc, max_relative = 1e-15);
        }
        let p = p_count_closed(1e-9, 0.0, 0.02, 3e-6, rate).unwrap();
        let fixed = p_count_fixed_point(1e-9, 0.0, 0.02, 3e-6, rate, 1e-24, 1_000_000).unwrap();
        assert_relative_eq!(p, fixed, max_relative = 1e-13);
    }
}
