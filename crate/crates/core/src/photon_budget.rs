//! Conversions between optical power, trigger rate and mean photon number
//! per gate, and extraction of the effective gate window from matched cw and
//! pulsed count-probability sweeps.
//!
//! A cw laser is modelled as seeing the detector's peak efficiency during an
//! effective window `tau_g`, so its mean photon number per gate is the photon
//! flux times `tau_g`. A pulsed laser synchronized to the gates delivers the
//! photon flux divided by the trigger rate per pulse.

use serde::{Deserialize, Serialize};

use crate::count_model::GateRate;
use crate::error::{check_positive, Error, Result};

/// Planck constant in J s (exact SI value).
pub const PLANCK_J_S: f64 = 6.626_070_15e-34;

/// Speed of light in vacuum in m/s (exact SI value).
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Optical power in dBm (`10 log10(P / 1 mW)`).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PowerDbm(pub f64);

impl PowerDbm {
    pub fn watts(self) -> f64 {
        1e-3 * 10f64.powf(self.0 / 10.0)
    }

    pub fn from_watts(watts: f64) -> Result<Self> {
        check_positive("power_w", watts)?;
        Ok(PowerDbm(10.0 * (watts / 1e-3).log10()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalCarrier {
    pub wavelength_m: f64,
}

impl OpticalCarrier {
    pub fn new(wavelength_m: f64) -> Result<Self> {
        check_positive("wavelength_m", wavelength_m)?;
        Ok(OpticalCarrier { wavelength_m })
    }

    pub fn from_nm(wavelength_nm: f64) -> Result<Self> {
        Self::new(wavelength_nm * 1e-9)
    }

    /// Photon energy `h c / lambda` in joules.
    pub fn photon_energy_j(&self) -> f64 {
        PLANCK_J_S * SPEED_OF_LIGHT_M_S / self.wavelength_m
    }

    /// Photons per second carried by `power`.
    pub fn photon_flux(&self, power: PowerDbm) -> f64 {
        power.watts() / self.photon_energy_j()
    }
}

/// Effective gate window: the duration over which cw light sees the peak
/// efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateWindow {
    pub tau_g_s: f64,
}

impl GateWindow {
    pub fn new(tau_g_s: f64) -> Result<Self> {
        check_positive("tau_g_s", tau_g_s)?;
        Ok(GateWindow { tau_g_s })
    }

    pub fn from_ns(tau_g_ns: f64) -> Result<Self> {
        Self::new(tau_g_ns * 1e-9)
    }

    pub fn ns(&self) -> f64 {
        self.tau_g_s * 1e9
    }
}

/// Mean photons per gate from a cw laser.
pub fn mu_cw(power: PowerDbm, carrier: OpticalCarrier, window: GateWindow) -> f64 {
    carrier.photon_flux(power) * window.tau_g_s
}

/// Mean photons per pulse from a pulsed laser synchronized to the gates.
pub fn mu_pulsed(power: PowerDbm, carrier: OpticalCarrier, rate: GateRate) -> f64 {
    carrier.photon_flux(power) / rate.hz()
}

fn power_for_flux(flux: f64, carrier: OpticalCarrier) -> Result<PowerDbm> {
    if flux.is_nan() || flux <= 0.0 {
        return Err(Error::Domain {
            name: "mu",
            value: flux,
            expected: "> 0 (power in dBm is undefined at zero photons)",
        });
    }
    PowerDbm::from_watts(flux * carrier.photon_energy_j())
}

/// cw power that yields `mu` photons per gate; inverse of [`mu_cw`].
pub fn dbm_for_mu_cw(mu: f64, carrier: OpticalCarrier, window: GateWindow) -> Result<PowerDbm> {
    power_for_flux(mu / window.tau_g_s, carrier)
}

/// Pulsed power that yields `mu` photons per pulse; inverse of [`mu_pulsed`].
pub fn dbm_for_mu_pulsed(mu: f64, carrier: OpticalCarrier, rate: GateRate) -> Result<PowerDbm> {
    power_for_flux(mu * rate.hz(), carrier)
}

/// Gate window that equates a pulsed power `p_p` and a cw power `p_cw`
/// producing the same count probability at trigger rate `rate`.
pub fn gate_window_from_matched_powers(
    p_p: PowerDbm,
    p_cw: PowerDbm,
    rate: GateRate,
) -> Result<GateWindow> {
    let exponent = (p_p.0 - p_cw.0 - 10.0 * rate.hz().log10()) / 10.0;
    GateWindow::new(10f64.powf(exponent))
}

/// One laser sweep: count probability measured at increasing power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub power: PowerDbm,
    pub p_c: f64,
}

impl Sweep {
    pub fn new(points: Vec<SweepPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.power.0.is_finite() {
                return Err(Error::Sweep(format!("point {i}: power is not finite")));
            }
            if !(0.0..=1.0).contains(&p.p_c) {
                return Err(Error::Sweep(format!(
                    "point {i}: p_c = {} outside [0, 1]",
                    p.p_c
                )));
            }
        }
        if let Some(i) = points.windows(2).position(|w| w[1].power.0 <= w[0].power.0) {
            return Err(Error::Sweep(format!(
                "powers must be strictly increasing (points {} and {})",
                i,
                i + 1
            )));
        }
        Ok(Sweep { points })
    }

    pub fn points(&self) -> &[SweepPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn ensure_monotone(&self, label: &str) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Sweep(format!(
                "{label} sweep needs at least 2 points"
            )));
        }
        if let Some(i) = self.points.windows(2).position(|w| w[1].p_c <= w[0].p_c) {
            return Err(Error::Sweep(format!(
                "{label} sweep is not strictly increasing in p_c (points {} and {})",
                i,
                i + 1
            )));
        }
        Ok(())
    }

    /// Power at which the sweep reaches `p_c`, by linear interpolation of
    /// dBm against `p_c`. `None` outside the sweep's range.
    fn power_at(&self, p_c: f64) -> Option<PowerDbm> {
        let first = self.points.first()?;
        let last = self.points.last()?;
        if p_c < first.p_c || p_c > last.p_c {
            return None;
        }
        let upper = self.points.partition_point(|p| p.p_c < p_c);
        if upper == 0 {
            return Some(first.power);
        }
        let (lo, hi) = (self.points[upper - 1], self.points[upper]);
        if hi.p_c == p_c {
            return Some(hi.power);
        }
        let frac = (p_c - lo.p_c) / (hi.p_c - lo.p_c);
        Some(PowerDbm(lo.power.0 + frac * (hi.power.0 - lo.power.0)))
    }
}

/// Gate window derived from one pulsed sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub p_c: f64,
    pub pulsed: PowerDbm,
    pub cw: PowerDbm,
    pub window: GateWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWindowEstimate {
    /// Arithmetic mean of the per-point windows.
    pub mean: GateWindow,
    pub points: Vec<MatchedPoint>,
}

impl GateWindowEstimate {
    /// Population variance of the per-point windows, in s^2.
    pub fn variance_s2(&self) -> f64 {
        let n = self.points.len() as f64;
        self.points
            .iter()
            .map(|p| (p.window.tau_g_s - self.mean.tau_g_s).powi(2))
            .sum::<f64>()
            / n
    }
}

/// Effective gate window from a cw and a pulsed sweep taken at the same
/// trigger rate.
///
/// Each pulsed point whose count probability lies inside the cw sweep's range
/// is matched to the interpolated cw power with the same count probability;
/// points outside the overlap are skipped.
pub fn gate_window_from_sweeps(
    cw: &Sweep,
    pulsed: &Sweep,
    rate: GateRate,
) -> Result<GateWindowEstimate> {
    cw.ensure_monotone("cw")?;
    pulsed.ensure_monotone("pulsed")?;

    let points = pulsed
        .points()
        .iter()
        .filter_map(|p| cw.power_at(p.p_c).map(|cw_power| (p, cw_power)))
        .map(|(p, cw_power)| {
            Ok(MatchedPoint {
                p_c: p.p_c,
                pulsed: p.power,
                cw: cw_power,
                window: gate_window_from_matched_powers(p.power, cw_power, rate)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if points.len() < 2 {
        return Err(Error::Sweep(format!(
            "cw and pulsed sweeps overlap in p_c on {} point(s), need at least 2",
            points.len()
        )));
    }
    let mean = points.iter().map(|p| p.window.tau_g_s).sum::<f64>() / points.len() as f64;
    Ok(GateWindowEstimate {
        mean: GateWindow::new(mean)?,
        points,
    })
}
