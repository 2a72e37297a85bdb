//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string; errors surface as JS exceptions.

use serde::Serialize;
use spdfit::count_model::{afterpulse_qn, p_count_closed, p_count_simple, p_photon};
use spdfit::detector_sim::{
    exact_stationary, synth_dataset, Generator, RateSetting, Scenario, SimConfig, DEFAULT_EXACT_EPS,
};
use spdfit::fit::{fit_simultaneous, FitOptions, FitProblem};
use spdfit::{DetectorParams, GateRate, SourceKind, SourceTerm};
use wasm_bindgen::prelude::*;

fn source_kind(pair: bool) -> SourceKind {
    if pair {
        SourceKind::PoissonPair
    } else {
        SourceKind::PoissonSingle
    }
}

fn grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, String> {
    let finite_range = lo.is_finite() && hi.is_finite() && lo < hi;
    if !(2..=10_000).contains(&steps) || !finite_range {
        return Err("need 2..=10000 steps and a finite range with max > min".into());
    }
    let n = (steps - 1) as f64;
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / n).collect())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub mu: Vec<f64>,
    pub simple: Vec<f64>,
    pub closed: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Count probability against mean photon number under the three models.
#[allow(clippy::too_many_arguments)]
pub fn count_curve(
    eta: f64,
    p_dc: f64,
    q0: f64,
    tau_s: f64,
    rate_hz: f64,
    mu_max: f64,
    steps: usize,
    pair: bool,
) -> Result<Curve, String> {
    let params = DetectorParams::new(eta, p_dc, q0, tau_s).map_err(|e| e.to_string())?;
    let rate = GateRate::new(rate_hz).map_err(|e| e.to_string())?;
    let mu = grid(0.0, mu_max, steps)?;
    let mut curve = Curve {
        mu: Vec::with_capacity(steps),
        simple: Vec::with_capacity(steps),
        closed: Vec::with_capacity(steps),
        exact: Vec::with_capacity(steps),
    };
    for m in mu {
        let eval = || -> spdfit::Result<(f64, f64, f64)> {
            let p_ph = p_photon(SourceTerm::new(source_kind(pair), m)?, eta)?;
            Ok((
                p_count_simple(p_dc, p_ph)?,
                p_count_closed(p_dc, p_ph, q0, tau_s, rate)?,
                exact_stationary(&params, p_ph, rate, DEFAULT_EXACT_EPS)?,
            ))
        };
        let (s, c, e) = eval().map_err(|e| e.to_string())?;
        curve.mu.push(m);
        curve.simple.push(s);
        curve.closed.push(c);
        curve.exact.push(e);
    }
    Ok(curve)
}

#[derive(Debug, Serialize)]
pub struct AfterpulseProfile {
    pub gate: Vec<u64>,
    pub time_s: Vec<f64>,
    pub q: Vec<f64>,
    /// Stationary count probability with and without afterpulsing at `mu`.
    pub p_c_closed: f64,
    pub p_c_simple: f64,
}

/// Afterpulse probability in the gates following a count, plus the
/// stationary count probability it leads to.
#[allow(clippy::too_many_arguments)]
pub fn afterpulse_profile(
    eta: f64,
    p_dc: f64,
    q0: f64,
    tau_s: f64,
    rate_hz: f64,
    mu: f64,
    gates: u64,
) -> Result<AfterpulseProfile, String> {
    let err = |e: spdfit::Error| e.to_string();
    if !(1..=100_000).contains(&gates) {
        return Err("gates must be in 1..=100000".into());
    }
    let rate = GateRate::new(rate_hz).map_err(err)?;
    let p_ph = p_photon(SourceTerm::single(mu).map_err(err)?, eta).map_err(err)?;
    let mut profile = AfterpulseProfile {
        gate: Vec::with_capacity(gates as usize),
        time_s: Vec::with_capacity(gates as usize),
        q: Vec::with_capacity(gates as usize),
        p_c_closed: p_count_closed(p_dc, p_ph, q0, tau_s, rate).map_err(err)?,
        p_c_simple: p_count_simple(p_dc, p_ph).map_err(err)?,
    };
    for n in 1..=gates {
        profile.gate.push(n);
        profile.time_s.push(n as f64 * rate.period_s());
        profile
            .q
            .push(afterpulse_qn(q0, tau_s, rate, n).map_err(err)?);
    }
    Ok(profile)
}

#[derive(Debug, Serialize)]
pub struct RatePanel {
    pub rate_hz: f64,
    pub eta_true: f64,
    pub eta_fit: f64,
    pub mu: Vec<f64>,
    pub p_c_data: Vec<f64>,
    pub curve_mu: Vec<f64>,
    pub curve_fit: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct FitDemo {
    pub panels: Vec<RatePanel>,
    pub q0_true: f64,
    pub q0_fit: f64,
    pub tau_true_s: f64,
    pub tau_fit_s: f64,
    pub rms: f64,
    pub converged: bool,
}

const DEMO_RATES: [f64; 4] = [100e3, 250e3, 500e3, 1e6];
const DEMO_ETAS: [f64; 4] = [0.215, 0.21, 0.20, 0.177];
const DEMO_P_DC: f64 = 1e-5;

/// Generate a four-rate dataset with additive Gaussian noise on `p_c`, fit
/// it, and return data and fitted curves.
pub fn fit_round_trip(
    q0: f64,
    tau_s: f64,
    noise_sigma: f64,
    seed: u64,
    multistart: usize,
) -> Result<FitDemo, String> {
    let err = |e: spdfit::Error| e.to_string();
    let rates = DEMO_RATES
        .iter()
        .zip(DEMO_ETAS)
        .map(|(&r, eta)| {
            Ok(RateSetting {
                rate: GateRate::new(r)?,
                eta,
                p_dc: DEMO_P_DC,
            })
        })
        .collect::<spdfit::Result<Vec<_>>>()
        .map_err(err)?;
    let scenario = Scenario {
        rates,
        q0,
        tau_s,
        mu_grid: grid(3.0, 20.0, 10)?,
        source: SourceKind::PoissonSingle,
        noise_sigma,
    };
    let config = SimConfig {
        seed,
        ..SimConfig::default()
    };
    let records = synth_dataset(&scenario, Generator::ClosedForm, &config).map_err(err)?;
    let dark: Vec<(f64, f64)> = DEMO_RATES.iter().map(|&r| (r, DEMO_P_DC)).collect();
    let options = FitOptions {
        multistart: multistart.clamp(1, 32),
        seed,
        ..FitOptions::default()
    };
    let problem =
        FitProblem::new(records, &dark, SourceKind::PoissonSingle, options).map_err(err)?;
    let fit = fit_simultaneous(&problem).map_err(err)?;

    let curve_mu = grid(0.0, 22.0, 111)?;
    let mut panels = Vec::with_capacity(DEMO_RATES.len());
    for ((&rate_hz, eta_true), fitted) in DEMO_RATES.iter().zip(DEMO_ETAS).zip(&fit.eta_by_rate) {
        let rate = GateRate::new(rate_hz).map_err(err)?;
        let (mu, p_c_data) = problem
            .records()
            .iter()
            .filter(|r| r.rate_hz == rate_hz)
            .map(|r| (r.mu, r.p_c()))
            .unzip();
        let curve_fit = curve_mu
            .iter()
            .map(|&m| {
                let p_ph = p_photon(SourceTerm::single(m)?, fitted.eta)?;
                p_count_closed(DEMO_P_DC, p_ph, fit.q0, fit.tau_s, rate)
            })
            .collect::<spdfit::Result<Vec<_>>>()
            .map_err(err)?;
        panels.push(RatePanel {
            rate_hz,
            eta_true,
            eta_fit: fitted.eta,
            mu,
            p_c_data,
            curve_mu: curve_mu.clone(),
            curve_fit,
        });
    }
    Ok(FitDemo {
        panels,
        q0_true: q0,
        q0_fit: fit.q0,
        tau_true_s: tau_s,
        tau_fit_s: fit.tau_s,
        rms: fit.rms,
        converged: fit.converged,
    })
}

fn js<T: Serialize>(result: Result<T, String>) -> Result<String, JsValue> {
    result
        .and_then(|v| to_json(&v))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = countCurve)]
#[allow(clippy::too_many_arguments)]
pub fn count_curve_js(
    eta: f64,
    p_dc: f64,
    q0: f64,
    tau_s: f64,
    rate_hz: f64,
    mu_max: f64,
    steps: usize,
    pair: bool,
) -> Result<String, JsValue> {
    js(count_curve(
        eta, p_dc, q0, tau_s, rate_hz, mu_max, steps, pair,
    ))
}

#[wasm_bindgen(js_name = afterpulseProfile)]
pub fn afterpulse_profile_js(
    eta: f64,
    p_dc: f64,
    q0: f64,
    tau_s: f64,
    rate_hz: f64,
    mu: f64,
    gates: u32,
) -> Result<String, JsValue> {
    js(afterpulse_profile(
        eta,
        p_dc,
        q0,
        tau_s,
        rate_hz,
        mu,
        gates.into(),
    ))
}

#[wasm_bindgen(js_name = fitRoundTrip)]
pub fn fit_round_trip_js(
    q0: f64,
    tau_s: f64,
    noise_sigma: f64,
    seed: u32,
    multistart: usize,
) -> Result<String, JsValue> {
    js(fit_round_trip(
        q0,
        tau_s,
        noise_sigma,
        seed.into(),
        multistart,
    ))
}
