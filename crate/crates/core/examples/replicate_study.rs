//! Noise-propagation study for the four-rate fit.
//!
//! Fits 100 noisy synthetic datasets and prints the median parameter errors.
//!
//! ```text
//! cargo run --release -p spdfit-core --example replicate_study -- [sigma] [first_seed]
//! ```

use spdfit::detector_sim::{synth_dataset, Generator, RateSetting, Scenario, SimConfig};
use spdfit::fit::{fit_simultaneous, FitOptions, FitProblem};
use spdfit::{GateRate, SourceKind};

const RATES: [f64; 4] = [100e3, 250e3, 500e3, 1e6];
const ETAS: [f64; 4] = [0.215, 0.21, 0.20, 0.177];
const Q0: f64 = 0.02;
const TAU_S: f64 = 3e-6;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

fn main() {
    let mut args = std::env::args().skip(1);
    let sigma: f64 = args.next().map_or(3e-4, |s| s.parse().expect("sigma"));
    let first_seed: u64 = args.next().map_or(0, |s| s.parse().expect("first seed"));

    let scenario = Scenario {
        rates: RATES
            .iter()
            .zip(ETAS)
            .map(|(&r, eta)| RateSetting {
                rate: GateRate::new(r).unwrap(),
                eta,
                p_dc: 1e-5,
            })
            .collect(),
        q0: Q0,
        tau_s: TAU_S,
        mu_grid: (0..10).map(|i| 3.0 + 17.0 * i as f64 / 9.0).collect(),
        source: SourceKind::PoissonSingle,
        noise_sigma: sigma,
    };
    let dark: Vec<_> = RATES.iter().map(|&r| (r, 1e-5)).collect();
    let truth: Vec<f64> = ETAS.iter().copied().chain([Q0, TAU_S]).collect();

    let mut d_eta = Vec::new();
    let mut d_q0 = Vec::new();
    let mut d_tau = Vec::new();
    let mut rms_ok = 0;
    let mut below_truth = 0;
    for seed in first_seed..first_seed + 100 {
        let config = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let records = synth_dataset(&scenario, Generator::ClosedForm, &config).unwrap();
        let problem = FitProblem::new(
            records,
            &dark,
            SourceKind::PoissonSingle,
            FitOptions::default(),
        )
        .unwrap();
        let fit = fit_simultaneous(&problem).unwrap();
        d_eta.push(
            fit.eta_by_rate
                .iter()
                .zip(ETAS)
                .map(|(e, t)| (e.eta - t).abs())
                .fold(0.0, f64::max),
        );
        d_q0.push((fit.q0 / Q0 - 1.0).abs());
        d_tau.push((fit.tau_s / TAU_S - 1.0).abs());
        rms_ok += usize::from(fit.rms <= 4e-4);
        below_truth += usize::from(fit.objective <= problem.objective(&truth).unwrap());
    }
    println!(
        "sigma = {sigma:e}, seeds {first_seed}..{}",
        first_seed + 100
    );
    println!("median max |d eta|   = {:.3e}", median(d_eta));
    println!("median rel |d q0|    = {:.3}", median(d_q0));
    println!("median rel |d tau|   = {:.3}", median(d_tau));
    println!("rms <= 4e-4          = {rms_ok}/100");
    println!("objective <= truth   = {below_truth}/100");
}
