use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use spdfit::count_model::{p_count_closed, p_count_simple, p_photon};
use spdfit::detector_sim::{exact_stationary, synth_dataset, Generator, DEFAULT_EXACT_EPS};
use spdfit::fit::{fit_simultaneous, Bounds, EtaMode, FitOptions, FitProblem, Weighting};
use spdfit::photon_budget::{
    dbm_for_mu_cw, dbm_for_mu_pulsed, gate_window_from_sweeps, mu_cw, mu_pulsed, GateWindow,
    OpticalCarrier, PowerDbm,
};
use spdfit::{DetectorParams, GateRate, SourceKind, SourceTerm};

use crate::error::CliError;
use crate::formats::{
    parse_counts, parse_dark, parse_sweep, read_bytes, sha256_hex, write_bytes, write_counts,
    write_dark, FitReport, InputDigest, ScenarioFile,
};
use crate::units::{fmt_significant, parse_seconds};

#[derive(Debug, Parser)]
#[command(
    name = "spdfit",
    version,
    about = "Gated single-photon detector count model and fitter"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit efficiencies, afterpulsing constant and detrap time to count sweeps.
    Fit(FitArgs),
    /// Generate a synthetic counts file from a TOML scenario.
    Simulate(SimulateArgs),
    /// Tabulate model count probabilities against mean photon number.
    Curve(CurveArgs),
    /// Estimate the effective gate window from matched cw and pulsed sweeps.
    Gatewindow(GateWindowArgs),
    /// Convert between optical power and mean photons per gate.
    Convert(ConvertArgs),
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub dark: PathBuf,
    #[arg(long, default_value = "poisson-single")]
    pub source: SourceKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub multistart: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "uniform")]
    pub weighting: Weighting,
    /// Fit one efficiency shared by all rates.
    #[arg(long)]
    pub shared_eta: bool,
    #[arg(long, default_value_t = 10_000)]
    pub max_evals: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eta_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub eta_max: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub q0_min: f64,
    #[arg(long, default_value_t = 0.2)]
    pub q0_max: f64,
    /// Lower bound on the detrap time (units: s, ms, us, ns).
    #[arg(long, default_value = "0.1us")]
    pub tau_min: String,
    #[arg(long, default_value = "20us")]
    pub tau_max: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scenario's generator.
    #[arg(long)]
    pub generator: Option<Generator>,
    /// Counts CSV; written to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the scenario's dark-count table here.
    #[arg(long)]
    pub dark_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub eta: f64,
    #[arg(long)]
    pub p_dc: f64,
    #[arg(long)]
    pub q0: f64,
    /// Detrap time (units: s, ms, us, ns).
    #[arg(long)]
    pub tau: String,
    #[arg(long)]
    pub rate_hz: f64,
    #[arg(long, default_value_t = 0.0)]
    pub mu_min: f64,
    #[arg(long, default_value_t = 20.0)]
    pub mu_max: f64,
    #[arg(long, default_value_t = 101)]
    pub steps: usize,
    #[arg(long, default_value = "poisson-single")]
    pub source: SourceKind,
    /// Curve CSV; written to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GateWindowArgs {
    /// Sweep CSV (power_dbm,p_c) taken with a cw laser.
    #[arg(long)]
    pub cw: PathBuf,
    /// Sweep CSV (power_dbm,p_c) taken with a pulsed laser at the gate rate.
    #[arg(long)]
    pub pulsed: PathBuf,
    #[arg(long)]
    pub rate_hz: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Optical power in dBm; prints mean photons per gate.
    #[arg(
        long,
        allow_hyphen_values = true,
        conflicts_with = "mu",
        required_unless_present = "mu"
    )]
    pub dbm: Option<f64>,
    /// Mean photons per gate; prints optical power in dBm.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub wavelength_nm: f64,
    /// Gate window in ns, for a cw laser.
    #[arg(long, group = "window")]
    pub gate_ns: Option<f64>,
    /// Gate window with units, for a cw laser.
    #[arg(long, group = "window")]
    pub gate: Option<String>,
    /// Pulse rate, for a pulsed laser with one pulse per gate.
    #[arg(long, group = "window")]
    pub rate_hz: Option<f64>,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Fit(args) => cmd_fit(&args, stdout),
        Command::Simulate(args) => cmd_simulate(&args, stdout),
        Command::Curve(args) => cmd_curve(&args, stdout),
        Command::Gatewindow(args) => cmd_gatewindow(&args, stdout),
        Command::Convert(args) => cmd_convert(&args, stdout),
    }
}

fn emit(out: Option<&Path>, stdout: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => write_bytes(path, bytes),
        None => stdout.write_all(bytes).map_err(|source| CliError::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn say(stdout: &mut dyn Write, line: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(stdout, "{line}").map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })
}

pub fn cmd_fit(args: &FitArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let counts_bytes = read_bytes(&args.counts)?;
    let dark_bytes = read_bytes(&args.dark)?;
    let records = parse_counts(&args.counts, &counts_bytes)?;
    let dark = parse_dark(&args.dark, &dark_bytes)?;

    let options = FitOptions {
        bounds: spdfit::fit::FitBounds {
            eta: Bounds::new(args.eta_min, args.eta_max),
            q0: Bounds::new(args.q0_min, args.q0_max),
            tau_s: Bounds::new(parse_seconds(&args.tau_min)?, parse_seconds(&args.tau_max)?),
        },
        multistart: args.multistart,
        max_evals: args.max_evals,
        seed: args.seed,
        weighting: args.weighting,
        eta_mode: if args.shared_eta {
            EtaMode::Shared
        } else {
            EtaMode::PerRate
        },
        ..FitOptions::default()
    };
    let problem = FitProblem::new(records, &dark, args.source, options)?;
    let fit = fit_simultaneous(&problem)?;
    let converged = fit.converged;
    let report = FitReport::new(
        fit,
        args.source,
        options,
        InputDigest {
            counts_sha256: sha256_hex(&counts_bytes),
            dark_sha256: sha256_hex(&dark_bytes),
        },
    );
    write_bytes(&args.out, report.to_json()?.as_bytes())?;

    for e in &report.eta_by_rate {
        say(
            stdout,
            format_args!("eta @ {} Hz = {:.6}", e.rate_hz, e.eta),
        )?;
    }
    say(stdout, format_args!("q0 = {:.6e}", report.q0))?;
    say(stdout, format_args!("tau = {:.6e} s", report.tau_s))?;
    say(stdout, format_args!("rms = {:.3e}", report.rms))?;
    if converged {
        Ok(Outcome::Success)
    } else {
        say(stdout, "fit did not converge; report written anyway")?;
        Ok(Outcome::NotConverged)
    }
}

pub fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let file = ScenarioFile::parse(&args.scenario, &read_bytes(&args.scenario)?)?;
    let scenario = file.scenario()?;
    let generator = args.generator.unwrap_or(file.generator);
    let config = file.sim_config(args.seed.unwrap_or(file.seed));
    let records = synth_dataset(&scenario, generator, &config)?;

    let mut buf = Vec::new();
    write_counts(&records, &mut buf)?;
    emit(args.out.as_deref(), stdout, &buf)?;
    if let Some(path) = &args.dark_out {
        let dark: Vec<(f64, f64)> = scenario
            .rates
            .iter()
            .map(|r| (r.rate.hz(), r.p_dc))
            .collect();
        let mut buf = Vec::new();
        write_dark(&dark, &mut buf)?;
        write_bytes(path, &buf)?;
    }
    Ok(Outcome::Success)
}

pub fn cmd_curve(args: &CurveArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let params = DetectorParams::new(args.eta, args.p_dc, args.q0, parse_seconds(&args.tau)?)?;
    let rate = GateRate::new(args.rate_hz)?;
    if args.steps < 2 {
        return Err(CliError::Input("--steps must be at least 2".into()));
    }
    if !(args.mu_min >= 0.0 && args.mu_max > args.mu_min && args.mu_max.is_finite()) {
        return Err(CliError::Input(
            "need 0 <= --mu-min < --mu-max, both finite".into(),
        ));
    }

    let mut text = String::from("mu,p_c_simple,p_c_closed,p_c_exact\n");
    let n = args.steps - 1;
    for i in 0..=n {
        let mu = args.mu_min + (args.mu_max - args.mu_min) * i as f64 / n as f64;
        let p_ph = p_photon(SourceTerm::new(args.source, mu)?, params.eta)?;
        let simple = p_count_simple(params.p_dc, p_ph)?;
        let closed = p_count_closed(params.p_dc, p_ph, params.q0, params.tau_s, rate)?;
        let exact = exact_stationary(&params, p_ph, rate, DEFAULT_EXACT_EPS)?;
        text.push_str(&format!("{mu},{simple},{closed},{exact}\n"));
    }
    emit(args.out.as_deref(), stdout, text.as_bytes())?;
    Ok(Outcome::Success)
}

pub fn cmd_gatewindow(args: &GateWindowArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let cw = parse_sweep(&args.cw, &read_bytes(&args.cw)?)?;
    let pulsed = parse_sweep(&args.pulsed, &read_bytes(&args.pulsed)?)?;
    let rate = GateRate::new(args.rate_hz)?;
    let estimate = gate_window_from_sweeps(&cw, &pulsed, rate)?;

    let mean_ns = fmt_significant(estimate.mean.ns(), 9);
    let std_ns = estimate.variance_s2().sqrt() * 1e9;
    let mut text = format!("# mean_tau_g_ns = {mean_ns}\n# std_tau_g_ns = {std_ns:e}\n");
    text.push_str("p_c,pulsed_dbm,cw_dbm,tau_g_ns\n");
    for p in &estimate.points {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.p_c,
            p.pulsed.0,
            p.cw.0,
            p.window.ns()
        ));
    }
    match &args.out {
        Some(path) => {
            write_bytes(path, text.as_bytes())?;
            say(stdout, format_args!("mean tau_g = {mean_ns} ns"))?;
        }
        None => emit(None, stdout, text.as_bytes())?,
    }
    Ok(Outcome::Success)
}

enum Window {
    Cw(GateWindow),
    Pulsed(GateRate),
}

pub fn cmd_convert(args: &ConvertArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let carrier = OpticalCarrier::from_nm(args.wavelength_nm)?;
    let window = match (args.gate_ns, &args.gate, args.rate_hz) {
        (Some(ns), None, None) => Window::Cw(GateWindow::from_ns(ns)?),
        (None, Some(text), None) => Window::Cw(GateWindow::new(parse_seconds(text)?)?),
        (None, None, Some(rate)) => Window::Pulsed(GateRate::new(rate)?),
        _ => {
            return Err(CliError::Input(
                "give exactly one of --gate-ns, --gate or --rate-hz".into(),
            ))
        }
    };
    match (args.dbm, args.mu) {
        (Some(dbm), None) => {
            if !dbm.is_finite() {
                return Err(CliError::Input(format!("--dbm {dbm} is not finite")));
            }
            let mu = match window {
                Window::Cw(w) => mu_cw(PowerDbm(dbm), carrier, w),
                Window::Pulsed(r) => mu_pulsed(PowerDbm(dbm), carrier, r),
            };
            say(stdout, format_args!("mu = {mu}"))?;
        }
        (None, Some(mu)) => {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(CliError::Input(format!(
                    "mu = {mu}: power in dBm is undefined for mu <= 0"
                )));
            }
            let dbm = match window {
                Window::Cw(w) => dbm_for_mu_cw(mu, carrier, w)?,
                Window::Pulsed(r) => dbm_for_mu_pulsed(mu, carrier, r)?,
            };
            say(stdout, format_args!("dbm = {}", dbm.0))?;
        }
        _ => return Err(CliError::Input("give exactly one of --dbm or --mu".into())),
    }
    Ok(Outcome::Success)
}
