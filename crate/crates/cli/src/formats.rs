//! File formats: count sweeps, dark-count tables, laser sweeps, scenario
//! configs and fit reports.
//!
//! CSV files are comma-separated UTF-8 with a mandatory header row; lines
//! starting with `#` are ignored.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spdfit::detector_sim::{Generator, RateSetting, Scenario, SimConfig};
use spdfit::fit::{CountRecord, FitOptions, FitResult, RateEfficiency, StartDiagnostics};
use spdfit::photon_budget::{mu_cw, GateWindow, OpticalCarrier, PowerDbm, Sweep, SweepPoint};
use spdfit::{GateRate, SourceKind};

use crate::error::CliError;
use crate::units::parse_seconds;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A parsed CSV table with named columns.
struct Table<'a> {
    path: &'a Path,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl<'a> Table<'a> {
    fn parse(path: &'a Path, bytes: &[u8], allowed: &[&str]) -> Result<Self, CliError> {
        let csv_err = |source| CliError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(bytes);
        let headers: Vec<String> = reader
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers.iter().all(String::is_empty) {
            return Err(CliError::format(path, "missing header row"));
        }
        for (i, h) in headers.iter().enumerate() {
            if !allowed.contains(&h.as_str()) {
                return Err(CliError::format(
                    path,
                    format!("unknown column {h:?} (allowed: {})", allowed.join(", ")),
                ));
            }
            if headers[..i].contains(h) {
                return Err(CliError::format(path, format!("duplicate column {h:?}")));
            }
        }
        let rows = reader
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(csv_err)?;
        if rows.is_empty() {
            return Err(CliError::format(path, "no data rows"));
        }
        Ok(Table {
            path,
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize, CliError> {
        self.column(name)
            .ok_or_else(|| CliError::format(self.path, format!("missing column {name:?}")))
    }

    fn line(row: &csv::StringRecord) -> u64 {
        row.position().map_or(0, |p| p.line())
    }

    fn float(&self, row: &csv::StringRecord, col: usize) -> Result<f64, CliError> {
        let text = &row[col];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::format(
                self.path,
                format!(
                    "line {}: column {:?}: {text:?} is not a finite number",
                    Self::line(row),
                    self.headers[col]
                ),
            )),
        }
    }

    fn integer(&self, row: &csv::StringRecord, col: usize) -> Result<u64, CliError> {
        let text = &row[col];
        text.parse::<u64>().map_err(|_| {
            CliError::format(
                self.path,
                format!(
                    "line {}: column {:?}: {text:?} is not a non-negative integer",
                    Self::line(row),
                    self.headers[col]
                ),
            )
        })
    }

    fn row_error(&self, row: &csv::StringRecord, message: impl std::fmt::Display) -> CliError {
        CliError::format(self.path, format!("line {}: {message}", Self::line(row)))
    }
}

const COUNTS_COLUMNS: [&str; 7] = [
    "rate_hz",
    "mu",
    "power_dbm",
    "gates",
    "counts",
    "wavelength_nm",
    "tau_g_ns",
];

/// Parse a counts file. Files with a `power_dbm` column are converted to
/// mean photons per gate using each row's `wavelength_nm` and `tau_g_ns`.
pub fn parse_counts(path: &Path, bytes: &[u8]) -> Result<Vec<CountRecord>, CliError> {
    let table = Table::parse(path, bytes, &COUNTS_COLUMNS)?;
    let rate = table.require("rate_hz")?;
    let gates = table.require("gates")?;
    let counts = table.require("counts")?;
    let mu = table.column("mu");
    let power = table.column("power_dbm");
    let optics = match (mu, power) {
        (Some(_), Some(_)) => {
            return Err(CliError::format(
                path,
                "columns \"mu\" and \"power_dbm\" cannot be mixed in one file",
            ))
        }
        (None, None) => {
            return Err(CliError::format(
                path,
                "one of the columns \"mu\" or \"power_dbm\" is required",
            ))
        }
        (None, Some(_)) => Some((table.require("wavelength_nm")?, table.require("tau_g_ns")?)),
        (Some(_), None) => None,
    };

    table
        .rows
        .iter()
        .map(|row| {
            let rate_hz = table.float(row, rate)?;
            let mu = match (mu, power, optics) {
                (Some(col), _, _) => table.float(row, col)?,
                (None, Some(col), Some((wl, tg))) => {
                    let carrier = OpticalCarrier::from_nm(table.float(row, wl)?)
                        .map_err(|e| table.row_error(row, e))?;
                    let window = GateWindow::from_ns(table.float(row, tg)?)
                        .map_err(|e| table.row_error(row, e))?;
                    mu_cw(PowerDbm(table.float(row, col)?), carrier, window)
                }
                _ => unreachable!("column set checked above"),
            };
            let record = CountRecord {
                rate_hz,
                mu,
                gates: table.integer(row, gates)?,
                counts: table.integer(row, counts)?,
            };
            record.validate().map_err(|e| table.row_error(row, e))?;
            Ok(record)
        })
        .collect()
}

pub fn write_counts<W: Write>(records: &[CountRecord], out: W) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(out);
    let io = |source| CliError::Io {
        path: "<counts output>".into(),
        source,
    };
    writeln!(out, "rate_hz,mu,gates,counts").map_err(io)?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.rate_hz, r.mu, r.gates, r.counts).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parse a dark-count table into `(rate_hz, p_dc)` pairs.
pub fn parse_dark(path: &Path, bytes: &[u8]) -> Result<Vec<(f64, f64)>, CliError> {
    let table = Table::parse(path, bytes, &["rate_hz", "p_dc"])?;
    let rate = table.require("rate_hz")?;
    let p_dc = table.require("p_dc")?;
    let mut entries: Vec<(f64, f64)> = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let r = table.float(row, rate)?;
        let p = table.float(row, p_dc)?;
        GateRate::new(r).map_err(|e| table.row_error(row, e))?;
        if !(0.0..1.0).contains(&p) {
            return Err(table.row_error(row, format!("p_dc = {p} outside [0, 1)")));
        }
        if entries.iter().any(|&(seen, _)| seen == r) {
            return Err(table.row_error(row, format!("rate {r} Hz listed twice")));
        }
        entries.push((r, p));
    }
    Ok(entries)
}

pub fn write_dark<W: Write>(entries: &[(f64, f64)], out: W) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(out);
    let io = |source| CliError::Io {
        path: "<dark output>".into(),
        source,
    };
    writeln!(out, "rate_hz,p_dc").map_err(io)?;
    for (rate, p) in entries {
        writeln!(out, "{rate},{p}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parse a laser sweep (`power_dbm,p_c`).
pub fn parse_sweep(path: &Path, bytes: &[u8]) -> Result<Sweep, CliError> {
    let table = Table::parse(path, bytes, &["power_dbm", "p_c"])?;
    let power = table.require("power_dbm")?;
    let p_c = table.require("p_c")?;
    let points = table
        .rows
        .iter()
        .map(|row| {
            Ok(SweepPoint {
                power: PowerDbm(table.float(row, power)?),
                p_c: table.float(row, p_c)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Sweep::new(points).map_err(|e| CliError::format(path, e.to_string()))
}

/// Either a duration in seconds or a unit-suffixed string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Duration {
    Seconds(f64),
    Text(String),
}

impl Duration {
    pub fn seconds(&self) -> Result<f64, CliError> {
        match self {
            Duration::Seconds(s) => Ok(*s),
            Duration::Text(t) => parse_seconds(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub rate_hz: f64,
    pub eta: f64,
    pub p_dc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuRange {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_gates: Option<u64>,
    pub burn_in: Option<u64>,
    pub k_cap: Option<u64>,
    pub chunks: Option<u32>,
}

/// TOML scenario consumed by the `simulate` command.
///
/// ```toml
/// generator = "closed-form"
/// source = "poisson-single"
/// q0 = 0.02
/// tau = "3us"
/// noise_sigma = 0.0
/// seed = 1
/// mu = [3.0, 5.0, 8.0]          # or: mu_range = { min = 3, max = 20, steps = 10 }
///
/// [[rate]]
/// rate_hz = 100e3
/// eta = 0.215
/// p_dc = 1e-5
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "default_generator")]
    pub generator: Generator,
    #[serde(default = "default_source")]
    pub source: SourceKind,
    pub q0: f64,
    pub tau: Duration,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub mu: Option<Vec<f64>>,
    pub mu_range: Option<MuRange>,
    pub rate: Vec<RateEntry>,
    pub sim: Option<SimSection>,
}

fn default_generator() -> Generator {
    Generator::ClosedForm
}

fn default_source() -> SourceKind {
    SourceKind::PoissonSingle
}

impl ScenarioFile {
    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self, CliError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| CliError::format(path, "scenario file is not UTF-8"))?;
        toml::from_str(text).map_err(|e| CliError::format(path, e.to_string()))
    }

    pub fn mu_grid(&self) -> Result<Vec<f64>, CliError> {
        match (&self.mu, &self.mu_range) {
            (Some(list), None) => Ok(list.clone()),
            (None, Some(range)) => {
                if range.steps < 2
                    || range.min.partial_cmp(&range.max) != Some(std::cmp::Ordering::Less)
                {
                    return Err(CliError::Input(
                        "mu_range needs steps >= 2 and max > min".into(),
                    ));
                }
                let n = range.steps - 1;
                Ok((0..=n)
                    .map(|i| range.min + (range.max - range.min) * i as f64 / n as f64)
                    .collect())
            }
            _ => Err(CliError::Input(
                "scenario needs exactly one of `mu` or `mu_range`".into(),
            )),
        }
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let rates = self
            .rate
            .iter()
            .map(|r| {
                Ok(RateSetting {
                    rate: GateRate::new(r.rate_hz)?,
                    eta: r.eta,
                    p_dc: r.p_dc,
                })
            })
            .collect::<Result<Vec<_>, spdfit::Error>>()?;
        let scenario = Scenario {
            rates,
            q0: self.q0,
            tau_s: self.tau.seconds()?,
            mu_grid: self.mu_grid()?,
            source: self.source,
            noise_sigma: self.noise_sigma,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        let defaults = SimConfig::default();
        let section = self.sim.as_ref();
        SimConfig {
            n_gates: section.and_then(|s| s.n_gates).unwrap_or(defaults.n_gates),
            seed,
            burn_in: section.and_then(|s| s.burn_in).unwrap_or(defaults.burn_in),
            k_cap: section.and_then(|s| s.k_cap).unwrap_or(defaults.k_cap),
            chunks: section.and_then(|s| s.chunks).unwrap_or(defaults.chunks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub counts_sha256: String,
    pub dark_sha256: String,
}

/// JSON document written by the `fit` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub eta_by_rate: Vec<RateEfficiency>,
    pub q0: f64,
    pub tau_s: f64,
    pub rms: f64,
    pub objective: f64,
    pub n_points: usize,
    pub converged: bool,
    pub source: SourceKind,
    pub options: FitOptions,
    pub input_digest: InputDigest,
    pub best_start: usize,
    pub starts: Vec<StartDiagnostics>,
}

impl FitReport {
    pub fn new(
        fit: FitResult,
        source: SourceKind,
        options: FitOptions,
        input_digest: InputDigest,
    ) -> Self {
        FitReport {
            eta_by_rate: fit.eta_by_rate,
            q0: fit.q0,
            tau_s: fit.tau_s,
            rms: fit.rms,
            objective: fit.objective,
            n_points: fit.n_points,
            converged: fit.converged,
            source,
            options,
            input_digest,
            best_start: fit.best_start,
            starts: fit.starts,
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.csv")
    }

    #[test]
    fn counts_with_mu_and_comments() {
        let text =
            "# sweep\nrate_hz,mu,gates,counts\n100000,3.0,1000,470\n# mid\n100000, 5.0 ,1000,650\n";
        let records = parse_counts(p(), text.as_bytes()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].mu, 5.0);
        assert_eq!(records[1].p_c(), 0.65);
    }

    #[test]
    fn counts_with_power_are_converted() {
        let text = "rate_hz,power_dbm,gates,counts,wavelength_nm,tau_g_ns\n1e5,-61,1000,470,1549.32,0.49\n";
        let records = parse_counts(p(), text.as_bytes()).unwrap();
        assert!((records[0].mu - 3.036).abs() < 1e-3);
    }

    #[test]
    fn counts_rejections() {
        let cases = [
            ("", "header"),
            ("rate_hz,mu,gates,counts\n", "no data rows"),
            ("rate_hz,mu,power_dbm,gates,counts\n1,1,1,1,1\n", "mixed"),
            ("rate_hz,gates,counts\n1,1,1\n", "neither"),
            (
                "rate_hz,power_dbm,gates,counts\n1,-60,1,1\n",
                "no wavelength",
            ),
            ("rate_hz,mu,gates,counts\n1e5,1,10,11\n", "counts > gates"),
            ("rate_hz,mu,gates,counts\n1e5,nan,10,1\n", "nan"),
            (
                "rate_hz,mu,gates,counts\n1e5,1,10.5,1\n",
                "fractional gates",
            ),
            (
                "rate_hz,mu,gates,counts,extra\n1e5,1,10,1,2\n",
                "unknown column",
            ),
            ("rate_hz,mu,gates,counts\n1e5,1,10\n", "ragged row"),
        ];
        for (text, label) in cases {
            assert!(parse_counts(p(), text.as_bytes()).is_err(), "{label}");
        }
    }

    #[test]
    fn dark_table() {
        let dark = parse_dark(p(), b"rate_hz,p_dc\n1e5,1e-5\n2.5e5,2e-5\n").unwrap();
        assert_eq!(dark, vec![(1e5, 1e-5), (2.5e5, 2e-5)]);
        assert!(parse_dark(p(), b"rate_hz,p_dc\n1e5,1e-5\n1e5,2e-5\n").is_err());
        assert!(parse_dark(p(), b"rate_hz,p_dc\n1e5,1.0\n").is_err());
    }

    #[test]
    fn counts_write_then_parse_is_exact() {
        let records = vec![
            CountRecord {
                rate_hz: 1e5,
                mu: 3.0 + 1.0 / 3.0,
                gates: 1 << 53,
                counts: 123_456_789_012_345,
            },
            CountRecord {
                rate_hz: 2.5e5,
                mu: 0.1,
                gates: 1000,
                counts: 5,
            },
        ];
        let mut buf = Vec::new();
        write_counts(&records, &mut buf).unwrap();
        assert_eq!(parse_counts(p(), &buf).unwrap(), records);
    }

    #[test]
    fn scenario_toml() {
        let text = r#"
            generator = "monte-carlo"
            q0 = 0.02
            tau = "3us"
            seed = 4
            mu_range = { min = 3.0, max = 20.0, steps = 10 }
            [[rate]]
            rate_hz = 1e5
            eta = 0.2
            p_dc = 1e-5
            [sim]
            n_gates = 5000
        "#;
        let file = ScenarioFile::parse(Path::new("s.toml"), text.as_bytes()).unwrap();
        assert_eq!(file.generator, Generator::MonteCarlo);
        let s = file.scenario().unwrap();
        assert_eq!(s.tau_s, 3e-6);
        assert_eq!(s.mu_grid.len(), 10);
        assert_eq!(s.mu_grid[9], 20.0);
        let config = file.sim_config(4);
        assert_eq!(config.n_gates, 5000);
        assert_eq!(config.k_cap, SimConfig::default().k_cap);

        let both = text.replace("seed = 4", "seed = 4\nmu = [1.0]");
        let file = ScenarioFile::parse(Path::new("s.toml"), both.as_bytes()).unwrap();
        assert!(file.scenario().is_err());
        assert!(ScenarioFile::parse(Path::new("s.toml"), b"q0 = 0.1\nbogus = 1\n").is_err());
    }

    #[test]
    fn shipped_scenario_parses() {
        let text = include_str!("../data/four_rates.toml");
        let file = ScenarioFile::parse(Path::new("four_rates.toml"), text.as_bytes()).unwrap();
        let s = file.scenario().unwrap();
        assert_eq!(s.rates.len(), 4);
        assert_eq!(s.mu_grid.len(), 10);
    }
}
