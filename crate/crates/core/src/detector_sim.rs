//! Gate-level model of the detector as a renewal chain on "gates since the
//! last registered count".
//!
//! Gate `k` after a count fires with probability
//! `p_k = 1 - (1 - p_dc)(1 - p_ph)(1 - Q_k)`. Every registered count, whatever
//! caused it, resets the chain. Before the first count there is no
//! afterpulsing. [`simulate`] samples the chain; [`exact_stationary`] computes
//! its long-run count rate `1 / E[T]` from the inter-count distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::count_model::{
    afterpulse_qn, decay_ratio, p_count_closed, p_count_simple, p_photon, DetectorParams, GateRate,
    SourceKind, SourceTerm,
};
use crate::error::{check_positive, check_unit_closed, check_unit_half_open, Error, Result};
use crate::fit::CountRecord;

/// Gate count used for records produced by the analytic generators. Counts
/// are `round(p_c * 2^53)`, so `counts / gates` carries `p_c` to within
/// half an ulp of 1.
pub const ANALYTIC_GATES: u64 = 1 << 53;

/// Default tail tolerance of [`exact_stationary`].
pub const DEFAULT_EXACT_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Gates tallied (after burn-in).
    pub n_gates: u64,
    pub seed: u64,
    /// Gates discarded at the start of every chunk.
    pub burn_in: u64,
    /// Largest tracked gates-since-last-count; `Q_k` is pinned beyond it.
    pub k_cap: u64,
    /// Number of independent substreams `n_gates` is split across. Part of
    /// the reproducibility key together with `seed`.
    pub chunks: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_gates: 1_000_000,
            seed: 0,
            burn_in: 1_000,
            k_cap: 10_000,
            chunks: 8,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gates < 1 {
            return Err(Error::Config("n_gates must be >= 1".into()));
        }
        if self.k_cap < 1 {
            return Err(Error::Config("k_cap must be >= 1".into()));
        }
        if self.chunks < 1 {
            return Err(Error::Config("chunks must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub counts: u64,
    pub gates: u64,
    pub p_c_hat: f64,
    /// Binomial standard error of `p_c_hat`.
    pub stderr: f64,
}

impl SimResult {
    pub fn from_counts(counts: u64, gates: u64) -> Self {
        let p = counts as f64 / gates as f64;
        SimResult {
            counts,
            gates,
            p_c_hat: p,
            stderr: (p * (1.0 - p) / gates as f64).sqrt(),
        }
    }
}

/// Count probability at the `k`-th gate after the last registered count.
pub fn per_gate_count_prob(
    params: &DetectorParams,
    p_ph: f64,
    rate: GateRate,
    k: u64,
) -> Result<f64> {
    check_unit_closed("p_ph", p_ph)?;
    let q_k = afterpulse_qn(params.q0, params.tau_s, rate, k)?;
    Ok(1.0 - (1.0 - params.p_dc) * (1.0 - p_ph) * (1.0 - q_k))
}

/// Per-gate firing probabilities indexed by gates since the last count.
struct GateTable {
    /// `p[k - 1]` for `k = 1..=k_cap`.
    after_count: Vec<f64>,
    /// Firing probability with no prior count.
    cold: f64,
}

impl GateTable {
    fn new(params: &DetectorParams, p_ph: f64, rate: GateRate, k_cap: u64) -> Result<Self> {
        params.validate()?;
        let after_count = (1..=k_cap)
            .map(|k| per_gate_count_prob(params, p_ph, rate, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(GateTable {
            after_count,
            cold: p_count_simple(params.p_dc, p_ph)?,
        })
    }

    fn run(&self, rng: &mut ChaCha8Rng, burn_in: u64, gates: u64) -> u64 {
        let cap = self.after_count.len();
        // 0 encodes "no prior count".
        let mut k = 0usize;
        let mut counts = 0u64;
        for gate in 0..burn_in + gates {
            let p = if k == 0 {
                self.cold
            } else {
                self.after_count[k - 1]
            };
            if rng.gen::<f64>() < p {
                k = 1;
                if gate >= burn_in {
                    counts += 1;
                }
            } else if k != 0 && k < cap {
                k += 1;
            }
        }
        counts
    }
}

fn chunk_sizes(total: u64, chunks: u32) -> impl Iterator<Item = (u64, u64)> {
    let chunks = chunks as u64;
    let base = total / chunks;
    let extra = total % chunks;
    (0..chunks).map(move |i| (i, base + u64::from(i < extra)))
}

/// Monte Carlo estimate of the stationary count probability.
///
/// `n_gates` is split into `config.chunks` pieces; piece `i` runs its own
/// chain on ChaCha8 stream `i` of `config.seed`, so the result depends only on
/// the config and not on how chunks are scheduled across threads.
pub fn simulate(
    params: &DetectorParams,
    p_ph: f64,
    rate: GateRate,
    config: &SimConfig,
) -> Result<SimResult> {
    config.validate()?;
    let table = GateTable::new(params, p_ph, rate, config.k_cap)?;

    let run_chunk = |(index, gates): (u64, u64)| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index);
        table.run(&mut rng, config.burn_in, gates)
    };

    #[cfg(feature = "parallel")]
    let counts: u64 = {
        use rayon::prelude::*;
        let plan: Vec<_> = chunk_sizes(config.n_gates, config.chunks).collect();
        plan.into_par_iter().map(run_chunk).sum()
    };
    #[cfg(not(feature = "parallel"))]
    let counts: u64 = chunk_sizes(config.n_gates, config.chunks)
        .map(run_chunk)
        .sum();

    Ok(SimResult::from_counts(counts, config.n_gates))
}

/// Exact stationary count probability of the renewal chain.
///
/// Sums the survival function of the inter-count time `T` explicitly until the
/// remaining afterpulse mass `sum_{j>k} Q_j` drops below `eps`, then closes
/// the tail with the geometric law at the no-afterpulse probability. Returns
/// `0` when the detector can never fire spontaneously.
pub fn exact_stationary(
    params: &DetectorParams,
    p_ph: f64,
    rate: GateRate,
    eps: f64,
) -> Result<f64> {
    params.validate()?;
    check_positive("eps", eps)?;
    let p_inf = p_count_simple(params.p_dc, p_ph)?;
    if p_inf == 0.0 || params.q0 == 0.0 {
        return Ok(p_inf);
    }
    let r = decay_ratio(params.tau_s, rate)?;
    let survive_base = (1.0 - params.p_dc) * (1.0 - p_ph);
    // Tail mass beyond gate k is Q_k * r / (1 - r).
    let tail_scale = r / (1.0 - r);

    // mean = sum_{k >= 0} Pr(T > k)
    let mut mean = 1.0;
    let mut survival = 1.0;
    let mut q_k = params.q0;
    loop {
        q_k *= r;
        survival *= survive_base * (1.0 - q_k);
        if survival == 0.0 {
            break;
        }
        if q_k * tail_scale < eps {
            mean += survival / p_inf;
            break;
        }
        mean += survival;
    }
    Ok(1.0 / mean)
}

/// Which model produces the count probabilities of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    ClosedForm,
    Exact,
    MonteCarlo,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed-form" => Ok(Generator::ClosedForm),
            "exact" => Ok(Generator::Exact),
            "monte-carlo" => Ok(Generator::MonteCarlo),
            other => Err(Error::Config(format!(
                "unknown generator {other:?} (expected closed-form, exact or monte-carlo)"
            ))),
        }
    }
}

/// Efficiency and dark-count probability at one trigger rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSetting {
    pub rate: GateRate,
    pub eta: f64,
    pub p_dc: f64,
}

/// A synthetic multi-rate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub rates: Vec<RateSetting>,
    pub q0: f64,
    pub tau_s: f64,
    pub mu_grid: Vec<f64>,
    pub source: SourceKind,
    /// Standard deviation of additive Gaussian noise on each `p_c`.
    #[serde(default)]
    pub noise_sigma: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Config("scenario has no rates".into()));
        }
        for (i, a) in self.rates.iter().enumerate() {
            DetectorParams::new(a.eta, a.p_dc, self.q0, self.tau_s)?;
            decay_ratio(self.tau_s, a.rate)?;
            if self.rates[..i].iter().any(|b| b.rate == a.rate) {
                return Err(Error::Config(format!(
                    "rate {} Hz appears more than once",
                    a.rate.hz()
                )));
            }
        }
        if self.mu_grid.is_empty() {
            return Err(Error::Config("scenario has an empty mu grid".into()));
        }
        for &mu in &self.mu_grid {
            SourceTerm::new(self.source, mu)?;
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma = {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        check_unit_half_open("q0", self.q0)?;
        Ok(())
    }

    pub fn params_at(&self, setting: &RateSetting) -> DetectorParams {
        DetectorParams {
            eta: setting.eta,
            p_dc: setting.p_dc,
            q0: self.q0,
            tau_s: self.tau_s,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE5_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Synthetic count records for every (rate, mu) pair of the scenario, in
/// rate-major order.
///
/// Analytic generators report [`ANALYTIC_GATES`] gates per record; the
/// Monte Carlo generator reports `config.n_gates`. Record `i` of a Monte
/// Carlo dataset is simulated with seed `splitmix64(config.seed + i)`. Noise
/// is drawn from ChaCha8 stream `u64::MAX` of `config.seed`.
pub fn synth_dataset(
    scenario: &Scenario,
    generator: Generator,
    config: &SimConfig,
) -> Result<Vec<CountRecord>> {
    scenario.validate()?;
    config.validate()?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(u64::MAX);
    let noise = Normal::new(0.0, scenario.noise_sigma)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let mut records = Vec::with_capacity(scenario.rates.len() * scenario.mu_grid.len());
    for setting in &scenario.rates {
        let params = scenario.params_at(setting);
        for &mu in &scenario.mu_grid {
            let p_ph = p_photon(SourceTerm::new(scenario.source, mu)?, params.eta)?;
            let (p_c, gates) = match generator {
                Generator::ClosedForm => (
                    p_count_closed(params.p_dc, p_ph, params.q0, params.tau_s, setting.rate)?,
                    ANALYTIC_GATES,
                ),
                Generator::Exact => (
                    exact_stationary(&params, p_ph, setting.rate, DEFAULT_EXACT_EPS)?,
                    ANALYTIC_GATES,
                ),
                Generator::MonteCarlo => {
                    let sim_config = SimConfig {
                        seed: splitmix64(config.seed.wrapping_add(records.len() as u64)),
                        ..*config
                    };
                    let sim = simulate(&params, p_ph, setting.rate, &sim_config)?;
                    (sim.p_c_hat, sim.gates)
                }
            };
            let p_c = if scenario.noise_sigma > 0.0 {
                (p_c + noise.sample(&mut noise_rng)).clamp(0.0, 1.0)
            } else {
                p_c
            };
            records.push(CountRecord {
                rate_hz: setting.rate.hz(),
                mu,
                gates,
                counts: (p_c * gates as f64).round() as u64,
            });
        }
    }
    Ok(records)
}
