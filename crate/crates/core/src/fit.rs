//! Simultaneous least-squares fit of the closed-form count probability to
//! sweeps taken at several trigger rates.
//!
//! Efficiency is fitted per rate; the afterpulsing constant and detrap time
//! are shared by all rates. Dark-count probabilities are measured separately
//! and held fixed. Parameters are optimized in an unconstrained space: `eta`
//! and `q0` through a logistic map onto their bounds, `tau` through a
//! logistic map onto the log of its bounds. Each start runs a
//! Levenberg-Marquardt iteration with a central-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::count_model::{p_count_closed, p_photon, GateRate, SourceKind, SourceTerm};
use crate::error::{Error, Result};

/// One measured point of a count-probability sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub rate_hz: f64,
    /// Mean photons per gate.
    pub mu: f64,
    pub gates: u64,
    pub counts: u64,
}

impl CountRecord {
    pub fn p_c(&self) -> f64 {
        self.counts as f64 / self.gates as f64
    }

    pub fn validate(&self) -> Result<()> {
        GateRate::new(self.rate_hz)?;
        SourceTerm::single(self.mu)?;
        if self.gates < 1 {
            return Err(Error::Problem("record has zero gates".into()));
        }
        if self.counts > self.gates {
            return Err(Error::Problem(format!(
                "record at rate {} Hz, mu {} has counts {} > gates {}",
                self.rate_hz, self.mu, self.counts, self.gates
            )));
        }
        Ok(())
    }
}

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name} bounds [{}, {}] must be finite with lo < hi",
                self.lo, self.hi
            )))
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub eta: Bounds,
    pub q0: Bounds,
    pub tau_s: Bounds,
}

impl Default for FitBounds {
    fn default() -> Self {
        FitBounds {
            eta: Bounds::new(0.01, 0.9),
            q0: Bounds::new(1e-4, 0.2),
            tau_s: Bounds::new(0.1e-6, 20e-6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Plain least squares.
    Uniform,
    /// Inverse binomial variance: `gates / (p(1 - p) + 1e-12)`.
    Binomial,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "binomial" => Ok(Weighting::Binomial),
            other => Err(Error::Config(format!(
                "unknown weighting {other:?} (expected uniform or binomial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaMode {
    /// One efficiency per trigger rate.
    PerRate,
    /// A single efficiency shared by all rates.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub bounds: FitBounds,
    pub multistart: usize,
    /// Stop when the actual and predicted relative decrease of the objective
    /// both fall below this.
    pub rel_tol: f64,
    /// Stop when the step in transformed parameters falls below this
    /// (relative to the parameter norm).
    pub step_tol: f64,
    /// Residual-vector evaluations allowed per start.
    pub max_evals: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub eta_mode: EtaMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bounds: FitBounds::default(),
            multistart: 8,
            rel_tol: 1e-12,
            step_tol: 1e-10,
            max_evals: 10_000,
            seed: 0,
            weighting: Weighting::Uniform,
            eta_mode: EtaMode::PerRate,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        self.bounds.eta.validate("eta")?;
        self.bounds.q0.validate("q0")?;
        self.bounds.tau_s.validate("tau_s")?;
        let b = &self.bounds;
        if b.eta.lo < 0.0 || b.eta.hi > 1.0 {
            return Err(Error::Config("eta bounds must lie in [0, 1]".into()));
        }
        if b.q0.lo < 0.0 || b.q0.hi >= 1.0 {
            return Err(Error::Config("q0 bounds must lie in [0, 1)".into()));
        }
        if b.tau_s.lo <= 0.0 {
            return Err(Error::Config("tau_s bounds must be positive".into()));
        }
        if self.multistart < 1 {
            return Err(Error::Config("multistart must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_evals < 1 {
            return Err(Error::Config("max_evals must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateGroup {
    pub rate: GateRate,
    pub p_dc: f64,
    /// Indices into the problem's record list.
    pub records: Vec<usize>,
}

/// Records grouped by trigger rate, with fixed dark-count probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    records: Vec<CountRecord>,
    groups: Vec<RateGroup>,
    record_group: Vec<usize>,
    source: SourceKind,
    options: FitOptions,
}

impl FitProblem {
    /// `p_dc_by_rate` holds `(rate_hz, p_dc)` pairs; entries for rates with
    /// no records are ignored.
    pub fn new(
        records: Vec<CountRecord>,
        p_dc_by_rate: &[(f64, f64)],
        source: SourceKind,
        options: FitOptions,
    ) -> Result<Self> {
        options.validate()?;
        if records.is_empty() {
            return Err(Error::Problem("no count records".into()));
        }
        let mut groups: Vec<RateGroup> = Vec::new();
        let mut record_group = Vec::with_capacity(records.len());
        for record in &records {
            record.validate()?;
            let slot = match groups.iter().position(|g| g.rate.hz() == record.rate_hz) {
                Some(slot) => slot,
                None => {
                    let p_dc = p_dc_by_rate
                        .iter()
                        .find(|(rate, _)| *rate == record.rate_hz)
                        .map(|&(_, p)| p)
                        .ok_or(Error::MissingDarkRate(record.rate_hz))?;
                    if !(0.0..1.0).contains(&p_dc) {
                        return Err(Error::Domain {
                            name: "p_dc",
                            value: p_dc,
                            expected: "[0, 1)",
                        });
                    }
                    groups.push(RateGroup {
                        rate: GateRate::new(record.rate_hz)?,
                        p_dc,
                        records: Vec::new(),
                    });
                    groups.len() - 1
                }
            };
            groups[slot].records.push(record_group.len());
            record_group.push(slot);
        }

        // Present groups in ascending rate order.
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&a, &b| groups[a].rate.hz().total_cmp(&groups[b].rate.hz()));
        let mut remap = vec![0; groups.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut sorted: Vec<RateGroup> = order.iter().map(|&i| groups[i].clone()).collect();
        for g in record_group.iter_mut() {
            *g = remap[*g];
        }

        for group in &mut sorted {
            if group.records.len() < 3 {
                return Err(Error::Problem(format!(
                    "rate {} Hz has {} point(s), need at least 3",
                    group.rate.hz(),
                    group.records.len()
                )));
            }
            let mut mus: Vec<f64> = group.records.iter().map(|&i| records[i].mu).collect();
            mus.sort_by(f64::total_cmp);
            if mus.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Problem(format!(
                    "rate {} Hz has repeated mu values; mu must be distinct within a rate",
                    group.rate.hz()
                )));
            }
        }

        let problem = FitProblem {
            records,
            groups: sorted,
            record_group,
            source,
            options,
        };
        if problem.records.len() < problem.n_params() + 1 {
            return Err(Error::Problem(format!(
                "{} points cannot determine {} parameters",
                problem.records.len(),
                problem.n_params()
            )));
        }
        Ok(problem)
    }

    pub fn records(&self) -> &[CountRecord] {
        &self.records
    }

    pub fn groups(&self) -> &[RateGroup] {
        &self.groups
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    pub fn n_eta(&self) -> usize {
        match self.options.eta_mode {
            EtaMode::PerRate => self.groups.len(),
            EtaMode::Shared => 1,
        }
    }

    /// Length of the parameter vector `[eta..., q0, tau_s]`.
    pub fn n_params(&self) -> usize {
        self.n_eta() + 2
    }

    fn eta_slot(&self, group: usize) -> usize {
        match self.options.eta_mode {
            EtaMode::PerRate => group,
            EtaMode::Shared => 0,
        }
    }

    fn weights(&self) -> Vec<f64> {
        match self.options.weighting {
            Weighting::Uniform => vec![1.0; self.records.len()],
            Weighting::Binomial => self
                .records
                .iter()
                .map(|r| {
                    let p = r.p_c();
                    r.gates as f64 / (p * (1.0 - p) + 1e-12)
                })
                .collect(),
        }
    }

    /// Weighted sum of squared residuals at physical parameters `theta`.
    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        let res = residuals(theta, self)?;
        Ok(res.iter().zip(self.weights()).map(|(r, w)| w * r * r).sum())
    }

    /// Physical parameter vectors the multistart begins from.
    pub fn start_points(&self) -> Vec<Vec<f64>> {
        let transform = Transform::new(self);
        start_units(self.n_params(), self.options.multistart, self.options.seed)
            .into_iter()
            .map(|u| transform.to_physical(&u.iter().map(|&u| logit(u)).collect::<Vec<_>>()))
            .collect()
    }
}

/// Model minus measured count probability for every record, in record order.
pub fn residuals(theta: &[f64], problem: &FitProblem) -> Result<Vec<f64>> {
    if theta.len() != problem.n_params() {
        return Err(Error::Decode {
            got: theta.len(),
            expected: problem.n_params(),
        });
    }
    let n_eta = problem.n_eta();
    let (q0, tau_s) = (theta[n_eta], theta[n_eta + 1]);
    problem
        .records
        .iter()
        .zip(&problem.record_group)
        .map(|(record, &g)| {
            let group = &problem.groups[g];
            let eta = theta[problem.eta_slot(g)];
            let p_ph = p_photon(SourceTerm::new(problem.source, record.mu)?, eta)?;
            let model = p_count_closed(group.p_dc, p_ph, q0, tau_s, group.rate)?;
            Ok(model - record.p_c())
        })
        .collect()
}

/// Root-mean-square of a residual vector.
pub fn rms(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::Problem("rms of an empty residual vector".into()));
    }
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    Ok((ss / residuals.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ObjectiveDecrease,
    StepSize,
    ZeroGradient,
    MaxEvaluations,
    /// The damping grew without bound: no trial step could be evaluated.
    Stalled,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxEvaluations | Termination::Stalled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub index: usize,
    pub initial: Vec<f64>,
    pub fitted: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEfficiency {
    pub rate_hz: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Fitted efficiency per trigger rate, ascending in rate.
    pub eta_by_rate: Vec<RateEfficiency>,
    pub q0: f64,
    pub tau_s: f64,
    /// Unweighted rms residual at the optimum.
    pub rms: f64,
    pub objective: f64,
    pub n_points: usize,
    pub converged: bool,
    /// Index of the start that produced the optimum.
    pub best_start: usize,
    pub starts: Vec<StartDiagnostics>,
}

impl FitResult {
    /// Fitted parameters as `[eta..., q0, tau_s]`.
    pub fn theta(&self) -> &[f64] {
        &self.starts[self.best_start].fitted
    }
}

/// Fit all rates at once, returning the best of the multistart optima.
///
/// The winning start is the one with the lowest objective, ties going to the
/// lower start index, so the result does not depend on how starts are
/// scheduled.
pub fn fit_simultaneous(problem: &FitProblem) -> Result<FitResult> {
    let transform = Transform::new(problem);
    let weights: Vec<f64> = problem.weights().into_iter().map(f64::sqrt).collect();
    let starts = start_units(
        problem.n_params(),
        problem.options.multistart,
        problem.options.seed,
    );

    let run = |(index, unit): (usize, Vec<f64>)| -> Result<StartDiagnostics> {
        let z0: Vec<f64> = unit.iter().map(|&u| logit(u)).collect();
        let outcome = fit_from(problem, &transform, &weights, z0.clone())?;
        Ok(StartDiagnostics {
            index,
            initial: transform.to_physical(&z0),
            fitted: transform.to_physical(&outcome.z),
            objective: outcome.objective,
            iterations: outcome.iterations,
            evaluations: outcome.evaluations,
            termination: outcome.termination,
            converged: outcome.termination.converged(),
        })
    };

    #[cfg(feature = "parallel")]
    let starts: Vec<StartDiagnostics> = {
        use rayon::prelude::*;
        starts
            .into_par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let starts: Vec<StartDiagnostics> = starts
        .into_iter()
        .enumerate()
        .map(run)
        .collect::<Result<_>>()?;

    let best = starts
        .iter()
        .min_by(|a, b| {
            a.objective
                .total_cmp(&b.objective)
                .then(a.index.cmp(&b.index))
        })
        .expect("at least one start");
    let theta = &best.fitted;
    let n_eta = problem.n_eta();
    let eta_by_rate = problem
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| RateEfficiency {
            rate_hz: group.rate.hz(),
            eta: theta[problem.eta_slot(g)],
        })
        .collect();
    let res = residuals(theta, problem)?;
    Ok(FitResult {
        eta_by_rate,
        q0: theta[n_eta],
        tau_s: theta[n_eta + 1],
        rms: rms(&res)?,
        objective: best.objective,
        n_points: problem.records.len(),
        converged: best.converged,
        best_start: best.index,
        starts,
    })
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Map between unconstrained and physical parameters.
struct Transform {
    n_eta: usize,
    bounds: FitBounds,
}

impl Transform {
    fn new(problem: &FitProblem) -> Self {
        Transform {
            n_eta: problem.n_eta(),
            bounds: problem.options.bounds,
        }
    }

    fn to_physical(&self, z: &[f64]) -> Vec<f64> {
        let b = &self.bounds;
        let squash = |bounds: Bounds, z: f64| bounds.lo + (bounds.hi - bounds.lo) * logistic(z);
        let mut theta: Vec<f64> = z[..self.n_eta].iter().map(|&z| squash(b.eta, z)).collect();
        theta.push(squash(b.q0, z[self.n_eta]));
        let log_tau = Bounds::new(b.tau_s.lo.ln(), b.tau_s.hi.ln());
        let tau = squash(log_tau, z[self.n_eta + 1]).exp();
        theta.push(tau.clamp(b.tau_s.lo, b.tau_s.hi));
        theta
    }
}

/// Low-discrepancy points in `[0.02, 0.98]^dim`: a Halton sequence with a
/// seeded Cranley-Patterson rotation.
fn start_units(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    (0..count)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let base = PRIMES[d % PRIMES.len()];
                    // Dimensions past the prime table reuse a base with a
                    // different index offset.
                    let index = (i + 1 + d / PRIMES.len() * 7919) as u64;
                    let u = (radical_inverse(index, base) + shifts[d]).fract();
                    0.02 + 0.96 * u
                })
                .collect()
        })
        .collect()
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut scale = inv_base;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * scale;
        index /= base;
        scale *= inv_base;
    }
    value
}

/// Largest change of any transformed parameter in one iteration.
const MAX_STEP: f64 = 1.0;

/// Damping beyond which a search is declared stalled.
const MAX_LAMBDA: f64 = 1e32;

struct Outcome {
    z: Vec<f64>,
    objective: f64,
    iterations: usize,
    evaluations: usize,
    termination: Termination,
}

struct WeightedResiduals<'a> {
    problem: &'a FitProblem,
    transform: &'a Transform,
    sqrt_weights: &'a [f64],
    evaluations: usize,
}

impl WeightedResiduals<'_> {
    fn eval(&mut self, z: &[f64]) -> Result<DVector<f64>> {
        self.evaluations += 1;
        let theta = self.transform.to_physical(z);
        let res = residuals(&theta, self.problem)?;
        Ok(DVector::from_iterator(
            res.len(),
            res.iter().zip(self.sqrt_weights).map(|(r, w)| r * w),
        ))
    }

    fn jacobian(&mut self, z: &[f64]) -> Result<DMatrix<f64>> {
        let n = z.len();
        let m = self.problem.records.len();
        let mut jac = DMatrix::zeros(m, n);
        let mut probe = z.to_vec();
        for j in 0..n {
            let h = 1e-6 * z[j].abs().max(1.0);
            probe[j] = z[j] + h;
            let plus = self.eval(&probe)?;
            probe[j] = z[j] - h;
            let minus = self.eval(&probe)?;
            probe[j] = z[j];
            jac.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        Ok(jac)
    }
}

/// Transformed coordinates beyond this magnitude sit on the flat tail of the
/// logistic map, where finite differences no longer see the parameter.
const SATURATED_Z: f64 = 10.0;

/// Release rounds allowed per start.
const MAX_RELEASES: usize = 4;

/// Where a released coordinate restarts: a tenth of the way in from its bound.
const RELEASE_Z: f64 = 2.197_224_577_336_219_6;

/// Levenberg-Marquardt from `z0`, followed by bound releases: whenever the
/// optimum has saturated coordinates, the search is rerun with them pulled
/// back inside the box (each alone, then all together) and the better end
/// point is kept.
fn fit_from(
    problem: &FitProblem,
    transform: &Transform,
    sqrt_weights: &[f64],
    z0: Vec<f64>,
) -> Result<Outcome> {
    let mut outcome = levenberg_marquardt(problem, transform, sqrt_weights, z0, 0)?;
    for _ in 0..MAX_RELEASES {
        if !outcome.termination.converged() {
            break;
        }
        let saturated: Vec<usize> = (0..outcome.z.len())
            .filter(|&i| outcome.z[i].abs() > SATURATED_Z)
            .collect();
        if saturated.is_empty() {
            break;
        }
        let mut subsets: Vec<Vec<usize>> = saturated.iter().map(|&i| vec![i]).collect();
        if saturated.len() > 1 {
            subsets.push(saturated.clone());
        }
        let mut evaluations = outcome.evaluations;
        let mut improved: Option<Outcome> = None;
        for subset in &subsets {
            let mut z = outcome.z.clone();
            for &i in subset {
                z[i] = z[i].signum() * RELEASE_Z;
            }
            let trial = levenberg_marquardt(problem, transform, sqrt_weights, z, evaluations)?;
            evaluations = trial.evaluations;
            let best = improved.as_ref().map_or(outcome.objective, |o| o.objective);
            let out_of_budget = trial.termination == Termination::MaxEvaluations;
            if trial.objective < best && trial.termination.converged() {
                improved = Some(trial);
            }
            if out_of_budget {
                break;
            }
        }
        let iterations = outcome.iterations;
        match improved {
            Some(mut better) => {
                better.iterations += iterations;
                better.evaluations = evaluations;
                outcome = better;
            }
            None => {
                outcome.evaluations = evaluations;
                break;
            }
        }
    }
    Ok(outcome)
}

fn levenberg_marquardt(
    problem: &FitProblem,
    transform: &Transform,
    sqrt_weights: &[f64],
    mut z: Vec<f64>,
    evaluations_used: usize,
) -> Result<Outcome> {
    let opts = &problem.options;
    let n = z.len();
    let mut model = WeightedResiduals {
        problem,
        transform,
        sqrt_weights,
        evaluations: evaluations_used,
    };
    let mut res = model.eval(&z)?;
    let mut cost = res.norm_squared();
    let mut lambda: f64 = -1.0;
    let mut nu = 2.0;
    let mut iterations = 0;

    let finish = |z: Vec<f64>, cost, iterations, evaluations, termination| Outcome {
        z,
        objective: cost,
        iterations,
        evaluations,
        termination,
    };

    loop {
        if model.evaluations >= opts.max_evals {
            return Ok(finish(
                z,
                cost,
                iterations,
                model.evaluations,
                Termination::MaxEvaluations,
            ));
        }
        iterations += 1;
        let jac = model.jacobian(&z)?;
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        if grad.amax() == 0.0 || cost == 0.0 {
            return Ok(finish(
                z,
                cost,
                iterations,
                model.evaluations,
                Termination::ZeroGradient,
            ));
        }
        let diag_max = jtj.diagonal().amax().max(f64::MIN_POSITIVE);
        let scale: DVector<f64> = jtj.diagonal().map(|d| d.max(1e-12 * diag_max));
        if lambda < 0.0 {
            lambda = 1e-3;
        }

        if !(jtj.iter().all(|v| v.is_finite()) && grad.iter().all(|v| v.is_finite())) {
            return Ok(finish(
                z,
                cost,
                iterations,
                model.evaluations,
                Termination::Stalled,
            ));
        }

        loop {
            if model.evaluations >= opts.max_evals {
                return Ok(finish(
                    z,
                    cost,
                    iterations,
                    model.evaluations,
                    Termination::MaxEvaluations,
                ));
            }
            if lambda.is_nan() || lambda > MAX_LAMBDA {
                return Ok(finish(
                    z,
                    cost,
                    iterations,
                    model.evaluations,
                    Termination::Stalled,
                ));
            }
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * scale[i];
            }
            let step = match damped.cholesky() {
                Some(chol) => {
                    // Long steps in the transformed space run into the flat
                    // tails of the logistic map.
                    let step = -chol.solve(&grad);
                    let longest = step.amax();
                    if longest > MAX_STEP {
                        step * (MAX_STEP / longest)
                    } else {
                        step
                    }
                }
                None => {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step.norm() <= opts.step_tol * (z_norm + opts.step_tol) {
                return Ok(finish(
                    z,
                    cost,
                    iterations,
                    model.evaluations,
                    Termination::StepSize,
                ));
            }

            let candidate: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let new_res = match model.eval(&candidate) {
                Ok(r) => r,
                Err(_) => {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            let new_cost = new_res.norm_squared();
            let predicted = -(2.0 * grad.dot(&step) + (&jtj * &step).dot(&step));
            let actual = cost - new_cost;
            let ratio = if predicted > 0.0 {
                actual / predicted
            } else {
                -1.0
            };

            if ratio > 0.0 {
                z = candidate;
                res = new_res;
                cost = new_cost;
                lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * ratio - 1.0).powi(3));
                nu = 2.0;
                let prev_cost = cost + actual;
                if actual <= opts.rel_tol * prev_cost && predicted <= opts.rel_tol * prev_cost {
                    return Ok(finish(
                        z,
                        cost,
                        iterations,
                        model.evaluations,
                        Termination::ObjectiveDecrease,
                    ));
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
        }
    }
}
