//! Spectral initialization, the preconditioned update and the training loop,
//! plus the unpreconditioned SGD baseline.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{diag, spd_factor, svd_sorted, Mat, RELATIVE_FLOOR};
use crate::losses::{
    empirical_objective, empirical_regularizer, expected_empirical_gradient_range, population_gradient,
    population_objective, GradTheta, NoiseMode,
};
use crate::manifold::{build_basis, project, project_from, LandscapeConstants, ManifoldBasis};
use crate::model::{Dataset, ProblemInstance, Theta};
use crate::rng::{self, tags};

/// Losses above this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Where each iteration's gradient comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Empirical gradient on all `n` samples.
    FullBatch,
    /// Fresh subset of `k` samples drawn without replacement each iteration;
    /// attention runs within the subset.
    Minibatch { k: usize },
    /// Average over `count` fresh datasets of size `n` from the instance.
    FreshBatches { count: usize },
    /// Exact population gradient; the preconditioner uses the true `Sigma`.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Spectral,
    /// Gaussian entries with standard deviation `scale`, drawn from the init stream.
    Random { scale: f64 },
    Explicit(Theta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub eta: f64,
    pub m: usize,
    pub oracle: OracleKind,
    pub init: Init,
    pub seed: u64,
    /// Record `l_pop` and `excess` (needs an instance).
    pub record_population: bool,
    /// Record the P-distance to the manifold every this many iterations
    /// (0 disables; needs an instance).
    pub dist_every: usize,
    /// Keep the minibatch indices of every iteration in the trace.
    pub log_batches: bool,
    /// Stop once the population excess drops below this value.
    pub early_stop_excess: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            eta: 0.01,
            m: 2000,
            oracle: OracleKind::Minibatch { k: 20 },
            init: Init::Spectral,
            seed: 0,
            record_population: true,
            dist_every: 0,
            log_batches: false,
            early_stop_excess: None,
        }
    }
}

impl OptConfig {
    pub fn validate(&self, n: usize, has_instance: bool) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        match self.oracle {
            OracleKind::Minibatch { k } if k == 0 || k > n => {
                return Err(Error::Config(format!("minibatch size must be in 1..={n}, got {k}")));
            }
            OracleKind::FreshBatches { count } if count == 0 => {
                return Err(Error::Config("fresh_batches needs at least one batch".into()));
            }
            OracleKind::FreshBatches { .. } | OracleKind::Population if !has_instance => {
                return Err(Error::Config("this oracle needs the generating instance".into()));
            }
            _ => {}
        }
        if (self.record_population || self.dist_every > 0 || self.early_stop_excess.is_some()) && !has_instance {
            return Err(Error::Config("population recording needs the generating instance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub l_hat: f64,
    pub q_hat: f64,
    pub l_pop: Option<f64>,
    pub excess: Option<f64>,
    pub dist_p: Option<f64>,
    /// Frobenius norm of the raw (unpreconditioned) gradient at `theta_t`.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Minibatch indices per iteration, when logging was requested.
    pub batches: Option<Vec<Vec<usize>>>,
}

impl Trace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace always has its initial row")
    }

    pub fn first(&self) -> &TraceRecord {
        &self.records[0]
    }
}

// ---------------------------------------------------------------------------
// Spectral initialization

#[derive(Debug, Clone)]
pub struct SpectralInit {
    pub theta: Theta,
    pub sigma_hat: Mat,
    pub m_hat: Mat,
    pub sigma_hat_inv: Mat,
}

/// `Sigma_hat = X^T X / n`, `M_hat = (Y^T X / n) Sigma_hat^{-1}` and the
/// balanced factorization of `M_hat Sigma_hat^{1/2}`.
pub fn spectral_init(data: &Dataset) -> Result<SpectralInit> {
    if data.n() < data.d() {
        return Err(Error::DegenerateCovariance { min_eig: 0.0, floor: 0.0 });
    }
    let sigma_hat = data.sample_covariance();
    let cross = data.y.tr_mul(&data.x) / data.n() as f64;
    spectral_from_moments(&sigma_hat, &cross, true)
}

/// Spectral initialization from given second moments. With
/// `cross_is_raw`, `m_or_cross` is `E[y x^T]` and is multiplied by
/// `Sigma^{-1}`; otherwise it is `M` itself.
pub fn spectral_from_moments(sigma_hat: &Mat, m_or_cross: &Mat, cross_is_raw: bool) -> Result<SpectralInit> {
    let (values, _) = crate::linalg::sym_eigen(sigma_hat);
    let lmax = values.last().copied().unwrap_or(0.0);
    let floor = RELATIVE_FLOOR * lmax.max(0.0);
    let lmin = values.first().copied().unwrap_or(0.0);
    if !(lmin > floor) {
        return Err(Error::DegenerateCovariance { min_eig: lmin, floor });
    }
    let factors = spd_factor(sigma_hat, floor)?;
    let m_hat = if cross_is_raw { m_or_cross * &factors.inv } else { m_or_cross.clone() };
    let (u, gamma, v) = svd_sorted(&(&m_hat * &factors.sqrt));
    let root = diag(&gamma.iter().map(|g| g.max(0.0).sqrt()).collect::<Vec<_>>());
    let a = &u * &root * &factors.inv_sqrt;
    let b = &factors.inv_sqrt * &v * &root * &factors.inv_sqrt;
    Ok(SpectralInit { theta: Theta { a, b }, sigma_hat: sigma_hat.clone(), m_hat, sigma_hat_inv: factors.inv })
}

// ---------------------------------------------------------------------------
// Update rule

/// `A - eta dA`, `B - eta Sigma_hat^{-1} dB`.
pub fn pgd_step(theta: &Theta, grad: &GradTheta, sigma_hat_inv: &Mat, eta: f64) -> Result<Theta> {
    let next = Theta { a: &theta.a - &grad.da * eta, b: &theta.b - sigma_hat_inv * &grad.db * eta };
    if !next.is_finite() {
        return Err(Error::StepBlowUp { iteration: 0, reason: "non-finite parameters after update".into() });
    }
    Ok(next)
}

fn plain_step(theta: &Theta, grad: &GradTheta, eta: f64) -> Result<Theta> {
    let next = Theta { a: &theta.a - &grad.da * eta, b: &theta.b - &grad.db * eta };
    if !next.is_finite() {
        return Err(Error::StepBlowUp { iteration: 0, reason: "non-finite parameters after update".into() });
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Gradient oracles

/// Output of one oracle call at `theta_t`.
#[derive(Debug, Clone)]
pub struct OracleOutput {
    pub l_hat: f64,
    pub r_hat: f64,
    pub grad: GradTheta,
}

pub trait GradientOracle {
    /// Loss, regularizer and gradient at `theta` for iteration `t`.
    fn evaluate(&mut self, theta: &Theta, t: usize) -> Result<OracleOutput>;

    /// Indices used by the most recent call, if the oracle samples a subset.
    fn last_batch(&self) -> Option<&[usize]> {
        None
    }
}

struct FullBatchOracle<'a> {
    data: &'a Dataset,
    sigma_hat: &'a Mat,
    regularize: bool,
}

impl GradientOracle for FullBatchOracle<'_> {
    fn evaluate(&mut self, theta: &Theta, _t: usize) -> Result<OracleOutput> {
        let e = empirical_objective(theta, self.data, self.sigma_hat, self.regularize);
        let r_hat = if self.regularize { e.r_hat } else { empirical_regularizer(theta, self.sigma_hat) };
        Ok(OracleOutput { l_hat: e.l_hat, r_hat, grad: e.grad })
    }
}

/// Without-replacement minibatches; iteration `t` draws from its own stream
/// so runs with the same seed see the same index sequence.
struct MinibatchOracle<'a> {
    data: &'a Dataset,
    sigma_hat: &'a Mat,
    regularize: bool,
    k: usize,
    seed: u64,
    last: Vec<usize>,
}

pub fn minibatch_indices(seed: u64, t: usize, n: usize, k: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, tags::MINIBATCH, t as u64);
    index::sample(&mut rng, n, k).into_vec()
}

impl GradientOracle for MinibatchOracle<'_> {
    fn evaluate(&mut self, theta: &Theta, t: usize) -> Result<OracleOutput> {
        self.last = minibatch_indices(self.seed, t, self.data.n(), self.k);
        let batch = self.data.subset(&self.last);
        let e = empirical_objective(theta, &batch, self.sigma_hat, self.regularize);
        let r_hat = if self.regularize { e.r_hat } else { empirical_regularizer(theta, self.sigma_hat) };
        Ok(OracleOutput { l_hat: e.l_hat, r_hat, grad: e.grad })
    }

    fn last_batch(&self) -> Option<&[usize]> {
        Some(&self.last)
    }
}

/// Monte-Carlo expectation over fresh batches. The reported `l_hat` is on
/// the fixed training sample.
struct FreshOracle<'a> {
    data: &'a Dataset,
    instance: &'a ProblemInstance,
    sigma_hat: &'a Mat,
    count: usize,
    seed: u64,
}

impl GradientOracle for FreshOracle<'_> {
    fn evaluate(&mut self, theta: &Theta, t: usize) -> Result<OracleOutput> {
        let first = (t * self.count) as u64;
        let est = expected_empirical_gradient_range(
            theta,
            self.instance,
            self.data.n(),
            first,
            self.count,
            self.seed,
            NoiseMode::Sampled,
        );
        let e = empirical_objective(theta, self.data, self.sigma_hat, true);
        Ok(OracleOutput { l_hat: e.l_hat, r_hat: e.r_hat, grad: est.mean })
    }
}

struct PopulationOracle<'a> {
    instance: &'a ProblemInstance,
}

impl GradientOracle for PopulationOracle<'_> {
    fn evaluate(&mut self, theta: &Theta, _t: usize) -> Result<OracleOutput> {
        let rep = population_objective(theta, self.instance)?;
        Ok(OracleOutput { l_hat: rep.l_pop, r_hat: rep.r_pop, grad: population_gradient(theta, self.instance) })
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// Population bookkeeping shared by the loop.
struct Monitor<'a> {
    instance: &'a ProblemInstance,
    record_population: bool,
    dist_every: usize,
    basis: Option<(ManifoldBasis, LandscapeConstants)>,
    last_j: Option<Mat>,
}

impl<'a> Monitor<'a> {
    fn new(instance: &'a ProblemInstance, record_population: bool, dist_every: usize) -> Result<Self> {
        let basis = if dist_every > 0 { Some(build_basis(instance)?) } else { None };
        Ok(Monitor { instance, record_population, dist_every, basis, last_j: None })
    }

    fn population(&self, theta: &Theta) -> Result<(Option<f64>, Option<f64>)> {
        if !self.record_population {
            return Ok((None, None));
        }
        let rep = population_objective(theta, self.instance)?;
        Ok((Some(rep.l_pop), Some(rep.excess)))
    }

    fn distance(&mut self, theta: &Theta, t: usize, last: bool) -> Result<Option<f64>> {
        let Some((basis, _)) = &self.basis else { return Ok(None) };
        if t % self.dist_every != 0 && !last {
            return Ok(None);
        }
        let proj = match &self.last_j {
            Some(j) => project_from(basis, theta, j)?,
            None => project(basis, theta)?,
        };
        self.last_j = Some(proj.j_star.clone());
        Ok(Some(proj.dist_p))
    }
}

/// How the loop turns a gradient into a step.
#[derive(Clone, Copy)]
enum Update<'a> {
    Preconditioned(&'a Mat),
    Plain,
}

/// Core loop: row `t` describes `theta_t`; steps are taken for `t < m`.
pub fn run_with_oracle(
    config: &OptConfig,
    oracle: &mut dyn GradientOracle,
    theta0: Theta,
    sigma_hat_inv: Option<&Mat>,
    instance: Option<&ProblemInstance>,
) -> Result<(Theta, Trace)> {
    let update = match sigma_hat_inv {
        Some(inv) => Update::Preconditioned(inv),
        None => Update::Plain,
    };
    optimize(config, oracle, theta0, update, instance)
}

fn optimize(
    config: &OptConfig,
    oracle: &mut dyn GradientOracle,
    theta0: Theta,
    update: Update,
    instance: Option<&ProblemInstance>,
) -> Result<(Theta, Trace)> {
    let start = Instant::now();
    let mut monitor = match instance {
        Some(inst) => Some(Monitor::new(inst, config.record_population, config.dist_every)?),
        None => None,
    };
    let mut theta = theta0;
    let mut trace = Trace { records: Vec::with_capacity(config.m + 1), batches: config.log_batches.then(Vec::new) };
    for t in 0..=config.m {
        let out = oracle.evaluate(&theta, t).map_err(|e| at_iteration(e, t))?;
        if let (Some(log), Some(batch)) = (trace.batches.as_mut(), oracle.last_batch()) {
            log.push(batch.to_vec());
        }
        let q_hat = out.l_hat + out.r_hat;
        let grad_norm = out.grad.norm();
        if !(q_hat.is_finite() && grad_norm.is_finite()) || q_hat > DIVERGENCE_LIMIT {
            return Err(Error::StepBlowUp { iteration: t, reason: format!("objective {q_hat:.3e}, gradient norm {grad_norm:.3e}") });
        }
        let (l_pop, excess, dist_p) = match monitor.as_mut() {
            Some(mon) => {
                let (l_pop, excess) = mon.population(&theta).map_err(|e| at_iteration(e, t))?;
                let dist = mon.distance(&theta, t, t == config.m).map_err(|e| at_iteration(e, t))?;
                (l_pop, excess, dist)
            }
            None => (None, None, None),
        };
        if l_pop.is_some_and(|l| !l.is_finite() || l > DIVERGENCE_LIMIT) {
            return Err(Error::StepBlowUp { iteration: t, reason: format!("population loss {:?}", l_pop) });
        }
        trace.records.push(TraceRecord {
            t,
            l_hat: out.l_hat,
            q_hat,
            l_pop,
            excess,
            dist_p,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let stop = matches!((config.early_stop_excess, excess), (Some(tol), Some(ex)) if ex <= tol);
        if t == config.m || stop {
            break;
        }
        theta = match update {
            Update::Preconditioned(inv) => pgd_step(&theta, &out.grad, inv, config.eta),
            Update::Plain => plain_step(&theta, &out.grad, config.eta),
        }
        .map_err(|e| at_iteration(e, t + 1))?;
    }
    Ok((theta, trace))
}

fn at_iteration(err: Error, t: usize) -> Error {
    match err {
        Error::StepBlowUp { reason, .. } => Error::StepBlowUp { iteration: t, reason },
        other => other,
    }
}

fn initial_theta(init: &Init, seed: u64, p: usize, d: usize, spectral: impl FnOnce() -> Theta) -> Theta {
    match init {
        Init::Spectral => spectral(),
        Init::Random { scale } => {
            let mut rng = rng::stream(seed, tags::INIT, 0);
            Theta::random(p, d, *scale, &mut rng)
        }
        Init::Explicit(theta) => theta.clone(),
    }
}

/// Preconditioned gradient descent on `Q_hat = L_hat + R_hat`.
///
/// `Sigma_hat` and its inverse come from the full sample and stay fixed;
/// with the population oracle they are the true `Sigma`, and spectral
/// initialization uses the exact `(Sigma, M)`.
pub fn run(config: &OptConfig, data: &Dataset, instance: Option<&ProblemInstance>) -> Result<(Theta, Trace)> {
    config.validate(data.n(), instance.is_some())?;
    let (p, d) = (data.p(), data.d());
    let spectral = match config.oracle {
        OracleKind::Population => {
            let inst = instance.expect("validated");
            spectral_from_moments(&inst.sigma, &inst.m, false)?
        }
        _ => spectral_init(data)?,
    };
    let theta0 = initial_theta(&config.init, config.seed, p, d, || spectral.theta.clone());
    let sigma_hat = &spectral.sigma_hat;
    let update = Update::Preconditioned(&spectral.sigma_hat_inv);
    match config.oracle {
        OracleKind::FullBatch => {
            let mut o = FullBatchOracle { data, sigma_hat, regularize: true };
            optimize(config, &mut o, theta0, update, instance)
        }
        OracleKind::Minibatch { k } => {
            let mut o = MinibatchOracle { data, sigma_hat, regularize: true, k, seed: config.seed, last: Vec::new() };
            optimize(config, &mut o, theta0, update, instance)
        }
        OracleKind::FreshBatches { count } => {
            let inst = instance.expect("validated");
            let mut o = FreshOracle { data, instance: inst, sigma_hat, count, seed: config.seed };
            optimize(config, &mut o, theta0, update, instance)
        }
        OracleKind::Population => {
            let mut o = PopulationOracle { instance: instance.expect("validated") };
            optimize(config, &mut o, theta0, update, instance)
        }
    }
}

/// Plain SGD on `L_hat` alone: no preconditioner, no regularizer. Unless an
/// explicit start is given, the init is standard normal from the init
/// stream, so a paired [`run`] with `Init::Random { scale: 1.0 }` and the
/// same seed starts from the same point. Minibatch indices match a paired
/// run with the same seed.
pub fn sgd_baseline(config: &OptConfig, data: &Dataset, instance: Option<&ProblemInstance>) -> Result<(Theta, Trace)> {
    config.validate(data.n(), instance.is_some())?;
    let (p, d) = (data.p(), data.d());
    let init = match &config.init {
        Init::Explicit(theta) => Init::Explicit(theta.clone()),
        _ => Init::Random { scale: 1.0 },
    };
    let theta0 = initial_theta(&init, config.seed, p, d, || unreachable!());
    let sigma_hat = data.sample_covariance();
    match config.oracle {
        OracleKind::FullBatch => {
            let mut o = FullBatchOracle { data, sigma_hat: &sigma_hat, regularize: false };
            optimize(config, &mut o, theta0, Update::Plain, instance)
        }
        OracleKind::Minibatch { k } => {
            let mut o = MinibatchOracle {
                data,
                sigma_hat: &sigma_hat,
                regularize: false,
                k,
                seed: config.seed,
                last: Vec::new(),
            };
            optimize(config, &mut o, theta0, Update::Plain, instance)
        }
        _ => Err(Error::Config("the SGD baseline supports full_batch and minibatch oracles".into())),
    }
}
