//! JSON experiment configuration. Every field has a default, so `{}` is a
//! valid file and reproduces the desk-scale appendix setting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::NoiseMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub p: usize,
    pub d: usize,
    pub n: usize,
    /// Minibatch size.
    pub k: usize,
    pub eta: f64,
    /// Iteration budget.
    pub m: usize,
    pub trials: usize,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub appendix: AppendixConfig,
    pub scaling: ScalingConfig,
    pub landscape: LandscapeConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            p: 20,
            d: 10,
            n: 500,
            k: 20,
            eta: 0.01,
            m: 2000,
            trials: 5,
            seed: 0,
            output_dir: PathBuf::from("out"),
            appendix: AppendixConfig::default(),
            scaling: ScalingConfig::default(),
            landscape: LandscapeConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixConfig {
    /// Standard deviation of the random initialization.
    pub init_scale: f64,
    /// Record the distance to the manifold every this many iterations (0 = off).
    pub dist_every: usize,
    /// `|L(theta_0) - L*| / L*` bound for the spectral start.
    pub spectral_init_rel: f64,
    /// `|L(theta_m) - L*| / L*` bound for the spectral run.
    pub final_rel: f64,
    /// Lower bound on `(L(theta_0) - L*) / L*` for the random start.
    pub random_init_factor: f64,
    /// Bound on the final excess of the preconditioned run from random init, relative to `L*`.
    pub random_final_rel: f64,
    /// Lower bound on SGD final excess over the preconditioned final excess.
    pub sgd_ratio: f64,
    /// Stop a run once its population excess falls below this value.
    pub early_stop_excess: Option<f64>,
}

impl Default for AppendixConfig {
    fn default() -> Self {
        AppendixConfig {
            init_scale: 1.0,
            dist_every: 0,
            spectral_init_rel: 0.05,
            final_rel: 0.01,
            random_init_factor: 100.0,
            random_final_rel: 0.01,
            sgd_ratio: 10.0,
            early_stop_excess: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub p: usize,
    pub d: usize,
    pub n_grid: Vec<usize>,
    /// Fresh batches per grid point.
    pub batches: usize,
    pub noise: NoiseMode,
    /// Distance of the evaluation point from the manifold, as a fraction of
    /// `min(eps0, eps1)` (0 puts it on the manifold).
    pub offset_fraction: f64,
    pub slope_band: [f64; 2],
    /// Output and input dimensions of the instance for the optimization-error curve.
    pub opt_p: usize,
    pub opt_d: usize,
    /// Iterations for the optimization-error curve.
    pub opt_m: usize,
    /// Step for the optimization-error curve; `None` uses `1 / K1`.
    pub opt_eta: Option<f64>,
    /// Start distance for the optimization-error curve, as a fraction of `eps0`.
    pub opt_start_fraction: f64,
    pub r2_min: f64,
    /// Allowed excess of the measured contraction over `mu*` at `eta*`.
    pub mu_slack: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            p: 4,
            d: 2,
            n_grid: vec![100, 200, 400, 800, 1600],
            batches: 256,
            noise: NoiseMode::Marginalized,
            offset_fraction: 0.0,
            slope_band: [-2.6, -1.4],
            opt_p: 3,
            opt_d: 1,
            opt_m: 300,
            opt_eta: None,
            opt_start_fraction: 0.5,
            r2_min: 0.99,
            mu_slack: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub p: usize,
    pub d: usize,
    pub instances: usize,
    pub samples: usize,
    /// Sampling radius as a fraction of `eps0`.
    pub radius_fraction: f64,
    /// Random scalar instances for the two-point projection check.
    pub scalar_checks: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig { p: 6, d: 3, instances: 5, samples: 200, radius_fraction: 0.9, scalar_checks: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub p: usize,
    pub d: usize,
    pub n: usize,
    pub points: usize,
    pub h: f64,
    pub h_sweep: Vec<f64>,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { p: 3, d: 2, n: 8, points: 100, h: 1e-5, h_sweep: vec![1e-4, 1e-5, 1e-6], threshold: 1e-5 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.d == 0 || self.p < self.d || self.n < self.d {
            return fail(format!("need p >= d >= 1 and n >= d, got p={} d={} n={}", self.p, self.d, self.n));
        }
        if self.k == 0 || self.k > self.n {
            return fail(format!("minibatch size must be in 1..={}, got {}", self.n, self.k));
        }
        if !(self.eta > 0.0) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        let s = &self.scaling;
        if s.n_grid.len() < 4 {
            return fail(format!("scaling n_grid needs at least 4 points, got {}", s.n_grid.len()));
        }
        if s.n_grid.iter().any(|&n| n < s.d) || s.d == 0 || s.p < s.d {
            return fail("scaling grid and dimensions must satisfy p >= d >= 1 and n >= d".into());
        }
        if s.opt_d == 0 || s.opt_p < s.opt_d {
            return fail("optimization-curve dimensions must satisfy p >= d >= 1".into());
        }
        if s.batches < 2 {
            return fail("scaling needs at least 2 batches for standard errors".into());
        }
        let l = &self.landscape;
        if l.instances == 0 || l.samples == 0 || l.d == 0 || l.p < l.d {
            return fail("landscape needs at least one instance and sample, and p >= d >= 1".into());
        }
        let g = &self.gradcheck;
        if g.points == 0 || g.d == 0 || g.p < g.d || g.n == 0 || g.h_sweep.is_empty() || !(g.h > 0.0) {
            return fail("gradcheck needs points >= 1, p >= d >= 1, n >= 1, h > 0 and a non-empty sweep".into());
        }
        Ok(())
    }
}
