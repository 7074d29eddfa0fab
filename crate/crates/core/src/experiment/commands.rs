//! The four experiment subcommands. Each writes its CSVs, charts and a
//! `summary.json` into the output directory and returns the summary.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::ExperimentConfig;
use super::output::{write_json, write_series, write_table, write_traces, SeriesRow};
use super::stats::{geometric_fit, log_log_fit, median, iqr, LinearFit};
use super::svg::{line_chart, Series};
use crate::error::Result;
use crate::fd::{central_difference, max_relative_error};
use crate::linalg::{random_orthogonal, Mat};
use crate::losses::{
    empirical_gradient, empirical_loss, empirical_regularizer, gradient_discrepancy, population_gradient,
    population_loss, population_objective, population_regularizer,
};
use crate::manifold::{
    assumption_check, build_basis, landscape_check_with, manifold_point, p_norm, project, sample_in_ball,
    LandscapeReport, ManifoldBasis,
};
use crate::model::{sample_dataset, sample_instance, Dataset, Dims, ProblemInstance, Theta};
use crate::optimizer::{run, sgd_baseline, Init, OptConfig, OracleKind, Trace};
use crate::rng::{self, tags};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    /// `"<="`, `">="` or `"in"`.
    pub comparison: String,
    pub threshold: Vec<f64>,
    pub passed: bool,
}

impl Criterion {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Criterion { name: name.into(), value, comparison: "<=".into(), threshold: vec![limit], passed: value <= limit }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Criterion { name: name.into(), value, comparison: ">=".into(), threshold: vec![limit], passed: value >= limit }
    }

    pub fn within(name: &str, value: f64, band: [f64; 2]) -> Self {
        Criterion {
            name: name.into(),
            value,
            comparison: "in".into(),
            threshold: band.to_vec(),
            passed: value >= band[0] && value <= band[1],
        }
    }

    pub fn line(&self) -> String {
        let bound = match self.threshold.as_slice() {
            [a, b] => format!("[{a}, {b}]"),
            [a] => format!("{a:e}"),
            _ => String::new(),
        };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {}: {:.6e} {} {bound}", self.name, self.value, self.comparison)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub command: String,
    pub seed: u64,
    pub criteria: Vec<Criterion>,
    pub details: serde_json::Value,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

/// Runs `f` on a pool capped by `ATTN_THREADS` when it is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var("ATTN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&t| t > 0);
    match threads.and_then(|t| rayon::ThreadPoolBuilder::new().num_threads(t).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

fn trial_seed(master: u64, trial: usize) -> u64 {
    rng::derive_seed(master, "trial", trial as u64)
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn population_curve(trace: &Trace) -> Vec<(f64, f64)> {
    trace.records.iter().filter_map(|r| r.l_pop.map(|l| (r.t as f64, l))).collect()
}

fn fit_json(fit: &Option<LinearFit>) -> serde_json::Value {
    serde_json::to_value(fit).unwrap_or(serde_json::Value::Null)
}

// ---------------------------------------------------------------------------
// Appendix reproduction

struct AppendixTrial {
    seed: u64,
    l_star: f64,
    spectral: Trace,
    sgd: Trace,
    random: Trace,
}

fn appendix_trial(config: &ExperimentConfig, trial: usize) -> Result<AppendixTrial> {
    let seed = trial_seed(config.seed, trial);
    let inst = sample_instance(Dims::new(config.p, config.d, config.n)?, seed);
    let data = sample_dataset(&inst, config.n, seed);
    let mut init_rng = rng::stream(seed, tags::INIT, 0);
    let random_start = Theta::random(config.p, config.d, config.appendix.init_scale, &mut init_rng);
    let base = OptConfig {
        eta: config.eta,
        m: config.m,
        oracle: OracleKind::Minibatch { k: config.k },
        init: Init::Spectral,
        seed,
        record_population: true,
        dist_every: config.appendix.dist_every,
        log_batches: false,
        early_stop_excess: config.appendix.early_stop_excess,
    };
    let (_, spectral) = run(&base, &data, Some(&inst))?;
    let from_random = OptConfig { init: Init::Explicit(random_start), ..base };
    let (_, sgd) = sgd_baseline(&from_random, &data, Some(&inst))?;
    let (_, random) = run(&from_random, &data, Some(&inst))?;
    Ok(AppendixTrial { seed, l_star: inst.irreducible_loss(), spectral, sgd, random })
}

fn excess_of(trace: &Trace, first: bool) -> f64 {
    let r = if first { trace.first() } else { trace.last() };
    r.excess.unwrap_or(f64::NAN)
}

/// Spectral-init preconditioned descent against random-init SGD, and the
/// preconditioned method from the same random start.
pub fn reproduce_appendix_a(config: &ExperimentConfig) -> Result<Summary> {
    config.validate()?;
    let out = &config.output_dir;
    prepare(out)?;
    let trials: Vec<AppendixTrial> = with_thread_cap(|| {
        (0..config.trials).into_par_iter().map(|i| appendix_trial(config, i)).collect::<Result<Vec<_>>>()
    })?;

    let mut exp1 = Vec::new();
    let mut exp2 = Vec::new();
    for (i, t) in trials.iter().enumerate() {
        exp1.push((format!("trial{i}/pgd_spectral"), &t.spectral));
        exp1.push((format!("trial{i}/sgd"), &t.sgd));
        exp2.push((format!("trial{i}/pgd_random"), &t.random));
        exp2.push((format!("trial{i}/sgd"), &t.sgd));
    }
    write_traces(&out.join("appendix_a_experiment1.csv"), &exp1)?;
    write_traces(&out.join("appendix_a_experiment2.csv"), &exp2)?;

    let t0 = &trials[0];
    let fig1 = line_chart(
        "Spectral init + preconditioned GD vs random-init SGD (trial 0)",
        "iteration",
        "population loss",
        &[
            Series { name: "preconditioned", points: population_curve(&t0.spectral) },
            Series { name: "SGD", points: population_curve(&t0.sgd) },
        ],
        true,
    );
    std::fs::write(out.join("figure1.svg"), fig1)?;
    let fig2 = line_chart(
        "Same random init (trial 0)",
        "iteration",
        "population loss",
        &[
            Series { name: "preconditioned", points: population_curve(&t0.random) },
            Series { name: "SGD", points: population_curve(&t0.sgd) },
        ],
        true,
    );
    std::fs::write(out.join("figure2.svg"), fig2)?;

    let rel = |v: f64, l: f64| v / l;
    let spectral_init: Vec<f64> = trials.iter().map(|t| rel(excess_of(&t.spectral, true), t.l_star)).collect();
    let spectral_final: Vec<f64> = trials.iter().map(|t| rel(excess_of(&t.spectral, false), t.l_star)).collect();
    let sgd_init: Vec<f64> = trials.iter().map(|t| rel(excess_of(&t.sgd, true), t.l_star)).collect();
    let sgd_final: Vec<f64> = trials.iter().map(|t| excess_of(&t.sgd, false)).collect();
    let random_final: Vec<f64> = trials.iter().map(|t| rel(excess_of(&t.random, false), t.l_star)).collect();
    let ratio: Vec<f64> = trials.iter().map(|t| excess_of(&t.sgd, false) / excess_of(&t.spectral, false)).collect();

    let a = &config.appendix;
    let criteria = vec![
        Criterion::at_most("spectral init excess / L*", median(&spectral_init), a.spectral_init_rel),
        Criterion::at_most("preconditioned final excess / L*", median(&spectral_final), a.final_rel),
        Criterion::at_least("SGD initial excess / L*", median(&sgd_init), a.random_init_factor),
        Criterion::at_most("preconditioned from random init final excess / L*", median(&random_final), a.random_final_rel),
        Criterion::at_least("SGD final excess / preconditioned final excess", median(&ratio), a.sgd_ratio),
    ];
    let details = json!({
        "trial_seeds": trials.iter().map(|t| t.seed).collect::<Vec<_>>(),
        "l_star": trials.iter().map(|t| t.l_star).collect::<Vec<_>>(),
        "spectral_init_rel_excess": spectral_init,
        "spectral_final_rel_excess": spectral_final,
        "spectral_final_rel_excess_iqr": iqr(&spectral_final),
        "sgd_init_rel_excess": sgd_init,
        "sgd_final_excess": sgd_final,
        "random_init_final_rel_excess": random_final,
        "random_init_final_rel_excess_iqr": iqr(&random_final),
        "sgd_over_preconditioned": ratio,
    });
    finish(out, "reproduce-appendix-a", config.seed, criteria, details)
}

fn finish(out: &Path, command: &str, seed: u64, criteria: Vec<Criterion>, details: serde_json::Value) -> Result<Summary> {
    let summary = Summary { command: command.into(), seed, criteria, details };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Scaling

/// Moves `centre` by exactly `radius` in P-norm along a random direction.
fn offset_point(basis: &ManifoldBasis, centre: &Theta, radius: f64, rng: &mut rng::StreamRng) -> Theta {
    if radius <= 0.0 {
        return centre.clone();
    }
    let probe = sample_in_ball(basis, centre, 1.0, rng);
    let delta = &probe - centre;
    centre + &(&delta * (radius / p_norm(&delta, basis)))
}

/// Bias of the gradient oracle against `n`, and the optimization error
/// against iterations under the exact population gradient.
pub fn scaling(config: &ExperimentConfig) -> Result<Summary> {
    config.validate()?;
    let out = &config.output_dir;
    prepare(out)?;
    let s = &config.scaling;
    let inst = sample_instance(Dims::new(s.p, s.d, s.d)?, config.seed);
    let (basis, constants) = build_basis(&inst)?;
    let centre = manifold_point(&basis, &Mat::identity(s.d, s.d))?;
    let mut rng = rng::stream(config.seed, "scaling-point", 0);
    let theta = offset_point(&basis, &centre, s.offset_fraction * constants.eps_bar(), &mut rng);

    let reports = with_thread_cap(|| {
        s.n_grid
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let seed = rng::derive_seed(config.seed, "scaling-n", i as u64);
                gradient_discrepancy(&theta, &inst, n, s.batches, seed, s.noise)
            })
            .collect::<Vec<_>>()
    });
    let rows: Vec<SeriesRow> = s
        .n_grid
        .iter()
        .zip(&reports)
        .map(|(&n, r)| SeriesRow { x: n as f64, value: r.value, stderr: Some(r.stderr), trials: r.batches })
        .collect();
    write_series(&out.join("scaling_n.csv"), &rows)?;
    let ns: Vec<f64> = s.n_grid.iter().map(|&n| n as f64).collect();
    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    let raw: Vec<f64> = reports.iter().map(|r| r.raw).collect();
    let fit = log_log_fit(&ns, &values);
    let raw_fit = log_log_fit(&ns, &raw);
    std::fs::write(
        out.join("scaling_n.svg"),
        line_chart(
            "Oracle bias vs sample size",
            "log10 n",
            "||E grad Q_hat - grad Q||^2",
            &[
                Series { name: "debiased", points: ns.iter().zip(&values).map(|(n, v)| (n.log10(), *v)).collect() },
                Series { name: "raw", points: ns.iter().zip(&raw).map(|(n, v)| (n.log10(), *v)).collect() },
            ],
            true,
        ),
    )?;

    // optimization error under exact population gradients
    let opt_inst = sample_instance(Dims::new(s.opt_p, s.opt_d, s.opt_d)?, config.seed);
    let (opt_basis, opt_constants) = build_basis(&opt_inst)?;
    let opt_centre = manifold_point(&opt_basis, &Mat::identity(s.opt_d, s.opt_d))?;
    let mut start_rng = rng::stream(config.seed, "scaling-start", 0);
    let start = offset_point(&opt_basis, &opt_centre, s.opt_start_fraction * opt_constants.eps0, &mut start_rng);
    let placeholder = sample_dataset(&opt_inst, s.opt_d, config.seed);
    let eta = s.opt_eta.unwrap_or(1.0 / opt_constants.k1);
    let opt = |eta: f64| -> Result<Trace> {
        let cfg = OptConfig {
            eta,
            m: s.opt_m,
            oracle: OracleKind::Population,
            init: Init::Explicit(start.clone()),
            seed: config.seed,
            record_population: true,
            dist_every: 1,
            log_batches: false,
            early_stop_excess: None,
        };
        Ok(run(&cfg, &placeholder, Some(&opt_inst))?.1)
    };
    let trace = opt(eta)?;
    let star_trace = opt(opt_constants.eta_star)?;
    let m_rows: Vec<SeriesRow> = trace
        .records
        .iter()
        .map(|r| SeriesRow { x: r.t as f64, value: r.excess.unwrap_or(f64::NAN), stderr: None, trials: 1 })
        .collect();
    write_series(&out.join("scaling_m.csv"), &m_rows)?;
    let phi_rows: Vec<SeriesRow> = star_trace
        .records
        .iter()
        .map(|r| SeriesRow { x: r.t as f64, value: r.dist_p.map_or(f64::NAN, |d| d * d), stderr: None, trials: 1 })
        .collect();
    write_series(&out.join("scaling_m_eta_star.csv"), &phi_rows)?;
    std::fs::write(
        out.join("scaling_m.svg"),
        line_chart(
            "Excess loss under exact population gradients",
            "iteration",
            "L - L*",
            &[Series { name: "excess", points: m_rows.iter().map(|r| (r.x, r.value)).collect() }],
            true,
        ),
    )?;

    let (mu_emp, r2, window) = excess_rate(&trace, opt_constants.eps0);
    let (mu_star_emp, star_window) = contraction_rate(&star_trace, opt_constants.eps0);
    let criteria = vec![
        Criterion::at_most("evaluation point P-distance / min(eps0, eps1)", reports[0].dist_p.unwrap_or(f64::NAN) / constants.eps_bar(), 1.0),
        Criterion::within("oracle bias log-log slope", fit.map_or(f64::NAN, |f| f.slope), s.slope_band),
        Criterion::at_least("log-excess linear fit R^2", r2, s.r2_min),
        Criterion::at_most("fitted excess ratio per step", mu_emp, 1.0),
        Criterion::at_most("contraction of dist_p^2 at eta* minus mu*", mu_star_emp - opt_constants.mu_star, s.mu_slack),
    ];
    let details = json!({
        "instance": inst,
        "constants": constants,
        "eps_bar": constants.eps_bar(),
        "noise": s.noise,
        "reports": reports,
        "fit": fit_json(&fit),
        "raw_fit": fit_json(&raw_fit),
        "opt_instance": opt_inst,
        "opt_constants": opt_constants,
        "opt_eta": eta,
        "opt_window": window,
        "mu_emp": mu_emp,
        "r2": r2,
        "eta_star": opt_constants.eta_star,
        "mu_star": opt_constants.mu_star,
        "mu_emp_at_eta_star": mu_star_emp,
        "eta_star_window": star_window,
    });
    finish(out, "scaling", config.seed, criteria, details)
}

/// Per-step excess ratio and R^2 over iterations inside the `eps0` ball,
/// stopping once the excess reaches `1e-12` of its starting value.
pub fn excess_rate(trace: &Trace, eps0: f64) -> (f64, f64, usize) {
    let e0 = trace.first().excess.unwrap_or(f64::NAN);
    let pts: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter(|r| r.dist_p.is_some_and(|d| d < eps0))
        .filter_map(|r| r.excess.map(|e| (r.t as f64, e)))
        .take_while(|&(_, e)| e > 1e-12 * e0)
        .collect();
    let (t, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    match geometric_fit(&t, &y) {
        Some((ratio, fit)) => (ratio, fit.r2, t.len()),
        None => (f64::NAN, f64::NAN, t.len()),
    }
}

/// Per-step ratio of `dist_p^2` inside the `eps0` ball.
pub fn contraction_rate(trace: &Trace, eps0: f64) -> (f64, usize) {
    let first = trace.first().dist_p.unwrap_or(f64::NAN).powi(2);
    let pts: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter_map(|r| r.dist_p.map(|d| (r.t as f64, d)))
        .filter(|&(_, d)| d < eps0)
        .map(|(t, d)| (t, d * d))
        .take_while(|&(_, phi)| phi > 1e-20 * first)
        .collect();
    let (t, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    (geometric_fit(&t, &y).map_or(f64::NAN, |(r, _)| r), t.len())
}

// ---------------------------------------------------------------------------
// Landscape

#[derive(Debug, Clone, Serialize)]
struct Violation {
    instance_index: usize,
    sample: usize,
    instance: ProblemInstance,
    theta: Theta,
    report: LandscapeReport,
}

struct InstanceOutcome {
    index: usize,
    skipped: bool,
    rows: Vec<Vec<String>>,
    violations: Vec<Violation>,
    out_of_ball_failures: usize,
    max_symmetry: f64,
    max_q_rel: f64,
    max_grad_rel: f64,
    on_manifold_ok: bool,
}

fn landscape_instance(config: &ExperimentConfig, index: usize) -> Result<InstanceOutcome> {
    let l = &config.landscape;
    let seed = rng::derive_seed(config.seed, "landscape-instance", index as u64);
    let inst = sample_instance(Dims::new(l.p, l.d, l.d)?, seed);
    let mut outcome = InstanceOutcome {
        index,
        skipped: false,
        rows: Vec::new(),
        violations: Vec::new(),
        out_of_ball_failures: 0,
        max_symmetry: 0.0,
        max_q_rel: 0.0,
        max_grad_rel: 0.0,
        on_manifold_ok: true,
    };
    let check = assumption_check(&inst);
    if !(check.a1 && check.a2) {
        outcome.skipped = true;
        return Ok(outcome);
    }
    let (basis, constants) = build_basis(&inst)?;
    let l_star = inst.irreducible_loss();
    let scale = inst.m_sigma_half().norm();
    let mut rng = rng::stream(config.seed, tags::LANDSCAPE, index as u64);
    for sample in 0..l.samples {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let j = random_orthogonal(&mut rng, l.d, Some(sign));
        let centre = manifold_point(&basis, &j)?;
        if sample < 5 {
            let q = population_objective(&centre, &inst)?;
            outcome.max_q_rel = outcome.max_q_rel.max((q.q_pop - l_star).abs() / l_star);
            outcome.max_grad_rel = outcome.max_grad_rel.max(population_gradient(&centre, &inst).norm() / scale);
            if sample == 0 {
                let on = landscape_check_with(&centre, &inst, &basis, &constants)?;
                outcome.on_manifold_ok = on.holds();
            }
        }
        let theta = sample_in_ball(&basis, &centre, l.radius_fraction * constants.eps0, &mut rng);
        let rep = landscape_check_with(&theta, &inst, &basis, &constants)?;
        outcome.max_symmetry = outcome.max_symmetry.max(rep.relative_symmetry_residual);
        let holds = rep.holds();
        outcome.rows.push(vec![
            index.to_string(),
            sample.to_string(),
            format!("{:e}", rep.dist_p),
            rep.in_ball.to_string(),
            format!("{:e}", rep.convexity_margin()),
            format!("{:e}", rep.smoothness_margin()),
            format!("{:e}", rep.descent_margin()),
            format!("{:e}", rep.relative_symmetry_residual),
            holds.to_string(),
        ]);
        if !holds {
            if rep.in_ball {
                outcome.violations.push(Violation { instance_index: index, sample, instance: inst.clone(), theta, report: rep });
            } else {
                outcome.out_of_ball_failures += 1;
            }
        }
    }
    Ok(outcome)
}

/// Distance to the two-point manifold at `d = 1` by enumeration.
fn scalar_projection_mismatches(config: &ExperimentConfig) -> Result<(usize, f64)> {
    let mut rng = rng::stream(config.seed, "landscape-scalar", 0);
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..config.landscape.scalar_checks {
        let p = rng.random_range(1..=3usize);
        let m = Mat::from_fn(p, 1, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        let sigma = Mat::from_element(1, 1, rng.random_range(0.05..1.0));
        let inst = ProblemInstance::new(m, sigma, Mat::identity(p, p))?;
        let Ok((basis, _)) = build_basis(&inst) else { continue };
        let theta = Theta {
            a: Mat::from_fn(p, 1, |_, _| rng.random_range(-1.0..1.0)),
            b: Mat::from_fn(1, 1, |_, _| rng.random_range(-1.0..1.0)),
        };
        let proj = project(&basis, &theta)?;
        let oracle = [1.0, -1.0]
            .iter()
            .map(|&s| {
                let t = manifold_point(&basis, &Mat::from_element(1, 1, s)).expect("unit scalar is orthogonal");
                p_norm(&(&theta - &t), &basis)
            })
            .fold(f64::INFINITY, f64::min);
        let gap = (proj.dist_p - oracle).abs() / oracle.max(1.0);
        worst = worst.max(gap);
        if gap > 1e-10 {
            mismatches += 1;
        }
    }
    Ok((mismatches, worst))
}

/// Samples around the manifold and evaluates the landscape inequalities.
pub fn landscape(config: &ExperimentConfig) -> Result<Summary> {
    config.validate()?;
    let out = &config.output_dir;
    prepare(out)?;
    let l = &config.landscape;
    let outcomes: Vec<InstanceOutcome> = with_thread_cap(|| {
        (0..l.instances).into_par_iter().map(|i| landscape_instance(config, i)).collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<Vec<String>> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    write_table(
        &out.join("landscape.csv"),
        &[
            "instance",
            "sample",
            "dist_p",
            "in_ball",
            "convexity_margin",
            "smoothness_margin",
            "descent_margin",
            "symmetry_residual",
            "holds",
        ],
        &rows,
    )?;
    let violations: Vec<&Violation> = outcomes.iter().flat_map(|o| o.violations.iter()).collect();
    write_json(&out.join("violations.json"), &violations)?;
    let (scalar_mismatches, scalar_worst) = scalar_projection_mismatches(config)?;

    let evaluated: Vec<&InstanceOutcome> = outcomes.iter().filter(|o| !o.skipped).collect();
    let max_of = |f: fn(&InstanceOutcome) -> f64| evaluated.iter().map(|o| f(o)).fold(0.0, f64::max);
    let criteria = vec![
        Criterion::at_least("instances evaluated", evaluated.len() as f64, 1.0),
        Criterion::at_most("in-ball violations", violations.len() as f64, 0.0),
        Criterion::at_most("max relative projection symmetry residual", max_of(|o| o.max_symmetry), 1e-6),
        Criterion::at_most("manifold point |Q - L*| / L*", max_of(|o| o.max_q_rel), 1e-10),
        Criterion::at_most("manifold point ||grad Q|| / ||M Sigma^1/2||", max_of(|o| o.max_grad_rel), 1e-9),
        Criterion::at_least(
            "on-manifold checks holding",
            evaluated.iter().filter(|o| o.on_manifold_ok).count() as f64,
            evaluated.len() as f64,
        ),
        Criterion::at_most("scalar projection mismatches", scalar_mismatches as f64, 0.0),
    ];
    let details = json!({
        "samples_per_instance": l.samples,
        "radius_fraction": l.radius_fraction,
        "skipped_instances": outcomes.iter().filter(|o| o.skipped).map(|o| o.index).collect::<Vec<_>>(),
        "out_of_ball_failures": outcomes.iter().map(|o| o.out_of_ball_failures).sum::<usize>(),
        "scalar_checks": l.scalar_checks,
        "scalar_worst_gap": scalar_worst,
    });
    finish(out, "landscape", config.seed, criteria, details)
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradPoint {
    theta: Theta,
    data: Dataset,
    sigma_hat: Mat,
    instance: ProblemInstance,
}

fn gradcheck_points(config: &ExperimentConfig) -> Result<Vec<GradPoint>> {
    let g = &config.gradcheck;
    let mut rng = rng::stream(config.seed, tags::GRADCHECK, 0);
    (0..g.points)
        .map(|_| {
            let x = Mat::from_fn(g.n, g.d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = Mat::from_fn(g.n, g.p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta = Theta {
                a: Mat::from_fn(g.p, g.d, |_, _| rng.random_range(-1.0..1.0)),
                b: Mat::from_fn(g.d, g.d, |_, _| rng.random_range(-1.0..1.0)),
            };
            let data = Dataset::new(x, y)?;
            let sigma_hat = data.sample_covariance();
            let instance = sample_instance(Dims { p: g.p, d: g.d, n: g.n }, rng.next_u64());
            Ok(GradPoint { theta, data, sigma_hat, instance })
        })
        .collect()
}

/// Errors of the three analytic gradients at one point: empirical loss,
/// empirical loss plus regularizer, population objective.
fn point_errors(pt: &GradPoint, h: f64) -> [f64; 3] {
    let plain = empirical_gradient(&pt.theta, &pt.data, &pt.sigma_hat, false);
    let fd_plain = central_difference(|t| empirical_loss(t, &pt.data), &pt.theta, h);
    let reg = empirical_gradient(&pt.theta, &pt.data, &pt.sigma_hat, true);
    let fd_reg = central_difference(
        |t| empirical_loss(t, &pt.data) + empirical_regularizer(t, &pt.sigma_hat),
        &pt.theta,
        h,
    );
    let pop = population_gradient(&pt.theta, &pt.instance);
    let fd_pop = central_difference(
        |t| population_loss(t, &pt.instance) + population_regularizer(t, &pt.instance),
        &pt.theta,
        h,
    );
    [
        max_relative_error(&plain, &fd_plain, 1e-8),
        max_relative_error(&reg, &fd_reg, 1e-8),
        max_relative_error(&pop, &fd_pop, 1e-8),
    ]
}

/// Central finite differences against the analytic gradients.
pub fn gradcheck(config: &ExperimentConfig) -> Result<Summary> {
    config.validate()?;
    let out = &config.output_dir;
    prepare(out)?;
    let g = &config.gradcheck;
    let points = gradcheck_points(config)?;
    let errors: Vec<[f64; 3]> = with_thread_cap(|| points.par_iter().map(|pt| point_errors(pt, g.h)).collect());
    let worst = |k: usize| errors.iter().map(|e| e[k]).fold(0.0, f64::max);

    let sweep: Vec<SeriesRow> = g
        .h_sweep
        .iter()
        .map(|&h| {
            let per_point: Vec<f64> = points.iter().map(|pt| point_errors(pt, h).into_iter().fold(0.0, f64::max)).collect();
            SeriesRow { x: h, value: median(&per_point), stderr: None, trials: points.len() }
        })
        .collect();
    write_series(&out.join("gradcheck_h_sweep.csv"), &sweep)?;
    let point_rows: Vec<Vec<String>> = errors
        .iter()
        .enumerate()
        .map(|(i, e)| vec![i.to_string(), format!("{:e}", e[0]), format!("{:e}", e[1]), format!("{:e}", e[2])])
        .collect();
    write_table(&out.join("gradcheck.csv"), &["point", "empirical", "empirical_regularized", "population"], &point_rows)?;

    let zero = Theta::zeros(g.p, g.d);
    let zero_data = Dataset::new(Mat::zeros(g.n, g.d), Mat::zeros(g.n, g.p))?;
    let zero_grad = empirical_gradient(&zero, &zero_data, &Mat::zeros(g.d, g.d), true);
    let u_shaped = sweep.len() >= 3 && {
        let best = sweep.iter().enumerate().min_by(|a, b| a.1.value.total_cmp(&b.1.value)).map(|(i, _)| i).unwrap_or(0);
        best > 0 && best + 1 < sweep.len()
    };
    let criteria = vec![
        Criterion::at_most("empirical gradient max relative error", worst(0), g.threshold),
        Criterion::at_most("regularized empirical gradient max relative error", worst(1), g.threshold),
        Criterion::at_most("population gradient max relative error", worst(2), g.threshold),
        Criterion::at_most("gradient norm at zero parameters and data", zero_grad.norm(), 0.0),
    ];
    let details = json!({
        "points": points.len(),
        "h": g.h,
        "h_sweep": sweep,
        "h_sweep_u_shaped": u_shaped,
    });
    finish(out, "gradcheck", config.seed, criteria, details)
}
