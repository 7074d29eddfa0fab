//! Empirical and population objectives, their analytic gradients, and the
//! Monte-Carlo estimators that stand in for expectations over fresh data.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, Mat};
use crate::model::{attention_means, softmax_rows, Dataset, ProblemInstance, Sampler, Theta};
use crate::rng::{self, tags};

/// Gradient with respect to `(A, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTheta {
    pub da: Mat,
    pub db: Mat,
}

impl GradTheta {
    pub fn zeros(p: usize, d: usize) -> Self {
        GradTheta { da: Mat::zeros(p, d), db: Mat::zeros(d, d) }
    }

    pub fn norm(&self) -> f64 {
        (self.da.norm_squared() + self.db.norm_squared()).sqrt()
    }

    pub fn stacked(&self) -> Mat {
        let (p, d) = self.da.shape();
        let mut s = Mat::zeros(p + d, d);
        s.rows_mut(0, p).copy_from(&self.da);
        s.rows_mut(p, d).copy_from(&self.db);
        s
    }

    pub fn from_stacked(s: &Mat, p: usize) -> Self {
        let d = s.ncols();
        GradTheta { da: s.rows(0, p).into_owned(), db: s.rows(p, d).into_owned() }
    }

    pub fn is_finite(&self) -> bool {
        self.da.iter().chain(self.db.iter()).all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &GradTheta) {
        self.da += &other.da;
        self.db += &other.db;
    }
}

/// Empirical and population values of the loss, regularizer and objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_hat: f64,
    pub r_hat: f64,
    pub q_hat: f64,
    pub l_pop: f64,
    pub r_pop: f64,
    pub q_pop: f64,
    /// `l_pop - L*`.
    pub excess: f64,
}

/// Population objective computed two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationReport {
    pub l_pop: f64,
    pub r_pop: f64,
    /// `L + R`.
    pub q_pop: f64,
    /// The same objective through the extended-covariance form.
    pub q_rewritten: f64,
    pub excess: f64,
}

/// Relative tolerance between the two forms of the population objective.
pub const OBJECTIVE_AGREEMENT_TOL: f64 = 1e-9;

/// Loss, regularizer and gradient from a single attention pass.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub l_hat: f64,
    pub r_hat: f64,
    pub grad: GradTheta,
}

impl ObjectiveEval {
    pub fn q_hat(&self) -> f64 {
        self.l_hat + self.r_hat
    }
}

/// `(1/2n) sum_i ||A mu_i - y_i||^2`.
pub fn empirical_loss(theta: &Theta, data: &Dataset) -> f64 {
    let (_, mu) = attention_means(&theta.b, &data.x);
    let resid = mu * theta.a.transpose() - &data.y;
    0.5 * resid.norm_squared() / data.n() as f64
}

fn balance_defect(theta: &Theta, sigma: &Mat) -> Mat {
    theta.a.tr_mul(&theta.a) - theta.b.transpose() * sigma * &theta.b
}

/// `(1/8) ||S^{1/2} (A^T A - B^T S B) S^{1/2}||_F^2` with `S = sigma_hat`.
pub fn empirical_regularizer(theta: &Theta, sigma_hat: &Mat) -> f64 {
    let d = balance_defect(theta, sigma_hat);
    let sds = sigma_hat * &d * sigma_hat;
    0.125 * d.dot(&sds)
}

/// Gradient of the regularizer:
/// `grad_A = A S D S / 2`, `grad_B = -S B S D S / 2`, `D = A^T A - B^T S B`.
pub fn regularizer_gradient(theta: &Theta, sigma: &Mat) -> GradTheta {
    let d = balance_defect(theta, sigma);
    let dsd = &d * sigma;
    let sds = sigma * &dsd;
    GradTheta {
        da: &theta.a * &sds * 0.5,
        db: sigma * &theta.b * &sds * (-0.5),
    }
}

/// Loss, regularizer and gradient of the empirical objective in one pass.
///
/// With `r_i = A mu_i - y_i` and `w_i = A^T r_i`, the `B`-gradient
/// `(1/n) sum_i x_i r_i^T A Sigma_i` is formed without the local covariances:
/// `w_i^T Sigma_i = sum_j W_ij (w_i^T x_j - w_i^T mu_i) x_j^T`.
pub fn empirical_objective(
    theta: &Theta,
    data: &Dataset,
    sigma_hat: &Mat,
    include_regularizer: bool,
) -> ObjectiveEval {
    let n = data.n() as f64;
    let (w, mu) = attention_means(&theta.b, &data.x);
    let resid = &mu * theta.a.transpose() - &data.y;
    let l_hat = 0.5 * resid.norm_squared() / n;

    let da = resid.tr_mul(&mu) / n;
    let pulled = &resid * &theta.a;
    let mut coeff = &pulled * data.x.transpose();
    for i in 0..data.n() {
        let centre = pulled.row(i).dot(&mu.row(i));
        let wi = w.row(i);
        let mut row = coeff.row_mut(i);
        for j in 0..row.len() {
            row[j] = wi[j] * (row[j] - centre);
        }
    }
    let v = coeff * &data.x;
    let db = data.x.tr_mul(&v) / n;

    let mut grad = GradTheta { da, db };
    let mut r_hat = 0.0;
    if include_regularizer {
        r_hat = empirical_regularizer(theta, sigma_hat);
        grad.add_assign(&regularizer_gradient(theta, sigma_hat));
    }
    ObjectiveEval { l_hat, r_hat, grad }
}

/// Gradient of `L_hat` (plus `R_hat` when `include_regularizer`).
pub fn empirical_gradient(
    theta: &Theta,
    data: &Dataset,
    sigma_hat: &Mat,
    include_regularizer: bool,
) -> GradTheta {
    empirical_objective(theta, data, sigma_hat, include_regularizer).grad
}

/// `L* + (1/2) ||A Sigma B^T Sigma^{1/2} - M Sigma^{1/2}||_F^2`.
pub fn population_loss(theta: &Theta, instance: &ProblemInstance) -> f64 {
    instance.irreducible_loss() + population_excess(theta, instance)
}

/// `L(theta) - L*`, computed directly so it does not lose precision near 0.
pub fn population_excess(theta: &Theta, instance: &ProblemInstance) -> f64 {
    let sigma = &instance.sigma;
    let e = &theta.a * sigma * theta.b.transpose() - &instance.m;
    let es = &e * sigma;
    0.5 * es.dot(&e).max(0.0)
}

pub fn population_regularizer(theta: &Theta, instance: &ProblemInstance) -> f64 {
    empirical_regularizer(theta, &instance.sigma).max(0.0)
}

/// Extended covariance `P = blockdiag(I_p, Sigma)`.
pub fn extended_covariance(sigma: &Mat, p: usize) -> Mat {
    let d = sigma.nrows();
    let mut out = Mat::identity(p + d, p + d);
    out.view_mut((p, p), (d, d)).copy_from(sigma);
    out
}

/// `Sym(M) = [[0, M], [M^T, 0]]`.
pub fn sym_embed(m: &Mat) -> Mat {
    let (p, d) = m.shape();
    let mut out = Mat::zeros(p + d, p + d);
    out.view_mut((0, p), (p, d)).copy_from(m);
    out.view_mut((p, 0), (d, p)).copy_from(&m.transpose());
    out
}

/// `theta Sigma theta^T - 2 Sym(M)`.
fn stacked_residual(theta_s: &Mat, instance: &ProblemInstance) -> Mat {
    theta_s * &instance.sigma * theta_s.transpose() - sym_embed(&instance.m) * 2.0
}

/// `L* + (1/8)||P^{1/2}(theta Sigma theta^T - 2 Sym(M)) P^{1/2}||^2 - (1/2)||M Sigma^{1/2}||^2`.
pub fn population_objective_rewritten(theta: &Theta, instance: &ProblemInstance) -> f64 {
    let p = instance.p();
    let p_half = extended_covariance(&psd_sqrt(&instance.sigma), p);
    let inner = &p_half * stacked_residual(&theta.stacked(), instance) * &p_half;
    let signal = instance.m_sigma_half().norm_squared();
    instance.irreducible_loss() + 0.125 * inner.norm_squared() - 0.5 * signal
}

/// `Q = L + R`, cross-checked against the extended-covariance form.
pub fn population_objective(theta: &Theta, instance: &ProblemInstance) -> Result<PopulationReport> {
    let excess = population_excess(theta, instance);
    let l_pop = instance.irreducible_loss() + excess;
    let r_pop = population_regularizer(theta, instance);
    let q_pop = l_pop + r_pop;
    let q_rewritten = population_objective_rewritten(theta, instance);
    let scale = q_pop.abs().max(0.5 * instance.m_sigma_half().norm_squared()).max(f64::MIN_POSITIVE);
    let gap = (q_pop - q_rewritten).abs();
    if !(gap <= OBJECTIVE_AGREEMENT_TOL * scale) {
        return Err(Error::Consistency(format!(
            "population objective forms disagree: sum {q_pop:.15e} vs rewritten {q_rewritten:.15e}"
        )));
    }
    Ok(PopulationReport { l_pop, r_pop, q_pop, q_rewritten, excess })
}

/// `grad Q = (1/2) P (theta Sigma theta^T - 2 Sym(M)) P theta Sigma` in stacked
/// form, split back into `(dA, dB)`.
pub fn population_gradient(theta: &Theta, instance: &ProblemInstance) -> GradTheta {
    let p = instance.p();
    let big_p = extended_covariance(&instance.sigma, p);
    let theta_s = theta.stacked();
    let g = &big_p * stacked_residual(&theta_s, instance) * &big_p * &theta_s * &instance.sigma * 0.5;
    GradTheta::from_stacked(&g, p)
}

/// Empirical and population values in one report.
pub fn loss_report(
    theta: &Theta,
    data: &Dataset,
    sigma_hat: &Mat,
    instance: &ProblemInstance,
) -> Result<LossReport> {
    let l_hat = empirical_loss(theta, data);
    let r_hat = empirical_regularizer(theta, sigma_hat);
    let pop = population_objective(theta, instance)?;
    Ok(LossReport {
        l_hat,
        r_hat,
        q_hat: l_hat + r_hat,
        l_pop: pop.l_pop,
        r_pop: pop.r_pop,
        q_pop: pop.q_pop,
        excess: pop.excess,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo population loss

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSum {
    /// Pick the series evaluator when `d = 1` and it is cheap, else direct.
    Auto,
    /// Explicit sum over every inner sample for every outer sample.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    /// Standard error over the outer samples.
    pub stderr: f64,
}

const OUTER_CHUNK: usize = 512;
const SERIES_TERMS: usize = 24;

/// Monte-Carlo estimate of the population loss from its defining ratio of
/// expectations.
///
/// One set of `inner` covariates is drawn and shared by every outer sample;
/// each outer sample `(x_1, z_1)` uses the ratio of inner averages in place
/// of the conditional expectation. The estimator is only consistent as
/// `inner` grows.
pub fn mc_population_loss(
    theta: &Theta,
    instance: &ProblemInstance,
    outer: usize,
    inner: usize,
    seed: u64,
) -> McEstimate {
    mc_population_loss_with(theta, instance, outer, inner, seed, InnerSum::Auto)
}

pub fn mc_population_loss_with(
    theta: &Theta,
    instance: &ProblemInstance,
    outer: usize,
    inner: usize,
    seed: u64,
    method: InnerSum,
) -> McEstimate {
    assert!(outer >= 1 && inner >= 1, "outer and inner must be positive");
    let sampler = Sampler::new(instance);
    let mut rng = rng::stream(seed, tags::MC_LOSS, 0);
    let x2 = sampler.covariates(inner, &mut rng);
    let mut losses = Vec::with_capacity(outer);
    let mut remaining = outer;
    while remaining > 0 {
        let chunk = remaining.min(OUTER_CHUNK);
        let outer_data = sampler.dataset(chunk, &mut rng, true);
        let means = match method {
            InnerSum::Auto => series_inner_means(&theta.b, &outer_data.x, &x2)
                .unwrap_or_else(|| direct_inner_means(&theta.b, &outer_data.x, &x2)),
            InnerSum::Direct => direct_inner_means(&theta.b, &outer_data.x, &x2),
        };
        let resid = means * theta.a.transpose() - &outer_data.y;
        for row in resid.row_iter() {
            losses.push(0.5 * row.norm_squared());
        }
        remaining -= chunk;
    }
    let count = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / count;
    let var = if losses.len() > 1 {
        losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    McEstimate { value: mean, stderr: (var / count).sqrt() }
}

/// Rows `sum_j softmax_j(x1_i^T B x2_j) x2_j`.
fn direct_inner_means(b: &Mat, x1: &Mat, x2: &Mat) -> Mat {
    let mut scores = x1 * b * x2.transpose();
    softmax_rows(&mut scores);
    scores * x2
}

/// Scalar-covariate evaluator for the same inner averages.
///
/// With `d = 1` the score is `c s_j` where `c = b x_1` and `s_j` are the inner
/// samples. Around grid centres `c0` spaced `1 / max|s|` apart,
/// `sum_j s_j^k e^{c s_j} = sum_r (c - c0)^r / r! * sum_j s_j^{k+r} e^{c0 s_j}`,
/// and `|c - c0| max|s| <= 1/2` makes the truncated series exact to round-off.
/// Returns `None` when the grid would be too large to pay off.
fn series_inner_means(b: &Mat, x1: &Mat, x2: &Mat) -> Option<Mat> {
    if b.nrows() != 1 {
        return None;
    }
    let bval = b[(0, 0)];
    let s: Vec<f64> = x2.column(0).iter().copied().collect();
    let smax = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let c: Vec<f64> = x1.column(0).iter().map(|x| bval * x).collect();
    if smax == 0.0 || bval == 0.0 {
        return None;
    }
    let cmin = c.iter().copied().fold(f64::INFINITY, f64::min);
    let cmax = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spacing = 1.0 / smax;
    let centres = ((cmax - cmin) / spacing).ceil() as usize + 1;
    if centres > c.len().max(16) || (cmax.abs().max(cmin.abs()) * smax) > 600.0 {
        return None;
    }
    // moments[k][r] = sum_j s_j^r exp(c0_k s_j - shift_k)
    let moments: Vec<(f64, Vec<f64>)> = (0..centres)
        .map(|k| {
            let c0 = cmin + k as f64 * spacing;
            let shift = c0 * if c0 >= 0.0 { smax } else { -smax };
            let mut m = vec![0.0; SERIES_TERMS + 2];
            for &sj in &s {
                let mut term = (c0 * sj - shift).exp();
                for slot in m.iter_mut() {
                    *slot += term;
                    term *= sj;
                }
            }
            (c0, m)
        })
        .collect();
    let mut out = Mat::zeros(c.len(), 1);
    for (i, &ci) in c.iter().enumerate() {
        let k = (((ci - cmin) / spacing).round() as usize).min(centres - 1);
        let (c0, ref m) = moments[k];
        let delta = ci - c0;
        let (mut s0, mut s1) = (0.0, 0.0);
        let mut coef = 1.0;
        for r in 0..=SERIES_TERMS {
            s0 += coef * m[r];
            s1 += coef * m[r + 1];
            coef *= delta / (r + 1) as f64;
        }
        out[(i, 0)] = s1 / s0;
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Expected empirical gradient (the gradient oracle)

/// How response noise enters the fresh batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Draw `z_i` and use `y_i = M x_i + z_i`.
    Sampled,
    /// Use `y_i = M x_i`. The empirical gradient is affine in `Y` and the
    /// noise is independent of `X` with mean zero, so the expectation is
    /// unchanged while the noise variance is removed.
    Marginalized,
}

#[derive(Debug, Clone)]
pub struct OracleEstimate {
    pub mean: GradTheta,
    /// Entry-wise standard error of `mean`.
    pub stderr: GradTheta,
    pub batches: usize,
    /// Stacked per-batch gradients, in batch order.
    pub samples: Vec<Mat>,
}

/// One oracle draw: the `Q_hat` gradient on fresh batch `index`.
fn oracle_sample(
    theta: &Theta,
    sampler: &Sampler,
    n: usize,
    seed: u64,
    index: u64,
    noise: NoiseMode,
) -> Mat {
    let mut rng = rng::stream(seed, tags::ORACLE, index);
    let data = sampler.dataset(n, &mut rng, noise == NoiseMode::Sampled);
    let sigma_hat = data.sample_covariance();
    empirical_gradient(theta, &data, &sigma_hat, true).stacked()
}

/// Average of `Q_hat` gradients over batches `first..first + batches`, each an
/// independent dataset of size `n`. Batches are evaluated in parallel and
/// reduced in index order.
pub fn expected_empirical_gradient_range(
    theta: &Theta,
    instance: &ProblemInstance,
    n: usize,
    first: u64,
    batches: usize,
    seed: u64,
    noise: NoiseMode,
) -> OracleEstimate {
    assert!(batches >= 1, "batches must be positive");
    let sampler = Sampler::new(instance);
    let samples: Vec<Mat> = (0..batches as u64)
        .into_par_iter()
        .map(|b| oracle_sample(theta, &sampler, n, seed, first + b, noise))
        .collect();
    let p = instance.p();
    let count = samples.len() as f64;
    let mut mean = Mat::zeros(samples[0].nrows(), samples[0].ncols());
    for s in &samples {
        mean += s;
    }
    mean /= count;
    let mut var = Mat::zeros(mean.nrows(), mean.ncols());
    if samples.len() > 1 {
        for s in &samples {
            let dev = s - &mean;
            var += dev.component_mul(&dev);
        }
        var /= count - 1.0;
    }
    let stderr = var.map(|v| (v / count).sqrt());
    OracleEstimate {
        mean: GradTheta::from_stacked(&mean, p),
        stderr: GradTheta::from_stacked(&stderr, p),
        batches,
        samples,
    }
}

/// Monte-Carlo stand-in for `E[grad Q_hat(theta)]` over fresh batches of `n`.
pub fn expected_empirical_gradient(
    theta: &Theta,
    instance: &ProblemInstance,
    n: usize,
    batches: usize,
    seed: u64,
) -> OracleEstimate {
    expected_empirical_gradient_range(theta, instance, n, 0, batches, seed, NoiseMode::Sampled)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    /// `||mean - grad Q||_F^2`.
    pub raw: f64,
    /// `raw` minus the Monte-Carlo variance of the mean; unbiased for
    /// `||E[grad Q_hat] - grad Q||_F^2`.
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub stderr: f64,
    pub batches: usize,
    pub n: usize,
    /// P-norm distance of `theta` to the minimizing manifold.
    pub dist_p: Option<f64>,
    /// `min(eps0, eps1)` when `eps1 > 0`, else `eps0`.
    pub radius: Option<f64>,
    /// False when `theta` lies outside the radius above (result still valid
    /// as a measurement, but outside the regime the rate applies to).
    pub in_regime: Option<bool>,
}

/// Squared distance between the oracle estimate and the population gradient.
pub fn gradient_discrepancy(
    theta: &Theta,
    instance: &ProblemInstance,
    n: usize,
    batches: usize,
    seed: u64,
    noise: NoiseMode,
) -> DiscrepancyReport {
    let estimate = expected_empirical_gradient_range(theta, instance, n, 0, batches, seed, noise);
    let mut report = discrepancy_from_samples(&estimate.samples, &population_gradient(theta, instance).stacked());
    report.n = n;
    if let Ok((basis, constants)) = crate::manifold::build_basis(instance) {
        if let Ok(proj) = crate::manifold::project(&basis, theta) {
            let radius = constants.eps_bar();
            report.dist_p = Some(proj.dist_p);
            report.radius = Some(radius);
            report.in_regime = Some(proj.dist_p <= radius);
        }
    }
    report
}

/// Debiased squared distance of the sample mean to `target`, with a
/// delta-method standard error.
pub fn discrepancy_from_samples(samples: &[Mat], target: &Mat) -> DiscrepancyReport {
    let count = samples.len();
    let dim = target.len();
    let vecs: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_column_slice(s.as_slice())).collect();
    let mut mean = DVector::zeros(dim);
    for v in &vecs {
        mean += v;
    }
    mean /= count as f64;
    let bias = &mean - DVector::from_column_slice(target.as_slice());
    let raw = bias.norm_squared();
    if count < 2 {
        return DiscrepancyReport {
            raw,
            value: raw,
            stderr: f64::NAN,
            batches: count,
            n: 0,
            dist_p: None,
            radius: None,
            in_regime: None,
        };
    }
    let bf = count as f64;
    let mut cov = Mat::zeros(dim, dim);
    let mut proj = Vec::with_capacity(count);
    for v in &vecs {
        let dev = v - &mean;
        cov.ger(1.0, &dev, &dev, 1.0);
        proj.push(bias.dot(&dev));
    }
    cov /= bf - 1.0;
    let value = raw - cov.trace() / bf;
    let proj_var = proj.iter().map(|u| u * u).sum::<f64>() / (bf - 1.0);
    let var = 4.0 * proj_var / bf + 2.0 * cov.norm_squared() / (bf * bf);
    DiscrepancyReport {
        raw,
        value,
        stderr: var.sqrt(),
        batches: count,
        n: 0,
        dist_p: None,
        radius: None,
        in_regime: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{central_difference, max_relative_error};
    use crate::model::{sample_instance, Dims};
    use crate::rng::StreamRng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut StreamRng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn uniform_theta(rng: &mut StreamRng, p: usize, d: usize) -> Theta {
        Theta {
            a: Mat::from_fn(p, d, |_, _| rng.random_range(-1.0..1.0)),
            b: Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn single_sample_loss_and_gradient() {
        let x = Mat::from_row_slice(1, 2, &[0.3, -0.8]);
        let y = Mat::from_row_slice(1, 3, &[1.0, 0.0, -0.5]);
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let mut rng = rng::stream(1, "t", 0);
        let theta = Theta::random(3, 2, 1.0, &mut rng);
        let r = &theta.a * x.transpose() - y.transpose();
        assert!((empirical_loss(&theta, &data) - 0.5 * r.norm_squared()).abs() < 1e-14);
        let g = empirical_gradient(&theta, &data, &Mat::identity(2, 2), false);
        assert!((g.da - &r * &x).norm() < 1e-14);
        assert!(g.db.norm() < 1e-14);
    }

    #[test]
    fn zero_value_map_and_zero_responses() {
        let mut rng = rng::stream(2, "t", 0);
        let x = gaussian(&mut rng, 6, 2);
        let data = Dataset::new(x, Mat::zeros(6, 3)).unwrap();
        let theta = Theta { a: Mat::zeros(3, 2), b: gaussian(&mut rng, 2, 2) };
        assert_eq!(empirical_loss(&theta, &data), 0.0);
    }

    #[test]
    fn uniform_attention_loss_matches_direct_sum() {
        let mut rng = rng::stream(3, "t", 0);
        let inst = sample_instance(Dims::new(3, 2, 10).unwrap(), 4);
        let x = gaussian(&mut rng, 10, 2);
        let y = &x * inst.m.transpose();
        let data = Dataset::new(x.clone(), y).unwrap();
        let theta = Theta { a: gaussian(&mut rng, 3, 2), b: Mat::zeros(2, 2) };
        let xbar = x.row_mean().transpose();
        let mut direct = 0.0;
        for i in 0..10 {
            let r = &theta.a * &xbar - &inst.m * x.row(i).transpose();
            direct += r.norm_squared();
        }
        direct *= 0.5 / 10.0;
        assert!((empirical_loss(&theta, &data) - direct).abs() < 1e-14);
    }

    #[test]
    fn regularizer_values() {
        let theta = Theta::zeros(2, 2);
        assert_eq!(empirical_regularizer(&theta, &Mat::identity(2, 2)), 0.0);
        let theta = Theta { a: scalar(2.0), b: scalar(1.0) };
        assert!((empirical_regularizer(&theta, &scalar(1.0)) - 1.125).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::stream(5, "t", 0);
        for _ in 0..20 {
            let x = gaussian(&mut rng, 8, 2);
            let y = gaussian(&mut rng, 8, 3);
            let data = Dataset::new(x, y).unwrap();
            let sigma_hat = data.sample_covariance();
            let theta = uniform_theta(&mut rng, 3, 2);
            for reg in [false, true] {
                let analytic = empirical_gradient(&theta, &data, &sigma_hat, reg);
                let numeric = central_difference(
                    |t| {
                        let r = if reg { empirical_regularizer(t, &sigma_hat) } else { 0.0 };
                        empirical_loss(t, &data) + r
                    },
                    &theta,
                    1e-5,
                );
                let err = max_relative_error(&analytic, &numeric, 1e-8);
                assert!(err < 1e-5, "reg={reg} err={err}");
            }
        }
    }

    #[test]
    fn fast_b_gradient_matches_local_covariance_form() {
        let mut rng = rng::stream(6, "t", 0);
        let x = gaussian(&mut rng, 7, 3);
        let y = gaussian(&mut rng, 7, 4);
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let theta = uniform_theta(&mut rng, 4, 3);
        let stats = crate::model::attention_moments(&theta.b, &x);
        let mut db = Mat::zeros(3, 3);
        for i in 0..7 {
            let r = &theta.a * stats.mu.row(i).transpose() - y.row(i).transpose();
            db += x.row(i).transpose() * r.transpose() * &theta.a * &stats.sigma_local[i];
        }
        db /= 7.0;
        let g = empirical_gradient(&theta, &data, &Mat::identity(3, 3), false);
        assert!((g.db - db).norm() < 1e-13);
    }

    #[test]
    fn balanced_point_has_no_regularizer_gradient() {
        let inst = sample_instance(Dims::new(4, 2, 10).unwrap(), 1);
        let (basis, _) = crate::manifold::build_basis(&inst).unwrap();
        let theta = crate::manifold::manifold_point(&basis, &Mat::identity(2, 2)).unwrap();
        let g = regularizer_gradient(&theta, &inst.sigma);
        assert!(g.norm() < 1e-14);
        assert!(empirical_regularizer(&theta, &inst.sigma).abs() < 1e-20);
    }

    #[test]
    fn population_loss_scalar_value() {
        let inst = ProblemInstance::new(scalar(0.002), scalar(1.0), scalar(0.04)).unwrap();
        let theta = Theta { a: scalar(0.3), b: scalar(0.2) };
        let expected = 0.02 + 0.5 * (0.06f64 - 0.002).powi(2);
        assert!((population_loss(&theta, &inst) - expected).abs() < 1e-15);
        assert!((expected - 0.021682).abs() < 1e-12);
    }

    #[test]
    fn zero_factor_gives_signal_plus_noise() {
        let inst = sample_instance(Dims::new(5, 3, 10).unwrap(), 2);
        let mut rng = rng::stream(7, "t", 0);
        let expected = inst.irreducible_loss() + 0.5 * inst.m_sigma_half().norm_squared();
        for theta in [
            Theta { a: Mat::zeros(5, 3), b: gaussian(&mut rng, 3, 3) },
            Theta { a: gaussian(&mut rng, 5, 3), b: Mat::zeros(3, 3) },
        ] {
            assert!((population_loss(&theta, &inst) - expected).abs() < 1e-14);
        }
        let zero = population_objective(&Theta::zeros(5, 3), &inst).unwrap();
        assert!((zero.q_pop - expected).abs() < 1e-14);
        assert!((zero.q_rewritten - expected).abs() < 1e-12);
    }

    #[test]
    fn population_gradient_scalar_symbolic() {
        // Q(a, b) = w/2 + (a b - m)^2 / 2 + (a^2 - b^2)^2 / 8 with Sigma = 1
        let (m, w) = (0.01, 0.2);
        let inst = ProblemInstance::new(scalar(m), scalar(1.0), scalar(w)).unwrap();
        for &(a, b) in &[(0.3, 0.2), (-0.5, 1.1), (0.0, 0.7), (1.3, -0.4)] {
            let g = population_gradient(&Theta { a: scalar(a), b: scalar(b) }, &inst);
            let ga = (a * b - m) * b + 0.5 * (a * a - b * b) * a;
            let gb = (a * b - m) * a - 0.5 * (a * a - b * b) * b;
            assert!((g.da[(0, 0)] - ga).abs() < 1e-15);
            assert!((g.db[(0, 0)] - gb).abs() < 1e-15);
        }
    }

    #[test]
    fn population_gradient_matches_finite_differences() {
        let mut rng = rng::stream(8, "t", 0);
        for seed in 0..10 {
            let inst = sample_instance(Dims::new(3, 2, 8).unwrap(), seed);
            let theta = uniform_theta(&mut rng, 3, 2);
            let analytic = population_gradient(&theta, &inst);
            let numeric = central_difference(
                |t| population_loss(t, &inst) + population_regularizer(t, &inst),
                &theta,
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-6, "err={err}");
        }
    }

    #[test]
    fn mc_loss_at_zero_is_signal_plus_noise() {
        let inst = sample_instance(Dims::new(3, 2, 8).unwrap(), 1);
        let est = mc_population_loss(&Theta::zeros(3, 2), &inst, 20_000, 10, 3);
        let expected = population_loss(&Theta::zeros(3, 2), &inst);
        assert!((est.value - expected).abs() < 4.0 * est.stderr, "{est:?} vs {expected}");
        let again = mc_population_loss(&Theta::zeros(3, 2), &inst, 20_000, 10, 3);
        assert_eq!(est, again);
    }

    #[test]
    fn series_inner_means_match_direct() {
        let mut rng = rng::stream(9, "t", 0);
        let x1 = gaussian(&mut rng, 300, 1);
        let x2 = gaussian(&mut rng, 2000, 1);
        for b in [0.05, -0.3, 0.8, 2.0] {
            let direct = direct_inner_means(&scalar(b), &x1, &x2);
            let series = series_inner_means(&scalar(b), &x1, &x2).expect("series path");
            let err = (&direct - &series).amax();
            assert!(err < 1e-11, "b={b} err={err}");
        }
        assert!(series_inner_means(&Mat::identity(2, 2), &gaussian(&mut rng, 4, 2), &gaussian(&mut rng, 4, 2)).is_none());
    }

    #[test]
    fn mc_methods_agree() {
        let inst = sample_instance(Dims::new(3, 1, 8).unwrap(), 5);
        let (basis, _) = crate::manifold::build_basis(&inst).unwrap();
        let theta = crate::manifold::manifold_point(&basis, &Mat::identity(1, 1)).unwrap();
        let a = mc_population_loss_with(&theta, &inst, 3000, 3000, 1, InnerSum::Auto);
        let b = mc_population_loss_with(&theta, &inst, 3000, 3000, 1, InnerSum::Direct);
        assert!((a.value - b.value).abs() < 1e-12 * a.value);
    }

    #[test]
    fn single_batch_oracle_is_the_empirical_gradient() {
        let inst = sample_instance(Dims::new(3, 2, 8).unwrap(), 1);
        let mut rng = rng::stream(10, "t", 0);
        let theta = uniform_theta(&mut rng, 3, 2);
        let est = expected_empirical_gradient(&theta, &inst, 16, 1, 42);
        let mut drng = rng::stream(42, tags::ORACLE, 0);
        let data = Sampler::new(&inst).dataset(16, &mut drng, true);
        let g = empirical_gradient(&theta, &data, &data.sample_covariance(), true);
        assert_eq!(est.mean, g);
    }

    #[test]
    fn oracle_is_linear_in_batches() {
        let inst = sample_instance(Dims::new(3, 2, 8).unwrap(), 1);
        let mut rng = rng::stream(11, "t", 0);
        let theta = uniform_theta(&mut rng, 3, 2);
        let all = expected_empirical_gradient_range(&theta, &inst, 12, 0, 8, 5, NoiseMode::Sampled);
        let first = expected_empirical_gradient_range(&theta, &inst, 12, 0, 4, 5, NoiseMode::Sampled);
        let second = expected_empirical_gradient_range(&theta, &inst, 12, 4, 4, 5, NoiseMode::Sampled);
        let avg = (first.mean.stacked() + second.mean.stacked()) * 0.5;
        assert!((all.mean.stacked() - avg).norm() < 1e-14);
    }

    #[test]
    fn marginalized_noise_keeps_the_mean() {
        let inst = sample_instance(Dims::new(3, 2, 8).unwrap(), 2);
        let mut rng = rng::stream(12, "t", 0);
        let theta = uniform_theta(&mut rng, 3, 2);
        let sampled = expected_empirical_gradient_range(&theta, &inst, 20, 0, 400, 1, NoiseMode::Sampled);
        let clean = expected_empirical_gradient_range(&theta, &inst, 20, 0, 400, 2, NoiseMode::Marginalized);
        let diff = sampled.mean.stacked() - clean.mean.stacked();
        let se = (sampled.stderr.stacked().map(|v| v * v) + clean.stderr.stacked().map(|v| v * v)).map(f64::sqrt);
        for (dv, s) in diff.iter().zip(se.iter()) {
            assert!(dv.abs() < 5.0 * s + 1e-12, "diff {dv} se {s}");
        }
    }

    #[test]
    fn discrepancy_on_manifold_is_oracle_norm() {
        let inst = sample_instance(Dims::new(3, 2, 8).unwrap(), 3);
        let (basis, _) = crate::manifold::build_basis(&inst).unwrap();
        let theta = crate::manifold::manifold_point(&basis, &Mat::identity(2, 2)).unwrap();
        let rep = gradient_discrepancy(&theta, &inst, 50, 16, 9, NoiseMode::Sampled);
        let est = expected_empirical_gradient(&theta, &inst, 50, 16, 9);
        let norm2 = est.mean.stacked().norm_squared();
        assert!((rep.raw - norm2).abs() < 1e-12 * norm2.max(1e-30) + 1e-28);
        assert_eq!(rep.in_regime, Some(true));
    }

    #[test]
    fn debiased_discrepancy_is_unbiased_for_pure_noise() {
        // samples with zero mean around the target: E[value] = 0
        let mut rng = rng::stream(13, "t", 0);
        let mut total = 0.0;
        let mut total_se = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let samples: Vec<Mat> = (0..32).map(|_| gaussian(&mut rng, 3, 2)).collect();
            let rep = discrepancy_from_samples(&samples, &Mat::zeros(3, 2));
            total += rep.value;
            total_se += rep.stderr;
        }
        let mean = total / reps as f64;
        let se = total_se / reps as f64 / (reps as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean} se {se}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn population_bounds_and_forms_agree(seed in any::<u64>(), p in 1usize..6, d in 1usize..4) {
            prop_assume!(p >= d);
            let inst = sample_instance(Dims { p, d, n: d }, seed);
            let mut rng = rng::stream(seed, "prop-pop", 0);
            let theta = uniform_theta(&mut rng, p, d);
            let rep = population_objective(&theta, &inst);
            prop_assert!(rep.is_ok(), "{:?}", rep);
            let rep = rep.unwrap();
            prop_assert!(rep.l_pop >= inst.irreducible_loss() - 1e-12);
            prop_assert!(rep.q_pop >= rep.l_pop - 1e-12);
            prop_assert!((rep.q_pop - rep.q_rewritten).abs() <= 1e-9 * rep.q_pop.abs());
        }

        #[test]
        fn empirical_loss_is_permutation_invariant(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = rng::stream(seed, "prop-perm", 0);
            let x = gaussian(&mut rng, n, 2);
            let y = gaussian(&mut rng, n, 3);
            let theta = uniform_theta(&mut rng, 3, 2);
            let data = Dataset::new(x, y).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.rotate_left(seed as usize % n);
            let shuffled = data.subset(&order);
            let a = empirical_loss(&theta, &data);
            let b = empirical_loss(&theta, &shuffled);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
