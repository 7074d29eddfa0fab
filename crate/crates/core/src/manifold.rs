//! The set of global minimizers of the population objective, the
//! `P`-weighted geometry around it, and numerical checks of the landscape
//! inequalities near it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{diag, orthogonality_defect, polar, random_orthogonal, spd_factor_default, svd_sorted, sym_eigen, Mat};
use crate::losses::{population_excess, population_gradient, population_regularizer};
use crate::model::{ProblemInstance, Theta};
use crate::rng::{self, tags, StreamRng};

/// Tolerance on `||J^T J - I||_F` accepted by [`manifold_point`].
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Singular values of `M Sigma^{1/2}` below this fraction of the largest
/// count as zero.
pub const RANK_TOL: f64 = 1e-12;

/// SVD factors of `M Sigma^{1/2}` and the square-root factors of `Sigma`.
#[derive(Debug, Clone)]
pub struct ManifoldBasis {
    pub u: Mat,
    /// Singular values, non-increasing.
    pub gamma: Vec<f64>,
    pub v: Mat,
    pub sigma: Mat,
    pub sigma_half: Mat,
    pub sigma_neg_half: Mat,
    pub sigma_inv: Mat,
    /// `blockdiag(I_p, Sigma)`.
    pub p_mat: Mat,
    /// `U Gamma^{1/2}`: the `A`-part of every manifold point before `J^T Sigma^{-1/2}`.
    k_a: Mat,
    /// `Sigma^{-1/2} V Gamma^{1/2}`: the `B`-part likewise.
    k_b: Mat,
}

impl ManifoldBasis {
    pub fn p(&self) -> usize {
        self.u.nrows()
    }

    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    pub fn gamma_mat(&self) -> Mat {
        diag(&self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConstants {
    pub k0: f64,
    pub k1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps0: f64,
    /// Non-positive when `sqrt(sigma_1(M Sigma^{1/2})) >= 1/16`.
    pub eps1: f64,
    pub alpha_tilde: f64,
    pub beta_tilde: f64,
    pub nu: f64,
    pub mu_star: f64,
    pub eta_star: f64,
}

impl LandscapeConstants {
    /// `min(eps0, eps1)`, falling back to `eps0` when `eps1` is not positive.
    pub fn eps_bar(&self) -> f64 {
        if self.eps1 > 0.0 {
            self.eps0.min(self.eps1)
        } else {
            self.eps0
        }
    }

    /// Constants from the singular values of `M Sigma^{1/2}` and the extreme
    /// eigenvalues of `Sigma`.
    pub fn from_spectra(s_max: f64, s_min: f64, lambda_max: f64, lambda_min: f64) -> Self {
        let k0 = 2.0 * s_min * lambda_min;
        let k1 = 2.0 * s_max * lambda_max;
        let kappa = lambda_max / lambda_min;
        let alpha = k0;
        let beta = (14.0 + 7.0 * kappa * kappa) * k1 * k1 + 21.0 * lambda_max.powi(2) * k1 + 7.0 * lambda_max.powi(4);
        let eps0 = 1.0f64
            .min(k0.sqrt() / (3.0 * k1 * lambda_max).sqrt())
            .min((k0 / 2.0).powf(0.25) / lambda_max.sqrt());
        let eps1 = (1.0 / 16.0 - s_max.sqrt()) / (2.0 * lambda_max.sqrt());
        let alpha_tilde = 2.0 * alpha / 3.0;
        let beta_tilde = 3.0 * beta + alpha * alpha / 12.0;
        let nu = (3.0 / alpha + alpha / (12.0 * beta)).max(6.0 + alpha * alpha / (6.0 * beta));
        LandscapeConstants {
            k0,
            k1,
            alpha,
            beta,
            eps0,
            eps1,
            alpha_tilde,
            beta_tilde,
            nu,
            mu_star: 1.0 - alpha_tilde * alpha_tilde / beta_tilde,
            eta_star: alpha_tilde / beta_tilde,
        }
    }
}

/// SVD of `M Sigma^{1/2}`, the extended covariance and the landscape constants.
pub fn build_basis(instance: &ProblemInstance) -> Result<(ManifoldBasis, LandscapeConstants)> {
    let (p, d) = instance.m.shape();
    if p < d {
        return Err(Error::InvalidDims(format!("need p >= d, got p={p} d={d}")));
    }
    let factors = spd_factor_default(&instance.sigma)?;
    let m_half = &instance.m * &factors.sqrt;
    let (u, gamma, v) = svd_sorted(&m_half);
    let s_max = gamma[0];
    let s_min = gamma[d - 1];
    if !(s_min > RANK_TOL * s_max) {
        return Err(Error::RankDeficient { sigma_min: s_min, sigma_max: s_max });
    }
    let root: Vec<f64> = gamma.iter().map(|g| g.sqrt()).collect();
    let gamma_root = diag(&root);
    let k_a = &u * &gamma_root;
    let k_b = &factors.inv_sqrt * &v * &gamma_root;
    let mut p_mat = Mat::identity(p + d, p + d);
    p_mat.view_mut((p, p), (d, d)).copy_from(&instance.sigma);
    let constants =
        LandscapeConstants::from_spectra(s_max, s_min, factors.max_eigenvalue(), factors.min_eigenvalue());
    let basis = ManifoldBasis {
        u,
        gamma,
        v,
        sigma: instance.sigma.clone(),
        sigma_half: factors.sqrt,
        sigma_neg_half: factors.inv_sqrt,
        sigma_inv: factors.inv,
        p_mat,
        k_a,
        k_b,
    };
    Ok((basis, constants))
}

/// `A = U Gamma^{1/2} J^T Sigma^{-1/2}`, `B = Sigma^{-1/2} V Gamma^{1/2} J^T Sigma^{-1/2}`.
pub fn manifold_point(basis: &ManifoldBasis, j: &Mat) -> Result<Theta> {
    let d = basis.d();
    if j.shape() != (d, d) {
        return Err(Error::Shape(format!("J must be {d}x{d}, got {:?}", j.shape())));
    }
    let defect = orthogonality_defect(j);
    if !(defect < ORTHOGONALITY_TOL) {
        return Err(Error::NotOrthogonal(defect));
    }
    Ok(point_unchecked(basis, j))
}

fn point_unchecked(basis: &ManifoldBasis, j: &Mat) -> Theta {
    let tail = j.transpose() * &basis.sigma_neg_half;
    Theta { a: &basis.k_a * &tail, b: &basis.k_b * &tail }
}

/// `Tr(A1^T A2) + Tr(B1^T Sigma B2)`.
pub fn p_inner(theta1: &Theta, theta2: &Theta, basis: &ManifoldBasis) -> f64 {
    p_inner_sigma(theta1, theta2, &basis.sigma)
}

pub fn p_inner_sigma(theta1: &Theta, theta2: &Theta, sigma: &Mat) -> f64 {
    theta1.a.dot(&theta2.a) + theta1.b.dot(&(sigma * &theta2.b))
}

pub fn p_norm(theta: &Theta, basis: &ManifoldBasis) -> f64 {
    p_inner(theta, theta, basis).max(0.0).sqrt()
}

// ---------------------------------------------------------------------------
// Projection onto the manifold

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub theta_star: Theta,
    pub j_star: Mat,
    pub dist_p: f64,
    /// `||S - S^T||_F` with `S = Delta^T P theta* Sigma`.
    pub symmetry_residual: f64,
    /// `||S||_F`, the scale for `symmetry_residual`.
    pub symmetry_scale: f64,
    /// Restart that produced the minimizer.
    pub restart: usize,
    pub iterations: usize,
}

impl ProjectionResult {
    /// Symmetry residual relative to `max(1, ||S||_F)`.
    pub fn relative_symmetry_residual(&self) -> f64 {
        self.symmetry_residual / self.symmetry_scale.max(1.0)
    }
}

pub const PROJECTION_RESTARTS: usize = 16;
const PROJECTION_MAX_ITERS: usize = 5000;
const PROJECTION_REL_DECREASE: f64 = 1e-14;

/// The projection objective `F(J) = 1/2 ||theta - theta(J)||_P^2`, equal to
/// `const - Tr(C J^T) + Tr(Sigma^{-1} J Gamma J^T)`. Values are computed from
/// the residual itself so they stay accurate when `F` is tiny.
struct ProjectionObjective<'a> {
    basis: &'a ManifoldBasis,
    theta: &'a Theta,
    c: Mat,
    half_norm: f64,
    gamma: Mat,
}

impl<'a> ProjectionObjective<'a> {
    fn new(basis: &'a ManifoldBasis, theta: &'a Theta) -> Self {
        // theta^T P K = A^T U Gamma^{1/2} + B^T Sigma^{1/2} V Gamma^{1/2}
        let tpk = theta.a.tr_mul(&basis.k_a) + theta.b.transpose() * &basis.sigma * &basis.k_b;
        let c = &basis.sigma_neg_half * tpk;
        let half_norm = 0.5 * p_inner(theta, theta, basis);
        ProjectionObjective { basis, theta, c, half_norm, gamma: basis.gamma_mat() }
    }

    fn value(&self, j: &Mat) -> f64 {
        let delta = self.theta - &point_unchecked(self.basis, j);
        0.5 * p_inner(&delta, &delta, self.basis)
    }

    fn euclidean_gradient(&self, j: &Mat) -> Mat {
        &self.basis.sigma_inv * j * &self.gamma * 2.0 - &self.c
    }

    fn riemannian_gradient(&self, j: &Mat) -> Mat {
        let g = self.euclidean_gradient(j);
        let jg = j.tr_mul(&g);
        let sym = (&jg + jg.transpose()) * 0.5;
        g - j * sym
    }

    /// Riemannian gradient descent with polar retraction, Barzilai-Borwein
    /// step sizes and Armijo backtracking.
    fn descend(&self, start: Mat) -> (Mat, f64, usize) {
        let mut j = start;
        let mut f = self.value(&j);
        let mut grad = self.riemannian_gradient(&j);
        let curvature = 2.0 * self.basis.sigma_inv.norm() * self.gamma[(0, 0)] + self.c.norm();
        let mut step = 1.0 / curvature.max(f64::MIN_POSITIVE);
        let mut iters = 0;
        while iters < PROJECTION_MAX_ITERS {
            let gnorm2 = grad.norm_squared();
            if gnorm2 == 0.0 {
                break;
            }
            let mut t = step;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = polar(&(&j - &grad * t));
                let fc = self.value(&cand);
                if fc <= f - 1e-4 * t * gnorm2 {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            iters += 1;
            let Some((next, f_next)) = accepted else { break };
            let grad_next = self.riemannian_gradient(&next);
            let s = &next - &j;
            let y = &grad_next - &grad;
            let sy = s.dot(&y);
            step = if sy > 0.0 { s.norm_squared() / sy } else { t * 2.0 };
            let decrease = f - f_next;
            j = next;
            f = f_next;
            grad = grad_next;
            if decrease <= PROJECTION_REL_DECREASE * f {
                break;
            }
        }
        (j, f, iters)
    }
}

/// Orthogonal matrix closest to `c` within the determinant component `sign`.
fn polar_with_sign(c: &Mat, sign: f64) -> Mat {
    let (u, _, v) = svd_sorted(c);
    let mut q = &u * v.transpose();
    if q.determinant().signum() != sign.signum() {
        let d = c.ncols();
        let mut flip = Mat::identity(d, d);
        flip[(d - 1, d - 1)] = -1.0;
        q = &u * flip * v.transpose();
    }
    q
}

fn projection_starts(objective: &ProjectionObjective, d: usize) -> Vec<Mat> {
    (0..PROJECTION_RESTARTS)
        .map(|r| {
            let sign = if r < PROJECTION_RESTARTS / 2 { 1.0 } else { -1.0 };
            if r % (PROJECTION_RESTARTS / 2) == 0 {
                polar_with_sign(&objective.c, sign)
            } else {
                let mut rng = rng::stream(0, tags::PROJECTION, r as u64);
                random_orthogonal(&mut rng, d, Some(sign))
            }
        })
        .collect()
}

fn finish(basis: &ManifoldBasis, theta: &Theta, j: Mat, restart: usize, iterations: usize) -> ProjectionResult {
    let theta_star = point_unchecked(basis, &j);
    let delta = theta - &theta_star;
    let dist_p = p_inner(&delta, &delta, basis).max(0.0).sqrt();
    let s = delta.stacked().transpose() * &basis.p_mat * theta_star.stacked() * &basis.sigma;
    ProjectionResult {
        symmetry_residual: (&s - s.transpose()).norm(),
        symmetry_scale: s.norm(),
        theta_star,
        j_star: j,
        dist_p,
        restart,
        iterations,
    }
}

/// P-norm projection of `theta` onto the manifold of minimizers.
///
/// Minimizes `F` over both components of the orthogonal group from 16 starts
/// (half per determinant sign; one per component is the polar factor of the
/// linear term, the rest are Haar-random). Ties go to the lowest restart.
pub fn project(basis: &ManifoldBasis, theta: &Theta) -> Result<ProjectionResult> {
    let objective = ProjectionObjective::new(basis, theta);
    let mut best: Option<(f64, Mat, usize, usize)> = None;
    for (r, start) in projection_starts(&objective, basis.d()).into_iter().enumerate() {
        let f_start = objective.value(&start);
        let (j, f, iters) = objective.descend(start);
        if !f.is_finite() || f > f_start {
            continue;
        }
        if best.as_ref().is_none_or(|(bf, ..)| f < *bf) {
            best = Some((f, j, r, iters));
        }
    }
    let Some((_, j, r, iters)) = best else {
        return Err(Error::Projection(format!(
            "no restart reduced the projection objective (|C| = {:.3e}, |theta|_P^2/2 = {:.3e})",
            objective.c.norm(),
            objective.half_norm
        )));
    };
    Ok(finish(basis, theta, j, r, iters))
}

/// Single descent from `j0`; cheap tracking of the projection along a path.
pub fn project_from(basis: &ManifoldBasis, theta: &Theta, j0: &Mat) -> Result<ProjectionResult> {
    let objective = ProjectionObjective::new(basis, theta);
    let start = polar(j0);
    let (j, f, iters) = objective.descend(start);
    if !f.is_finite() {
        return Err(Error::Projection("warm-started projection produced a non-finite objective".into()));
    }
    Ok(finish(basis, theta, j, 0, iters))
}

/// Value of `F(J)` for diagnostics and global-optimality spot checks.
pub fn projection_objective(basis: &ManifoldBasis, theta: &Theta, j: &Mat) -> f64 {
    ProjectionObjective::new(basis, theta).value(j)
}

// ---------------------------------------------------------------------------
// Landscape inequalities

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub dist_p: f64,
    /// `dist_p <= eps0`.
    pub in_ball: bool,
    /// `<P^{-1} grad Q, Delta>_P`.
    pub convexity_lhs: f64,
    /// `alpha ||Delta||_P^2`.
    pub convexity_rhs: f64,
    /// `||P^{-1} grad Q||_P^2`.
    pub smoothness_lhs: f64,
    /// `beta ||Delta||_P^2`.
    pub smoothness_rhs: f64,
    /// `Q - Q*`.
    pub descent_lhs: f64,
    /// `sqrt(beta)/2 ||Delta||_P^2`.
    pub descent_rhs: f64,
    pub symmetry_residual: f64,
    pub relative_symmetry_residual: f64,
    /// Floating-point error bound on the entries of `grad Q`.
    pub gradient_roundoff: f64,
}

impl LandscapeReport {
    pub fn convexity_margin(&self) -> f64 {
        self.convexity_lhs - self.convexity_rhs
    }

    pub fn smoothness_margin(&self) -> f64 {
        self.smoothness_rhs - self.smoothness_lhs
    }

    pub fn descent_margin(&self) -> f64 {
        self.descent_rhs - self.descent_lhs
    }

    /// All three inequalities hold up to round-off.
    pub fn holds(&self) -> bool {
        let conv_slack = 1e-12 * self.convexity_rhs + self.gradient_roundoff * self.dist_p;
        let smooth_slack = 1e-12 * self.smoothness_rhs + self.gradient_roundoff.powi(2);
        let descent_slack = 1e-12 * self.descent_rhs;
        self.convexity_margin() >= -conv_slack
            && self.smoothness_margin() >= -smooth_slack
            && self.descent_margin() >= -descent_slack
    }
}

/// Evaluates both one-point inequalities and the descent bound at `theta`.
pub fn landscape_check(theta: &Theta, instance: &ProblemInstance) -> Result<LandscapeReport> {
    let (basis, constants) = build_basis(instance)?;
    landscape_check_with(theta, instance, &basis, &constants)
}

pub fn landscape_check_with(
    theta: &Theta,
    instance: &ProblemInstance,
    basis: &ManifoldBasis,
    constants: &LandscapeConstants,
) -> Result<LandscapeReport> {
    let proj = project(basis, theta)?;
    let dist2 = proj.dist_p * proj.dist_p;
    let delta = theta - &proj.theta_star;
    let grad = population_gradient(theta, instance);
    let convexity_lhs = grad.da.dot(&delta.a) + grad.db.dot(&delta.b);
    let smoothness_lhs = grad.da.norm_squared() + grad.db.dot(&(&basis.sigma_inv * &grad.db));
    let descent_lhs = population_excess(theta, instance) + population_regularizer(theta, instance);
    let t = theta.norm();
    let s = basis.sigma.norm();
    let gradient_roundoff = 64.0 * f64::EPSILON * (t.powi(3) * s * s + instance.m.norm() * t * s) * (1.0 + s);
    Ok(LandscapeReport {
        dist_p: proj.dist_p,
        in_ball: proj.dist_p <= constants.eps0,
        convexity_lhs,
        convexity_rhs: constants.alpha * dist2,
        smoothness_lhs,
        smoothness_rhs: constants.beta * dist2,
        descent_lhs,
        descent_rhs: 0.5 * constants.beta.sqrt() * dist2,
        symmetry_residual: proj.symmetry_residual,
        relative_symmetry_residual: proj.relative_symmetry_residual(),
        gradient_roundoff,
    })
}

/// Point uniformly distributed in the P-ball of `radius` around `centre`.
pub fn sample_in_ball(basis: &ManifoldBasis, centre: &Theta, radius: f64, rng: &mut StreamRng) -> Theta {
    let (p, d) = centre.a.shape();
    let dim = (p + d) * d;
    let wa = Mat::from_fn(p, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let wb = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    // whitened direction: ||(wa, Sigma^{-1/2} wb)||_P = ||(wa, wb)||_F
    let dir = Theta { a: wa, b: &basis.sigma_neg_half * wb };
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / dim as f64);
    let scale = r / p_norm(&dir, basis);
    centre + &(&dir * scale)
}

// ---------------------------------------------------------------------------
// Assumption report

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Sigma positive definite.
    pub a1: bool,
    pub sigma_min_eigenvalue: f64,
    pub sigma_max_eigenvalue: f64,
    /// `M Sigma^{1/2}` has full column rank.
    pub a2: bool,
    pub sigma_d: f64,
    pub sigma_1: f64,
    /// `||M Sigma^{1/2}||_op < 1/16`.
    pub a3: bool,
    pub a3_margin: f64,
    /// `sqrt(sigma_1) < 1/16`.
    pub integrability: bool,
    pub integrability_margin: f64,
    pub constants: Option<LandscapeConstants>,
}

pub fn assumption_check(instance: &ProblemInstance) -> AssumptionReport {
    let (values, _) = sym_eigen(&instance.sigma);
    let lmin = values.first().copied().unwrap_or(0.0);
    let lmax = values.last().copied().unwrap_or(0.0);
    let a1 = lmax > 0.0 && lmin > crate::linalg::RELATIVE_FLOOR * lmax;
    let sv = crate::linalg::singular_values(&instance.m_sigma_half());
    let s1 = sv.first().copied().unwrap_or(0.0);
    let sd = sv.get(instance.d().saturating_sub(1)).copied().unwrap_or(0.0);
    let a2 = instance.p() >= instance.d() && s1 > 0.0 && sd > RANK_TOL * s1;
    let a3_margin = 1.0 / 16.0 - s1;
    let integrability_margin = 1.0 / 16.0 - s1.sqrt();
    let constants = if a1 && a2 { Some(LandscapeConstants::from_spectra(s1, sd, lmax, lmin)) } else { None };
    AssumptionReport {
        a1,
        sigma_min_eigenvalue: lmin,
        sigma_max_eigenvalue: lmax,
        a2,
        sigma_d: sd,
        sigma_1: s1,
        a3: a3_margin > 0.0,
        a3_margin,
        integrability: integrability_margin > 0.0,
        integrability_margin,
        constants,
    }
}
