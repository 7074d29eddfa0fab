//! The planted regression model, data generation, and the softmax
//! attention weights and moments that every loss and gradient is built on.

use std::ops::{Add, Mul, Sub};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, Mat};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Response dimension.
    pub p: usize,
    /// Covariate dimension.
    pub d: usize,
    /// Number of samples.
    pub n: usize,
}

impl Dims {
    pub fn new(p: usize, d: usize, n: usize) -> Result<Self> {
        let dims = Dims { p, d, n };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidDims("d must be at least 1".into()));
        }
        if self.p < self.d {
            return Err(Error::InvalidDims(format!("need p >= d, got p={} d={}", self.p, self.d)));
        }
        if self.n < self.d {
            return Err(Error::InvalidDims(format!("need n >= d, got n={} d={}", self.n, self.d)));
        }
        Ok(())
    }
}

/// Planted model `y = M x + z`, `x ~ N(0, Sigma)`, `z ~ N(0, Omega)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    #[serde(with = "crate::linalg::serde_rows")]
    pub m: Mat,
    #[serde(with = "crate::linalg::serde_rows")]
    pub sigma: Mat,
    #[serde(with = "crate::linalg::serde_rows")]
    pub omega: Mat,
}

impl ProblemInstance {
    pub fn new(m: Mat, sigma: Mat, omega: Mat) -> Result<Self> {
        let (p, d) = m.shape();
        if sigma.shape() != (d, d) {
            return Err(Error::Shape(format!("Sigma must be {d}x{d}, got {:?}", sigma.shape())));
        }
        if omega.shape() != (p, p) {
            return Err(Error::Shape(format!("Omega must be {p}x{p}, got {:?}", omega.shape())));
        }
        Ok(ProblemInstance { m, sigma, omega })
    }

    pub fn p(&self) -> usize {
        self.m.nrows()
    }

    pub fn d(&self) -> usize {
        self.m.ncols()
    }

    /// `L* = Tr(Omega) / 2`.
    pub fn irreducible_loss(&self) -> f64 {
        0.5 * self.omega.trace()
    }

    pub fn sigma_half(&self) -> Mat {
        psd_sqrt(&self.sigma)
    }

    pub fn m_sigma_half(&self) -> Mat {
        &self.m * self.sigma_half()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d`, row i is `x_i`.
    pub x: Mat,
    /// `n x p`, row i is `y_i`.
    pub y: Mat,
    /// Noise realizations, when the generator kept them.
    pub z: Option<Mat>,
}

impl Dataset {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
        }
        Ok(Dataset { x, y, z: None })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    /// `(1/n) sum_i x_i x_i^T`.
    pub fn sample_covariance(&self) -> Mat {
        self.x.tr_mul(&self.x) / self.n() as f64
    }

    /// Rows `indices` as a new dataset (noise dropped).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices.iter()),
            y: self.y.select_rows(indices.iter()),
            z: None,
        }
    }
}

/// Attention parameters: `A` is the `p x d` value map, `B` the `d x d`
/// bilinear form inside the softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    #[serde(with = "crate::linalg::serde_rows")]
    pub a: Mat,
    #[serde(with = "crate::linalg::serde_rows")]
    pub b: Mat,
}

impl Theta {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        let d = a.ncols();
        if b.shape() != (d, d) {
            return Err(Error::Shape(format!("B must be {d}x{d}, got {:?}", b.shape())));
        }
        Ok(Theta { a, b })
    }

    pub fn zeros(p: usize, d: usize) -> Self {
        Theta { a: Mat::zeros(p, d), b: Mat::zeros(d, d) }
    }

    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    /// Vertical concatenation `[A; B]`, a `(p+d) x d` matrix.
    pub fn stacked(&self) -> Mat {
        let (p, d) = self.a.shape();
        let mut s = Mat::zeros(p + d, d);
        s.rows_mut(0, p).copy_from(&self.a);
        s.rows_mut(p, d).copy_from(&self.b);
        s
    }

    pub fn from_stacked(s: &Mat, p: usize) -> Result<Self> {
        let d = s.ncols();
        if s.nrows() != p + d {
            return Err(Error::Shape(format!("stacked theta must have {} rows, got {}", p + d, s.nrows())));
        }
        Ok(Theta { a: s.rows(0, p).into_owned(), b: s.rows(p, d).into_owned() })
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }

    /// Frobenius norm of the stacked matrix.
    pub fn norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared()).sqrt()
    }

    /// Standard-normal entries scaled by `scale`.
    pub fn random<R: Rng + ?Sized>(p: usize, d: usize, scale: f64, rng: &mut R) -> Self {
        let a = Mat::from_fn(p, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let b = Mat::from_fn(d, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        Theta { a, b }
    }
}

impl Add for &Theta {
    type Output = Theta;
    fn add(self, rhs: &Theta) -> Theta {
        Theta { a: &self.a + &rhs.a, b: &self.b + &rhs.b }
    }
}

impl Sub for &Theta {
    type Output = Theta;
    fn sub(self, rhs: &Theta) -> Theta {
        Theta { a: &self.a - &rhs.a, b: &self.b - &rhs.b }
    }
}

impl Mul<f64> for &Theta {
    type Output = Theta;
    fn mul(self, rhs: f64) -> Theta {
        Theta { a: &self.a * rhs, b: &self.b * rhs }
    }
}

/// Softmax weights and the attention-weighted moments of the covariates.
#[derive(Debug, Clone)]
pub struct AttentionStats {
    /// `n x n`, row-stochastic.
    pub weights: Mat,
    /// `n x d`, row i is `mu_i = sum_j W_ij x_j`.
    pub mu: Mat,
    /// `Sigma_i = sum_j W_ij (x_j - mu_i)(x_j - mu_i)^T`.
    pub sigma_local: Vec<Mat>,
}

/// Appendix A recipe: `M = Y / (32 ||Y||)`, `Sigma = (0.1 I + X X^T) / ||.||`,
/// `Omega = 0.1 I`, with `X` (`d x d`) and `Y` (`p x d`) standard normal.
pub fn sample_instance(dims: Dims, seed: u64) -> ProblemInstance {
    let (p, d) = (dims.p, dims.d);
    let mut rng = rng::stream(seed, rng::tags::INSTANCE, 0);
    let x = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = Mat::from_fn(p, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = &y / (32.0 * crate::linalg::op_norm(&y));
    let raw = Mat::identity(d, d) * 0.1 + &x * x.transpose();
    let sigma = crate::linalg::symmetrize(&(&raw / crate::linalg::op_norm(&raw)));
    let omega = Mat::identity(p, p) * 0.1;
    ProblemInstance { m, sigma, omega }
}

/// Precomputed square roots for repeated sampling from one instance.
#[derive(Debug, Clone)]
pub struct Sampler {
    instance: ProblemInstance,
    sigma_half: Mat,
    omega_half: Mat,
}

impl Sampler {
    pub fn new(instance: &ProblemInstance) -> Self {
        Sampler {
            instance: instance.clone(),
            sigma_half: psd_sqrt(&instance.sigma),
            omega_half: psd_sqrt(&instance.omega),
        }
    }

    pub fn covariates(&self, n: usize, rng: &mut StreamRng) -> Mat {
        let g = Mat::from_fn(n, self.instance.d(), |_, _| rng.sample::<f64, _>(StandardNormal));
        g * &self.sigma_half
    }

    /// Draw `n` samples. With `with_noise = false` the responses are
    /// `Y = X M^T` and no noise is drawn.
    pub fn dataset(&self, n: usize, rng: &mut StreamRng, with_noise: bool) -> Dataset {
        let x = self.covariates(n, rng);
        let clean = &x * self.instance.m.transpose();
        if !with_noise {
            return Dataset { x, y: clean, z: None };
        }
        let h = Mat::from_fn(n, self.instance.p(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = h * &self.omega_half;
        let y = clean + &z;
        Dataset { x, y, z: Some(z) }
    }
}

/// `x_i = Sigma^{1/2} g_i`, `z_i = Omega^{1/2} h_i`, `y_i = M x_i + z_i`.
pub fn sample_dataset(instance: &ProblemInstance, n: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, rng::tags::DATASET, 0);
    Sampler::new(instance).dataset(n, &mut rng, true)
}

/// Row-wise stabilized softmax, in place.
pub(crate) fn softmax_rows(scores: &mut Mat) {
    for mut row in scores.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row /= total;
    }
}

/// `W_ij = softmax_j(x_i^T B x_j)`.
pub fn attention_weights(b: &Mat, x: &Mat) -> Mat {
    let mut scores = x * b * x.transpose();
    softmax_rows(&mut scores);
    scores
}

/// Weights and means only; the local covariances are never formed.
pub(crate) fn attention_means(b: &Mat, x: &Mat) -> (Mat, Mat) {
    let w = attention_weights(b, x);
    let mu = &w * x;
    (w, mu)
}

pub fn attention_moments(b: &Mat, x: &Mat) -> AttentionStats {
    let (weights, mu) = attention_means(b, x);
    let (n, d) = x.shape();
    let mut sigma_local = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = Mat::zeros(d, d);
        let mu_i = mu.row(i);
        for j in 0..n {
            let diff = (x.row(j) - mu_i).transpose();
            s.ger(weights[(i, j)], &diff, &diff, 1.0);
        }
        sigma_local.push(crate::linalg::symmetrize(&s));
    }
    AttentionStats { weights, mu, sigma_local }
}

/// `y_hat = A sum_j w_j x_j` with `w = softmax_j(x_query^T B x_j)`.
pub fn predict(theta: &Theta, x_train: &Mat, x_query: &DVector<f64>) -> DVector<f64> {
    let s = x_train * theta.b.transpose() * x_query;
    let mut scores = Mat::from_row_slice(1, s.len(), s.as_slice());
    softmax_rows(&mut scores);
    let mean = (scores * x_train).transpose();
    DVector::from_column_slice((&theta.a * mean).as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::linalg::{op_norm, singular_values};
    use proptest::prelude::*;

    fn random_mat(rng: &mut StreamRng, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn dims_validation() {
        assert!(Dims::new(20, 10, 500).is_ok());
        assert!(Dims::new(3, 4, 10).is_err());
        assert!(Dims::new(3, 0, 10).is_err());
        assert!(Dims::new(3, 2, 1).is_err());
    }

    #[test]
    fn appendix_instance_satisfies_assumptions() {
        for seed in 0..5 {
            let inst = sample_instance(Dims::new(20, 10, 500).unwrap(), seed);
            assert!((op_norm(&inst.sigma) - 1.0).abs() < 1e-12);
            let s = singular_values(&inst.m_sigma_half());
            assert!(s[0] <= 1.0 / 32.0 + 1e-15);
            assert!(s[0] < 1.0 / 16.0);
            assert!((inst.irreducible_loss() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_is_deterministic() {
        let dims = Dims::new(5, 3, 10).unwrap();
        assert_eq!(sample_instance(dims, 11), sample_instance(dims, 11));
        assert_ne!(sample_instance(dims, 11), sample_instance(dims, 12));
    }

    #[test]
    fn dataset_zero_noise_is_exact() {
        let mut inst = sample_instance(Dims::new(4, 2, 10).unwrap(), 1);
        inst.omega = Mat::zeros(4, 4);
        let data = sample_dataset(&inst, 50, 2);
        assert_eq!(data.y, &data.x * inst.m.transpose());
    }

    #[test]
    fn dataset_is_deterministic_and_keeps_noise() {
        let inst = sample_instance(Dims::new(4, 2, 10).unwrap(), 1);
        let a = sample_dataset(&inst, 30, 5);
        let b = sample_dataset(&inst, 30, 5);
        assert_eq!(a, b);
        let z = a.z.as_ref().unwrap();
        assert_eq!(a.y, &a.x * inst.m.transpose() + z);
    }

    #[test]
    fn covariance_concentrates() {
        let d = 3;
        let inst = ProblemInstance::new(Mat::identity(d, d), Mat::identity(d, d), Mat::zeros(d, d)).unwrap();
        let data = sample_dataset(&inst, 10_000, 4);
        let err = op_norm(&(data.sample_covariance() - Mat::identity(d, d)));
        assert!(err < 0.1, "err = {err}");
        let small = sample_dataset(&inst, 100, 4);
        assert!(op_norm(&(small.sample_covariance() - Mat::identity(d, d))) > err);
    }

    #[test]
    fn zero_form_gives_uniform_weights() {
        let mut rng = rng::stream(1, "t", 0);
        let x = random_mat(&mut rng, 7, 3, 1.0);
        let w = attention_weights(&Mat::zeros(3, 3), &x);
        assert!(w.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let x = Mat::from_fn(5, 2, |_, c| [0.3, -1.2][c]);
        let b = Mat::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 3.0]);
        let w = attention_weights(&b, &x);
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn scalar_softmax_hand_value() {
        // scores for query x = 1 against (0, 1, -1) are (0, 1, -1)
        let x = Mat::from_column_slice(3, 1, &[0.0, 1.0, -1.0]);
        let w = attention_weights(&Mat::from_element(1, 1, 1.0), &x);
        let e = [1.0f64, 1.0f64.exp(), (-1.0f64).exp()];
        let total: f64 = e.iter().sum();
        let expected = [0.24473, 0.66524, 0.09003];
        for j in 0..3 {
            assert!((w[(1, j)] - e[j] / total).abs() < 1e-15);
            assert!((w[(1, j)] - expected[j]).abs() < 5e-6);
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let x = Mat::from_column_slice(3, 1, &[30.0, -30.0, 10.0]);
        let w = attention_weights(&Mat::from_element(1, 1, 5.0), &x);
        assert!(w.iter().all(|v| v.is_finite()));
        for i in 0..3 {
            assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_moments() {
        let x = Mat::from_row_slice(1, 2, &[0.4, -0.7]);
        let stats = attention_moments(&Mat::identity(2, 2), &x);
        assert_eq!(stats.mu, x);
        assert!(stats.sigma_local[0].norm() < 1e-15);
    }

    #[test]
    fn zero_form_means_are_sample_mean() {
        let mut rng = rng::stream(2, "t", 0);
        let x = random_mat(&mut rng, 9, 3, 1.0);
        let stats = attention_moments(&Mat::zeros(3, 3), &x);
        let mean = x.row_mean();
        for i in 0..9 {
            assert!((stats.mu.row(i) - &mean).norm() < 1e-14);
        }
    }

    #[test]
    fn predict_edge_cases() {
        let mut rng = rng::stream(3, "t", 0);
        let x = random_mat(&mut rng, 6, 2, 1.0);
        let q = DVector::from_vec(vec![0.5, -0.1]);
        let theta = Theta::random(3, 2, 1.0, &mut rng);
        let one = x.rows(0, 1).into_owned();
        let yhat = predict(&theta, &one, &q);
        assert!((yhat - &theta.a * one.row(0).transpose()).norm() < 1e-14);

        let flat = Theta { a: theta.a.clone(), b: Mat::zeros(2, 2) };
        let yhat = predict(&flat, &x, &q);
        assert!((yhat - &theta.a * x.row_mean().transpose()).norm() < 1e-14);

        let zero_a = Theta { a: Mat::zeros(3, 2), b: theta.b.clone() };
        assert!(predict(&zero_a, &x, &q).norm() == 0.0);
    }

    #[test]
    fn stacked_round_trip() {
        let mut rng = rng::stream(4, "t", 0);
        let theta = Theta::random(4, 2, 1.0, &mut rng);
        let s = theta.stacked();
        assert_eq!(s.shape(), (6, 2));
        assert_eq!(Theta::from_stacked(&s, 4).unwrap(), theta);
    }

    fn naive_weights(b: &Mat, x: &Mat) -> Mat {
        let mut s = x * b * x.transpose();
        for mut row in s.row_iter_mut() {
            row.apply(|v| *v = v.exp());
            let t = row.sum();
            row /= t;
        }
        s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn weights_are_row_stochastic(seed in any::<u64>(), n in 1usize..12, d in 1usize..5) {
            let mut rng = rng::stream(seed, "prop", 0);
            let x = random_mat(&mut rng, n, d, 1.0);
            let b = Mat::from_fn(d, d, |_, _| rng.random_range(-5.0..5.0));
            let w = attention_weights(&b, &x);
            for i in 0..n {
                prop_assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
                prop_assert!(w.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn stabilized_matches_naive(seed in any::<u64>(), n in 1usize..10, d in 1usize..4) {
            let mut rng = rng::stream(seed, "prop-naive", 0);
            let x = random_mat(&mut rng, n, d, 0.5);
            let b = random_mat(&mut rng, d, d, 0.5);
            let diff = (attention_weights(&b, &x) - naive_weights(&b, &x)).norm();
            prop_assert!(diff < 1e-13);
        }

        #[test]
        fn centered_and_uncentered_moments_agree(seed in any::<u64>(), n in 1usize..10, d in 1usize..4) {
            let mut rng = rng::stream(seed, "prop-mom", 0);
            let x = random_mat(&mut rng, n, d, 1.0);
            let b = random_mat(&mut rng, d, d, 1.0);
            let stats = attention_moments(&b, &x);
            for i in 0..n {
                let mut second = Mat::zeros(d, d);
                for j in 0..n {
                    let xj = x.row(j).transpose();
                    second.ger(stats.weights[(i, j)], &xj, &xj, 1.0);
                }
                let mu = stats.mu.row(i).transpose();
                let alt = second - &mu * mu.transpose();
                prop_assert!((&stats.sigma_local[i] - alt).norm() < 1e-10);
                let eig = crate::linalg::sym_eigen(&stats.sigma_local[i]).0;
                prop_assert!(eig[0] > -1e-12);
            }
        }

        #[test]
        fn means_lie_in_bounding_box(seed in any::<u64>(), n in 1usize..10, d in 1usize..4) {
            // convex hull membership implies coordinate-wise bounds
            let mut rng = rng::stream(seed, "prop-hull", 0);
            let x = random_mat(&mut rng, n, d, 1.0);
            let b = random_mat(&mut rng, d, d, 2.0);
            let stats = attention_moments(&b, &x);
            for c in 0..d {
                let lo = x.column(c).min() - 1e-12;
                let hi = x.column(c).max() + 1e-12;
                prop_assert!(stats.mu.column(c).iter().all(|&v| v >= lo && v <= hi));
            }
        }
    }
}
