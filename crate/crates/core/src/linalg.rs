//! Small dense helpers on top of nalgebra: SPD factorizations, sorted
//! SVDs, polar factors and a few norms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Relative tolerance used to decide whether an input is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative eigenvalue floor applied by [`default_floor`].
pub const RELATIVE_FLOOR: f64 = 1e-12;

/// `S^{1/2}`, `S^{-1/2}` and `S^{-1}` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactors {
    pub sqrt: Mat,
    pub inv_sqrt: Mat,
    pub inv: Mat,
    /// Eigenvalues after clamping, ascending.
    pub eigenvalues: Vec<f64>,
}

impl SpdFactors {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }
}

pub fn asymmetry(s: &Mat) -> f64 {
    let scale = s.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (s - s.transpose()).norm() / scale
}

pub fn symmetrize(s: &Mat) -> Mat {
    (s + s.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen(s: &Mat) -> (Vec<f64>, Mat) {
    let eig = SymmetricEigen::new(symmetrize(s));
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn spectral_map(vectors: &Mat, values: &[f64], f: impl Fn(f64) -> f64) -> Mat {
    let n = values.len();
    let mut scaled = vectors.clone();
    for c in 0..n {
        let w = f(values[c]);
        scaled.column_mut(c).scale_mut(w);
    }
    let out = scaled * vectors.transpose();
    symmetrize(&out)
}

/// The floor `1e-12 * lambda_max(S)` used when no explicit floor is given.
pub fn default_floor(s: &Mat) -> f64 {
    let (values, _) = sym_eigen(s);
    RELATIVE_FLOOR * values.last().copied().unwrap_or(0.0).max(0.0)
}

/// Factor a symmetric PSD matrix through its eigendecomposition, clamping
/// eigenvalues to `max(lambda, floor)`.
pub fn spd_factor(s: &Mat, floor: f64) -> Result<SpdFactors> {
    if !s.is_square() {
        return Err(Error::Shape(format!(
            "spd_factor expects a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let asym = asymmetry(s);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let floor = floor.max(0.0);
    let (values, vectors) = sym_eigen(s);
    if values.iter().all(|&v| v < floor) || values.iter().all(|&v| v <= 0.0) {
        return Err(Error::DegenerateSpd { floor });
    }
    let clamped: Vec<f64> = values.iter().map(|&v| v.max(floor)).collect();
    if clamped[0] <= 0.0 {
        return Err(Error::DegenerateSpd { floor });
    }
    Ok(SpdFactors {
        sqrt: spectral_map(&vectors, &clamped, f64::sqrt),
        inv_sqrt: spectral_map(&vectors, &clamped, |v| 1.0 / v.sqrt()),
        inv: spectral_map(&vectors, &clamped, |v| 1.0 / v),
        eigenvalues: clamped,
    })
}

/// [`spd_factor`] with the default relative floor.
pub fn spd_factor_default(s: &Mat) -> Result<SpdFactors> {
    spd_factor(s, default_floor(s))
}

/// Square root of a PSD matrix; negative eigenvalues (round-off) are set to 0.
pub fn psd_sqrt(s: &Mat) -> Mat {
    let (values, vectors) = sym_eigen(s);
    spectral_map(&vectors, &values, |v| v.max(0.0).sqrt())
}

/// Thin SVD `M = U diag(s) V^T` with singular values sorted descending.
/// `U` is `rows x r`, `V` is `cols x r`, `r = min(rows, cols)`.
pub fn svd_sorted(m: &Mat) -> (Mat, Vec<f64>, Mat) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested U");
    let v_t = svd.v_t.expect("svd requested V^T");
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = Mat::from_fn(u.nrows(), r, |i, c| u[(i, order[c])]);
    let v_sorted = Mat::from_fn(v_t.ncols(), r, |i, c| v_t[(order[c], i)]);
    (u_sorted, s, v_sorted)
}

pub fn singular_values(m: &Mat) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn op_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m)[0]
}

/// Orthogonal polar factor `U V^T` of a square matrix.
pub fn polar(x: &Mat) -> Mat {
    let svd = x.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

pub fn orthogonality_defect(j: &Mat) -> f64 {
    (j.transpose() * j - Mat::identity(j.ncols(), j.ncols())).norm()
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign
/// correction), optionally forced onto a determinant component.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize, det_sign: Option<f64>) -> Mat {
    let g = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    if let Some(sign) = det_sign {
        if q.determinant().signum() != sign.signum() {
            q.column_mut(0).neg_mut();
        }
    }
    q
}

pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    // Tr(A^T B)
    a.dot(b)
}

pub fn diag(values: &[f64]) -> Mat {
    Mat::from_diagonal(&DVector::from_row_slice(values))
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Serialize a matrix as a list of rows.
pub mod serde_rows {
    use super::Mat;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}
