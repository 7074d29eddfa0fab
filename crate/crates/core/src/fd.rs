//! Central finite differences for checking analytic gradients.

use crate::linalg::Mat;
use crate::losses::GradTheta;
use crate::model::Theta;

/// Central-difference gradient of `f` at `theta` with step `h` per entry.
pub fn central_difference<F: Fn(&Theta) -> f64>(f: F, theta: &Theta, h: f64) -> GradTheta {
    let mut probe = theta.clone();
    let mut partial = |select: fn(&mut Theta) -> &mut Mat, rows: usize, cols: usize| {
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let orig = select(&mut probe)[(i, j)];
                select(&mut probe)[(i, j)] = orig + h;
                let up = f(&probe);
                select(&mut probe)[(i, j)] = orig - h;
                let down = f(&probe);
                select(&mut probe)[(i, j)] = orig;
                out[(i, j)] = (up - down) / (2.0 * h);
            }
        }
        out
    };
    let (p, d) = theta.a.shape();
    let da = partial(|t| &mut t.a, p, d);
    let db = partial(|t| &mut t.b, d, d);
    GradTheta { da, db }
}

/// Largest entry-wise relative error; entries where both values are below
/// `abs_floor` in magnitude are compared absolutely.
pub fn max_relative_error(analytic: &GradTheta, numeric: &GradTheta, abs_floor: f64) -> f64 {
    let pairs = analytic
        .da
        .iter()
        .zip(numeric.da.iter())
        .chain(analytic.db.iter().zip(numeric.db.iter()));
    pairs
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < abs_floor {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Theta { a: Mat::from_row_slice(2, 1, &[1.0, -2.0]), b: Mat::from_element(1, 1, 0.5) };
        let g = central_difference(|t| t.a.norm_squared() + 3.0 * t.b[(0, 0)].powi(2), &theta, 1e-4);
        assert!((g.da[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((g.da[(1, 0)] + 4.0).abs() < 1e-9);
        assert!((g.db[(0, 0)] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_entries_compare_absolutely() {
        let a = GradTheta { da: Mat::from_element(1, 1, 1e-12), db: Mat::from_element(1, 1, 1.0) };
        let n = GradTheta { da: Mat::from_element(1, 1, 3e-12), db: Mat::from_element(1, 1, 1.0) };
        assert!(max_relative_error(&a, &n, 1e-8) < 1e-11);
    }
}
