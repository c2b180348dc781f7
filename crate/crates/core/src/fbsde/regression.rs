//! Least-squares regression on standardized polynomial features.

use nalgebra::DMatrix;

use crate::model::{Matrix, Vector};

/// Monomials up to a total degree in standardized coordinates
/// `z_j = (x_j − c_j) / s_j`.
///
/// Coordinates with (numerically) zero spread are dropped, so a point-mass
/// sample is fitted by the constant feature alone.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    dim: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

fn multi_indices(active: &[usize], dim: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; dim]];
    let mut frontier = vec![vec![0u32; dim]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // only raise coordinates at or after the last raised one, so each
            // monomial is produced once
            let last = active
                .iter()
                .rposition(|&j| e[j] > 0)
                .unwrap_or(0);
            for &j in &active[last..] {
                let mut f = e.clone();
                f[j] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl FeatureMap {
    /// Standardizes with the sample mean and standard deviation of the
    /// row-major `points`.
    pub fn fit(points: &[f64], dim: usize, degree: u32) -> Self {
        let n = (points.len() / dim).max(1);
        let mut center = vec![0.0; dim];
        for row in points.chunks(dim) {
            for (c, v) in center.iter_mut().zip(row) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let mut scale = vec![0.0; dim];
        for row in points.chunks(dim) {
            for j in 0..dim {
                let d = row[j] - center[j];
                scale[j] += d * d;
            }
        }
        scale.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt());
        let active: Vec<usize> = (0..dim)
            .filter(|&j| scale[j] > 1e-12 * (1.0 + center[j].abs()))
            .collect();
        for j in 0..dim {
            if !active.contains(&j) {
                scale[j] = 1.0;
            }
        }
        Self {
            dim,
            center,
            scale,
            exponents: multi_indices(&active, dim, degree),
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = (0..self.dim).map(|j| (x[j] - self.center[j]) / self.scale[j]).collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e
                .iter()
                .zip(&z)
                .fold(1.0, |acc, (&p, zj)| if p == 0 { acc } else { acc * zj.powi(p as i32) });
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// Jacobian of the feature vector with respect to `x`, `len × dim`.
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        let z: Vec<f64> = (0..self.dim).map(|j| (x[j] - self.center[j]) / self.scale[j]).collect();
        Matrix::from_fn(self.len(), self.dim, |r, j| {
            let e = &self.exponents[r];
            if e[j] == 0 {
                return 0.0;
            }
            let mut v = f64::from(e[j]) * z[j].powi(e[j] as i32 - 1) / self.scale[j];
            for (l, &p) in e.iter().enumerate() {
                if l != j && p > 0 {
                    v *= z[l].powi(p as i32);
                }
            }
            v
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }
}

/// Design matrix of one sample together with the pseudo-inverse of its Gram matrix.
pub struct Design {
    pub features: FeatureMap,
    phi: DMatrix<f64>,
    gram_pinv: DMatrix<f64>,
    leverage: Vec<f64>,
}

impl Design {
    pub fn new(points: &[f64], dim: usize, degree: u32) -> Self {
        let features = FeatureMap::fit(points, dim, degree);
        let n = points.len() / dim;
        let p = features.len();
        let mut phi = DMatrix::zeros(n, p);
        let mut row = vec![0.0; p];
        for (i, x) in points.chunks(dim).enumerate() {
            features.eval_into(x, &mut row);
            for (j, v) in row.iter().enumerate() {
                phi[(i, j)] = *v;
            }
        }
        let gram = phi.transpose() * &phi;
        let svd = gram.svd(true, true);
        let top = svd.singular_values.max();
        let gram_pinv = svd
            .pseudo_inverse(1e-12 * top.max(f64::MIN_POSITIVE))
            .expect("SVD computed with both factors");
        let leverage = (0..n)
            .map(|i| {
                let row = phi.row(i);
                (row * &gram_pinv * row.transpose())[(0, 0)]
            })
            .collect();
        Self {
            features,
            phi,
            gram_pinv,
            leverage,
        }
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    /// Least-squares coefficients (`features × outputs`) for the targets (`n × outputs`).
    pub fn solve(&self, targets: &DMatrix<f64>) -> Matrix {
        &self.gram_pinv * (self.phi.transpose() * targets)
    }

    /// Fitted values `n × outputs`.
    pub fn fitted(&self, coef: &Matrix) -> DMatrix<f64> {
        &self.phi * coef
    }

    /// Leave-one-out fitted values: row `i` is the prediction at sample `i`
    /// of the fit computed without it, `(ŷ_i − h_ii y_i) / (1 − h_ii)`.
    pub fn fitted_loo(&self, targets: &DMatrix<f64>, coef: &Matrix) -> DMatrix<f64> {
        let mut out = self.fitted(coef);
        for (i, &h) in self.leverage.iter().enumerate() {
            if h < 1.0 - 1e-12 {
                for c in 0..out.ncols() {
                    out[(i, c)] = (out[(i, c)] - h * targets[(i, c)]) / (1.0 - h);
                }
            } else {
                out.row_mut(i).fill(0.0);
            }
        }
        out
    }

    /// Largest `|mean(φ_j r)|` over features and outputs, relative to the
    /// target and feature scales.
    pub fn orthogonality(&self, targets: &DMatrix<f64>, coef: &Matrix) -> f64 {
        let resid = targets - self.fitted(coef);
        let n = self.n() as f64;
        let cross = self.phi.transpose() * &resid / n;
        let mut worst: f64 = 0.0;
        for j in 0..cross.nrows() {
            let fs = (self.phi.column(j).norm_squared() / n).sqrt();
            for c in 0..cross.ncols() {
                let rs = (targets.column(c).norm_squared() / n).sqrt();
                let denom = fs * rs;
                if denom > 0.0 {
                    worst = worst.max(cross[(j, c)].abs() / denom);
                }
            }
        }
        worst
    }
}

/// Fitted map at one knot: `u(x) = coefᵀ φ(x)`.
#[derive(Debug, Clone)]
pub struct KnotFit {
    pub features: FeatureMap,
    pub coef: Matrix,
}

impl KnotFit {
    pub fn outputs(&self) -> usize {
        self.coef.ncols()
    }

    pub fn eval(&self, x: &[f64]) -> Vector {
        let phi = Vector::from_vec(self.features.eval(x));
        self.coef.transpose() * phi
    }

    /// `∂u/∂x`, `outputs × dim`.
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        self.coef.transpose() * self.features.jacobian(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn monomial_counts() {
        let pts: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(FeatureMap::fit(&pts, 1, 2).len(), 3);
        assert_eq!(FeatureMap::fit(&pts, 2, 2).len(), 6);
        assert_eq!(FeatureMap::fit(&pts, 2, 3).len(), 10);
        assert_eq!(FeatureMap::fit(&[1.0; 8], 2, 2).len(), 1);
    }

    #[test]
    fn exact_recovery_of_a_quadratic() {
        let pts: Vec<f64> = (0..50).map(|i| -2.0 + 0.08 * i as f64).collect();
        let design = Design::new(&pts, 1, 2);
        let y = DMatrix::from_iterator(50, 1, pts.iter().map(|x| 1.0 - 3.0 * x + 0.5 * x * x));
        let coef = design.solve(&y);
        let fit = KnotFit {
            features: design.features.clone(),
            coef: coef.clone(),
        };
        assert_abs_diff_eq!(fit.eval(&[0.7])[0], 1.0 - 2.1 + 0.245, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.jacobian(&[0.7])[(0, 0)], -3.0 + 0.7, epsilon = 1e-10);
        assert!(design.orthogonality(&y, &coef) < 1e-8);
    }

    #[test]
    fn leave_one_out_matches_refitting() {
        let pts: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).cos() * 2.0).collect();
        let y = DMatrix::from_iterator(12, 1, pts.iter().enumerate().map(|(i, x)| x * x + (i as f64).sin()));
        let design = Design::new(&pts, 1, 2);
        let loo = design.fitted_loo(&y, &design.solve(&y));
        for drop in [0, 5, 11] {
            let keep: Vec<usize> = (0..12).filter(|&i| i != drop).collect();
            // refit on the remaining points in the same (full-sample) features
            let phi = DMatrix::from_fn(11, 3, |r, c| design.features.eval(&[pts[keep[r]]])[c]);
            let yk = DMatrix::from_fn(11, 1, |r, _| y[(keep[r], 0)]);
            let coef = (phi.transpose() * &phi).try_inverse().unwrap() * phi.transpose() * yk;
            let pred = (DMatrix::from_row_slice(1, 3, &design.features.eval(&[pts[drop]])) * coef)[(0, 0)];
            assert_abs_diff_eq!(loo[(drop, 0)], pred, epsilon = 1e-9);
        }
    }

    #[test]
    fn point_mass_sample_fits_the_mean() {
        let design = Design::new(&[2.0; 10], 1, 2);
        let y = DMatrix::from_iterator(10, 1, (0..10).map(|i| i as f64));
        let coef = design.solve(&y);
        assert_eq!(coef.nrows(), 1);
        assert_abs_diff_eq!(coef[(0, 0)], 4.5, epsilon = 1e-12);
    }
}
