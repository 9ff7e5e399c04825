//! Cubic smoothing splines (Reinsch form) with optional generalized
//! cross-validation of the smoothing parameter.
//!
//! The fit minimizes `sum (y_i - s(t_i))^2 + lambda * int s''(t)^2 dt`. With
//! knot spacings `h`, the banded matrices `Q` (n x n-2) and `R`
//! (n-2 x n-2) give fitted values `g = (I + lambda K)^-1 y` with
//! `K = Q R^-1 Q^T`. Diagonalizing `K` once per knot layout makes every
//! `lambda` cheap to evaluate.

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Smoothing parameter selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoothing {
    /// Generalized cross-validation over `lambda`.
    Gcv,
    /// Fixed `lambda` (in units of the mean knot spacing cubed).
    Fixed(f64),
}

/// Eigen-decomposition of the penalty operator for one knot layout.
#[derive(Debug)]
pub struct SplineBasis {
    knots: Vec<f64>,
    /// Eigenvalues of `K`, ascending.
    kappa: Vec<f64>,
    /// Columns are eigenvectors of `K`.
    vectors: DMatrix<f64>,
    /// `R^-1 Q^T`, maps fitted values to interior second derivatives.
    curvature_map: DMatrix<f64>,
    /// Typical `lambda` scale: mean spacing cubed.
    lambda_unit: f64,
}

impl SplineBasis {
    /// `knots` must be strictly increasing with at least 3 entries.
    pub fn new(knots: &[f64]) -> Self {
        let n = knots.len();
        assert!(n >= 3, "smoothing spline needs at least 3 knots");
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(h.iter().all(|&x| x > 0.0), "knots must be strictly increasing");
        let m = n - 2;
        let mut q = DMatrix::zeros(n, m);
        let mut r = DMatrix::zeros(m, m);
        for j in 0..m {
            // column j couples knots j, j+1, j+2
            q[(j, j)] = 1.0 / h[j];
            q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
            q[(j + 2, j)] = 1.0 / h[j + 1];
            r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
            if j + 1 < m {
                r[(j, j + 1)] = h[j + 1] / 6.0;
                r[(j + 1, j)] = h[j + 1] / 6.0;
            }
        }
        let r_inv = r.try_inverse().expect("R is diagonally dominant");
        let curvature_map = &r_inv * q.transpose();
        let k = &q * &curvature_map;
        let k = (&k + k.transpose()) * 0.5;
        let eig = SymmetricEigen::new(k);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let kappa = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let vectors = DMatrix::from_fn(n, n, |row, col| eig.eigenvectors[(row, order[col])]);
        let mean_h = (knots[n - 1] - knots[0]) / (n - 1) as f64;
        Self { knots: knots.to_vec(), kappa, vectors, curvature_map, lambda_unit: mean_h.powi(3) }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// GCV score `n |(I - A) y|^2 / (n - tr A)^2` given `c = U^T y`.
    fn gcv(&self, c: &DVector<f64>, lambda: f64) -> f64 {
        let n = self.len() as f64;
        let mut rss = 0.0;
        let mut dof = 0.0;
        for (&k, &ci) in self.kappa.iter().zip(c.iter()) {
            let shrink = lambda * k / (1.0 + lambda * k);
            rss += (shrink * ci).powi(2);
            dof += shrink;
        }
        n * rss / (dof * dof)
    }

    fn select_lambda(&self, c: &DVector<f64>) -> f64 {
        const LO: f64 = -6.0;
        const HI: f64 = 6.0;
        const COARSE: usize = 25;
        let score = |s: f64| {
            let g = self.gcv(c, 10f64.powf(s) * self.lambda_unit);
            if g.is_finite() {
                g
            } else {
                f64::INFINITY
            }
        };
        let step = (HI - LO) / (COARSE - 1) as f64;
        let mut best = (LO, score(LO));
        for i in 1..COARSE {
            let s = LO + step * i as f64;
            let g = score(s);
            if g < best.1 {
                best = (s, g);
            }
        }
        // golden-section refinement inside the neighbouring coarse cells
        let (mut a, mut b) = ((best.0 - step).max(LO), (best.0 + step).min(HI));
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - ratio * (b - a);
        let mut x2 = a + ratio * (b - a);
        let (mut f1, mut f2) = (score(x1), score(x2));
        for _ in 0..40 {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - ratio * (b - a);
                f1 = score(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + ratio * (b - a);
                f2 = score(x2);
            }
        }
        let s = if f1.min(f2) <= best.1 { 0.5 * (a + b) } else { best.0 };
        10f64.powf(s) * self.lambda_unit
    }

    /// Fits values `y` at this basis's knots.
    pub fn fit(self: &Rc<Self>, y: &[f64], smoothing: Smoothing) -> SmoothingSpline {
        assert_eq!(y.len(), self.len());
        let y = DVector::from_column_slice(y);
        let c = self.vectors.tr_mul(&y);
        let lambda = match smoothing {
            Smoothing::Gcv => self.select_lambda(&c),
            Smoothing::Fixed(l) => l * self.lambda_unit,
        };
        let shrunk =
            DVector::from_iterator(c.len(), c.iter().zip(&self.kappa).map(|(&ci, &k)| ci / (1.0 + lambda * k)));
        let g = &self.vectors * shrunk;
        let interior = &self.curvature_map * &g;
        let mut gamma = vec![0.0; self.len()];
        gamma[1..self.len() - 1].copy_from_slice(interior.as_slice());
        SmoothingSpline { basis: Rc::clone(self), values: g.as_slice().to_vec(), gamma, lambda }
    }
}

/// A fitted natural cubic spline.
#[derive(Clone, Debug)]
pub struct SmoothingSpline {
    basis: Rc<SplineBasis>,
    values: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    gamma: Vec<f64>,
    lambda: f64,
}

impl SmoothingSpline {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn knots(&self) -> &[f64] {
        &self.basis.knots
    }

    /// Fitted values at the knots.
    pub fn fitted(&self) -> &[f64] {
        &self.values
    }

    fn interval(&self, t: f64) -> usize {
        let knots = &self.basis.knots;
        let last = knots.len() - 2;
        match knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    /// Value and first derivative at `t` (linear extrapolation outside).
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let i = self.interval(t);
        let knots = &self.basis.knots;
        let h = knots[i + 1] - knots[i];
        let a = (knots[i + 1] - t) / h;
        let b = (t - knots[i]) / h;
        let (g0, g1) = (self.values[i], self.values[i + 1]);
        let (c0, c1) = (self.gamma[i], self.gamma[i + 1]);
        if !(0.0..=1.0).contains(&b) {
            // natural boundary: straight line beyond the end knots
            let (edge, slope) = if b < 0.0 {
                (g0, (g1 - g0) / h - h / 6.0 * (2.0 * c0 + c1))
            } else {
                (g1, (g1 - g0) / h + h / 6.0 * (c0 + 2.0 * c1))
            };
            let anchor = if b < 0.0 { knots[i] } else { knots[i + 1] };
            return (edge + slope * (t - anchor), slope);
        }
        let value = a * g0 + b * g1 + ((a * a * a - a) * c0 + (b * b * b - b) * c1) * h * h / 6.0;
        let slope = (g1 - g0) / h - (3.0 * a * a - 1.0) / 6.0 * h * c0 + (3.0 * b * b - 1.0) / 6.0 * h * c1;
        (value, slope)
    }
}

/// Reuses decompositions across windows that share relative knot layouts.
#[derive(Debug, Default)]
pub struct SplineCache {
    bases: HashMap<Vec<u64>, Rc<SplineBasis>>,
}

impl SplineCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn basis(&mut self, knots: &[f64]) -> Rc<SplineBasis> {
        let origin = knots[0];
        let key: Vec<u64> = knots.iter().map(|t| (t - origin).to_bits()).collect();
        if let Some(b) = self.bases.get(&key) {
            return Rc::clone(b);
        }
        let relative: Vec<f64> = knots.iter().map(|t| t - origin).collect();
        let basis = Rc::new(SplineBasis::new(&relative));
        self.bases.insert(key, Rc::clone(&basis));
        basis
    }

    /// Fits on knots shifted to start at zero; evaluate at `t - knots[0]`.
    pub fn fit(&mut self, knots: &[f64], y: &[f64], smoothing: Smoothing) -> SmoothingSpline {
        self.basis(knots).fit(y, smoothing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(t: &[f64], y: &[f64], s: Smoothing) -> SmoothingSpline {
        Rc::new(SplineBasis::new(t)).fit(y, s)
    }

    #[test]
    fn linear_data_is_reproduced_for_any_lambda() {
        let t: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|x| 3.0 - 0.5 * x).collect();
        for s in [Smoothing::Fixed(0.0), Smoothing::Fixed(1e3), Smoothing::Gcv] {
            let sp = fit(&t, &y, s);
            for &x in &[0.0, 2.5, 9.0] {
                let (v, d) = sp.eval(x);
                assert!((v - (3.0 - 0.5 * x)).abs() < 1e-9, "{s:?} value at {x}: {v}");
                assert!((d + 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_lambda_interpolates() {
        let t: Vec<f64> = (0..8).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|x| (0.7 * x).sin()).collect();
        let sp = fit(&t, &y, Smoothing::Fixed(0.0));
        for (&x, &v) in t.iter().zip(&y) {
            assert!((sp.eval(x).0 - v).abs() < 1e-9);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let t: Vec<f64> = (0..12).map(|i| f64::from(i) * 0.5).collect();
        let y: Vec<f64> = t.iter().map(|x| (-0.3 * x).exp() + 0.05 * (3.0 * x).sin()).collect();
        let sp = fit(&t, &y, Smoothing::Gcv);
        for x in [0.3, 1.7, 4.1] {
            let h = 1e-6;
            let fd = (sp.eval(x + h).0 - sp.eval(x - h).0) / (2.0 * h);
            assert!((sp.eval(x).1 - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn heavy_smoothing_tends_to_least_squares_line() {
        let t: Vec<f64> = (0..9).map(f64::from).collect();
        let y = [0.0, 2.0, 1.0, 3.0, 2.0, 4.0, 3.0, 5.0, 4.0];
        let sp = fit(&t, &y, Smoothing::Fixed(1e9));
        let slope = sp.eval(4.0).1;
        // ordinary least squares slope of the data
        let tm = 4.0;
        let ym = y.iter().sum::<f64>() / 9.0;
        let ols = t.iter().zip(&y).map(|(a, b)| (a - tm) * (b - ym)).sum::<f64>()
            / t.iter().map(|a| (a - tm).powi(2)).sum::<f64>();
        assert!((slope - ols).abs() < 1e-5, "{slope} vs {ols}");
    }
}
