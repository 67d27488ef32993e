//! Cubic B-spline basis with quantile knots and a difference penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    pub degree: usize,
    /// Full knot vector, boundary knots repeated `degree + 1` times.
    pub knots: Vec<f64>,
}

impl BSplineBasis {
    /// Interior knots at the `k/(n+1)` quantiles of `values`; duplicate knots
    /// (from tied quantiles) are dropped. Requires `min < max`.
    pub fn from_quantiles(values: &[f64], n_interior: usize, degree: usize) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let mut interior: Vec<f64> = (1..=n_interior)
            .map(|k| quantile(&sorted, k as f64 / (n_interior + 1) as f64))
            .filter(|&v| v > lo && v < hi)
            .collect();
        interior.dedup();
        let mut knots = vec![lo; degree + 1];
        knots.extend(interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        BSplineBasis { degree, knots }
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lower(&self) -> f64 {
        self.knots[0]
    }

    fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Basis values at `x` (clamped to the knot range), Cox–de Boor recursion.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let k = self.degree;
        let t = &self.knots;
        let x = x.clamp(self.lower(), self.upper());
        // span index μ with t[μ] ≤ x < t[μ+1], last nonempty span at the right end
        let n = self.len();
        let mut mu = k;
        while mu + 1 < n && x >= t[mu + 1] {
            mu += 1;
        }
        let mut local = vec![0.0; k + 1];
        local[0] = 1.0;
        for r in 1..=k {
            let mut saved = 0.0;
            for s in 0..r {
                let right = t[mu + 1 + s];
                let left = t[mu + 1 + s - r];
                let denom = right - left;
                let term = if denom > 0.0 { local[s] / denom } else { 0.0 };
                local[s] = saved + (right - x) * term;
                saved = (x - left) * term;
            }
            local[r] = saved;
        }
        let mut out = vec![0.0; n];
        for (s, v) in local.into_iter().enumerate() {
            out[mu - k + s] = v;
        }
        out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// `DᵀD` for the order-`order` difference operator on `n` coefficients.
pub fn difference_penalty(n: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(n, n);
    for _ in 0..order {
        let rows = d.nrows();
        if rows < 2 {
            return DMatrix::zeros(n, n);
        }
        d = DMatrix::from_fn(rows - 1, n, |r, c| d[(r + 1, c)] - d[(r, c)]);
    }
    d.transpose() * d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let values: Vec<f64> = (0..60).map(|i| ((i * 13) % 60) as f64 / 7.0).collect();
        let basis = BSplineBasis::from_quantiles(&values, 10, 3);
        assert_eq!(basis.len(), 14);
        for i in 0..=100 {
            let x = i as f64 * (59.0 / 7.0) / 100.0;
            let b = basis.eval(x);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "x = {x}");
            assert!(b.iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn reproduces_linear_functions_with_greville_coefficients() {
        let values = [0.0, 0.1, 0.15, 0.5, 0.9, 1.3, 2.0];
        let basis = BSplineBasis::from_quantiles(&values, 3, 3);
        let t = &basis.knots;
        let greville: Vec<f64> = (0..basis.len())
            .map(|i| (t[i + 1] + t[i + 2] + t[i + 3]) / 3.0)
            .collect();
        for x in [0.0, 0.33, 1.0, 1.99, 2.0] {
            let b = basis.eval(x);
            let fx: f64 = b.iter().zip(&greville).map(|(a, g)| a * g).sum();
            assert!((fx - x).abs() < 1e-12);
        }
    }

    #[test]
    fn second_difference_penalty_kills_linear_sequences() {
        let s = difference_penalty(6, 2);
        let lin = nalgebra::DVector::from_fn(6, |i, _| 2.0 * i as f64 - 1.0);
        assert!((&s * lin).amax() < 1e-12);
        let quad = nalgebra::DVector::from_fn(6, |i, _| (i * i) as f64);
        assert!((quad.transpose() * &s * quad)[(0, 0)] > 0.0);
    }
}
