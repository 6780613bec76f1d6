//! Gauss–Hermite rules for expectations against the standard normal law.

use crate::error::{Error, Result};

/// Probabilists' Gauss–Hermite rule: `E[g(ξ)] ≈ Σ w_i g(x_i)` for `ξ ~ N(0, 1)`.
/// Weights are normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m > 64 {
            return Err(Error::Config(format!("Gauss-Hermite order must be in 1..=64, got {m}")));
        }
        // Newton iteration on the orthonormal physicists' Hermite recurrence,
        // with the classical asymptotic starting guesses.
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut x = vec![0.0; m];
        let mut w = vec![0.0; m];
        let half = m.div_ceil(2);
        let mf = m as f64;
        let mut z = 0.0;
        for i in 0..half {
            z = match i {
                0 => (2.0 * mf + 1.0).sqrt() - 1.85575 * (2.0 * mf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * mf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            let mut converged = false;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..m {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * mf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::numerical("gauss_hermite", format!("root {i} of order {m} did not converge")));
            }
            x[i] = z;
            x[m - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[m - 1 - i] = w[i];
        }
        if m % 2 == 1 {
            x[m / 2] = 0.0;
        }
        // Physicists' rule integrates against exp(-t²); map t = ξ/√2.
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut nodes: Vec<f64> = x.iter().map(|t| t * sqrt2).collect();
        let total: f64 = w.iter().sum();
        let mut weights: Vec<f64> = w.iter().map(|wi| wi / total).collect();
        nodes.reverse();
        weights.reverse();
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * g(*x)).sum()
    }
}

/// Tensor-product rule in `d` dimensions; points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TensorRule {
    pub fn new(rule: &GaussHermite, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("tensor rule needs dimension >= 1".into()));
        }
        let m = rule.len();
        let count = m
            .checked_pow(dim as u32)
            .filter(|c| *c <= 1 << 20)
            .ok_or_else(|| Error::SizeLimit(format!("{m}^{dim} quadrature points")))?;
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        for flat in 0..count {
            let mut rest = flat;
            let mut w = 1.0;
            let start = points.len();
            points.resize(start + dim, 0.0);
            for axis in (0..dim).rev() {
                let j = rest % m;
                rest /= m;
                points[start + axis] = rule.nodes[j];
                w *= rule.weights[j];
            }
            weights.push(w);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { dim, points, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn double_factorial(k: u32) -> f64 {
        (1..=k).rev().step_by(2).map(f64::from).product()
    }

    #[test]
    fn moments_match_standard_normal() {
        for m in 1..=12usize {
            let rule = GaussHermite::new(m).unwrap();
            assert_abs_diff_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
            for p in 0..(2 * m as i32) {
                let exact = if p % 2 == 1 { 0.0 } else { double_factorial((p as u32).saturating_sub(1)).max(1.0) };
                let got = rule.expect(|x| x.powi(p));
                let scale = rule.expect(|x| x.abs().powi(p));
                assert_abs_diff_eq!(got, exact, epsilon = 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn three_point_rule_is_classical() {
        let rule = GaussHermite::new(3).unwrap();
        let s3 = 3f64.sqrt();
        assert_abs_diff_eq!(rule.nodes[0], -s3, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.nodes[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn tensor_rule_covariance_is_identity() {
        let rule = TensorRule::new(&GaussHermite::new(4).unwrap(), 2).unwrap();
        assert_eq!(rule.len(), 16);
        let mut cov = [[0.0; 2]; 2];
        for i in 0..rule.len() {
            let p = rule.point(i);
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += rule.weights[i] * p[a] * p[b];
                }
            }
        }
        assert_abs_diff_eq!(cov[0][0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cov[0][1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cov[1][1], 1.0, epsilon = 1e-14);
    }
}
