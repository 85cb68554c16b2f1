//! HSIC dependence estimate between item embeddings and their latents, and
//! the calibration loss that balances it across domains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{squared_distance, Matrix};

/// Smallest sample for which the estimate is computed.
pub const MIN_POINTS: usize = 4;
/// Lower bound for the median-heuristic bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsicConfig {
    pub bandwidth: Bandwidth,
    pub max_points_per_domain: usize,
}

impl Default for HsicConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            max_points_per_domain: 256,
        }
    }
}

impl HsicConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("HSIC bandwidth must be > 0, got {s}")));
            }
        }
        if self.max_points_per_domain < MIN_POINTS {
            return Err(Error::InvalidArgument(format!(
                "max_points_per_domain must be >= {MIN_POINTS}"
            )));
        }
        Ok(())
    }

    fn sigma_for(&self, points: &[Vec<f64>]) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(s) => Ok(s),
            Bandwidth::Median => median_bandwidth(points),
        }
    }
}

/// `M_ij = exp(−‖p_i − p_j‖² / 2σ²)`.
pub fn gaussian_kernel_matrix(points: &[Vec<f64>], sigma: f64) -> Result<Matrix> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("kernel bandwidth must be > 0, got {sigma}")));
    }
    let n = points.len();
    let denom = 2.0 * sigma * sigma;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
        for j in i + 1..n {
            let v = (-squared_distance(&points[i], &points[j]) / denom).exp();
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(m)
}

/// Median pairwise Euclidean distance, floored at [`MIN_BANDWIDTH`].
pub fn median_bandwidth(points: &[Vec<f64>]) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument("median bandwidth needs at least two points".into()));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(squared_distance(&points[i], &points[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(median.max(MIN_BANDWIDTH))
}

/// `HUH` for a symmetric kernel matrix `U`.
fn double_center(u: &Matrix) -> Matrix {
    let n = u.rows();
    let nf = n as f64;
    let means: Vec<f64> = u.iter_rows().map(|r| r.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / nf;
    let mut c = u.clone();
    for i in 0..n {
        for (j, v) in c.row_mut(i).iter_mut().enumerate() {
            *v += grand - means[i] - means[j];
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsicEstimate {
    pub value: f64,
    /// `∂Î/∂z_i` with both bandwidths held fixed.
    pub grad_z: Vec<Vec<f64>>,
    pub sigma_x: f64,
    pub sigma_z: f64,
}

/// Biased HSIC estimate `Tr(U H V H) / (n−1)²` between paired samples.
///
/// Returns `Ok(None)` when fewer than [`MIN_POINTS`] pairs are given; callers
/// drop that domain from the calibration loss.
pub fn hsic(xs: &[Vec<f64>], zs: &[Vec<f64>], config: &HsicConfig) -> Result<Option<HsicEstimate>> {
    if xs.len() != zs.len() {
        return Err(Error::shape("hsic pairs", xs.len(), zs.len()));
    }
    let n = xs.len();
    if n < MIN_POINTS {
        return Ok(None);
    }
    let sigma_x = config.sigma_for(xs)?;
    let sigma_z = config.sigma_for(zs)?;
    let u_c = double_center(&gaussian_kernel_matrix(xs, sigma_x)?);
    let v = gaussian_kernel_matrix(zs, sigma_z)?;
    let norm = 1.0 / ((n - 1) as f64).powi(2);

    let mut value = 0.0;
    let dim = zs[0].len();
    let mut grad_z = vec![vec![0.0; dim]; n];
    let coef = 2.0 * norm / (sigma_z * sigma_z);
    for i in 0..n {
        let (ur, vr) = (u_c.row(i), v.row(i));
        for j in 0..n {
            let w = ur[j] * vr[j];
            value += w;
            if j != i {
                let s = coef * w;
                for (g, (a, b)) in grad_z[i].iter_mut().zip(zs[j].iter().zip(&zs[i])) {
                    *g += s * (a - b);
                }
            }
        }
    }
    Ok(Some(HsicEstimate {
        value: value * norm,
        grad_z,
        sigma_x,
        sigma_z,
    }))
}

/// `Var[Î] − β·E[Î]` over the given domains (population variance) and its
/// gradient `2(Î_k − mean)/K − β/K` per domain.
pub fn mi_calibration_loss(values: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let k = values.len();
    if k == 0 {
        return (0.0, Vec::new());
    }
    let kf = k as f64;
    let mean = values.iter().sum::<f64>() / kf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kf;
    let grads = values.iter().map(|v| 2.0 * (v - mean) / kf - beta / kf).collect();
    (var - beta * mean, grads)
}

/// Population variance, 0 for fewer than one value.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn cloud(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| rng.normal_vec(d, 1.0)).collect()
    }

    #[test]
    fn kernel_single_point_and_closed_form_pair() {
        let m = gaussian_kernel_matrix(&[vec![3.0, 1.0]], 0.7).unwrap();
        assert_eq!(m.as_slice(), &[1.0]);
        let sigma = 0.5f64;
        let d = sigma * 2f64.sqrt();
        let m = gaussian_kernel_matrix(&[vec![0.0, 0.0], vec![d, 0.0]], sigma).unwrap();
        assert!((m.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(m.get(0, 1), m.get(1, 0));
        assert!(gaussian_kernel_matrix(&[vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn median_of_two_points_and_floor() {
        assert_eq!(median_bandwidth(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap(), 3.0);
        assert_eq!(median_bandwidth(&vec![vec![1.0, 1.0]; 5]).unwrap(), MIN_BANDWIDTH);
        assert!(median_bandwidth(&[vec![1.0]]).is_err());
    }

    #[test]
    fn constant_side_gives_zero() {
        let mut rng = Rng::new(1);
        let z = cloud(&mut rng, 12, 3);
        let x = vec![vec![0.2, 0.4]; 12];
        let cfg = HsicConfig::default();
        assert!(hsic(&x, &z, &cfg).unwrap().unwrap().value.abs() < 1e-15);
        assert!(hsic(&z, &x, &cfg).unwrap().unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn too_few_points_skips() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(hsic(&x, &x, &HsicConfig::default()).unwrap().is_none());
    }

    #[test]
    fn calibration_loss_hand_values() {
        let (l, g) = mi_calibration_loss(&[0.1, 0.3], 0.5);
        assert!((l - (-0.09)).abs() < 1e-15);
        assert!((g[0] - (2.0 * -0.1 / 2.0 - 0.25)).abs() < 1e-15);
        let (l, g) = mi_calibration_loss(&[0.4, 0.4, 0.4], 2.0);
        assert!((l + 0.8).abs() < 1e-15);
        for gi in g {
            assert!((gi + 2.0 / 3.0).abs() < 1e-15);
        }
        let (l, _) = mi_calibration_loss(&[0.7], 1.5);
        assert!((l + 1.05).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = HsicConfig {
            bandwidth: Bandwidth::Fixed(-1.0),
            ..HsicConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = HsicConfig {
            max_points_per_domain: 2,
            ..HsicConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
