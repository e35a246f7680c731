//! Linear-beta noise schedule and the forward diffusion map.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Betas rise linearly from `beta_start` to `beta_end` over T steps;
/// `alpha_bar(t)` is the running product of `1 - beta`, with the t = 0
/// convention `alpha_bar(0) = 1` (clean data).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let t_max = cfg.timesteps;
        if t_max < 1 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start < beta_end < 1, got {}..{}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
            betas.push(beta);
            alpha_bars.push(alpha_bars[i] * (1.0 - beta));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// Beta at 1-based step t.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative alpha product at step t, 0 ≤ t ≤ T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// z_t = sqrt(alpha_bar_t)·z0 + sqrt(1 - alpha_bar_t)·eps.
    pub fn q_sample<S: Scalar>(&self, z0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        if t > self.t_max() {
            return Err(Error::TimestepOutOfRange { t, max: self.t_max() });
        }
        if z0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "q_sample",
                detail: format!("{:?} vs {:?}", z0.shape(), eps.shape()),
            });
        }
        let ab = self.alpha_bar(t);
        let a = S::from_f64(ab.sqrt());
        let b = S::from_f64((1.0 - ab).sqrt());
        let data = z0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&z, &e)| a * z + b * e)
            .collect();
        Tensor::new(z0.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_laws() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.t_max(), 1000);
        for t in 1..=s.t_max() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            // sqrt(ab)² + (1-ab) = 1 holds by construction.
            let ab = s.alpha_bar(t);
            assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(s.t_max()) < 0.01, "near-pure noise at T");
    }

    #[test]
    fn q_sample_t0_returns_clean_data() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let z0 = Tensor::<f64>::new(vec![4], vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let eps = Tensor::<f64>::new(vec![4], vec![3.0, -2.0, 1.0, 9.0]).unwrap();
        let zt = s.q_sample(&z0, 0, &eps).unwrap();
        assert_eq!(zt.data(), z0.data());
    }

    #[test]
    fn q_sample_first_step_coefficients() {
        // Linear 1e-4..0.02 over 1000 steps: alpha_bar(1) = 0.9999.
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        let z0 = Tensor::<f64>::scalar(1.0);
        let eps = Tensor::<f64>::scalar(1.0);
        let zt = s.q_sample(&z0, 1, &eps).unwrap();
        let want = 0.9999f64.sqrt() + 0.0001f64.sqrt();
        assert!((zt.item() - want).abs() < 1e-12);
    }

    #[test]
    fn q_sample_rejects_out_of_range() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let z = Tensor::<f64>::scalar(0.0);
        assert!(matches!(
            s.q_sample(&z, 1001, &z),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn invalid_beta_range_rejected() {
        for (a, b) in [(0.0, 0.02), (0.02, 0.02), (1e-4, 1.0)] {
            let cfg = ScheduleConfig { timesteps: 10, beta_start: a, beta_end: b };
            assert!(NoiseSchedule::linear(&cfg).is_err());
        }
    }
}
