use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Linear-beta DDPM schedule with cumulative products `ᾱ_t = Π_{s≤t}(1 − β_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        ensure!(t >= 1, Config, "schedule needs at least one step");
        ensure!(
            0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0,
            Config,
            "betas must satisfy 0 < start <= end < 1, got {} and {}",
            cfg.beta_start,
            cfg.beta_end
        );
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut prod = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        NoiseSchedule { betas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        ensure!(t < self.len(), Contract, "timestep {t} outside 0..{}", self.len());
        Ok(self.alpha_bars[t])
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        q_sample_with(self.alpha_bar(t)?, z0, eps)
    }

    /// `num_steps` evenly strided timesteps, highest first.
    pub fn strided_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        ensure!(num_steps >= 1 && num_steps <= t, Config, "num_steps {num_steps} outside 1..={t}");
        let mut ts: Vec<usize> = (0..num_steps).map(|i| i * t / num_steps).collect();
        ts.reverse();
        Ok(ts)
    }
}

pub fn q_sample_with(alpha_bar: f64, z0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    ensure!(z0.len() == eps.len(), Shape, "z0 has {} values, noise has {}", z0.len(), eps.len());
    ensure!((0.0..=1.0).contains(&alpha_bar), Contract, "alpha_bar {alpha_bar} outside [0, 1]");
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_monotone() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[199] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        let direct: f64 = s.betas()[..10].iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bars()[9] - direct).abs() < 1e-15);
    }

    #[test]
    fn q_sample_cases() {
        assert_eq!(q_sample_with(1.0, &[1.5, -2.0], &[9.0, 9.0]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(q_sample_with(0.0, &[1.5, -2.0], &[9.0, 3.0]).unwrap(), vec![9.0, 3.0]);
        let v = q_sample_with(0.25, &[2.0], &[4.0]).unwrap()[0];
        assert!((v - (1.0 + 0.75f64.sqrt() * 4.0)).abs() < 1e-15);
        assert!((v - 4.4641).abs() < 1e-4);
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert!(s.q_sample(&[0.0], 200, &[0.0]).is_err());
    }

    #[test]
    fn strides() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let ts = s.strided_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (196, 0));
        assert_eq!(s.strided_timesteps(200).unwrap()[0], 199);
        assert!(s.strided_timesteps(0).is_err());
        assert!(s.strided_timesteps(201).is_err());
    }
}
