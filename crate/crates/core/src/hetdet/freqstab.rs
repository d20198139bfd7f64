//! Soft stabilization of the LO/reference offset frequency `Y`.
//!
//! The laser offset wanders as a sum of Ornstein–Uhlenbeck processes, a
//! noisy frequency counter measures `Y`, a PI controller computes an LO
//! correction and a first-order lag models the thermal tuning actuator.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One OU component: stationary standard deviation and correlation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuComponent {
    /// MHz
    pub sigma: f64,
    /// s
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreqStabConfig {
    /// MHz
    pub setpoint: f64,
    /// MHz of correction per MHz of error.
    pub kp: f64,
    /// 1/s
    pub ki: f64,
    /// Hz
    pub sample_rate: f64,
    /// Hz
    pub actuator_bandwidth: f64,
    /// Counter noise, MHz rms.
    pub measurement_noise: f64,
    pub drift: Vec<OuComponent>,
    /// MHz/s deterministic drift added to the OU wander.
    pub ramp: f64,
    /// Correction range, MHz.
    pub correction_limit: f64,
    pub seed: u64,
}

impl Default for FreqStabConfig {
    fn default() -> Self {
        FreqStabConfig {
            setpoint: 70.0,
            kp: 0.5,
            ki: 20.0,
            sample_rate: 100.0,
            actuator_bandwidth: 10.0,
            measurement_noise: 5.0,
            drift: vec![
                OuComponent {
                    sigma: 35.0,
                    tau: 1.0,
                },
                OuComponent {
                    sigma: 50.0,
                    tau: 600.0,
                },
            ],
            ramp: 0.0,
            correction_limit: 2000.0,
            seed: 0,
        }
    }
}

impl FreqStabConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.sample_rate,
            self.actuator_bandwidth,
            self.correction_limit,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "frequency stabilization rates must be positive".into(),
            ));
        }
        if self.measurement_noise < 0.0
            || self.drift.iter().any(|c| c.sigma < 0.0 || !(c.tau > 0.0))
        {
            return Err(Error::Config("invalid frequency drift or noise".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

/// PI controller with a first-order actuator lag.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqStabilizer {
    pub setpoint: f64,
    kp: f64,
    ki: f64,
    dt: f64,
    alpha: f64,
    limit: f64,
    integral: f64,
    command: f64,
    /// Correction currently applied by the actuator (MHz).
    actuated: f64,
}

impl FreqStabilizer {
    pub fn new(cfg: &FreqStabConfig) -> Self {
        let dt = cfg.dt();
        FreqStabilizer {
            setpoint: cfg.setpoint,
            kp: cfg.kp,
            ki: cfg.ki,
            dt,
            alpha: 1.0 - (-2.0 * PI * cfg.actuator_bandwidth * dt).exp(),
            limit: cfg.correction_limit,
            integral: 0.0,
            command: 0.0,
            actuated: 0.0,
        }
    }

    pub fn actuated(&self) -> f64 {
        self.actuated
    }

    /// Consumes one measurement of `Y` and returns the LO correction that
    /// the actuator will apply over the next interval.
    pub fn step(&mut self, measured_y: f64) -> f64 {
        let e = self.setpoint - measured_y;
        self.integral = (self.integral + self.ki * e * self.dt).clamp(-self.limit, self.limit);
        self.command = (self.kp * e + self.integral).clamp(-self.limit, self.limit);
        self.actuated += self.alpha * (self.command - self.actuated);
        self.actuated
    }
}

/// Convenience wrapper around [`FreqStabilizer::step`].
pub fn frequency_stab_step(measured_y: f64, stab: &mut FreqStabilizer) -> f64 {
    stab.step(measured_y)
}

/// Closed-loop simulation of `Y` under laser wander.
#[derive(Debug, Clone)]
pub struct FreqStabLoop {
    cfg: FreqStabConfig,
    stab: FreqStabilizer,
    ou: Vec<f64>,
    rng: ChaCha8Rng,
    t: f64,
    enabled: bool,
}

impl FreqStabLoop {
    pub fn new(cfg: FreqStabConfig) -> Result<Self> {
        cfg.validate()?;
        let stab = FreqStabilizer::new(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ou = vec![0.0; cfg.drift.len()];
        Ok(FreqStabLoop {
            cfg,
            stab,
            ou,
            rng,
            t: 0.0,
            enabled: true,
        })
    }

    /// Open-loop operation: the correction stays at zero.
    pub fn disable(&mut self) {
        self.enabled = false;
    }

    fn gauss(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Advances one sample and returns the true offset `Y` in MHz.
    pub fn step(&mut self) -> f64 {
        let dt = self.cfg.dt();
        for k in 0..self.ou.len() {
            let OuComponent { sigma, tau } = self.cfg.drift[k];
            let phi = (-dt / tau).exp();
            let w = self.gauss();
            self.ou[k] = phi * self.ou[k] + sigma * (1.0 - phi * phi).sqrt() * w;
        }
        self.t += dt;
        let wander: f64 = self.ou.iter().sum::<f64>() + self.cfg.ramp * self.t;
        let y = self.cfg.setpoint + wander + self.stab.actuated();
        let noise = self.cfg.measurement_noise * self.gauss();
        if self.enabled {
            self.stab.step(y + noise);
        }
        y
    }

    /// Runs `n` samples and returns the true `Y` trace.
    pub fn run(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.step()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_loop_settles_on_setpoint() {
        let cfg = FreqStabConfig {
            drift: vec![],
            measurement_noise: 0.0,
            ..Default::default()
        };
        let mut stab = FreqStabilizer::new(&cfg);
        // plant offset of +25 MHz on top of the setpoint
        let mut y = 95.0;
        for _ in 0..5000 {
            let c = stab.step(y);
            y = 95.0 + c;
        }
        assert!((y - 70.0).abs() < 1e-9, "y = {y}");
    }

    #[test]
    fn zero_drift_zero_noise_holds_exactly() {
        let cfg = FreqStabConfig {
            drift: vec![],
            measurement_noise: 0.0,
            ..Default::default()
        };
        let mut lp = FreqStabLoop::new(cfg).unwrap();
        assert!(lp.run(1000).iter().all(|&y| y == 70.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let mut a = FreqStabLoop::new(FreqStabConfig::default()).unwrap();
        let mut b = FreqStabLoop::new(FreqStabConfig::default()).unwrap();
        assert_eq!(a.run(500), b.run(500));
    }

    #[test]
    fn validation() {
        let bad = FreqStabConfig {
            sample_rate: 0.0,
            ..Default::default()
        };
        assert!(FreqStabLoop::new(bad).is_err());
    }
}
