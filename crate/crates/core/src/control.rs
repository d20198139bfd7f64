//! Three independent PID loops driving variable wave-plates, with the
//! slope-sign error variant and the mutually-unbiased-basis wiring rule.
//!
//! Gains follow the instrument convention: proportional gain in dB
//! (`Kp = 10^(dB/20)`) and an integrator corner `f_i` in Hz
//! (`Ki = Kp·2π·f_i`). The derivative gain, when enabled, is
//! `Kd = 10^(dB/20)` seconds. Integration is backward-difference at the
//! configured sample rate.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polcore::{
    compose, vwp_rotation, Basis, PolRotation, WaveplateElement, SQUEEZER_RETARDANCE_LIMIT,
};

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    /// dB
    pub proportional_gain: f64,
    /// Hz
    pub integrator_corner: f64,
    /// dB; `None` disables the derivative term.
    pub derivative_gain: Option<f64>,
    /// dB
    pub setpoint: f64,
    pub output_limits: [f64; 2],
    /// Hz
    pub sample_rate: f64,
    pub sign: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            proportional_gain: 1.0,
            integrator_corner: 1.0,
            derivative_gain: None,
            setpoint: 0.0,
            output_limits: [-157.0, 157.0],
            sample_rate: 1000.0,
            sign: 1.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.integrator_corner > 0.0) || !self.integrator_corner.is_finite() {
            return Err(Error::Config("integrator corner must be positive".into()));
        }
        if !(self.output_limits[0] < self.output_limits[1]) {
            return Err(Error::Config("output limits need min < max".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::Config("loop sign must be +1 or -1".into()));
        }
        if !self.proportional_gain.is_finite() || !self.setpoint.is_finite() {
            return Err(Error::Config("gain and setpoint must be finite".into()));
        }
        Ok(())
    }

    pub fn kp(&self) -> f64 {
        db_to_linear(self.proportional_gain)
    }

    pub fn ki(&self) -> f64 {
        self.kp() * 2.0 * PI * self.integrator_corner
    }

    pub fn kd(&self) -> f64 {
        self.derivative_gain.map_or(0.0, db_to_linear)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

/// Per-loop controller memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
    /// `M_{n-1}`
    pub m_prev: Option<f64>,
    /// `C_{n-1}`
    pub c_prev: Option<f64>,
    /// `C_{n-2}`
    pub c_prev2: Option<f64>,
    /// Stored estimate of `Sgn(dM/dC)`, always ±1.
    pub slope_sign: f64,
}

impl Default for PidState {
    fn default() -> Self {
        Self::with_output(0.0)
    }
}

impl PidState {
    /// State whose next zero-error output equals `output`.
    pub fn with_output(output: f64) -> Self {
        PidState {
            integral: output,
            prev_error: None,
            m_prev: None,
            c_prev: None,
            c_prev2: None,
            slope_sign: 1.0,
        }
    }

    fn push_output(&mut self, c: f64, m: f64) {
        self.c_prev2 = self.c_prev;
        self.c_prev = Some(c);
        self.m_prev = Some(m);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput {
    pub output: f64,
    pub error: f64,
    pub saturated: bool,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Slope-sign modified error
/// `e_n = -(M_n - T)·Sgn(ΔM/ΔC)`, with the two branches on the sign of
/// `C_{n-1} - C_{n-2}`.
///
/// With `C_{n-1} = C_{n-2}` or an unfilled history the stored sign is used.
/// `Sgn(0) = 0`, so an unchanged reading yields zero error while the stored
/// sign is kept.
pub fn slope_sign_error(state: &mut PidState, m_n: f64, t: f64) -> f64 {
    let dev = m_n - t;
    if let (Some(m1), Some(c1), Some(c2)) = (state.m_prev, state.c_prev, state.c_prev2) {
        let s = if c1 > c2 {
            sgn(((m_n - t) - (m1 - t)) / (c1 - c2))
        } else if c1 < c2 {
            sgn(((m1 - t) - (m_n - t)) / (c2 - c1))
        } else {
            return -dev * state.slope_sign;
        };
        if s != 0.0 {
            state.slope_sign = s;
        }
        -dev * s
    } else {
        -dev * state.slope_sign
    }
}

/// One PID iteration. `error` overrides the base error `sign·(M_n - T)`
/// (used by the slope-sign mode).
pub fn pid_step_with_error(
    cfg: &PidConfig,
    state: &mut PidState,
    m_n: f64,
    error: f64,
) -> PidOutput {
    let [lo, hi] = cfg.output_limits;
    let dt = cfg.dt();
    state.integral = (state.integral + cfg.ki() * error * dt).clamp(lo, hi);
    let deriv = match (cfg.derivative_gain, state.prev_error) {
        (Some(_), Some(prev)) => cfg.kd() * (error - prev) / dt,
        _ => 0.0,
    };
    let raw = cfg.kp() * error + state.integral + deriv;
    let output = raw.clamp(lo, hi);
    state.prev_error = Some(error);
    state.push_output(output, m_n);
    PidOutput {
        output,
        error,
        saturated: raw != output,
    }
}

/// Base-mode PID iteration.
pub fn pid_step(cfg: &PidConfig, state: &mut PidState, m_n: f64) -> PidOutput {
    let e = cfg.sign * (m_n - cfg.setpoint);
    pid_step_with_error(cfg, state, m_n, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reading {
    D,
    H,
    R,
}

impl Reading {
    pub const ALL: [Reading; 3] = [Reading::D, Reading::H, Reading::R];

    pub fn index(self) -> usize {
        match self {
            Reading::D => 0,
            Reading::H => 1,
            Reading::R => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    BasePid,
    SlopeSign,
}

/// One control loop: actuator rotating about basis 1, driven by a basis-2
/// measurement of a basis-3 reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopWiring {
    /// Index into the correction stack.
    pub actuator: usize,
    pub measurement: Reading,
    /// Which launched reference (0 or 1) the measurement observes.
    pub reference: usize,
    pub actuator_basis: Basis,
    pub measurement_basis: Basis,
    pub reference_basis: Basis,
}

impl LoopWiring {
    pub fn check_mub(&self) -> Result<()> {
        let b = [
            self.actuator_basis,
            self.measurement_basis,
            self.reference_basis,
        ];
        if b[0] == b[1] || b[1] == b[2] || b[0] == b[2] {
            return Err(Error::MubViolation(format!(
                "loop on {:?} uses bases {:?}",
                self.measurement, b
            )));
        }
        Ok(())
    }
}

/// Wiring used on hardware: R and V launched, `M_D` on the D/A squeezer,
/// `M_H` on the H/V squeezer and `M_R` on the rotated squeezer.
pub fn default_wiring() -> [LoopWiring; 3] {
    [
        LoopWiring {
            actuator: 1,
            measurement: Reading::D,
            reference: 0,
            actuator_basis: Basis::DA,
            measurement_basis: Basis::HV,
            reference_basis: Basis::RL,
        },
        LoopWiring {
            actuator: 0,
            measurement: Reading::H,
            reference: 0,
            actuator_basis: Basis::HV,
            measurement_basis: Basis::DA,
            reference_basis: Basis::RL,
        },
        LoopWiring {
            actuator: 3,
            measurement: Reading::R,
            reference: 1,
            actuator_basis: Basis::RL,
            measurement_basis: Basis::DA,
            reference_basis: Basis::HV,
        },
    ]
}

/// Actuator stack applied after the channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStack {
    pub elements: Vec<WaveplateElement>,
    /// Elements held at a calibration value (never driven by a loop).
    pub fixed: Vec<bool>,
    /// Retardance per unit of PID output.
    pub radians_per_unit: f64,
}

impl Default for CorrectionStack {
    fn default() -> Self {
        Self::squeezers(FRAC_PI_2)
    }
}

impl CorrectionStack {
    /// Four squeezers (H/V, D/A, H/V, D/A); the third holds `bias`.
    pub fn squeezers(bias: f64) -> Self {
        let mk = |axis: f64, ret: f64| {
            WaveplateElement::new(axis, ret, SQUEEZER_RETARDANCE_LIMIT).expect("within limit")
        };
        CorrectionStack {
            elements: vec![
                mk(0.0, 0.0),
                mk(FRAC_PI_4, 0.0),
                mk(0.0, bias),
                mk(FRAC_PI_4, 0.0),
            ],
            fixed: vec![false, false, true, false],
            radians_per_unit: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() || self.fixed.len() != self.elements.len() {
            return Err(Error::Config(
                "correction stack element/fixed lengths differ".into(),
            ));
        }
        if !(self.radians_per_unit > 0.0) {
            return Err(Error::Config("radians_per_unit must be positive".into()));
        }
        if let Some(e) = self.elements.iter().find(|e| !e.within_limit()) {
            return Err(Error::Config(format!(
                "actuator retardance {} beyond limit",
                e.retardance
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> PolRotation {
        compose(&self.elements.iter().map(vwp_rotation).collect::<Vec<_>>())
            .expect("validated nonempty")
    }

    pub fn retardances(&self) -> Vec<f64> {
        self.elements.iter().map(|e| e.retardance).collect()
    }

    /// PID output range that maps onto actuator `k`'s retardance limit.
    pub fn output_limits(&self, k: usize) -> [f64; 2] {
        let l = self.elements[k].retardance_limit.unwrap_or(f64::INFINITY) / self.radians_per_unit;
        [-l, l]
    }

    /// Sets actuator `k` from a PID output, clamping to the element limit.
    /// Returns `true` when clamped.
    pub fn apply_output(&mut self, k: usize, output: f64) -> bool {
        let el = &mut self.elements[k];
        let want = output * self.radians_per_unit;
        let lim = el.retardance_limit.unwrap_or(f64::INFINITY);
        el.retardance = want.clamp(-lim, lim);
        el.retardance != want
    }
}

/// Partial Stokes measurement in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialStokesReading {
    pub m_d: f64,
    pub m_h: f64,
    pub m_r: f64,
    /// s
    pub timestamp: f64,
}

impl PartialStokesReading {
    pub fn get(&self, r: Reading) -> f64 {
        match r {
            Reading::D => self.m_d,
            Reading::H => self.m_h,
            Reading::R => self.m_r,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.m_d, self.m_h, self.m_r]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RangeLimit,
    FringeJump,
    LockLost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub iteration: u64,
    pub timestamp: f64,
    pub kind: EventKind,
    /// Loop index for controller events, tracked-state index for lock loss.
    pub source: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlLoop {
    pub wiring: LoopWiring,
    pub config: PidConfig,
    pub state: PidState,
    pub enabled: bool,
    history: VecDeque<f64>,
    holdoff: u64,
}

impl ControlLoop {
    pub fn new(wiring: LoopWiring, config: PidConfig) -> Result<Self> {
        wiring.check_mub()?;
        config.validate()?;
        Ok(ControlLoop {
            wiring,
            config,
            state: PidState::default(),
            enabled: true,
            history: VecDeque::new(),
            holdoff: 0,
        })
    }
}

/// Jump detector: an actuator moving more than `threshold` radians within
/// `window` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FringeDetector {
    pub window: usize,
    pub threshold: f64,
}

impl Default for FringeDetector {
    fn default() -> Self {
        FringeDetector {
            window: 20,
            threshold: FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreeAxisController {
    pub loops: Vec<ControlLoop>,
    pub mode: ControlMode,
    pub fringe: FringeDetector,
    iteration: u64,
}

impl ThreeAxisController {
    pub fn new(loops: Vec<ControlLoop>, mode: ControlMode) -> Result<Self> {
        let mut acts: Vec<usize> = loops.iter().map(|l| l.wiring.actuator).collect();
        acts.sort_unstable();
        acts.dedup();
        if acts.len() != loops.len() {
            return Err(Error::Config("two loops drive the same actuator".into()));
        }
        Ok(ThreeAxisController {
            loops,
            mode,
            fringe: FringeDetector::default(),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Checks the wiring against a stack before running.
    pub fn validate_against(&self, stack: &CorrectionStack) -> Result<()> {
        for l in &self.loops {
            let k = l.wiring.actuator;
            if k >= stack.elements.len() {
                return Err(Error::Config(format!("actuator {k} not in stack")));
            }
            if stack.fixed[k] {
                return Err(Error::Config(format!(
                    "actuator {k} is a fixed bias element"
                )));
            }
        }
        Ok(())
    }

    /// Initializes each loop so that its zero-error output reproduces the
    /// current actuator retardance.
    pub fn sync_to_stack(&mut self, stack: &CorrectionStack) {
        for l in &mut self.loops {
            let out = stack.elements[l.wiring.actuator].retardance / stack.radians_per_unit;
            let slope = l.state.slope_sign;
            l.state = PidState::with_output(out);
            l.state.slope_sign = slope;
            l.history.clear();
        }
    }

    /// Runs every enabled loop on its assigned reading and drives the stack.
    pub fn step(
        &mut self,
        reading: &PartialStokesReading,
        stack: &mut CorrectionStack,
    ) -> Vec<ControlEvent> {
        let mut events = Vec::new();
        let n = self.iteration;
        for (idx, l) in self.loops.iter_mut().enumerate() {
            if !l.enabled {
                continue;
            }
            let m = reading.get(l.wiring.measurement);
            let out = match self.mode {
                ControlMode::BasePid => pid_step(&l.config, &mut l.state, m),
                ControlMode::SlopeSign => {
                    let e = slope_sign_error(&mut l.state, m, l.config.setpoint);
                    pid_step_with_error(&l.config, &mut l.state, m, e)
                }
            };
            let clamped = stack.apply_output(l.wiring.actuator, out.output);
            if out.saturated || clamped {
                events.push(ControlEvent {
                    iteration: n,
                    timestamp: reading.timestamp,
                    kind: EventKind::RangeLimit,
                    source: idx,
                    value: stack.elements[l.wiring.actuator].retardance,
                });
            }
            let ret = stack.elements[l.wiring.actuator].retardance;
            l.history.push_back(ret);
            if l.history.len() > self.fringe.window + 1 {
                l.history.pop_front();
            }
            if l.holdoff > 0 {
                l.holdoff -= 1;
            } else if l.history.len() == self.fringe.window + 1 {
                let jump = ret - l.history[0];
                if jump.abs() > self.fringe.threshold {
                    events.push(ControlEvent {
                        iteration: n,
                        timestamp: reading.timestamp,
                        kind: EventKind::FringeJump,
                        source: idx,
                        value: jump,
                    });
                    l.holdoff = self.fringe.window as u64;
                }
            }
        }
        self.iteration += 1;
        events
    }
}

/// Convenience wrapper around [`ThreeAxisController::step`].
pub fn controller_step(
    ctrl: &mut ThreeAxisController,
    reading: &PartialStokesReading,
    stack: &mut CorrectionStack,
) -> Vec<ControlEvent> {
    ctrl.step(reading, stack)
}
