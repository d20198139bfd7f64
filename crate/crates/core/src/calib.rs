//! Back-propagation calibration of the measurement wave-plates and the
//! quarter-wave bias of the third squeezer.
//!
//! Light launched backwards from a detector's polarizer leaves the
//! measurement optics in that detector's analyzer state. A squeezer does
//! not modulate light polarized along its own axis, so nulling the
//! modulation a squeezer imprints on the back-propagated probe aligns the
//! analyzer with that squeezer's basis. Depths are normalized to the total
//! probe power.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::CorrectionStack;
use crate::error::{Error, Result};
use crate::hetdet::MeasurementOptics;
use crate::polcore::{vwp_rotation, PolRotation};

/// Sine drive applied to the squeezer under test, in retardance units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Modulation {
    /// Hz
    pub frequency: f64,
    /// Peak-to-peak retardance, rad.
    pub amplitude: f64,
    /// Mean retardance, rad.
    pub offset: f64,
    pub samples_per_cycle: usize,
}

impl Default for Modulation {
    /// A 4 V pk-pk sine on a 2 V offset at π/4 rad per volt.
    fn default() -> Self {
        Modulation {
            frequency: 10.0,
            amplitude: PI,
            offset: FRAC_PI_2,
            samples_per_cycle: 64,
        }
    }
}

impl Modulation {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0) || !(self.frequency > 0.0) || self.samples_per_cycle < 4 {
            return Err(Error::Config(
                "modulation amplitude and frequency must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Retardance samples over one drive cycle.
    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.samples_per_cycle;
        (0..n).map(move |k| {
            self.offset + 0.5 * self.amplitude * (2.0 * PI * k as f64 / n as f64).sin()
        })
    }
}

/// One step of the procedure. Channels are numbered from 1 in stack order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum CalStep {
    /// Rotate `detector`'s wave-plates until `channel` no longer modulates
    /// its back-propagated probe.
    Null { detector: u8, channel: usize },
    /// Set the bias of `bias_channel` to maximize modulation by `channel`.
    Bias {
        detector: u8,
        channel: usize,
        bias_channel: usize,
    },
}

pub fn default_steps() -> Vec<CalStep> {
    vec![
        CalStep::Null {
            detector: 2,
            channel: 4,
        },
        CalStep::Bias {
            detector: 2,
            channel: 2,
            bias_channel: 3,
        },
        CalStep::Null {
            detector: 2,
            channel: 2,
        },
        CalStep::Null {
            detector: 1,
            channel: 1,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    /// Degrees, largest first.
    pub step_schedule: Vec<f64>,
    /// Acceptable residual depth (pk-pk fraction).
    pub threshold: f64,
    /// Spacing of the starting grid, degrees; 0 disables it.
    pub start_grid: f64,
    pub max_evaluations: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            step_schedule: vec![5.0, 2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.02],
            threshold: 2e-3,
            start_grid: 10.0,
            max_evaluations: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationPlan {
    pub modulation: Modulation,
    pub steps: Vec<CalStep>,
    pub descent: DescentConfig,
    /// Optimize the power-meter analyzer for every reading.
    pub probe_aligned: bool,
    /// Power-meter noise, fraction rms.
    pub meter_noise: f64,
    pub seed: u64,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        CalibrationPlan {
            modulation: Modulation::default(),
            steps: default_steps(),
            descent: DescentConfig::default(),
            probe_aligned: true,
            meter_noise: 0.0,
            seed: 0,
        }
    }
}

impl CalibrationPlan {
    pub fn validate(&self) -> Result<()> {
        self.modulation.validate()?;
        let d = &self.descent;
        if !(d.threshold > 0.0) {
            return Err(Error::Config("descent threshold must be positive".into()));
        }
        if d.step_schedule.is_empty() || d.step_schedule.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(
                "descent step schedule must be nonempty and positive".into(),
            ));
        }
        if self.meter_noise < 0.0 {
            return Err(Error::Config("meter noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Receiver optics plus the correction stack they calibrate against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalSystem {
    pub optics: MeasurementOptics,
    pub stack: CorrectionStack,
}

impl CalSystem {
    pub fn new(optics: MeasurementOptics, stack: CorrectionStack) -> Result<Self> {
        optics.validate()?;
        stack.validate()?;
        Ok(CalSystem { optics, stack })
    }

    /// Uniformly random PCM and wave-plate angles, stack at rest with an
    /// arbitrary bias.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pcm = random_rotation(&mut rng);
        let mut a = || rng.random::<f64>() * PI;
        let optics = MeasurementOptics {
            qwp1: a(),
            hwp1: a(),
            qwp2: a(),
            hwp2: a(),
            ..MeasurementOptics::ideal()
        }
        .with_pcm(&pcm);
        let bias = a() - FRAC_PI_2;
        CalSystem {
            optics,
            stack: CorrectionStack::squeezers(bias),
        }
    }

    fn probe(&self, detector: u8) -> Vector3<f64> {
        self.optics.analyzer(detector)
    }

    fn set_plates(&mut self, detector: u8, q: f64, h: f64) {
        if detector == 1 {
            self.optics.qwp1 = q;
            self.optics.hwp1 = h;
        } else {
            self.optics.qwp2 = q;
            self.optics.hwp2 = h;
        }
    }
}

/// Haar-random Stokes rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> PolRotation {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        q[0], q[1], q[2], q[3],
    ));
    PolRotation::from_matrix_unchecked(uq.to_rotation_matrix().into_inner())
}

/// Modulation depth of `channel` (0-based stack index) on a probe leaving
/// the measurement optics in state `probe`.
///
/// With `aligned` the power-meter analyzer is optimized, and the depth is
/// half the largest chord of the arc swept by the probe. Otherwise the
/// meter passes H at the stack input.
pub fn modulation_depth(
    stack: &CorrectionStack,
    channel: usize,
    probe: &Vector3<f64>,
    modulation: &Modulation,
    aligned: bool,
) -> f64 {
    let mut s = *probe;
    for el in stack.elements[channel + 1..].iter().rev() {
        s = vwp_rotation(el).inverse().apply_vector(&s);
    }
    let el = &stack.elements[channel];
    if aligned {
        let r = el.axis().cross(&s).norm();
        return r * (0.5 * modulation.amplitude.min(PI)).sin();
    }
    let upstream: Vec<PolRotation> = stack.elements[..channel]
        .iter()
        .rev()
        .map(|e| vwp_rotation(e).inverse())
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ret in modulation.samples() {
        let mut v = vwp_rotation(&el.with_retardance(ret))
            .inverse()
            .apply_vector(&s);
        for r in &upstream {
            v = r.apply_vector(&v);
        }
        let p = (1.0 + v.x) / 2.0;
        lo = lo.min(p);
        hi = hi.max(p);
    }
    hi - lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: CalStep,
    /// Final depth for null steps; shortfall from the largest achievable
    /// depth for bias steps.
    pub residual: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub qwp1: f64,
    pub hwp1: f64,
    pub qwp2: f64,
    pub hwp2: f64,
    /// Retardance of the bias squeezer.
    pub bias: f64,
    pub steps: Vec<StepReport>,
}

impl CalibrationResult {
    pub fn residuals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.residual).collect()
    }

    /// Applies the recovered settings to a system.
    pub fn apply(&self, system: &mut CalSystem, bias_index: usize) {
        system.optics.qwp1 = self.qwp1;
        system.optics.hwp1 = self.hwp1;
        system.optics.qwp2 = self.qwp2;
        system.optics.hwp2 = self.hwp2;
        system.stack.elements[bias_index].retardance = self.bias;
    }
}

struct Meter<'a> {
    plan: &'a CalibrationPlan,
    rng: ChaCha8Rng,
    evaluations: usize,
}

impl Meter<'_> {
    fn read(&mut self, stack: &CorrectionStack, channel: usize, probe: &Vector3<f64>) -> f64 {
        self.evaluations += 1;
        let d = modulation_depth(
            stack,
            channel,
            probe,
            &self.plan.modulation,
            self.plan.probe_aligned,
        );
        if self.plan.meter_noise > 0.0 {
            let g: f64 = StandardNormal.sample(&mut self.rng);
            d + self.plan.meter_noise * g
        } else {
            d
        }
    }
}

/// Smallest change in depth accepted as progress; keeps rounding noise from
/// moving a converged plate.
const IMPROVEMENT: f64 = 1e-12;

fn wrap_pi(a: f64) -> f64 {
    a.rem_euclid(PI)
}

/// Coordinate descent over `x` with a shrinking step schedule. Each
/// coordinate is stepped repeatedly while it improves; a step size is
/// finished when neither direction helps on any coordinate.
fn descend<F: FnMut(&[f64]) -> f64>(
    x: &mut [f64],
    schedule: &[f64],
    budget: usize,
    mut f: F,
) -> (f64, usize) {
    let mut best = f(x);
    let mut evals = 1;
    for &step in schedule {
        let step = step.to_radians();
        loop {
            let mut improved = false;
            for i in 0..x.len() {
                for dir in [1.0, -1.0] {
                    loop {
                        if evals >= budget {
                            return (best, evals);
                        }
                        let old = x[i];
                        x[i] = old + dir * step;
                        let v = f(x);
                        evals += 1;
                        if v < best - IMPROVEMENT {
                            best = v;
                            improved = true;
                        } else {
                            x[i] = old;
                            break;
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    (best, evals)
}

fn null_step(
    sys: &mut CalSystem,
    meter: &mut Meter,
    detector: u8,
    channel: usize,
    descent: &DescentConfig,
) -> (f64, usize) {
    let start_evals = meter.evaluations;
    let (q0, h0) = sys.optics.plates(detector);
    let objective = |x: &[f64], sys: &mut CalSystem, meter: &mut Meter| {
        sys.set_plates(detector, x[0], x[1]);
        let p = sys.probe(detector);
        meter.read(&sys.stack, channel, &p)
    };
    let mut x = [q0, h0];
    let mut best = objective(&x, sys, meter);
    if descent.start_grid > 0.0 {
        let n = (180.0 / descent.start_grid).round().max(1.0) as usize;
        let d = PI / n as f64;
        for i in 0..n {
            for j in 0..n {
                let cand = [i as f64 * d, j as f64 * d];
                let v = objective(&cand, sys, meter);
                if v < best - IMPROVEMENT {
                    best = v;
                    x = cand;
                }
            }
        }
    }
    let budget = descent
        .max_evaluations
        .saturating_sub(meter.evaluations - start_evals);
    let (_, _) = descend(&mut x, &descent.step_schedule, budget, |x| {
        objective(x, sys, meter)
    });
    let x = [wrap_pi(x[0]), wrap_pi(x[1])];
    let residual = objective(&x, sys, meter);
    (residual, meter.evaluations - start_evals)
}

fn bias_step(
    sys: &mut CalSystem,
    meter: &mut Meter,
    detector: u8,
    channel: usize,
    bias_channel: usize,
    descent: &DescentConfig,
) -> (f64, usize) {
    let start_evals = meter.evaluations;
    let probe = sys.probe(detector);
    let objective = |b: f64, sys: &mut CalSystem, meter: &mut Meter| {
        sys.stack.elements[bias_channel].retardance = b;
        -meter.read(&sys.stack, channel, &probe)
    };
    let mut x = [sys.stack.elements[bias_channel].retardance];
    let mut best = objective(x[0], sys, meter);
    if descent.start_grid > 0.0 {
        let n = (360.0 / descent.start_grid).round().max(1.0) as usize;
        for i in 0..n {
            let b = -PI + 2.0 * PI * i as f64 / n as f64;
            let v = objective(b, sys, meter);
            if v < best - IMPROVEMENT {
                best = v;
                x[0] = b;
            }
        }
    }
    let budget = descent
        .max_evaluations
        .saturating_sub(meter.evaluations - start_evals);
    descend(&mut x, &descent.step_schedule, budget, |x| {
        objective(x[0], sys, meter)
    });
    let b = (x[0] + PI).rem_euclid(2.0 * PI) - PI;
    let depth = -objective(b, sys, meter);
    let max_depth = (0.5 * meter.plan.modulation.amplitude.min(PI)).sin();
    (
        (max_depth - depth).max(0.0),
        meter.evaluations - start_evals,
    )
}

/// Runs the plan's steps in order, updating `system` in place.
pub fn calibrate(system: &mut CalSystem, plan: &CalibrationPlan) -> Result<CalibrationResult> {
    plan.validate()?;
    let n = system.stack.elements.len();
    let mut meter = Meter {
        plan,
        rng: ChaCha8Rng::seed_from_u64(plan.seed),
        evaluations: 0,
    };
    let mut reports = Vec::with_capacity(plan.steps.len());
    let mut bias_index = 2.min(n - 1);
    for &step in &plan.steps {
        let check = |c: usize| {
            if c == 0 || c > n {
                Err(Error::Config(format!(
                    "calibration channel {c} not in a {n}-element stack"
                )))
            } else {
                Ok(c - 1)
            }
        };
        let (residual, evaluations) = match step {
            CalStep::Null { detector, channel } => {
                null_step(system, &mut meter, detector, check(channel)?, &plan.descent)
            }
            CalStep::Bias {
                detector,
                channel,
                bias_channel,
            } => {
                bias_index = check(bias_channel)?;
                bias_step(
                    system,
                    &mut meter,
                    detector,
                    check(channel)?,
                    bias_index,
                    &plan.descent,
                )
            }
        };
        reports.push(StepReport {
            step,
            residual,
            evaluations,
        });
    }
    let residuals: Vec<f64> = reports.iter().map(|r| r.residual).collect();
    if residuals.iter().any(|r| *r > plan.descent.threshold) {
        return Err(Error::CalibrationFailed { residuals });
    }
    let o = &system.optics;
    Ok(CalibrationResult {
        qwp1: o.qwp1,
        hwp1: o.hwp1,
        qwp2: o.qwp2,
        hwp2: o.hwp2,
        bias: system.stack.elements[bias_index].retardance,
        steps: reports,
    })
}

fn axis_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b).abs() / (a.norm() * b.norm());
    c.clamp(0.0, 1.0).acos()
}

/// Angles (rad) between each detector's analyzer basis and its ideal basis
/// at the stack output, for a stack at rest with the bias at `±π/2`
/// (whichever sign the current bias is closer to).
pub fn basis_errors(system: &CalSystem, bias_index: usize) -> [f64; 2] {
    let mut ideal = system.stack.clone();
    for (k, el) in ideal.elements.iter_mut().enumerate() {
        el.retardance = if k == bias_index {
            FRAC_PI_2.copysign(system.stack.elements[k].retardance)
        } else {
            0.0
        };
    }
    let t = ideal.rotation();
    let want = [t.apply_vector(&Vector3::x()), t.apply_vector(&Vector3::y())];
    [
        axis_angle(&system.optics.analyzer(1), &want[0]),
        axis_angle(&system.optics.analyzer(2), &want[1]),
    ]
}

/// Rotation axis generated by actuator `k`, from a central-difference
/// derivative of the stack rotation.
pub fn control_axis(stack: &CorrectionStack, k: usize) -> Vector3<f64> {
    let h = 1e-6;
    let at = |d: f64| {
        let mut s = stack.clone();
        s.elements[k].retardance += d;
        *s.rotation().matrix()
    };
    let r0: Matrix3<f64> = *stack.rotation().matrix();
    let w = (at(h) - at(-h)) / (2.0 * h) * r0.transpose();
    Vector3::new(
        w[(2, 1)] - w[(1, 2)],
        w[(0, 2)] - w[(2, 0)],
        w[(1, 0)] - w[(0, 1)],
    ) / 2.0
}

/// Pairwise angles (rad) between the control axes of the given actuators.
pub fn control_axis_angles(stack: &CorrectionStack, actuators: &[usize]) -> Vec<f64> {
    let axes: Vec<_> = actuators.iter().map(|&k| control_axis(stack, k)).collect();
    let mut out = Vec::new();
    for i in 0..axes.len() {
        for j in i + 1..axes.len() {
            out.push(axis_angle(&axes[i], &axes[j]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polcore::Polarization;

    fn at_rest() -> CorrectionStack {
        CorrectionStack::squeezers(FRAC_PI_2)
    }

    #[test]
    fn eigenstate_is_unmodulated() {
        let s = at_rest();
        let m = Modulation::default();
        // D leaves the last (D/A) squeezer unmodulated
        assert!(modulation_depth(&s, 3, &Polarization::D.vector(), &m, true) < 1e-12);
        assert!(modulation_depth(&s, 3, &Polarization::A.vector(), &m, false) < 1e-12);
    }

    #[test]
    fn unbiased_probe_quarter_wave_depth() {
        let s = at_rest();
        let m = Modulation {
            amplitude: FRAC_PI_2,
            ..Default::default()
        };
        let d = modulation_depth(&s, 3, &Polarization::H.vector(), &m, true);
        assert!((d - (PI / 4.0).sin()).abs() < 1e-12);
    }

    #[test]
    fn depth_matches_dense_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Modulation {
            amplitude: 2.3,
            offset: 0.4,
            ..Default::default()
        };
        for _ in 0..50 {
            let mut stack = at_rest();
            for el in &mut stack.elements {
                el.retardance = rng.random::<f64>() * 2.0 - 1.0;
            }
            let probe = random_rotation(&mut rng).apply_vector(&Vector3::x());
            let k = rng.random_range(0..4);
            // brute force: arc points at 360 retardances, largest chord
            let mut s = probe;
            for el in stack.elements[k + 1..].iter().rev() {
                s = vwp_rotation(el).inverse().apply_vector(&s);
            }
            let pts: Vec<Vector3<f64>> = (0..360)
                .map(|i| {
                    let ret = m.offset - m.amplitude / 2.0 + m.amplitude * i as f64 / 359.0;
                    vwp_rotation(&stack.elements[k].with_retardance(ret))
                        .inverse()
                        .apply_vector(&s)
                })
                .collect();
            let mut diam: f64 = 0.0;
            for a in &pts {
                for b in &pts {
                    diam = diam.max((a - b).norm());
                }
            }
            let d = modulation_depth(&stack, k, &probe, &m, true);
            assert!((d - diam / 2.0).abs() < 1e-4, "{d} vs {}", diam / 2.0);
        }
    }

    #[test]
    fn ideal_system_converges_immediately() {
        let mut sys = CalSystem::new(MeasurementOptics::ideal(), at_rest()).unwrap();
        let before = sys.optics.clone();
        let res = calibrate(&mut sys, &CalibrationPlan::default()).unwrap();
        // detector 2 is parked on the Ch-4 axis by the first step and
        // brought back by the third
        let floor = 0.02f64.to_radians();
        assert!(
            res.residuals().iter().all(|r| *r < 2.0 * floor),
            "{:?}",
            res.residuals()
        );
        assert_eq!(
            (sys.optics.qwp1, sys.optics.hwp1),
            (before.qwp1, before.hwp1)
        );
        assert!((res.bias - FRAC_PI_2).abs() < 0.1f64.to_radians());
        assert!(basis_errors(&sys, 2).iter().all(|e| *e < 2.0 * floor));
    }

    #[test]
    fn random_system_recovers_bases() {
        for seed in 0..5 {
            let mut sys = CalSystem::random(seed);
            calibrate(&mut sys, &CalibrationPlan::default()).unwrap();
            let e = basis_errors(&sys, 2);
            assert!(e.iter().all(|a| a.to_degrees() < 0.5), "seed {seed}: {e:?}");
            let ang = control_axis_angles(&sys.stack, &[0, 1, 3]);
            assert!(
                ang.iter().all(|a| (a.to_degrees() - 90.0).abs() < 1.0),
                "{ang:?}"
            );
        }
    }

    #[test]
    fn recalibration_is_idempotent() {
        let mut sys = CalSystem::random(11);
        let plan = CalibrationPlan::default();
        let a = calibrate(&mut sys, &plan).unwrap();
        let b = calibrate(&mut sys, &plan).unwrap();
        let floor = 0.02f64.to_radians();
        for (x, y) in [
            (a.qwp1, b.qwp1),
            (a.hwp1, b.hwp1),
            (a.qwp2, b.qwp2),
            (a.hwp2, b.hwp2),
            (a.bias, b.bias),
        ] {
            let d = (x - y).abs();
            assert!(d.min(PI - d) < floor, "{x} -> {y}");
        }
    }

    #[test]
    fn failure_reports_residuals() {
        let mut sys = CalSystem::random(3);
        let plan = CalibrationPlan {
            descent: DescentConfig {
                max_evaluations: 5,
                start_grid: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        match calibrate(&mut sys, &plan) {
            Err(Error::CalibrationFailed { residuals }) => assert_eq!(residuals.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn control_axes_of_ideal_stack() {
        let s = at_rest();
        assert!((control_axis(&s, 0) - Vector3::x()).norm() < 1e-6);
        assert!((control_axis(&s, 3) - Vector3::y()).norm() < 1e-6);
        // D/A squeezer seen through the quarter-wave bias points at R
        assert!((control_axis(&s, 1) - Vector3::z()).norm() < 1e-6);
    }
}
