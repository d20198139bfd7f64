//! Scenario runner: drift, channel rotation, heterodyne measurement,
//! controller and actuators advanced in lock step, with seeded replay and
//! CSV/JSON artifacts.

mod artifacts;

pub use artifacts::{compare, Comparison, FidelityComparison, PairedStats};

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{
    basis_errors, calibrate, control_axis_angles, CalSystem, CalibrationPlan, CalibrationResult,
};
use crate::channel::{channel_rotation, ChannelState, DriftModel, DriftProcess, PmdModel};
use crate::control::{
    default_wiring, ControlEvent, ControlLoop, ControlMode, CorrectionStack, EventKind,
    FringeDetector, LoopWiring, PidConfig, ThreeAxisController,
};
use crate::error::{Error, Result};
use crate::hetdet::{HeterodyneConfig, PowerDetectorModel, Receiver};
use crate::polcore::{angle_between, vwp_rotation, PolRotation, Polarization};
use crate::specan::{
    drift_report, normalize, LevelPeaks, SpectrumAnalyzer, SpectrumConfig, SpectrumResult,
};
use crate::tomo::{
    fidelity_series, simulate_tomography, DensityMatrix, Estimator, SeriesReport, SeriesStats,
    TomographyConfig,
};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSpec {
    pub wiring: LoopWiring,
    pub pid: PidConfig,
    #[serde(default = "yes")]
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSpec {
    /// Active polarization control on or off.
    pub enabled: bool,
    pub mode: ControlMode,
    pub loops: Vec<LoopSpec>,
    /// Replace each loop sign by `-Sgn(dM/dC)` at the initial lock.
    pub auto_sign: bool,
    /// Replace each setpoint by the reading at the initial lock plus
    /// `setpoint_offset`.
    pub auto_setpoint: bool,
    /// dB
    pub setpoint_offset: f64,
    pub fringe: FringeDetector,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let signs = [1.0, 1.0, -1.0];
        ControllerSpec {
            enabled: true,
            mode: ControlMode::BasePid,
            loops: default_wiring()
                .into_iter()
                .zip(signs)
                .map(|(wiring, sign)| LoopSpec {
                    wiring,
                    pid: PidConfig {
                        sign,
                        ..Default::default()
                    },
                    enabled: true,
                })
                .collect(),
            auto_sign: true,
            auto_setpoint: true,
            setpoint_offset: 0.0,
            fringe: FringeDetector::default(),
        }
    }
}

/// Polarimeter on the test signal feeding the drift spectrum analyzer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumOutput {
    pub analyzer: Polarization,
    pub adc_bits: u32,
    pub config: SpectrumConfig,
    /// dB above the median magnitude.
    pub prominence_db: f64,
}

impl Default for SpectrumOutput {
    fn default() -> Self {
        SpectrumOutput {
            analyzer: Polarization::R,
            adc_bits: 14,
            config: SpectrumConfig::default(),
            prominence_db: 20.0,
        }
    }
}

/// Periodic two-qubit tomography of an entangled pair whose first photon
/// traverses the channel as the test signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TomographySeries {
    pub count: usize,
    /// Iterations between tomographies.
    pub interval: u64,
    /// Werner visibility of the source.
    pub visibility: f64,
    pub config: TomographyConfig,
    pub estimator: Estimator,
}

impl Default for TomographySeries {
    fn default() -> Self {
        TomographySeries {
            count: 95,
            interval: 1000,
            visibility: 0.97,
            config: TomographyConfig::default(),
            estimator: Estimator::MaximumLikelihood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Outputs {
    pub trajectories: bool,
    pub readings: bool,
    pub pid: bool,
    pub spectrum: Option<SpectrumOutput>,
    pub tomography: Option<TomographySeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSpec {
    pub plan: CalibrationPlan,
    /// Calibrate a randomly misaligned receiver drawn from the scenario
    /// seed instead of the configured optics.
    pub random_system: bool,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            plan: CalibrationPlan::default(),
            random_system: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub iterations: u64,
    /// Hz
    pub loop_rate: f64,
    pub channel: ChannelState,
    /// Its `seed` is replaced by the scenario seed.
    pub drift: DriftModel,
    pub pmd: PmdModel,
    pub heterodyne: HeterodyneConfig,
    pub stack: CorrectionStack,
    pub controller: ControllerSpec,
    /// Start with the actuators undoing the initial channel.
    pub initial_lock: bool,
    /// Unshifted and AOM-shifted reference polarizations.
    pub references: [Polarization; 2],
    pub test_signal: Polarization,
    /// nm; `None` uses the channel reference wavelength.
    pub test_wavelength: Option<f64>,
    /// Degrees; a tracked state beyond this is out of lock.
    pub lock_threshold: f64,
    /// Iterations excluded from the summary statistics.
    pub warmup: u64,
    pub calibration: Option<CalibrationSpec>,
    pub outputs: Outputs,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 0,
            iterations: 10_000,
            loop_rate: 1000.0,
            channel: ChannelState::default(),
            drift: DriftModel::default(),
            pmd: PmdModel::default(),
            heterodyne: HeterodyneConfig {
                // a 10 kHz stage cannot run at the 1 kHz loop rate
                detector: PowerDetectorModel {
                    lpf: None,
                    ..Default::default()
                },
                ..Default::default()
            },
            stack: CorrectionStack::default(),
            controller: ControllerSpec::default(),
            initial_lock: true,
            references: [Polarization::R, Polarization::V],
            test_signal: Polarization::H,
            test_wavelength: None,
            lock_threshold: 30.0,
            warmup: 0,
            calibration: None,
            outputs: Outputs::default(),
        }
    }
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn test_wavelength(&self) -> f64 {
        self.test_wavelength
            .unwrap_or(self.channel.reference_wavelength)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loop_rate > 0.0) || !self.loop_rate.is_finite() {
            return Err(Error::Config("loop rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config(
                "scenario needs at least one iteration".into(),
            ));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Config("warmup must be shorter than the run".into()));
        }
        if !(self.lock_threshold > 0.0) {
            return Err(Error::Config("lock threshold must be positive".into()));
        }
        if !(self.test_wavelength() > 0.0) {
            return Err(Error::Config("test wavelength must be positive".into()));
        }
        self.channel.validate()?;
        self.drift.validate(&self.channel)?;
        self.pmd.validate()?;
        self.heterodyne.validate()?;
        self.stack.validate()?;
        if self.references[0].basis() == self.references[1].basis() {
            return Err(Error::Config(
                "the two references must lie in different bases".into(),
            ));
        }
        if self.controller.enabled {
            for l in &self.controller.loops {
                l.wiring.check_mub()?;
                l.pid.validate()?;
                if l.pid.sample_rate != self.loop_rate {
                    return Err(Error::Config(format!(
                        "loop sample rate {} differs from scenario loop rate {}",
                        l.pid.sample_rate, self.loop_rate
                    )));
                }
                if l.wiring.reference > 1 {
                    return Err(Error::Config(format!(
                        "reference {} does not exist",
                        l.wiring.reference
                    )));
                }
                let branch = self.heterodyne.chain.branch(l.wiring.measurement);
                let tone_ref = match branch.tone {
                    crate::hetdet::Tone::Y => 0,
                    crate::hetdet::Tone::XY => 1,
                };
                if tone_ref != l.wiring.reference {
                    return Err(Error::Config(format!(
                        "{:?} branch observes reference {tone_ref}, loop expects {}",
                        l.wiring.measurement, l.wiring.reference
                    )));
                }
            }
            build_controller(self)?.validate_against(&self.stack)?;
        }
        if let Some(sp) = &self.outputs.spectrum {
            sp.config.validate()?;
            if sp.config.input_rate != self.loop_rate {
                return Err(Error::Config(
                    "spectrum input rate must equal the loop rate".into(),
                ));
            }
            if !(2..=24).contains(&sp.adc_bits) {
                return Err(Error::Config("ADC resolution must be 2 to 24 bits".into()));
            }
        }
        if let Some(t) = &self.outputs.tomography {
            t.config.validate()?;
            if t.count < 2 || t.interval == 0 {
                return Err(Error::Config(
                    "tomography series needs ≥2 samples and a positive interval".into(),
                ));
            }
            if t.count as u64 * t.interval > self.iterations {
                return Err(Error::Config(
                    "tomography series runs past the scenario end".into(),
                ));
            }
            DensityMatrix::werner(t.visibility)?;
        }
        if let Some(c) = &self.calibration {
            c.plan.validate()?;
        }
        Ok(())
    }
}

fn build_controller(sc: &Scenario) -> Result<ThreeAxisController> {
    let loops = sc
        .controller
        .loops
        .iter()
        .map(|l| {
            let mut cl = ControlLoop::new(l.wiring.clone(), l.pid.clone())?;
            cl.enabled = l.enabled;
            Ok(cl)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = ThreeAxisController::new(loops, sc.controller.mode)?;
    c.fringe = sc.controller.fringe;
    Ok(c)
}

/// Derived sub-stream seed.
fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Index of the fixed bias element, if any.
fn bias_index(stack: &CorrectionStack) -> Option<usize> {
    stack.fixed.iter().position(|f| *f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scenario: String,
    pub seed: u64,
    pub random_system: bool,
    pub result: CalibrationResult,
    /// Analyzer misalignment of detectors 1 and 2 after calibration, degrees.
    pub basis_errors_deg: [f64; 2],
    /// Pairwise angles between the driven actuators' control axes at rest,
    /// degrees.
    pub control_axis_angles_deg: Vec<f64>,
}

/// Calibrates the scenario's receiver (or a random one drawn from its
/// seed) and returns the report with a scenario carrying the recovered
/// optics and bias.
pub fn calibrate_scenario(sc: &Scenario) -> Result<(CalibrationReport, Scenario)> {
    let spec = sc.calibration.clone().unwrap_or_default();
    let mut system = if spec.random_system {
        CalSystem::random(sub_seed(sc.seed, 3))
    } else {
        CalSystem::new(sc.heterodyne.optics.clone(), sc.stack.clone())?
    };
    let bias = bias_index(&system.stack)
        .ok_or_else(|| Error::Config("stack has no bias element".into()))?;
    for (k, el) in system.stack.elements.iter_mut().enumerate() {
        if k != bias {
            el.retardance = 0.0;
        }
    }
    let plan = CalibrationPlan {
        seed: sub_seed(sc.seed, 4),
        ..spec.plan
    };
    let result = calibrate(&mut system, &plan)?;
    let driven: Vec<usize> = (0..system.stack.elements.len())
        .filter(|k| *k != bias)
        .collect();
    let report = CalibrationReport {
        scenario: sc.name.clone(),
        seed: sc.seed,
        random_system: spec.random_system,
        basis_errors_deg: basis_errors(&system, bias).map(f64::to_degrees),
        control_axis_angles_deg: control_axis_angles(&system.stack, &driven)
            .into_iter()
            .map(f64::to_degrees)
            .collect(),
        result,
    };
    let mut out = sc.clone();
    out.name = format!("{}-calibrated", sc.name);
    out.heterodyne.optics = system.optics;
    out.stack = system.stack;
    out.calibration = None;
    Ok((report, out))
}

/// Sets the three driven squeezers of a four-squeezer stack so that the
/// stack undoes `channel` up to its bias element.
///
/// The stack is `R_DA(φ4)·R_HV(b)·R_DA(φ2)·R_HV(φ1)` with `b = ±π/2`, so
/// `R_HV(b)⁻¹·stack = R_∓z(φ4)·R_y(φ2)·R_x(φ1)`: a Z-Y-X Tait–Bryan
/// decomposition of the inverse channel.
pub fn lock_stack(stack: &mut CorrectionStack, channel: &PolRotation) -> Result<()> {
    let axes = [0.0, PI / 4.0, 0.0, PI / 4.0];
    let layout_ok = stack.elements.len() == 4
        && stack.fixed == [false, false, true, false]
        && stack
            .elements
            .iter()
            .zip(axes)
            .all(|(e, a)| (e.axis_angle - a).abs() < 1e-9);
    let b = stack.elements.get(2).map_or(0.0, |e| e.retardance);
    if !layout_ok || b == 0.0 {
        return Err(Error::Config(
            "initial lock needs the HV, DA, HV-bias, DA squeezer layout".into(),
        ));
    }
    let m = channel.inverse();
    let m = m.matrix();
    let phi2 = -m[(2, 0)].clamp(-1.0, 1.0).asin();
    let phi1 = m[(2, 1)].atan2(m[(2, 2)]);
    let phi4 = -b.signum() * m[(1, 0)].atan2(m[(0, 0)]);
    stack.elements[0].retardance = phi1;
    stack.elements[1].retardance = phi2;
    stack.elements[3].retardance = phi4;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    /// Degrees
    pub mean: f64,
    pub rms: f64,
    pub median: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_samples(x: &[f64]) -> Self {
        if x.is_empty() {
            return ErrorStats {
                mean: f64::NAN,
                rms: f64::NAN,
                median: f64::NAN,
                max: f64::NAN,
            };
        }
        let n = x.len() as f64;
        let mut s = x.to_vec();
        s.sort_by(f64::total_cmp);
        let mid = s.len() / 2;
        let median = if s.len().is_multiple_of(2) {
            0.5 * (s[mid - 1] + s[mid])
        } else {
            s[mid]
        };
        ErrorStats {
            mean: x.iter().sum::<f64>() / n,
            rms: (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            median,
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub range_limit: usize,
    pub fringe_jump: usize,
    pub lock_lost: usize,
}

impl EventCounts {
    pub fn from_events(events: &[ControlEvent]) -> Self {
        let mut c = EventCounts::default();
        for e in events {
            match e.kind {
                EventKind::RangeLimit => c.range_limit += 1,
                EventKind::FringeJump => c.fringe_jump += 1,
                EventKind::LockLost => c.lock_lost += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographySummary {
    pub count: usize,
    pub mean_total_counts: f64,
    pub state_successive: SeriesStats,
    pub state_vs_first: SeriesStats,
    pub process_successive: SeriesStats,
    pub process_vs_first: SeriesStats,
}

/// Tracked states, in artifact column order.
pub const TRACKED: [&str; 3] = ["ref0", "ref1", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub iterations: u64,
    pub loop_rate: f64,
    pub warmup: u64,
    /// Angular error of ref0, ref1 and the test signal from their initial
    /// output states, over the post-warmup iterations.
    pub errors: [ErrorStats; 3],
    /// Fraction of post-warmup iterations with every tracked state within
    /// the lock threshold.
    pub lock_fraction: f64,
    pub events: EventCounts,
    pub spectrum_peaks: Vec<LevelPeaks>,
    pub tomography: Option<TomographySummary>,
}

impl RunSummary {
    /// Statistics recomputed from per-iteration errors (degrees).
    pub fn compute(sc: &Scenario, errors: &[[f64; 3]], events: &[ControlEvent]) -> Self {
        let post = &errors[(sc.warmup as usize).min(errors.len())..];
        let col = |k: usize| post.iter().map(|r| r[k]).collect::<Vec<_>>();
        let locked = post
            .iter()
            .filter(|r| r.iter().all(|e| *e <= sc.lock_threshold))
            .count();
        RunSummary {
            name: sc.name.clone(),
            seed: sc.seed,
            iterations: errors.len() as u64,
            loop_rate: sc.loop_rate,
            warmup: sc.warmup,
            errors: [0, 1, 2].map(|k| ErrorStats::from_samples(&col(k))),
            lock_fraction: if post.is_empty() {
                f64::NAN
            } else {
                locked as f64 / post.len() as f64
            },
            events: EventCounts::from_events(events),
            spectrum_peaks: Vec::new(),
            tomography: None,
        }
    }
}

/// Per-iteration record of a loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidSample {
    pub output: f64,
    pub error: f64,
    pub retardance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub scenario: Scenario,
    /// Degrees, per iteration: ref0, ref1, test.
    pub errors: Vec<[f64; 3]>,
    /// Output Stokes vectors in the stack frame: ref0, ref1, test.
    pub trajectories: Option<Vec<[[f64; 3]; 3]>>,
    /// dBm: `M_D`, `M_H`, `M_R`.
    pub readings: Option<Vec<[f64; 3]>>,
    pub pid: Option<Vec<Vec<PidSample>>>,
    pub events: Vec<ControlEvent>,
    pub spectra: Vec<SpectrumResult>,
    pub tomography: Option<SeriesReport>,
    pub summary: RunSummary,
}

/// Runs a scenario to completion.
pub fn run(sc: &Scenario) -> Result<RunArtifacts> {
    sc.validate()?;
    let n_iter = sc.iterations as usize;
    let dt = 1.0 / sc.loop_rate;
    let mut channel = sc.channel.clone();
    let mut drift = DriftProcess::new(
        DriftModel {
            seed: sub_seed(sc.seed, 0),
            ..sc.drift.clone()
        },
        dt,
    );
    let mut receiver = Receiver::new(sc.heterodyne.clone(), sc.loop_rate, sub_seed(sc.seed, 1))?;
    let y = sc.heterodyne.plan.y;
    let lambda_ref = sc.channel.reference_wavelength;
    let lambda_test = sc.test_wavelength();
    let same_lambda = lambda_test == lambda_ref;
    let rotations = |ch: &ChannelState| -> Result<(PolRotation, PolRotation)> {
        let r = channel_rotation(ch, lambda_ref, &sc.pmd)?;
        let t = if same_lambda {
            r
        } else {
            channel_rotation(ch, lambda_test, &sc.pmd)?
        };
        Ok((r, t))
    };

    let mut stack = sc.stack.clone();
    let frame_inv = bias_index(&stack)
        .map(|k| vwp_rotation(&stack.elements[k]).inverse())
        .unwrap_or_else(PolRotation::identity);
    let (c0, c0_test) = rotations(&channel)?;
    if sc.initial_lock {
        lock_stack(&mut stack, &c0)?;
    }
    let refs = sc.references.map(|p| p.vector());
    let test = sc.test_signal.vector();
    let s0 = stack.rotation();
    let g0 = c0.then(&s0);
    let g0_test = c0_test.then(&s0);
    let initial = [
        g0.apply_vector(&refs[0]),
        g0.apply_vector(&refs[1]),
        g0_test.apply_vector(&test),
    ];

    let mut controller = if sc.controller.enabled {
        let mut c = build_controller(sc)?;
        prepare_loops(sc, &mut c, &receiver, &stack, &c0, &refs, y)?;
        Some(c)
    } else {
        None
    };
    let n_loops = controller.as_ref().map_or(0, |c| c.loops.len());

    let mut spectrum = match &sc.outputs.spectrum {
        Some(sp) => Some((sp, SpectrumAnalyzer::new(&sp.config)?)),
        None => None,
    };
    let mut tomo_rng = ChaCha8Rng::seed_from_u64(sub_seed(sc.seed, 2));
    let source = match &sc.outputs.tomography {
        Some(t) => Some(DensityMatrix::werner(t.visibility)?),
        None => None,
    };
    let mut records = Vec::new();

    let mut errors = Vec::with_capacity(n_iter);
    let mut trajectories = sc.outputs.trajectories.then(|| Vec::with_capacity(n_iter));
    let mut readings = sc.outputs.readings.then(|| Vec::with_capacity(n_iter));
    let mut pid_log = (sc.outputs.pid && n_loops > 0).then(|| Vec::with_capacity(n_iter));
    let mut events = Vec::new();
    let mut lost = [false; 3];

    for n in 0..n_iter {
        let t = (n + 1) as f64 * dt;
        channel = drift.step(&channel)?;
        let (c_ref, c_test) = rotations(&channel)?;

        if controller.is_some() || readings.is_some() {
            let g = c_ref.then(&stack.rotation());
            let m = receiver.measure(&g.apply_vector(&refs[0]), &g.apply_vector(&refs[1]), t, y);
            if let Some(r) = readings.as_mut() {
                r.push(m.as_array());
            }
            if let Some(c) = controller.as_mut() {
                events.extend(c.step(&m, &mut stack));
            }
        }

        let s = stack.rotation();
        let g = c_ref.then(&s);
        let g_test = c_test.then(&s);
        let out = [
            g.apply_vector(&refs[0]),
            g.apply_vector(&refs[1]),
            g_test.apply_vector(&test),
        ];
        let err = [0, 1, 2].map(|k| angle_between(&out[k], &initial[k]).to_degrees());
        for k in 0..3 {
            let over = err[k] > sc.lock_threshold;
            if over && !lost[k] {
                events.push(ControlEvent {
                    iteration: n as u64,
                    timestamp: t,
                    kind: EventKind::LockLost,
                    source: k,
                    value: err[k],
                });
            }
            lost[k] = over;
        }
        errors.push(err);
        if let Some(tr) = trajectories.as_mut() {
            tr.push(out.map(|v| {
                let l = frame_inv.apply_vector(&v);
                [l.x, l.y, l.z]
            }));
        }
        if let (Some(log), Some(c)) = (pid_log.as_mut(), controller.as_ref()) {
            log.push(
                c.loops
                    .iter()
                    .map(|l| PidSample {
                        output: l.state.c_prev.unwrap_or(f64::NAN),
                        error: l.state.prev_error.unwrap_or(f64::NAN),
                        retardance: stack.elements[l.wiring.actuator].retardance,
                    })
                    .collect(),
            );
        }
        if let Some((sp, an)) = spectrum.as_mut() {
            let v = frame_inv.apply_vector(&out[2]);
            an.push(polarimeter_sample(&v, &sp.analyzer.vector(), sp.adc_bits)?);
        }
        if let (Some(ts), Some(src)) = (&sc.outputs.tomography, &source) {
            if (n as u64 + 1).is_multiple_of(ts.interval) && records.len() < ts.count {
                let logical = g_test.then(&frame_inv);
                let state = src.apply_first(&logical.to_su2());
                records.push(simulate_tomography(&state, &ts.config, tomo_rng.random())?);
            }
        }
    }

    let mut summary = RunSummary::compute(sc, &errors, &events);
    let spectra = match spectrum {
        Some((sp, an)) => {
            let s = an.finish()?;
            summary.spectrum_peaks = drift_report(&s, sp.prominence_db);
            s
        }
        None => Vec::new(),
    };
    let tomography = match &sc.outputs.tomography {
        Some(ts) if !records.is_empty() => {
            let report = fidelity_series(&records, ts.estimator)?;
            summary.tomography = Some(TomographySummary {
                count: records.len(),
                mean_total_counts: records.iter().map(|r| r.total()).sum::<f64>()
                    / records.len() as f64,
                state_successive: report.state.successive_stats,
                state_vs_first: report.state.vs_first_stats,
                process_successive: report.process.successive_stats,
                process_vs_first: report.process.vs_first_stats,
            });
            Some(report)
        }
        _ => None,
    };

    Ok(RunArtifacts {
        scenario: sc.clone(),
        errors,
        trajectories,
        readings,
        pid: pid_log,
        events,
        spectra,
        tomography,
        summary,
    })
}

/// Two-channel ADC reading of a polarimeter, normalized.
fn polarimeter_sample(v: &Vector3<f64>, analyzer: &Vector3<f64>, bits: u32) -> Result<f64> {
    let full = ((1i64 << bits) - 1) as f64;
    let offset = (1i64 << (bits - 1)) as f64;
    let frac = 0.5 * (1.0 + v.dot(analyzer));
    let a = (frac * full).round() - offset;
    let b = ((1.0 - frac) * full).round() - offset;
    normalize(a, b, offset)
}

/// Fixes loop signs, slope-sign memories, setpoints and integrators from
/// the noise-free readings at the starting actuator settings.
fn prepare_loops(
    sc: &Scenario,
    ctrl: &mut ThreeAxisController,
    rx: &Receiver,
    stack: &CorrectionStack,
    channel: &PolRotation,
    refs: &[Vector3<f64>; 2],
    y: f64,
) -> Result<()> {
    let reading = |st: &CorrectionStack| {
        let g = channel.then(&st.rotation());
        rx.static_reading(
            &rx.tone_powers(&g.apply_vector(&refs[0]), &g.apply_vector(&refs[1])),
            y,
        )
    };
    let m0 = reading(stack);
    for l in &mut ctrl.loops {
        let k = l.wiring.actuator;
        let i = l.wiring.measurement.index();
        if sc.controller.auto_sign {
            let h = 1e-4;
            let mut up = stack.clone();
            up.elements[k].retardance += h;
            let mut dn = stack.clone();
            dn.elements[k].retardance -= h;
            let slope = (reading(&up)[i] - reading(&dn)[i]) / (2.0 * h);
            if slope == 0.0 || !slope.is_finite() {
                return Err(Error::Config(format!(
                    "loop on actuator {k} has no slope at the initial lock"
                )));
            }
            l.config.sign = -slope.signum();
        }
        if sc.controller.auto_setpoint {
            l.config.setpoint = m0[i] + sc.controller.setpoint_offset;
        }
        let [lo, hi] = stack.output_limits(k);
        let [a, b] = l.config.output_limits;
        l.config.output_limits = [a.max(lo), b.min(hi)];
        l.state.slope_sign = -l.config.sign;
    }
    ctrl.sync_to_stack(stack);
    Ok(())
}

impl RunArtifacts {
    /// Writes every artifact into `dir`, returning the file names.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        artifacts::write(self, dir.as_ref())
    }

    /// Reloads the scenario, summary, errors and events of a written run.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        artifacts::load(dir.as_ref())
    }
}
