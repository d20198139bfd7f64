//! Heterodyne reference-measurement chain.
//!
//! Envelope model: each reference produces one RF tone per detector whose
//! power follows the polarization projection onto that detector's analyzer.
//! Tones are weighted by filter, amplifier and transimpedance magnitude
//! responses, LO shot noise is added in linear power, and the sum is read
//! in dBm by a log power detector followed by an optional digital
//! Butterworth low-pass.
//!
//! Frequency-plan separation: the drift and linewidth of two lasers add in
//! quadrature per laser, `X > ν√2 + l√2`.

pub mod butterworth;
pub mod freqstab;

use std::f64::consts::FRAC_PI_4;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::{PartialStokesReading, Reading};
use crate::error::{Error, Result};
use crate::polcore::{compose, vwp_rotation, PolRotation, StokesState, WaveplateElement};

pub use butterworth::{DigitalButterworth, FilterStage};
pub use freqstab::{FreqStabConfig, FreqStabLoop, FreqStabilizer};

const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w / 1e-3).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyPlan {
    /// THz
    pub f_t: f64,
    /// AOM shift, MHz
    pub x: f64,
    /// LO offset `f_T - f_R`, MHz
    pub y: f64,
    /// Detector bandwidth, MHz
    pub b: f64,
    /// Laser drift span, MHz
    pub nu: f64,
    /// kHz
    pub linewidth: f64,
}

impl Default for FrequencyPlan {
    fn default() -> Self {
        FrequencyPlan {
            f_t: 189.6,
            x: 200.0,
            y: 70.0,
            b: 500.0,
            nu: 125.0,
            linewidth: 10.0,
        }
    }
}

impl FrequencyPlan {
    /// Minimum AOM shift separating the two beat notes, MHz.
    pub fn min_separation(&self) -> f64 {
        std::f64::consts::SQRT_2 * (self.nu + self.linewidth * 1e-3)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.f_t, self.x, self.y, self.b]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return Err(Error::Config(
                "frequency plan values must be positive".into(),
            ));
        }
        if self.nu < 0.0 || self.linewidth < 0.0 {
            return Err(Error::Config(
                "drift span and linewidth must be non-negative".into(),
            ));
        }
        if self.y + self.x > self.b {
            return Err(Error::Config(format!(
                "Y + X = {} MHz exceeds detector bandwidth {} MHz",
                self.y + self.x,
                self.b
            )));
        }
        if self.x <= self.min_separation() {
            return Err(Error::Config(format!(
                "AOM shift {} MHz does not exceed drift span {:.1} MHz",
                self.x,
                self.min_separation()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tone {
    /// Unshifted reference, at `Y`.
    Y,
    /// AOM-shifted reference, at `X + Y`.
    XY,
}

impl Tone {
    pub fn frequency(self, x: f64, y: f64) -> f64 {
        match self {
            Tone::Y => y,
            Tone::XY => x + y,
        }
    }
}

/// Receiver wave-plates and the fiber between correction and measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementOptics {
    pub qwp1: f64,
    pub hwp1: f64,
    pub qwp2: f64,
    pub hwp2: f64,
    /// Row-major Stokes rotation of the correction-to-measurement fiber.
    pub pcm: [[f64; 3]; 3],
}

impl Default for MeasurementOptics {
    fn default() -> Self {
        Self::ideal()
    }
}

fn rows_of(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

impl MeasurementOptics {
    /// Plate angles for an identity PCM: detector 1 analyzes V and
    /// detector 2 analyzes R at the optics input.
    pub fn ideal() -> Self {
        MeasurementOptics {
            qwp1: 0.0,
            hwp1: FRAC_PI_4,
            qwp2: 3.0 * FRAC_PI_4,
            hwp2: 0.0,
            pcm: rows_of(&Matrix3::identity()),
        }
    }

    pub fn with_pcm(mut self, pcm: &PolRotation) -> Self {
        self.pcm = rows_of(pcm.matrix());
        self
    }

    pub fn pcm_rotation(&self) -> PolRotation {
        PolRotation::from_matrix_unchecked(Matrix3::from_fn(|i, j| self.pcm[i][j]))
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.qwp1, self.hwp1, self.qwp2, self.hwp2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("wave-plate angles must be finite".into()));
        }
        if !self.pcm_rotation().is_proper(1e-6) {
            return Err(Error::Config("PCM matrix is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Detector `n` (1 or 2) plate angles `(qwp, hwp)`.
    pub fn plates(&self, detector: u8) -> (f64, f64) {
        if detector == 1 {
            (self.qwp1, self.hwp1)
        } else {
            (self.qwp2, self.hwp2)
        }
    }

    /// Rotation from the optics input to the polarizer for detector `n`.
    pub fn path_rotation(&self, detector: u8) -> PolRotation {
        let (q, h) = self.plates(detector);
        compose(&[
            self.pcm_rotation(),
            vwp_rotation(&WaveplateElement::half_wave(h)),
            vwp_rotation(&WaveplateElement::quarter_wave(q)),
        ])
        .expect("nonempty")
    }

    /// Analyzer polarization seen at the optics input for detector `n`; the
    /// polarizer passes H.
    pub fn analyzer(&self, detector: u8) -> Vector3<f64> {
        self.path_rotation(detector)
            .inverse()
            .apply_vector(&Vector3::x())
    }
}

/// Photodiode conversion; `excess_noise` scales the shot-noise density and
/// is the single calibration constant of the SNR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Photodiode {
    /// A/W
    pub responsivity: f64,
    /// dB above the shot-noise limit.
    pub excess_noise: f64,
    pub shot_noise: bool,
}

impl Default for Photodiode {
    fn default() -> Self {
        Photodiode {
            responsivity: 1.0,
            excess_noise: 0.0,
            shot_noise: true,
        }
    }
}

/// Pre-filter tone powers (dBm into the load).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TonePowers {
    pub det1_y: f64,
    pub det1_xy: f64,
    pub det2_y: f64,
    pub det2_xy: f64,
}

impl TonePowers {
    pub fn get(&self, detector: u8, tone: Tone) -> f64 {
        match (detector, tone) {
            (1, Tone::Y) => self.det1_y,
            (1, Tone::XY) => self.det1_xy,
            (_, Tone::Y) => self.det2_y,
            (_, Tone::XY) => self.det2_xy,
        }
    }
}

/// Shot-noise power density (W/Hz) into the load for a given LO power.
pub fn shot_noise_density(lo_power_dbm: f64, pd: &Photodiode, load: f64) -> f64 {
    if !pd.shot_noise {
        return 0.0;
    }
    let i_lo = pd.responsivity * dbm_to_watts(lo_power_dbm);
    2.0 * ELEMENTARY_CHARGE * i_lo * load * 10f64.powf(pd.excess_noise / 10.0)
}

/// Beat-note power (W into `load`) for a projected signal fraction.
pub fn tone_power_watts(
    fraction: f64,
    ref_power_dbm: f64,
    lo_power_dbm: f64,
    pd: &Photodiode,
    load: f64,
) -> f64 {
    let r = pd.responsivity;
    // balanced detection: i = 2R√(Ps·Plo), delivered power i²Z/2
    2.0 * r * r * dbm_to_watts(ref_power_dbm) * dbm_to_watts(lo_power_dbm) * fraction * load
}

fn projection(state: &Vector3<f64>, analyzer: &Vector3<f64>) -> f64 {
    ((1.0 + state.dot(analyzer)) / 2.0).clamp(0.0, 1.0)
}

/// Tone powers for the two references arriving at the measurement optics.
/// A zero projection returns the shot-noise floor over the detector band.
#[allow(clippy::too_many_arguments)]
pub fn beat_powers(
    unshifted: &StokesState,
    shifted: &StokesState,
    optics: &MeasurementOptics,
    plan: &FrequencyPlan,
    ref_power: f64,
    lo_power: f64,
    pd: &Photodiode,
    load: f64,
) -> TonePowers {
    let floor = shot_noise_density(lo_power, pd, load) * plan.b * 1e6;
    let p = |s: &StokesState, det: u8| {
        let frac = projection(&s.vector(), &optics.analyzer(det));
        let w = tone_power_watts(frac, ref_power, lo_power, pd, load).max(floor);
        if w > 0.0 {
            watts_to_dbm(w)
        } else {
            f64::NEG_INFINITY
        }
    };
    TonePowers {
        det1_y: p(unshifted, 1),
        det1_xy: p(shifted, 1),
        det2_y: p(unshifted, 2),
        det2_xy: p(shifted, 2),
    }
}

/// One measurement branch: a detector, the tone it targets and its filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub reading: Reading,
    pub detector: u8,
    pub tone: Tone,
    pub filters: Vec<FilterStage>,
}

/// RF conditioning: branch filters plus amplifier and TIA gain tables
/// (`[MHz, value]`, piecewise linear, flat beyond the ends).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfChain {
    pub branches: Vec<Branch>,
    /// dB
    pub amplifier_gain: Vec<[f64; 2]>,
    /// ohms
    pub tia_gain: Vec<[f64; 2]>,
}

/// Low-pass stages standing in for the 200 MHz low-pass parts.
pub const LOWPASS_ORDER: u32 = 7;
pub const ANALOG_ORDER: u32 = 5;

impl Default for RfChain {
    fn default() -> Self {
        let bp = |lower, upper| FilterStage::Bandpass {
            lower,
            upper,
            order: ANALOG_ORDER,
        };
        let lp200 = FilterStage::Lowpass {
            corner: 200.0,
            order: LOWPASS_ORDER,
        };
        let hp200 = FilterStage::Highpass {
            corner: 200.0,
            order: ANALOG_ORDER,
        };
        let lp400 = FilterStage::Lowpass {
            corner: 400.0,
            order: ANALOG_ORDER,
        };
        RfChain {
            branches: vec![
                Branch {
                    reading: Reading::D,
                    detector: 1,
                    tone: Tone::Y,
                    filters: vec![bp(10.0, 200.0), lp200, lp200],
                },
                Branch {
                    reading: Reading::H,
                    detector: 2,
                    tone: Tone::Y,
                    filters: vec![bp(10.0, 200.0), lp200, lp200],
                },
                Branch {
                    reading: Reading::R,
                    detector: 2,
                    tone: Tone::XY,
                    filters: vec![hp200, hp200, lp400],
                },
            ],
            amplifier_gain: vec![[0.0, 30.0], [500.0, 29.0], [1500.0, 26.0]],
            tia_gain: vec![
                [0.0, 1000.0],
                [500.0, 707.0],
                [1000.0, 250.0],
                [3000.0, 30.0],
            ],
        }
    }
}

fn interp(table: &[[f64; 2]], f: f64) -> f64 {
    match table {
        [] => 0.0,
        [only] => only[1],
        _ => {
            if f <= table[0][0] {
                return table[0][1];
            }
            for w in table.windows(2) {
                let ([f0, v0], [f1, v1]) = (w[0], w[1]);
                if f <= f1 {
                    return v0 + (v1 - v0) * (f - f0) / (f1 - f0);
                }
            }
            table[table.len() - 1][1]
        }
    }
}

impl RfChain {
    /// Branches whose gains the acceptance suite checks: the two `Y`
    /// passbands stop above 200 MHz, the `X + Y` branch above it.
    /// The second of each lowpass pair models the post-amplifier re-filter.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for b in &self.branches {
            if b.detector != 1 && b.detector != 2 {
                return Err(Error::Config(format!(
                    "detector {} does not exist",
                    b.detector
                )));
            }
            b.filters.iter().try_for_each(|f| f.validate())?;
            seen[b.reading.index()] = true;
        }
        if self.branches.len() != 3 || !seen.iter().all(|s| *s) {
            return Err(Error::Config(
                "RF chain needs exactly one branch per reading".into(),
            ));
        }
        if self.tia_gain.is_empty() || self.tia_gain.iter().any(|p| !(p[1] > 0.0)) {
            return Err(Error::Config(
                "TIA gain table must be nonempty and positive".into(),
            ));
        }
        for t in [&self.amplifier_gain, &self.tia_gain] {
            if t.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                return Err(Error::Config(
                    "gain tables need increasing frequencies".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn branch(&self, r: Reading) -> &Branch {
        self.branches
            .iter()
            .find(|b| b.reading == r)
            .expect("validated chain")
    }

    /// Filter-only power transmission of a branch at `f` MHz.
    pub fn filter_gain(&self, b: &Branch, f: f64) -> f64 {
        b.filters.iter().map(|s| s.power_gain(f)).product()
    }

    /// Total linear power gain of a branch at `f` MHz relative to the
    /// photocurrent delivered straight into `load`.
    pub fn branch_gain(&self, b: &Branch, f: f64, load: f64) -> f64 {
        let tia = interp(&self.tia_gain, f) / load;
        self.filter_gain(b, f) * 10f64.powf(interp(&self.amplifier_gain, f) / 10.0) * tia * tia
    }

    /// `∫ gain df` over the branch in Hz.
    pub fn noise_bandwidth_gain(&self, b: &Branch, load: f64) -> f64 {
        // trapezoid on a 0.05 MHz grid out to 3 GHz
        let df = 0.05;
        let n = (3000.0 / df) as usize;
        let mut acc = 0.0;
        let mut prev = self.branch_gain(b, 0.0, load);
        for k in 1..=n {
            let g = self.branch_gain(b, k as f64 * df, load);
            acc += 0.5 * (prev + g) * df;
            prev = g;
        }
        acc * 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpfConfig {
    /// Hz
    pub corner: f64,
    pub order: u32,
}

impl Default for LpfConfig {
    fn default() -> Self {
        LpfConfig {
            corner: 10_000.0,
            order: 8,
        }
    }
}

/// Log RF power detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerDetectorModel {
    /// ohms
    pub load_impedance: f64,
    /// V per dB (negative slope)
    pub response_slope: f64,
    /// dBm at which the output crosses 0 V
    pub intercept: f64,
    /// dBm
    pub noise_floor: f64,
    pub lpf: Option<LpfConfig>,
    /// Adds the statistical power fluctuation of signal × noise beating.
    pub fluctuations: bool,
}

impl Default for PowerDetectorModel {
    fn default() -> Self {
        PowerDetectorModel {
            load_impedance: 50.0,
            response_slope: -0.025,
            intercept: 20.0,
            noise_floor: -65.0,
            lpf: Some(LpfConfig::default()),
            fluctuations: false,
        }
    }
}

impl PowerDetectorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.load_impedance > 0.0) {
            return Err(Error::Config("load impedance must be positive".into()));
        }
        if !(self.response_slope < 0.0) {
            return Err(Error::Config(
                "detector response slope must be negative".into(),
            ));
        }
        Ok(())
    }

    pub fn volts(&self, dbm: f64) -> f64 {
        self.response_slope * (dbm - self.intercept)
    }
}

/// Complete receiver description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeterodyneConfig {
    pub plan: FrequencyPlan,
    pub optics: MeasurementOptics,
    pub chain: RfChain,
    pub detector: PowerDetectorModel,
    pub photodiode: Photodiode,
    /// Received power of each reference, dBm.
    pub ref_power: f64,
    /// dBm
    pub lo_power: f64,
}

impl Default for HeterodyneConfig {
    fn default() -> Self {
        HeterodyneConfig {
            plan: FrequencyPlan::default(),
            optics: MeasurementOptics::ideal(),
            chain: RfChain::default(),
            detector: PowerDetectorModel::default(),
            photodiode: Photodiode::default(),
            ref_power: -50.0,
            lo_power: 6.0,
        }
    }
}

impl HeterodyneConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.optics.validate()?;
        self.chain.validate()?;
        self.detector.validate()
    }
}

/// Branch readings (dBm) before the digital low-pass.
pub fn chain_and_detect(
    tones: &TonePowers,
    chain: &RfChain,
    det: &PowerDetectorModel,
    plan: &FrequencyPlan,
    noise_density: f64,
) -> [f64; 3] {
    let mut out = [0.0; 3];
    for b in &chain.branches {
        let noise = noise_density * chain.noise_bandwidth_gain(b, det.load_impedance);
        out[b.reading.index()] = branch_dbm(tones, chain, det, plan.x, plan.y, b, noise);
    }
    out
}

fn branch_linear(
    tones: &TonePowers,
    chain: &RfChain,
    load: f64,
    x: f64,
    y: f64,
    b: &Branch,
) -> f64 {
    [Tone::Y, Tone::XY]
        .iter()
        .map(|&t| {
            let p = tones.get(b.detector, t);
            if p == f64::NEG_INFINITY {
                0.0
            } else {
                dbm_to_watts(p) * chain.branch_gain(b, t.frequency(x, y), load)
            }
        })
        .sum()
}

fn branch_dbm(
    tones: &TonePowers,
    chain: &RfChain,
    det: &PowerDetectorModel,
    x: f64,
    y: f64,
    b: &Branch,
    noise: f64,
) -> f64 {
    let p = branch_linear(tones, chain, det.load_impedance, x, y, b)
        + noise
        + dbm_to_watts(det.noise_floor);
    watts_to_dbm(p)
}

/// Stateful receiver: evaluates the chain each iteration, optionally adds
/// power fluctuations, and runs the digital low-pass on the reading
/// sequence.
#[derive(Debug, Clone)]
pub struct Receiver {
    pub config: HeterodyneConfig,
    sample_rate: f64,
    analyzers: [Vector3<f64>; 2],
    noise_density: f64,
    /// Branch noise power (W) and noise-equivalent bandwidth (Hz).
    branch_noise: [(f64, f64); 3],
    lpf: Option<[DigitalButterworth; 3]>,
    rng: ChaCha8Rng,
}

impl Receiver {
    pub fn new(config: HeterodyneConfig, sample_rate: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let lpf = match config.detector.lpf {
            Some(c) => {
                let f = DigitalButterworth::lowpass(c.order, c.corner, sample_rate)?;
                Some([f.clone(), f.clone(), f])
            }
            None => None,
        };
        let load = config.detector.load_impedance;
        let noise_density = shot_noise_density(config.lo_power, &config.photodiode, load);
        let mut branch_noise = [(0.0, 1.0); 3];
        for b in &config.chain.branches {
            let integral = config.chain.noise_bandwidth_gain(b, load);
            let peak =
                config
                    .chain
                    .branch_gain(b, b.tone.frequency(config.plan.x, config.plan.y), load);
            branch_noise[b.reading.index()] = (noise_density * integral, integral / peak);
        }
        let analyzers = [config.optics.analyzer(1), config.optics.analyzer(2)];
        Ok(Receiver {
            config,
            sample_rate,
            analyzers,
            noise_density,
            branch_noise,
            lpf,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn analyzer(&self, detector: u8) -> Vector3<f64> {
        self.analyzers[(detector - 1) as usize]
    }

    pub fn noise_density(&self) -> f64 {
        self.noise_density
    }

    /// Tone powers for references whose Stokes vectors arrive at the optics.
    /// Unlike [`beat_powers`] there is no floor: a zero projection gives
    /// `-inf` and noise enters only through the branch noise terms.
    pub fn tone_powers(&self, unshifted: &Vector3<f64>, shifted: &Vector3<f64>) -> TonePowers {
        let c = &self.config;
        let load = c.detector.load_impedance;
        let p = |s: &Vector3<f64>, det: u8| {
            let frac = projection(s, &self.analyzer(det));
            let w = tone_power_watts(frac, c.ref_power, c.lo_power, &c.photodiode, load);
            if w > 0.0 {
                watts_to_dbm(w)
            } else {
                f64::NEG_INFINITY
            }
        };
        TonePowers {
            det1_y: p(unshifted, 1),
            det1_xy: p(shifted, 1),
            det2_y: p(unshifted, 2),
            det2_xy: p(shifted, 2),
        }
    }

    /// Noise-free, filter-free branch readings in dBm at offset `y` MHz.
    pub fn static_reading(&self, tones: &TonePowers, y: f64) -> [f64; 3] {
        let c = &self.config;
        let mut out = [0.0; 3];
        for b in &c.chain.branches {
            let i = b.reading.index();
            out[i] = branch_dbm(
                tones,
                &c.chain,
                &c.detector,
                c.plan.x,
                y,
                b,
                self.branch_noise[i].0,
            );
        }
        out
    }

    /// Linear branch power of the tones alone (no noise), W.
    pub fn branch_signal(&self, tones: &TonePowers, reading: Reading, y: f64) -> f64 {
        let c = &self.config;
        branch_linear(
            tones,
            &c.chain,
            c.detector.load_impedance,
            c.plan.x,
            y,
            c.chain.branch(reading),
        )
    }

    /// Signal-to-shot-noise ratio (dB) of a fully projected tone in a branch.
    pub fn beat_snr_db(&self, reading: Reading) -> f64 {
        let c = &self.config;
        let b = c.chain.branch(reading);
        let load = c.detector.load_impedance;
        let f = b.tone.frequency(c.plan.x, c.plan.y);
        let s = tone_power_watts(1.0, c.ref_power, c.lo_power, &c.photodiode, load)
            * c.chain.branch_gain(b, f, load);
        10.0 * (s / self.branch_noise[reading.index()].0).log10()
    }

    /// Full measurement for one loop iteration.
    pub fn measure(
        &mut self,
        unshifted: &Vector3<f64>,
        shifted: &Vector3<f64>,
        t: f64,
        y: f64,
    ) -> PartialStokesReading {
        let tones = self.tone_powers(unshifted, shifted);
        let c = &self.config;
        let mut m = [0.0; 3];
        for b in &c.chain.branches {
            let i = b.reading.index();
            let (noise, bw) = self.branch_noise[i];
            let sig = branch_linear(&tones, &c.chain, c.detector.load_impedance, c.plan.x, y, b);
            let mut p = sig + noise + dbm_to_watts(c.detector.noise_floor);
            if c.detector.fluctuations {
                let tau = 1.0 / self.sample_rate;
                let sd = ((2.0 * sig * noise + noise * noise) / (bw * tau)).sqrt();
                let g: f64 = StandardNormal.sample(&mut self.rng);
                p = (p + sd * g).max(1e-3 * dbm_to_watts(c.detector.noise_floor));
            }
            m[i] = watts_to_dbm(p);
        }
        if let Some(f) = self.lpf.as_mut() {
            for i in 0..3 {
                if !f[i].is_primed() {
                    f[i].prime(m[i]);
                }
                m[i] = f[i].process(m[i]);
            }
        }
        PartialStokesReading {
            m_d: m[0],
            m_h: m[1],
            m_r: m[2],
            timestamp: t,
        }
    }
}

/// Cross-tone suppression (dB) of a branch: gain at its own tone over gain
/// at the other tone, for equal input powers.
pub fn cross_tone_suppression(
    chain: &RfChain,
    reading: Reading,
    plan: &FrequencyPlan,
    load: f64,
) -> f64 {
    let b = chain.branch(reading);
    let other = match b.tone {
        Tone::Y => Tone::XY,
        Tone::XY => Tone::Y,
    };
    let own = chain.branch_gain(b, b.tone.frequency(plan.x, plan.y), load);
    let cross = chain.branch_gain(b, other.frequency(plan.x, plan.y), load);
    10.0 * (own / cross).log10()
}
