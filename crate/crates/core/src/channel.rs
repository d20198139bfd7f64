//! Fiber channel model: a drifting stack of wave-plates with optional
//! first-order wavelength dependence.

use std::f64::consts::{FRAC_PI_4, PI};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polcore::{compose, vwp_rotation, wrap_axis, PolRotation, WaveplateElement};

/// Speed of light in nm·GHz.
const C_NM_GHZ: f64 = 299_792_458.0;

/// Wave-plate stack standing in for the fiber link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub elements: Vec<WaveplateElement>,
    /// nm
    pub reference_wavelength: f64,
}

impl ChannelState {
    pub fn new(elements: Vec<WaveplateElement>, reference_wavelength: f64) -> Result<Self> {
        let ch = ChannelState {
            elements,
            reference_wavelength,
        };
        ch.validate()?;
        Ok(ch)
    }

    /// `n` elements with alternating H/V and D/A axes and zero retardance.
    pub fn alternating(n: usize, reference_wavelength: f64) -> Result<Self> {
        let elements = (0..n)
            .map(|k| {
                let axis = if k % 2 == 0 { 0.0 } else { FRAC_PI_4 };
                WaveplateElement::unbounded(axis, 0.0)
            })
            .collect();
        Self::new(elements, reference_wavelength)
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::Config("channel needs at least one element".into()));
        }
        if !(self.reference_wavelength > 0.0) {
            return Err(Error::Config(
                "reference wavelength must be positive".into(),
            ));
        }
        if self
            .elements
            .iter()
            .any(|e| !e.retardance.is_finite() || !e.axis_angle.is_finite())
        {
            return Err(Error::Config(
                "channel element values must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Flattened `(ret0, axis0, ret1, axis1, ...)` coordinates.
    pub fn coordinates(&self) -> Vec<f64> {
        self.elements
            .iter()
            .flat_map(|e| [e.retardance, e.axis_angle])
            .collect()
    }
}

impl Default for ChannelState {
    fn default() -> Self {
        Self::alternating(4, 1581.2).expect("valid default")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftVariant {
    None,
    RandomWalk,
    BiasedRandomWalk,
    Sinusoidal,
    Scripted,
}

/// Parameters of the channel drift process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftModel {
    pub variant: DriftVariant,
    /// Radians per iteration applied to retardances (walks).
    pub step_size: f64,
    /// Radians per iteration applied to axis angles; `None` reuses `step_size`.
    pub axis_step_size: Option<f64>,
    /// Radians per iteration added to every coordinate (biased walk).
    pub bias: f64,
    /// Bias on axis angles; `None` reuses `bias`.
    pub axis_bias: Option<f64>,
    /// Hz (sinusoidal).
    pub frequency: f64,
    /// Radians (sinusoidal).
    pub amplitude: f64,
    /// Elements driven by the sinusoid; empty means all.
    pub elements: Vec<usize>,
    /// Absolute `(ret, axis)` coordinates per iteration (scripted).
    pub trace: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel {
            variant: DriftVariant::None,
            step_size: 0.0,
            axis_step_size: None,
            bias: 0.0,
            axis_bias: None,
            frequency: 0.0,
            amplitude: 0.0,
            elements: Vec::new(),
            trace: Vec::new(),
            seed: 0,
        }
    }
}

impl DriftModel {
    pub fn random_walk(step_size: f64, seed: u64) -> Self {
        DriftModel {
            variant: DriftVariant::RandomWalk,
            step_size,
            seed,
            ..Default::default()
        }
    }

    pub fn biased_random_walk(step_size: f64, bias: f64, seed: u64) -> Self {
        DriftModel {
            variant: DriftVariant::BiasedRandomWalk,
            step_size,
            bias,
            seed,
            ..Default::default()
        }
    }

    pub fn sinusoidal(frequency: f64, amplitude: f64, elements: Vec<usize>) -> Self {
        DriftModel {
            variant: DriftVariant::Sinusoidal,
            frequency,
            amplitude,
            elements,
            ..Default::default()
        }
    }

    pub fn scripted(trace: Vec<Vec<f64>>) -> Self {
        DriftModel {
            variant: DriftVariant::Scripted,
            trace,
            ..Default::default()
        }
    }

    pub fn validate(&self, channel: &ChannelState) -> Result<()> {
        let steps = [self.step_size, self.axis_step_size.unwrap_or(0.0)];
        if steps.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(
                "drift step sizes must be finite and non-negative".into(),
            ));
        }
        match self.variant {
            DriftVariant::Sinusoidal => {
                if !self.frequency.is_finite() || !self.amplitude.is_finite() {
                    return Err(Error::Config("sinusoid parameters must be finite".into()));
                }
                if let Some(&k) = self.elements.iter().find(|&&k| k >= channel.elements.len()) {
                    return Err(Error::Config(format!(
                        "sinusoidal drift element {k} out of range"
                    )));
                }
            }
            DriftVariant::Scripted => {
                if self.trace.is_empty() {
                    return Err(Error::Config(
                        "scripted drift needs a nonempty trace".into(),
                    ));
                }
                let want = 2 * channel.elements.len();
                if let Some(row) = self.trace.iter().find(|r| r.len() != want) {
                    return Err(Error::DimensionMismatch(row.len(), want));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Loads a headerless CSV trace, one row per iteration.
    pub fn load_trace_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad trace value {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Seeded drift generator. Owns its random stream so identical seeds give
/// bit-identical channel trajectories.
#[derive(Debug, Clone)]
pub struct DriftProcess {
    model: DriftModel,
    rng: ChaCha8Rng,
    iteration: u64,
    dt: f64,
}

impl DriftProcess {
    /// `dt` is the iteration period in seconds (used by the sinusoid).
    pub fn new(model: DriftModel, dt: f64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        DriftProcess {
            model,
            rng,
            iteration: 0,
            dt,
        }
    }

    pub fn model(&self) -> &DriftModel {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn pm(&mut self, step: f64) -> f64 {
        if self.rng.random::<bool>() {
            step
        } else {
            -step
        }
    }

    /// Advances the channel by one iteration.
    pub fn step(&mut self, channel: &ChannelState) -> Result<ChannelState> {
        let mut next = channel.clone();
        let m = &self.model;
        let n = self.iteration;
        match m.variant {
            DriftVariant::None => {}
            DriftVariant::RandomWalk | DriftVariant::BiasedRandomWalk => {
                let biased = m.variant == DriftVariant::BiasedRandomWalk;
                let (rs, as_) = (m.step_size, m.axis_step_size.unwrap_or(m.step_size));
                let (rb, ab) = if biased {
                    (m.bias, m.axis_bias.unwrap_or(m.bias))
                } else {
                    (0.0, 0.0)
                };
                for el in next.elements.iter_mut() {
                    let dr = rb + self.pm(rs);
                    let da = ab + self.pm(as_);
                    el.retardance += dr;
                    el.axis_angle = wrap_axis(el.axis_angle + da);
                }
            }
            DriftVariant::Sinusoidal => {
                let t = (n + 1) as f64 * self.dt;
                let value = m.amplitude * (2.0 * PI * m.frequency * t).sin();
                let all = m.elements.is_empty();
                for (k, el) in next.elements.iter_mut().enumerate() {
                    if all || m.elements.contains(&k) {
                        el.retardance = value;
                    }
                }
            }
            DriftVariant::Scripted => {
                let row = m.trace.get(n as usize).ok_or(Error::TraceExhausted(n))?;
                if row.len() != 2 * next.elements.len() {
                    return Err(Error::DimensionMismatch(row.len(), 2 * next.elements.len()));
                }
                for (el, pair) in next.elements.iter_mut().zip(row.chunks(2)) {
                    el.retardance = pair[0];
                    el.axis_angle = wrap_axis(pair[1]);
                }
            }
        }
        self.iteration += 1;
        Ok(next)
    }
}

/// Convenience wrapper around [`DriftProcess::step`].
pub fn drift_step(channel: &ChannelState, process: &mut DriftProcess) -> Result<ChannelState> {
    process.step(channel)
}

/// First-order differential-group-delay rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmdModel {
    pub enabled: bool,
    pub dgd_axis: [f64; 3],
    /// Radians per 100-GHz channel offset.
    pub dgd_magnitude: f64,
    /// GHz
    pub channel_spacing: f64,
}

impl Default for PmdModel {
    fn default() -> Self {
        PmdModel {
            enabled: false,
            dgd_axis: [0.0, 0.0, 1.0],
            dgd_magnitude: 0.0,
            channel_spacing: 100.0,
        }
    }
}

impl PmdModel {
    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            let n = Vector3::from(self.dgd_axis).norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("DGD axis norm {n} is not 1")));
            }
            if !(self.channel_spacing > 0.0) || !self.dgd_magnitude.is_finite() {
                return Err(Error::Config("invalid PMD parameters".into()));
            }
        }
        Ok(())
    }
}

/// Signed frequency offset of `wavelength` from `reference`, in channels.
pub fn channel_offset(wavelength: f64, reference: f64, spacing_ghz: f64) -> f64 {
    (C_NM_GHZ / wavelength - C_NM_GHZ / reference) / spacing_ghz
}

/// Wavelength sitting `channels` grid slots above `reference` in frequency.
pub fn wavelength_at_offset(reference: f64, channels: f64, spacing_ghz: f64) -> f64 {
    C_NM_GHZ / (C_NM_GHZ / reference + channels * spacing_ghz)
}

/// Channel rotation seen at `wavelength` (nm).
pub fn channel_rotation(
    channel: &ChannelState,
    wavelength: f64,
    pmd: &PmdModel,
) -> Result<PolRotation> {
    if !(wavelength > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wavelength must be positive, got {wavelength}"
        )));
    }
    let scale = channel.reference_wavelength / wavelength;
    let mut rots: Vec<PolRotation> = channel
        .elements
        .iter()
        .map(|e| vwp_rotation(&e.with_retardance(e.retardance * scale)))
        .collect();
    if pmd.enabled {
        let off = channel_offset(
            wavelength,
            channel.reference_wavelength,
            pmd.channel_spacing,
        );
        // DGD shared evenly between the sections, so the output PMD vector
        // moves with the fiber
        let n = rots.len();
        let step = PolRotation::about_axis(
            &Vector3::from(pmd.dgd_axis),
            pmd.dgd_magnitude * off / n as f64,
        );
        rots = rots.into_iter().flat_map(|r| [r, step]).collect();
    }
    compose(&rots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_channel(seed: u64) -> ChannelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let els = (0..4)
            .map(|_| {
                WaveplateElement::unbounded(rng.random::<f64>() * PI, rng.random::<f64>() * 10.0)
            })
            .collect();
        ChannelState::new(els, 1581.2).unwrap()
    }

    #[test]
    fn zero_step_leaves_channel() {
        let ch = random_channel(1);
        let mut p = DriftProcess::new(DriftModel::random_walk(0.0, 5), 1e-3);
        let mut cur = ch.clone();
        for _ in 0..100 {
            cur = p.step(&cur).unwrap();
        }
        assert_eq!(cur, ch);
    }

    #[test]
    fn bias_accumulates_to_pi() {
        let ch = ChannelState::alternating(4, 1581.2).unwrap();
        let mut m = DriftModel::biased_random_walk(0.0, PI / 5000.0, 1);
        m.axis_bias = Some(0.0);
        let mut p = DriftProcess::new(m, 1e-3);
        let mut cur = ch.clone();
        for _ in 0..5000 {
            cur = p.step(&cur).unwrap();
        }
        for (a, b) in cur.elements.iter().zip(&ch.elements) {
            assert!((a.retardance - b.retardance - PI).abs() < 1e-9);
            assert_eq!(a.axis_angle, b.axis_angle);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let ch = random_channel(3);
        let run = || {
            let mut p = DriftProcess::new(DriftModel::random_walk(0.01, 42), 1e-3);
            let mut cur = ch.clone();
            let mut out = Vec::new();
            for _ in 0..500 {
                cur = p.step(&cur).unwrap();
                out.extend(cur.coordinates());
            }
            out
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sinusoid_sets_designated_elements() {
        let ch = ChannelState::alternating(3, 1550.0).unwrap();
        let mut p = DriftProcess::new(DriftModel::sinusoidal(1.0, 0.5, vec![1]), 0.25);
        let next = p.step(&ch).unwrap();
        assert_eq!(next.elements[0].retardance, 0.0);
        assert!((next.elements[1].retardance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scripted_trace_applies_and_exhausts() {
        let ch = ChannelState::alternating(1, 1550.0).unwrap();
        let mut p = DriftProcess::new(
            DriftModel::scripted(vec![vec![0.3, 0.1], vec![0.4, 0.2]]),
            1e-3,
        );
        let a = p.step(&ch).unwrap();
        assert_eq!(a.elements[0].retardance, 0.3);
        let b = p.step(&a).unwrap();
        assert_eq!(b.elements[0].axis_angle, 0.2);
        assert!(matches!(p.step(&b), Err(Error::TraceExhausted(2))));
    }

    #[test]
    fn scripted_trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        std::fs::write(&path, "0.1, 0.2\n0.3,0.4\n").unwrap();
        let rows = DriftModel::load_trace_csv(&path).unwrap();
        assert_eq!(rows, vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
    }

    #[test]
    fn reference_wavelength_matches_unscaled() {
        let ch = random_channel(7);
        let direct = compose(&ch.elements.iter().map(vwp_rotation).collect::<Vec<_>>()).unwrap();
        let r = channel_rotation(&ch, ch.reference_wavelength, &PmdModel::default()).unwrap();
        assert!(r.distance(&direct) < 1e-12);
        let pmd = PmdModel {
            enabled: true,
            dgd_axis: [0.6, 0.0, 0.8],
            dgd_magnitude: 0.3,
            ..Default::default()
        };
        let r2 = channel_rotation(&ch, ch.reference_wavelength, &pmd).unwrap();
        assert!(r2.distance(&direct) < 1e-12);
    }

    #[test]
    fn retardance_scales_with_wavelength() {
        let ch = ChannelState::new(vec![WaveplateElement::unbounded(0.0, PI)], 1581.2).unwrap();
        let r = channel_rotation(&ch, 1573.2, &PmdModel::default()).unwrap();
        let want = vwp_rotation(&WaveplateElement::unbounded(0.0, PI * 1581.2 / 1573.2));
        assert!(r.distance(&want) < 1e-12);
        assert!(channel_rotation(&ch, 0.0, &PmdModel::default()).is_err());
    }

    #[test]
    fn offset_and_wavelength_inverse() {
        let w = wavelength_at_offset(1581.2, 5.0, 100.0);
        assert!((channel_offset(w, 1581.2, 100.0) - 5.0).abs() < 1e-9);
        assert!(w < 1581.2);
    }

    #[test]
    fn dgd_is_shared_between_sections() {
        let ch = ChannelState::new(
            vec![
                WaveplateElement::unbounded(0.3, 1.1),
                WaveplateElement::unbounded(1.0, 2.0),
            ],
            1581.2,
        )
        .unwrap();
        let pmd = PmdModel {
            enabled: true,
            dgd_axis: [0.0, 0.6, 0.8],
            dgd_magnitude: 0.2,
            ..Default::default()
        };
        let w = wavelength_at_offset(1581.2, 4.0, 100.0);
        let s = 1581.2 / w;
        let d = PolRotation::about_axis(&Vector3::new(0.0, 0.6, 0.8), 0.2 * 4.0 / 2.0);
        let e1 = vwp_rotation(&WaveplateElement::unbounded(0.3, 1.1 * s));
        let e2 = vwp_rotation(&WaveplateElement::unbounded(1.0, 2.0 * s));
        let want = e1.then(&d).then(&e2).then(&d);
        assert!(channel_rotation(&ch, w, &pmd).unwrap().distance(&want) < 1e-9);
    }

    #[test]
    fn rotation_is_proper() {
        for s in 0..50 {
            let ch = random_channel(s);
            let pmd = PmdModel {
                enabled: true,
                dgd_axis: [1.0, 0.0, 0.0],
                dgd_magnitude: 0.1,
                ..Default::default()
            };
            assert!(channel_rotation(&ch, 1570.0, &pmd).unwrap().is_proper(1e-9));
        }
    }
}
