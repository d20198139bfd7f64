//! Butterworth responses: analog magnitude prototypes for the RF stages and
//! a bilinear-transform low-pass cascade for the digital stage.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterStage {
    Lowpass { corner: f64, order: u32 },
    Highpass { corner: f64, order: u32 },
    Bandpass { lower: f64, upper: f64, order: u32 },
}

impl FilterStage {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            FilterStage::Lowpass { corner, order } | FilterStage::Highpass { corner, order } => {
                corner > 0.0 && order > 0
            }
            FilterStage::Bandpass {
                lower,
                upper,
                order,
            } => lower > 0.0 && lower < upper && order > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid filter stage {self:?}")))
        }
    }

    /// Power transmission `|H(f)|²`; `f` in the same unit as the corners.
    pub fn power_gain(&self, f: f64) -> f64 {
        match *self {
            FilterStage::Lowpass { corner, order } => lowpass_power(f, corner, order),
            FilterStage::Highpass { corner, order } => highpass_power(f, corner, order),
            FilterStage::Bandpass {
                lower,
                upper,
                order,
            } => lowpass_power(f, upper, order) * highpass_power(f, lower, order),
        }
    }

    pub fn gain_db(&self, f: f64) -> f64 {
        10.0 * self.power_gain(f).log10()
    }
}

pub fn lowpass_power(f: f64, corner: f64, order: u32) -> f64 {
    1.0 / (1.0 + (f / corner).powi(2 * order as i32))
}

pub fn highpass_power(f: f64, corner: f64, order: u32) -> f64 {
    if f <= 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + (corner / f).powi(2 * order as i32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    #[inline]
    fn process(&mut self, x: f64) -> f64 {
        // transposed direct form II
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Digital Butterworth low-pass as cascaded second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalButterworth {
    sections: Vec<Biquad>,
    first_order: Option<([f64; 2], f64, f64)>,
    primed: bool,
}

impl DigitalButterworth {
    /// `corner` and `sample_rate` in Hz; the corner must lie below Nyquist.
    pub fn lowpass(order: u32, corner: f64, sample_rate: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("filter order must be positive".into()));
        }
        if !(corner > 0.0) || !(sample_rate > 0.0) || corner >= sample_rate / 2.0 {
            return Err(Error::Config(format!(
                "low-pass corner {corner} Hz must lie in (0, {}) Hz",
                sample_rate / 2.0
            )));
        }
        let k = 2.0 * sample_rate;
        let w = k * (PI * corner / sample_rate).tan();
        let w2 = w * w;
        let n = order as usize;
        let mut sections = Vec::with_capacity(n / 2);
        for i in 0..n / 2 {
            let theta = PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
            let a = -2.0 * w * theta.cos();
            let a0 = k * k + a * k + w2;
            sections.push(Biquad {
                b: [w2 / a0, 2.0 * w2 / a0, w2 / a0],
                a: [(2.0 * w2 - 2.0 * k * k) / a0, (k * k - a * k + w2) / a0],
                z: [0.0; 2],
            });
        }
        let first_order = (n % 2 == 1).then(|| {
            let a0 = k + w;
            ([w / a0, w / a0], (w - k) / a0, 0.0)
        });
        Ok(DigitalButterworth {
            sections,
            first_order,
            primed: false,
        })
    }

    /// Sets the internal state to the steady state for a constant input.
    pub fn prime(&mut self, x: f64) {
        for s in &mut self.sections {
            // DC gain of each section is one
            s.z[1] = s.b[2] * x - s.a[1] * x;
            s.z[0] = x - s.b[0] * x;
        }
        if let Some((b, _a1, z)) = self.first_order.as_mut() {
            *z = x - b[0] * x;
        }
        self.primed = true;
    }

    pub fn is_primed(&self) -> bool {
        self.primed
    }

    pub fn process(&mut self, x: f64) -> f64 {
        self.primed = true;
        let mut y = x;
        if let Some((b, a1, z)) = self.first_order.as_mut() {
            let out = b[0] * y + *z;
            *z = b[1] * y - *a1 * out;
            y = out;
        }
        for s in &mut self.sections {
            y = s.process(y);
        }
        y
    }

    pub fn reset(&mut self) {
        for s in &mut self.sections {
            s.z = [0.0; 2];
        }
        if let Some((_, _, z)) = self.first_order.as_mut() {
            *z = 0.0;
        }
        self.primed = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analog_corner_is_half_power() {
        let lp = FilterStage::Lowpass {
            corner: 200.0,
            order: 5,
        };
        assert!((lp.power_gain(200.0) - 0.5).abs() < 1e-12);
        let hp = FilterStage::Highpass {
            corner: 200.0,
            order: 3,
        };
        assert!((hp.power_gain(200.0) - 0.5).abs() < 1e-12);
        assert_eq!(hp.power_gain(0.0), 0.0);
    }

    #[test]
    fn bandpass_center_flat() {
        let bp = FilterStage::Bandpass {
            lower: 10.0,
            upper: 200.0,
            order: 5,
        };
        let center = (10.0f64 * 200.0).sqrt();
        assert!(bp.gain_db(center).abs() < 0.01);
        assert!(bp.validate().is_ok());
        assert!(FilterStage::Bandpass {
            lower: 300.0,
            upper: 200.0,
            order: 5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn digital_dc_gain_unity() {
        let mut f = DigitalButterworth::lowpass(8, 10_000.0, 100_000.0).unwrap();
        // ten time constants of the slowest pole, 1/(ω_c·sin(π/2n))
        let tau = 1.0 / (2.0 * PI * 10_000.0 * (PI / 16.0).sin());
        let n = (10.0 * tau * 100_000.0).ceil() as usize;
        let mut y = 0.0;
        for _ in 0..n {
            y = f.process(-12.5);
        }
        assert!((y + 12.5).abs() < 12.5e-3, "y = {y}");
    }

    #[test]
    fn digital_rejects_corner_above_nyquist() {
        assert!(DigitalButterworth::lowpass(8, 10_000.0, 1_000.0).is_err());
        assert!(DigitalButterworth::lowpass(0, 10.0, 1_000.0).is_err());
    }

    #[test]
    fn digital_matches_analog_magnitude_at_corner() {
        // steady-state amplitude of a sinusoid at the corner is 1/√2
        let fs = 48_000.0;
        let fc = 1_000.0;
        for order in [3u32, 8] {
            let mut f = DigitalButterworth::lowpass(order, fc, fs).unwrap();
            let mut peak: f64 = 0.0;
            for n in 0..48_000 {
                let y = f.process((2.0 * PI * fc * n as f64 / fs).sin());
                if n > 24_000 {
                    peak = peak.max(y.abs());
                }
            }
            assert!((peak - 0.5f64.sqrt()).abs() < 2e-3, "order {order}: {peak}");
        }
    }

    #[test]
    fn digital_is_linear() {
        let mut a = DigitalButterworth::lowpass(8, 50.0, 1_000.0).unwrap();
        let mut b = a.clone();
        for n in 0..2000 {
            let x = ((n * 7919) % 101) as f64 - 50.0;
            assert!((3.5 * a.process(x) - b.process(3.5 * x)).abs() < 1e-9);
        }
    }

    #[test]
    fn prime_holds_constant() {
        let mut f = DigitalButterworth::lowpass(7, 50.0, 1_000.0).unwrap();
        f.prime(-3.0);
        for _ in 0..100 {
            assert!((f.process(-3.0) + 3.0).abs() < 1e-9);
        }
    }
}
