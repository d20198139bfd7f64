//! Drift spectrum analyzer: a two-channel polarimeter stream is normalized,
//! block-averaged down a pyramid of sample rates and Fourier transformed
//! with averaging at each level.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half the range of a 14-bit ADC.
pub const ADC_OFFSET: i64 = 1 << 13;

/// `(a + offset) / ((a + offset) + (b + offset))`.
pub fn normalize(a: f64, b: f64, offset: f64) -> Result<f64> {
    let (a, b) = (a + offset, b + offset);
    let den = a + b;
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(a / den)
}

/// Sums non-overlapping blocks of `factor` integer samples; a trailing
/// partial block is dropped.
pub fn accumulate(samples: &[i64], factor: usize) -> Vec<i64> {
    samples
        .chunks_exact(factor)
        .map(|c| c.iter().sum())
        .collect()
}

/// Means of non-overlapping blocks of `factor` samples.
pub fn block_average(samples: &[f64], factor: usize) -> Vec<f64> {
    samples
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect()
}

/// Integer accumulation stages, each a power of two of the base samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplePyramid {
    /// Hz
    pub base_rate: f64,
    /// Accumulation factors as powers of two, strictly increasing.
    pub exponents: Vec<u32>,
    pub adc_offset: i64,
}

impl Default for SamplePyramid {
    fn default() -> Self {
        SamplePyramid {
            base_rate: 100e6,
            exponents: vec![8, 16],
            adc_offset: ADC_OFFSET,
        }
    }
}

impl SamplePyramid {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.0) {
            return Err(Error::Config("pyramid base rate must be positive".into()));
        }
        if self.exponents.is_empty()
            || self.exponents.windows(2).any(|w| w[1] <= w[0])
            || self.exponents[0] == 0
        {
            return Err(Error::Config(
                "pyramid exponents must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn rate(&self, level: usize) -> f64 {
        self.base_rate / (1u64 << self.exponents[level]) as f64
    }

    /// Accumulates raw ADC counts into every level, each level built from
    /// the previous one.
    pub fn run(&self, samples: &[i64]) -> Vec<Vec<i64>> {
        let mut out: Vec<Vec<i64>> = Vec::with_capacity(self.exponents.len());
        let mut prev_exp = 0;
        for &e in &self.exponents {
            let src = out.last().map_or(samples, |v| v.as_slice());
            out.push(accumulate(src, 1 << (e - prev_exp)));
            prev_exp = e;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Rectangular,
    Hann,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    /// Block-averaging factor relative to the input stream.
    pub factor: usize,
    pub fft_length: usize,
    pub n_average: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumConfig {
    /// Input stream rate, Hz.
    pub input_rate: f64,
    pub levels: Vec<LevelConfig>,
    pub window: Window,
}

impl Default for SpectrumConfig {
    /// A 1.5625 kHz stream averaged by 2¹⁰ into 4096-point transforms.
    fn default() -> Self {
        SpectrumConfig {
            input_rate: 1562.5,
            levels: vec![LevelConfig {
                factor: 1 << 10,
                fft_length: 4096,
                n_average: 1,
            }],
            window: Window::Rectangular,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_rate > 0.0) || self.levels.is_empty() {
            return Err(Error::Config(
                "spectrum input rate and levels required".into(),
            ));
        }
        if self
            .levels
            .iter()
            .any(|l| l.factor == 0 || l.fft_length < 2 || l.n_average == 0)
        {
            return Err(Error::Config(
                "spectrum level parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Input samples needed to complete every level.
    pub fn required_samples(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.factor * l.fft_length * l.n_average)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Sample rate of this level, Hz.
    pub rate: f64,
    pub frequencies: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fft_length: usize,
    pub n_averaged: usize,
}

impl SpectrumResult {
    pub fn resolution(&self) -> f64 {
        self.rate / self.fft_length as f64
    }

    /// Largest bin above DC.
    pub fn peak_bin(&self) -> usize {
        (1..self.mean.len())
            .max_by(|&a, &b| self.mean[a].total_cmp(&self.mean[b]))
            .unwrap_or(0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["freq_hz", "mean", "std"])?;
        for k in 0..self.mean.len() {
            wr.write_record(&[
                self.frequencies[k].to_string(),
                self.mean[k].to_string(),
                self.std[k].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Energy of a one-sided magnitude spectrum of an `n`-point transform,
/// per Parseval: equals `Σ x²` of the (windowed) block.
pub fn spectrum_energy(magnitudes: &[f64], n: usize) -> f64 {
    let last = n / 2;
    let mut e = 0.0;
    for (k, m) in magnitudes.iter().enumerate() {
        let w = if k == 0 || (n.is_multiple_of(2) && k == last) {
            1.0
        } else {
            2.0
        };
        e += w * m * m;
    }
    e / n as f64
}

struct Level {
    cfg: LevelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    acc: f64,
    acc_n: usize,
    buf: Vec<Complex<f64>>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    n: usize,
}

impl Level {
    fn push(&mut self, x: f64) {
        if self.n >= self.cfg.n_average {
            return;
        }
        self.acc += x;
        self.acc_n += 1;
        if self.acc_n < self.cfg.factor {
            return;
        }
        let k = self.buf.len();
        self.buf.push(Complex::new(
            self.window[k] * self.acc / self.cfg.factor as f64,
            0.0,
        ));
        self.acc = 0.0;
        self.acc_n = 0;
        if self.buf.len() == self.cfg.fft_length {
            self.fft.process(&mut self.buf);
            for (k, z) in self.buf[..self.sum.len()].iter().enumerate() {
                let m = z.norm();
                self.sum[k] += m;
                self.sumsq[k] += m * m;
            }
            self.n += 1;
            self.buf.clear();
        }
    }

    fn collected(&self) -> usize {
        self.n * self.cfg.fft_length + self.buf.len()
    }
}

/// Streaming analyzer holding one block accumulator and one transform
/// buffer per level.
pub struct SpectrumAnalyzer {
    input_rate: f64,
    levels: Vec<Level>,
}

impl SpectrumAnalyzer {
    pub fn new(cfg: &SpectrumConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let levels = cfg
            .levels
            .iter()
            .map(|l| Level {
                cfg: l.clone(),
                fft: planner.plan_fft_forward(l.fft_length),
                window: cfg.window.coefficients(l.fft_length),
                acc: 0.0,
                acc_n: 0,
                buf: Vec::with_capacity(l.fft_length),
                sum: vec![0.0; l.fft_length / 2 + 1],
                sumsq: vec![0.0; l.fft_length / 2 + 1],
                n: 0,
            })
            .collect();
        Ok(SpectrumAnalyzer {
            input_rate: cfg.input_rate,
            levels,
        })
    }

    pub fn push(&mut self, x: f64) {
        for l in &mut self.levels {
            l.push(x);
        }
    }

    pub fn is_complete(&self) -> bool {
        self.levels.iter().all(|l| l.n >= l.cfg.n_average)
    }

    fn result(&self, l: &Level) -> SpectrumResult {
        let n = l.n as f64;
        let rate = self.input_rate / l.cfg.factor as f64;
        let mean: Vec<f64> = l.sum.iter().map(|s| s / n).collect();
        let std = l
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        SpectrumResult {
            rate,
            frequencies: (0..l.sum.len())
                .map(|k| k as f64 * rate / l.cfg.fft_length as f64)
                .collect(),
            mean,
            std,
            fft_length: l.cfg.fft_length,
            n_averaged: l.n,
        }
    }

    /// Spectra for every level that has completed at least one transform.
    pub fn partial(&self) -> Vec<(usize, SpectrumResult)> {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.n > 0)
            .map(|(i, l)| (i, self.result(l)))
            .collect()
    }

    /// All levels, failing on the first level short of its average count.
    pub fn finish(&self) -> Result<Vec<SpectrumResult>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.n < l.cfg.n_average {
                    Err(Error::InsufficientSamples {
                        level: i,
                        have: l.collected(),
                        need: l.cfg.fft_length * l.cfg.n_average,
                    })
                } else {
                    Ok(self.result(l))
                }
            })
            .collect()
    }
}

/// Block-averages a stream per level and returns the averaged magnitude
/// spectra.
pub fn accumulate_and_fft<I: IntoIterator<Item = f64>>(
    stream: I,
    cfg: &SpectrumConfig,
) -> Result<Vec<SpectrumResult>> {
    let mut an = SpectrumAnalyzer::new(cfg)?;
    for x in stream {
        an.push(x);
        if an.is_complete() {
            break;
        }
    }
    an.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub bin: usize,
    pub frequency: f64,
    pub magnitude: f64,
    /// dB above the level's median magnitude.
    pub prominence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPeaks {
    pub level: usize,
    pub rate: f64,
    pub peaks: Vec<Peak>,
}

/// Local maxima above DC that stand `prominence_db` above the median
/// magnitude of their level, strongest first.
pub fn drift_report(spectra: &[SpectrumResult], prominence_db: f64) -> Vec<LevelPeaks> {
    spectra
        .iter()
        .enumerate()
        .map(|(level, s)| {
            let m = &s.mean;
            let mut sorted: Vec<f64> = m[1..].to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
            let mut peaks: Vec<Peak> = (1..m.len())
                .filter(|&k| m[k] > m[k - 1] && (k + 1 == m.len() || m[k] >= m[k + 1]))
                .filter_map(|k| {
                    let prom = 20.0 * (m[k] / median).log10();
                    (median > 0.0 && prom >= prominence_db || median == 0.0 && m[k] > 0.0).then(
                        || Peak {
                            bin: k,
                            frequency: s.frequencies[k],
                            magnitude: m[k],
                            prominence: if median > 0.0 { prom } else { f64::INFINITY },
                        },
                    )
                })
                .collect();
            peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
            LevelPeaks {
                level,
                rate: s.rate,
                peaks,
            }
        })
        .collect()
}

/// Reads a headerless two-column CSV of raw counts and returns normalized
/// samples.
pub fn read_counts_csv<R: std::io::Read>(r: R, offset: f64) -> Result<Vec<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize::<(f64, f64)>() {
        let (a, b) = row?;
        out.push(normalize(a, b, offset)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn single(factor: usize, n: usize) -> SpectrumConfig {
        SpectrumConfig {
            input_rate: 1000.0,
            levels: vec![LevelConfig {
                factor,
                fft_length: n,
                n_average: 1,
            }],
            window: Window::Rectangular,
        }
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(100.0, 100.0, 0.0).unwrap(), 0.5);
        assert_eq!(normalize(10.0, -8192.0, 8192.0).unwrap(), 1.0);
        assert!(matches!(
            normalize(-8192.0, -8192.0, 8192.0),
            Err(Error::ZeroDenominator)
        ));
    }

    #[test]
    fn normalize_malus_sweep() {
        for k in 0..=180 {
            let chi = (k as f64).to_radians();
            let pa = (1.0 + chi.cos()) / 2.0;
            let n = normalize(pa, 1.0 - pa, 0.0).unwrap();
            assert!((n - (1.0 + chi.cos()) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_is_all_dc() {
        let s = &accumulate_and_fft(std::iter::repeat(0.37), &single(4, 256)).unwrap()[0];
        assert!((s.mean[0] - 0.37 * 256.0).abs() < 1e-9);
        assert!(s.mean[1..].iter().all(|m| *m < 1e-9));
    }

    #[test]
    fn on_bin_sinusoid_stands_60db_above_neighbors() {
        let n = 1024;
        let k0 = 37;
        let x = (0..n).map(|i| (2.0 * PI * k0 as f64 * i as f64 / n as f64).sin());
        let s = &accumulate_and_fft(x, &single(1, n)).unwrap()[0];
        assert_eq!(s.peak_bin(), k0);
        for k in [k0 - 1, k0 + 1] {
            assert!(20.0 * (s.mean[k0] / s.mean[k].max(1e-300)).log10() >= 60.0);
        }
    }

    #[test]
    fn parseval() {
        let n = 2048;
        let x: Vec<f64> = (0..n)
            .map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.3)
            .collect();
        for window in [Window::Rectangular, Window::Hann] {
            let cfg = SpectrumConfig {
                window,
                ..single(1, n)
            };
            let s = &accumulate_and_fft(x.iter().copied(), &cfg).unwrap()[0];
            let w = window.coefficients(n);
            let energy: f64 = x.iter().zip(&w).map(|(a, b)| (a * b).powi(2)).sum();
            let e = spectrum_energy(&s.mean, n);
            assert!(((e - energy) / energy).abs() < 1e-6);
        }
    }

    #[test]
    fn cascade_is_bit_exact() {
        let raw: Vec<i64> = (0..(1usize << 18))
            .map(|i| ((i * 2654435761usize) % 16384) as i64 - ADC_OFFSET)
            .collect();
        let levels = SamplePyramid::default().run(&raw);
        assert_eq!(levels[1], accumulate(&raw, 1 << 16));
        assert_eq!(levels[0], accumulate(&raw, 1 << 8));
    }

    #[test]
    fn block_average_is_linear() {
        let x: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = block_average(&x, 16);
        let scaled: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let b = block_average(&scaled, 16);
        assert!(a.iter().zip(&b).all(|(p, q)| (2.5 * p - q).abs() < 1e-12));
    }

    #[test]
    fn insufficient_samples_reported() {
        match accumulate_and_fft(std::iter::repeat_n(1.0, 100), &single(1, 256)) {
            Err(Error::InsufficientSamples {
                level: 0,
                have: 100,
                need: 256,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn averaging_reports_count_and_spread() {
        let cfg = SpectrumConfig {
            levels: vec![LevelConfig {
                factor: 1,
                fft_length: 64,
                n_average: 8,
            }],
            ..single(1, 64)
        };
        let s = &accumulate_and_fft((0..10_000).map(|i| (i as f64 * 1.1).sin()), &cfg).unwrap()[0];
        assert_eq!(s.n_averaged, 8);
        assert_eq!(s.mean.len(), 33);
        assert!(s.std.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn drift_report_cases() {
        let n = 4096;
        let flat = &accumulate_and_fft(std::iter::repeat(1.0), &single(1, n)).unwrap();
        assert!(drift_report(flat, 20.0)[0].peaks.is_empty());

        let fs = 1000.0;
        let (f1, f2) = (50.0 * fs / n as f64, 300.0 * fs / n as f64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * f1 * t).sin()
                    + 0.3 * (2.0 * PI * f2 * t).sin()
                    + 1e-3 * rng.random::<f64>()
            })
            .collect();
        let r = drift_report(&accumulate_and_fft(x, &single(1, n)).unwrap(), 20.0);
        let found: Vec<f64> = r[0].peaks.iter().map(|p| p.frequency).collect();
        assert_eq!(found.len(), 2, "{found:?}");
        assert!((found[0] - f1).abs() < 1e-9 && (found[1] - f2).abs() < 1e-9);
    }

    #[test]
    fn diurnal_and_hourly_peaks() {
        // about 1.46 mHz sampling, six days
        let fs = 1.46e-3;
        let n = 1024;
        let day = 1.0 / 86_400.0;
        let hour = 1.0 / 3_600.0;
        let x = (0..n).map(|i| {
            let t = i as f64 / fs;
            0.5 + 0.2 * (2.0 * PI * day * t).sin() + 0.1 * (2.0 * PI * hour * t).sin()
        });
        let cfg = SpectrumConfig {
            input_rate: fs,
            ..single(1, n)
        };
        let s = accumulate_and_fft(x, &cfg).unwrap();
        let r = drift_report(&s, 10.0);
        let res = s[0].resolution();
        for f in [day, hour] {
            assert!(
                r[0].peaks.iter().any(|p| (p.frequency - f).abs() <= res),
                "{f}"
            );
        }
    }
}
