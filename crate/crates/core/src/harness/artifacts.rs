use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ErrorStats, RunArtifacts, RunSummary, Scenario, TRACKED};
use crate::control::ControlEvent;
use crate::error::{Error, Result};

fn writer(dir: &Path, name: &str, files: &mut Vec<String>) -> Result<csv::Writer<BufWriter<File>>> {
    files.push(name.to_string());
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        dir.join(name),
    )?)))
}

fn f(x: f64) -> String {
    x.to_string()
}

pub(super) fn write(run: &RunArtifacts, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let dt = 1.0 / run.scenario.loop_rate;
    let time = |n: usize| f((n + 1) as f64 * dt);

    files.push("scenario.json".into());
    run.scenario.save(dir.join("scenario.json"))?;
    files.push("summary.json".into());
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&run.summary)? + "\n",
    )?;

    let mut w = writer(dir, "errors.csv", &mut files)?;
    w.write_record(["iteration", "time_s", "ref0_deg", "ref1_deg", "test_deg"])?;
    for (n, e) in run.errors.iter().enumerate() {
        w.write_record([n.to_string(), time(n), f(e[0]), f(e[1]), f(e[2])])?;
    }
    w.flush()?;

    let mut w = writer(dir, "events.csv", &mut files)?;
    w.write_record(["iteration", "time_s", "kind", "source", "value"])?;
    for e in &run.events {
        let kind = serde_json::to_value(e.kind)?;
        w.write_record([
            e.iteration.to_string(),
            f(e.timestamp),
            kind.as_str().unwrap_or_default().to_string(),
            e.source.to_string(),
            f(e.value),
        ])?;
    }
    w.flush()?;

    if let Some(tr) = &run.trajectories {
        let mut w = writer(dir, "trajectories.csv", &mut files)?;
        let mut header = vec!["iteration".to_string(), "time_s".to_string()];
        for name in TRACKED {
            for c in ["s1", "s2", "s3"] {
                header.push(format!("{name}_{c}"));
            }
        }
        w.write_record(&header)?;
        for (n, row) in tr.iter().enumerate() {
            let mut rec = vec![n.to_string(), time(n)];
            rec.extend(row.iter().flatten().map(|v| f(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }

    if let Some(rd) = &run.readings {
        let mut w = writer(dir, "readings.csv", &mut files)?;
        w.write_record(["iteration", "timestamp", "m_d", "m_h", "m_r"])?;
        for (n, m) in rd.iter().enumerate() {
            w.write_record([n.to_string(), time(n), f(m[0]), f(m[1]), f(m[2])])?;
        }
        w.flush()?;
    }

    if let Some(pid) = &run.pid {
        let mut w = writer(dir, "pid.csv", &mut files)?;
        let n_loops = pid.first().map_or(0, |r| r.len());
        let mut header = vec!["iteration".to_string(), "time_s".to_string()];
        for k in 0..n_loops {
            for c in ["output", "error", "retardance"] {
                header.push(format!("loop{k}_{c}"));
            }
        }
        w.write_record(&header)?;
        for (n, row) in pid.iter().enumerate() {
            let mut rec = vec![n.to_string(), time(n)];
            for s in row {
                rec.extend([f(s.output), f(s.error), f(s.retardance)]);
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }

    for (k, s) in run.spectra.iter().enumerate() {
        let name = format!("spectrum_level{k}.csv");
        files.push(name.clone());
        s.write_csv(BufWriter::new(File::create(dir.join(name))?))?;
    }

    if let Some(t) = &run.tomography {
        files.push("tomography.csv".into());
        t.write_csv(BufWriter::new(File::create(dir.join("tomography.csv"))?))?;
    }
    Ok(files)
}

#[derive(Deserialize)]
struct ErrorRow {
    #[allow(dead_code)]
    iteration: u64,
    #[allow(dead_code)]
    time_s: f64,
    ref0_deg: f64,
    ref1_deg: f64,
    test_deg: f64,
}

#[derive(Deserialize)]
struct EventRow {
    iteration: u64,
    time_s: f64,
    kind: String,
    source: usize,
    value: f64,
}

pub(super) fn load(dir: &Path) -> Result<RunArtifacts> {
    let scenario = Scenario::load(dir.join("scenario.json"))?;
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?;
    let mut errors = Vec::new();
    for row in csv::Reader::from_path(dir.join("errors.csv"))?.deserialize::<ErrorRow>() {
        let r = row?;
        errors.push([r.ref0_deg, r.ref1_deg, r.test_deg]);
    }
    let mut events = Vec::new();
    for row in csv::Reader::from_path(dir.join("events.csv"))?.deserialize::<EventRow>() {
        let r = row?;
        events.push(ControlEvent {
            iteration: r.iteration,
            timestamp: r.time_s,
            kind: serde_json::from_value(serde_json::Value::String(r.kind))?,
            source: r.source,
            value: r.value,
        });
    }
    Ok(RunArtifacts {
        scenario,
        errors,
        trajectories: None,
        readings: None,
        pid: None,
        events,
        spectra: Vec::new(),
        tomography: None,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub state: String,
    pub a: ErrorStats,
    pub b: ErrorStats,
    /// `b - a` of the means, degrees.
    pub mean_difference: f64,
    pub median_difference: f64,
    /// Mean and rms of the per-iteration `b - a`.
    pub paired_mean: f64,
    pub paired_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityComparison {
    pub series: String,
    pub a: f64,
    pub b: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub iterations: usize,
    pub states: Vec<PairedStats>,
    /// Mean fidelities, when both runs carry a tomography series.
    pub fidelity: Vec<FidelityComparison>,
}

/// Paired angular-error and fidelity statistics of two runs on the same
/// iteration grid.
pub fn compare(a: &RunArtifacts, b: &RunArtifacts) -> Result<Comparison> {
    if a.errors.len() != b.errors.len() {
        return Err(Error::GridMismatch(a.errors.len(), b.errors.len()));
    }
    if a.scenario.loop_rate != b.scenario.loop_rate || a.scenario.warmup != b.scenario.warmup {
        return Err(Error::Config("runs differ in loop rate or warmup".into()));
    }
    let start = (a.scenario.warmup as usize).min(a.errors.len());
    let (ea, eb) = (&a.errors[start..], &b.errors[start..]);
    let states = (0..3)
        .map(|k| {
            let xa: Vec<f64> = ea.iter().map(|r| r[k]).collect();
            let xb: Vec<f64> = eb.iter().map(|r| r[k]).collect();
            let (sa, sb) = (ErrorStats::from_samples(&xa), ErrorStats::from_samples(&xb));
            let n = xa.len().max(1) as f64;
            let d: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| q - p).collect();
            PairedStats {
                state: TRACKED[k].to_string(),
                a: sa,
                b: sb,
                mean_difference: sb.mean - sa.mean,
                median_difference: sb.median - sa.median,
                paired_mean: d.iter().sum::<f64>() / n,
                paired_rms: (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            }
        })
        .collect();
    let mut fidelity = Vec::new();
    if let (Some(ta), Some(tb)) = (&a.summary.tomography, &b.summary.tomography) {
        let pairs = [
            (
                "state_successive",
                ta.state_successive.mean,
                tb.state_successive.mean,
            ),
            (
                "state_vs_first",
                ta.state_vs_first.mean,
                tb.state_vs_first.mean,
            ),
            (
                "process_successive",
                ta.process_successive.mean,
                tb.process_successive.mean,
            ),
            (
                "process_vs_first",
                ta.process_vs_first.mean,
                tb.process_vs_first.mean,
            ),
        ];
        for (name, x, y) in pairs {
            fidelity.push(FidelityComparison {
                series: name.into(),
                a: x,
                b: y,
                difference: y - x,
            });
        }
    }
    Ok(Comparison {
        a: a.scenario.name.clone(),
        b: b.scenario.name.clone(),
        iterations: ea.len(),
        states,
        fidelity,
    })
}

impl Comparison {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}
