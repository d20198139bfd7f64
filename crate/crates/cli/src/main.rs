use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polstab::harness::{
    calibrate_scenario, compare, run, RunArtifacts, Scenario, TomographySeries,
};
use polstab::specan::{
    accumulate_and_fft, drift_report, read_counts_csv, SpectrumConfig, ADC_OFFSET,
};
use polstab::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "polstab",
    version,
    about = "Polarization channel stabilization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Replace the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the scenario length.
    #[arg(long)]
    iterations: Option<u64>,
    /// Output directory (default: runs/<scenario name>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Calibrate the scenario's receiver and write calibration.json plus a
    /// calibrated scenario.
    Calibrate {
        scenario: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run a scenario with a tomography series (the default series, cut to
    /// the run length, is added when the scenario has none).
    Tomography {
        scenario: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Drift spectrum of a two-column CSV of raw ADC counts.
    Spectrum {
        input: PathBuf,
        /// JSON spectrum configuration; defaults to a 1562.5 Hz stream.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sample rate of the input, Hz (overrides the configuration).
        #[arg(long)]
        rate: Option<f64>,
        /// ADC offset subtracted from both columns.
        #[arg(long, default_value_t = ADC_OFFSET as f64)]
        offset: f64,
        /// Peak prominence over the median, dB.
        #[arg(long, default_value_t = 20.0)]
        prominence: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Paired error and fidelity statistics of two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<Scenario, Error> {
    let mut sc = Scenario::load(path)?;
    if let Some(s) = o.seed {
        sc.seed = s;
    }
    if let Some(n) = o.iterations {
        sc.iterations = n;
    }
    Ok(sc)
}

fn out_dir(o: &Overrides, sc: &Scenario) -> PathBuf {
    o.out_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&sc.name))
}

fn simulate(sc: &Scenario, dir: &Path) -> Result<serde_json::Value, Error> {
    let art = run(sc)?;
    let files = art.write(dir)?;
    Ok(json!({ "out_dir": dir, "files": files, "summary": art.summary }))
}

fn execute(cmd: Command) -> Result<serde_json::Value, Error> {
    match cmd {
        Command::Simulate { scenario, o } => {
            let sc = load(&scenario, &o)?;
            simulate(&sc, &out_dir(&o, &sc))
        }
        Command::Tomography { scenario, o } => {
            let mut sc = load(&scenario, &o)?;
            if sc.outputs.tomography.is_none() {
                let mut t = TomographySeries::default();
                t.count = t.count.min((sc.iterations / t.interval) as usize);
                sc.outputs.tomography = Some(t);
            }
            simulate(&sc, &out_dir(&o, &sc))
        }
        Command::Calibrate { scenario, o } => {
            let sc = load(&scenario, &o)?;
            let (report, calibrated) = calibrate_scenario(&sc)?;
            let dir = out_dir(&o, &sc);
            std::fs::create_dir_all(&dir)?;
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join("calibration.json"))?),
                &report,
            )?;
            let path = dir.join(format!("{}.json", calibrated.name));
            calibrated.save(&path)?;
            Ok(json!({ "out_dir": dir, "scenario": path, "calibration": report }))
        }
        Command::Spectrum {
            input,
            config,
            rate,
            offset,
            prominence,
            out_dir,
        } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SpectrumConfig::default(),
            };
            if let Some(r) = rate {
                cfg.input_rate = r;
            }
            let samples = read_counts_csv(File::open(&input)?, offset)?;
            let spectra = accumulate_and_fft(samples, &cfg)?;
            let dir = out_dir.unwrap_or_else(|| PathBuf::from("spectrum"));
            std::fs::create_dir_all(&dir)?;
            let mut files = Vec::new();
            for (k, s) in spectra.iter().enumerate() {
                let name = format!("spectrum_level{k}.csv");
                s.write_csv(BufWriter::new(File::create(dir.join(&name))?))?;
                files.push(name);
            }
            let peaks = drift_report(&spectra, prominence);
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join("peaks.json"))?),
                &peaks,
            )?;
            files.push("peaks.json".into());
            Ok(json!({ "out_dir": dir, "files": files, "peaks": peaks }))
        }
        Command::Compare {
            run_a,
            run_b,
            out_dir,
        } => {
            let a = RunArtifacts::load(&run_a)?;
            let b = RunArtifacts::load(&run_b)?;
            let c = compare(&a, &b)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                c.write_json(BufWriter::new(File::create(dir.join("comparison.json"))?))?;
            }
            Ok(serde_json::to_value(&c)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(v) => {
            // a closed pipe is not a failure of the command
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&v).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
