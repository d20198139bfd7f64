use std::f64::consts::PI;
use std::path::PathBuf;

use polstab::channel::DriftVariant;
use polstab::control::ControlMode;
use polstab::harness::{calibrate_scenario, compare, run, RunArtifacts, Scenario};
use rayon::prelude::*;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(dir().join(format!("{name}.json"))).unwrap()
}

fn shortened(mut sc: Scenario, n: u64) -> Scenario {
    sc.iterations = n;
    sc.warmup = sc.warmup.min(n / 2);
    if let Some(t) = sc.outputs.tomography.as_mut() {
        t.count = 3;
        t.interval = n / 3;
    }
    sc.outputs.spectrum = None;
    sc
}

#[test]
fn shipped_scenarios_load_validate_and_round_trip() {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir()).unwrap() {
        let path = entry.unwrap().path();
        let sc = Scenario::load(&path).unwrap();
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), sc.name);
        sc.validate().unwrap();
        assert_eq!(Scenario::from_json(&sc.to_json().unwrap()).unwrap(), sc);
        names.push(sc.name);
    }
    for want in [
        "walk-uncontrolled",
        "walk-two-loop",
        "walk-three-loop",
        "biased-base-pid",
        "biased-slope-sign",
        "biased-small-step",
        "hardware-default",
        "calibration",
        "spectrum-10mhz",
    ] {
        assert!(names.iter().any(|n| n == want), "{want} missing");
    }
}

#[test]
fn shipped_scenarios_replay_identically() {
    for entry in std::fs::read_dir(dir()).unwrap() {
        let sc = shortened(Scenario::load(entry.unwrap().path()).unwrap(), 600);
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a, b, "{}", sc.name);
        assert_eq!(a.errors.len(), 600);
    }
}

#[test]
fn walk_scenarios_share_channel_and_wiring() {
    let a = scenario("walk-uncontrolled");
    let b = scenario("walk-two-loop");
    let c = scenario("walk-three-loop");
    assert!(!a.controller.enabled);
    assert_eq!(b.controller.loops.iter().filter(|l| l.enabled).count(), 2);
    assert_eq!(c.controller.loops.iter().filter(|l| l.enabled).count(), 3);
    assert_eq!(a.channel, c.channel);
    assert_eq!(a.drift, c.drift);
    assert!((c.drift.step_size - PI / 360.0).abs() < 1e-15);

    let s = scenario("biased-slope-sign");
    let d = scenario("biased-small-step");
    assert_eq!(s.controller.mode, ControlMode::SlopeSign);
    assert_eq!(s.drift.variant, DriftVariant::BiasedRandomWalk);
    assert!((d.drift.step_size - PI / 5000.0).abs() < 1e-15);
    assert_eq!(
        scenario("biased-base-pid").controller.mode,
        ControlMode::BasePid
    );
}

#[test]
fn uncontrolled_reference_wanders() {
    // ten thousand π/360 steps on two plates move a state tens of degrees
    let finals: Vec<f64> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let mut sc = scenario("walk-uncontrolled");
            sc.seed = s;
            *run(&sc).unwrap().errors.last().map(|e| &e[0]).unwrap()
        })
        .collect();
    let over = finals.iter().filter(|e| **e > 30.0).count();
    assert!(over >= 10, "{finals:?}");
}

#[test]
fn two_loops_leave_the_test_signal_free() {
    let mut sc = scenario("walk-two-loop");
    sc.seed = 5;
    let s = run(&sc).unwrap().summary;
    assert!(s.errors[0].mean < 5.0);
    assert!(s.errors[2].mean > 3.0 * s.errors[0].mean);
}

#[test]
fn control_beats_no_control_on_the_same_drift() {
    for seed in 0..5 {
        let mut a = scenario("walk-uncontrolled");
        let mut c = scenario("walk-three-loop");
        a.seed = seed;
        c.seed = seed;
        let (ra, rc) = (run(&a).unwrap(), run(&c).unwrap());
        let cmp = compare(&ra, &rc).unwrap();
        for st in &cmp.states {
            assert!(
                st.mean_difference < 0.0,
                "seed {seed} {}: {}",
                st.state,
                st.mean_difference
            );
        }
    }
}

#[test]
fn smaller_steps_give_smaller_median_error() {
    let med = |name: &str| {
        let mut v: Vec<f64> = (0..21u64)
            .into_par_iter()
            .map(|s| {
                let mut sc = scenario(name);
                sc.seed = s;
                run(&sc).unwrap().summary.errors[2].median
            })
            .collect();
        v.sort_by(f64::total_cmp);
        v[10]
    };
    assert!(med("biased-small-step") < med("biased-slope-sign"));
}

#[test]
fn calibrated_scenario_holds_lock() {
    let sc = scenario("calibration");
    let (report, cal) = calibrate_scenario(&sc).unwrap();
    assert!(report.basis_errors_deg.iter().all(|e| *e < 0.5));
    assert_eq!(report.control_axis_angles_deg.len(), 3);
    assert!(cal.calibration.is_none());
    assert_ne!(cal.heterodyne.optics, sc.heterodyne.optics);
    let s = run(&shortened(cal, 3000)).unwrap().summary;
    assert!(s.errors.iter().all(|e| e.mean < 5.0), "{:?}", s.errors);
    assert_eq!(s.events.lock_lost, 0);
}

#[test]
fn artifacts_survive_a_disk_round_trip() {
    let sc = shortened(scenario("tomography-stabilized"), 900);
    let a = run(&sc).unwrap();
    let d = tempfile::tempdir().unwrap();
    let files = a.write(d.path()).unwrap();
    assert!(files.contains(&"tomography.csv".to_string()));
    let b = RunArtifacts::load(d.path()).unwrap();
    assert_eq!(b.summary, a.summary);
    let c = compare(&a, &b).unwrap();
    assert!(c.states.iter().all(|s| s.paired_rms == 0.0));
    assert_eq!(c.fidelity.len(), 4);
    assert!(c.fidelity.iter().all(|f| f.difference == 0.0));
}
