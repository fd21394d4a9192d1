//! Experiment driver: output files, the frozen single-run regression value
//! and energy decay of a damped run.

use std::fs;

use ltswaves::harness::{execute, reference_dt, run_experiment, ExperimentConfig, Simulation};
use ltswaves::integrator::Startup;
use ltswaves::mesh1d::Family;
use ltswaves::stability::StabilityOptions;

fn config(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::parse("", &o).unwrap()
}

#[test]
fn coeffs_experiment_writes_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&["experiment=\"coeffs\"", "k=[2,3]", "p=[2,3]"]);
    let outcome = execute(&cfg, dir.path()).unwrap();
    assert_eq!(outcome.files, vec![dir.path().join("coeffs.csv")]);
    let text = fs::read_to_string(&outcome.files[0]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# ltswaves "));
    assert_eq!(lines[1], format!("# config_sha256 {}", cfg.digest()));
    assert_eq!(lines[2], "k,p,kind,m,l,numerator,denominator,value");
    assert_eq!(lines.iter().filter(|l| l.starts_with("k,")).count(), 1);
    // alpha (k) plus beta (p * k) per scheme.
    assert_eq!(lines.len() - 3, (2 + 4) + (2 + 6) + (3 + 6) + (3 + 9));
    assert!(text.contains("\n3,3,beta,2,0,281,108,"));
}

#[test]
fn stability_experiment_marks_undamped_ab2_unstable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&["experiment=\"stability\"", "k=2", "p=2", "sigma=0.0", "h=0.2", "domain=[0.0,2.0]", "fine_region=[0.8,1.2]"]);
    let outcome = execute(&cfg, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("stability.csv")).unwrap();
    let row = text.lines().last().unwrap();
    assert!(row.starts_with("cg,1,2,2,0,0.2,"), "{row}");
    assert!(row.contains(",-,-,"), "{row}");
    assert_eq!(outcome.aborted, 0);
}

#[test]
fn single_run_regression_value() {
    let cfg = config(&["experiment=\"run\"", "family=\"cg\"", "k=2", "p=2", "h=0.1", "run.snapshot_points=61"]);
    let report = run_experiment(&cfg).unwrap();
    let (t, _, err) = *report.series.last().unwrap();
    assert!((t - 10.0).abs() < report.dt);
    assert!((err / 3.022443414117135e-2 - 1.0).abs() < 1e-6, "error {err}");
    assert_eq!(report.snapshot.len(), 61);
    let worst = report.snapshot.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");

    let dir = tempfile::tempdir().unwrap();
    let outcome = execute(&cfg, dir.path()).unwrap();
    assert_eq!(outcome.files.len(), 2);
    let series = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(series.lines().nth(2).unwrap() == "t,norm,l2_error");
}

#[test]
fn damped_run_energy_decays() {
    let cfg = config(&[]);
    let sigma = 0.1;
    let prob = cfg.problem(Family::Cg, 1, sigma, 0.1);
    let dt = 0.8 * reference_dt(&prob, 2, &StabilityOptions::default()).unwrap();
    let sim = Simulation::new(&prob, 2, sigma).unwrap();
    let mut samples = Vec::new();
    let mut next = 1.0;
    sim.solve(2, 2, dt, 20.0, Startup::Exact, |_, t, y| {
        if t >= next {
            samples.push(sim.system.energy(y).unwrap());
            next += 1.0;
        }
    })
    .unwrap();
    assert!(samples.len() >= 19);
    for w in samples.windows(2) {
        assert!(w[1] < w[0], "{samples:?}");
    }
    // E(t) ~ e^{-sigma t} on average.
    let rate = (samples[0] / samples[samples.len() - 1]).ln() / (samples.len() - 1) as f64;
    assert!((rate - sigma).abs() < 0.02, "{rate}");
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 5);
}
