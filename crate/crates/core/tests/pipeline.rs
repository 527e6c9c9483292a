use std::path::Path;
use std::process::Command;

use lossabf::experiment::{
    evaluate_stage, fit_abc_stage, fit_fbp_stage, preset, run_experiment, simulate_stage, with_workers, ExperimentConfig,
};
use lossabf::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        rules: vec!["LS".into(), "CLS10".into(), "CRPS".into()],
        t: Some(300),
        split: Some(200),
        n_draws: 400,
        keep: "20".into(),
        n_particles: 100,
        state_draws: 2,
        fbp_draws: 100,
        burn_in: 200,
        thin: 1,
        restarts: 1,
        seed: 11,
        ..preset("table1-desk").unwrap()
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn staged_run_equals_one_shot_run_for_any_worker_count() {
    let cfg = tiny();
    let one = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, one.path()).unwrap();
    assert_eq!(report.matrices.len(), 2);
    assert_eq!(report.coherence[0].len(), 3);

    let staged = tempfile::tempdir().unwrap();
    let cfg2 = ExperimentConfig { workers: 2, ..cfg.clone() };
    with_workers(2, || {
        simulate_stage(&cfg2, staged.path())?;
        fit_abc_stage(&cfg2, staged.path())?;
        fit_fbp_stage(&cfg2, staged.path())?;
        evaluate_stage(&cfg2, staged.path())
    })
    .unwrap();
    for f in ["data.csv", "abc_ls.csv", "fbp_crps.csv", "scores_abc.csv", "scores_fbp.csv", "report.md"] {
        assert_eq!(read(one.path(), f), read(staged.path(), f), "{f} differs");
    }
    let csv = String::from_utf8(read(one.path(), "scores_abc.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(&cfg.config_hash().unwrap())));
    let manifest: serde_json::Value = serde_json::from_slice(&read(one.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["fbp_chains"][2]["w"].as_f64().unwrap() > 0.0);
}

#[test]
fn stages_refuse_missing_or_foreign_artifacts() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    match evaluate_stage(&cfg, dir.path()) {
        Err(e) => assert!(e.to_string().contains("lossabf simulate"), "{e}"),
        Ok(_) => panic!("evaluate ran without data"),
    }
    simulate_stage(&cfg, dir.path()).unwrap();
    fit_abc_stage(&cfg, dir.path()).unwrap();
    match evaluate_stage(&cfg, dir.path()) {
        Err(e) => {
            assert!(e.to_string().contains("lossabf fit-fbp"), "{e}");
            assert_eq!(e.exit_code(), 1);
        }
        Ok(_) => panic!("evaluate ran without FBP draws"),
    }
    let other = ExperimentConfig { seed: 12, ..cfg };
    match fit_abc_stage(&other, dir.path()) {
        Err(Error::Stage { source, .. }) => assert!(matches!(*source, Error::ConfigMismatch { .. }), "{source}"),
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}

#[test]
fn cli_usage_errors_exit_with_one() {
    let bin = env!("CARGO_BIN_EXE_lossabf");
    let out = Command::new(bin).args(["reproduce", "table9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("table2-desk"));
    let out = Command::new(bin).arg("--no-such-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_stages_compose() {
    let bin = env!("CARGO_BIN_EXE_lossabf");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, tiny().to_toml().unwrap()).unwrap();
    let run_dir = dir.path().join("run");
    let evaluate = |d: &Path| Command::new(bin).args(["evaluate", "--config"]).arg(&cfg_path).arg("--out-dir").arg(d).output().unwrap();
    assert_eq!(evaluate(&run_dir).status.code(), Some(1));
    for stage in ["simulate", "fit-abc", "fit-fbp"] {
        let out = Command::new(bin).arg(stage).arg("--config").arg(&cfg_path).arg("--out-dir").arg(&run_dir).output().unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(evaluate(&run_dir).status.success());
    let whole = dir.path().join("whole");
    run_experiment(&tiny(), &whole).unwrap();
    assert_eq!(read(&run_dir, "scores_fbp.csv"), read(&whole, "scores_fbp.csv"));
    assert_eq!(read(&run_dir, "scores_abc.csv"), read(&whole, "scores_abc.csv"));
}
