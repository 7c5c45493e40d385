use std::path::Path;
use std::process::{Command, Output};

use ppga::archive::{ArchiveSpec, GridArchive};
use ppga_harness::commands::{self, cdf_csv};
use ppga_harness::config::{resolve, ConfigSources};
use ppga_harness::sweep;

fn ppga(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppga"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn sphere_args(out: &Path) -> Vec<String> {
    ["run", "--env", "sphere", "--deterministic", "--override", "iterations=15", "--override", "env.dim=20"]
        .iter()
        .map(|s| s.to_string())
        .chain(["--override".into(), "archive.threshold_min=-20.0".into()])
        .chain(["--override".into(), "archive.score_offset=-20.0".into()])
        .chain(["--out".into(), out.display().to_string()])
        .collect()
}

/// A few seconds of point-hopper search at toy scale.
const TINY_HOPPER: [&str; 14] = [
    "--override",
    "ppo.num_envs=8",
    "--override",
    "ppo.rollout_len=32",
    "--override",
    "ppo.minibatches=2",
    "--override",
    "lambda=6",
    "--override",
    "n1=2",
    "--override",
    "n2=2",
    "--override",
    "actor_hidden=[8, 8]",
];

fn hopper_args(out: &Path, iterations: usize, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = ["run", "--env", "pointhopper2", "--deterministic", "--override", "critic_hidden=[8, 8]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(TINY_HOPPER.iter().map(|s| s.to_string()));
    v.extend(["--override".into(), format!("iterations={iterations}"), "--out".into(), out.display().to_string()]);
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_ok(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ppga(&refs);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn missing_resolution_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[archive]\nlower_bounds = [0.0, 0.0]\nupper_bounds = [1.0, 1.0]\nalpha = 0.1\nthreshold_min = -10.0\n\n[env]\nkind = \"pointhopper\"\n",
    )
    .unwrap();
    let out = ppga(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("archive.resolution"));
}

#[test]
fn invalid_values_and_thread_caps_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().display().to_string();
    let out = ppga(&["run", "--env", "sphere", "--override", "sigma_g=-1.0", "--out", &o]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma_g"));
    let out = Command::new(env!("CARGO_BIN_EXE_ppga"))
        .args(["inspect", &o])
        .env("QD_ARBOR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_archive_is_a_runtime_failure() {
    let out = ppga(&["inspect", "/nonexistent/archive_final"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn same_seed_runs_and_config_round_trip_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let mut args = sphere_args(out);
        args.extend(["--override".into(), "seed=7".into()]);
        let o = run_ok(&args);
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("iterations 15 "));
    }
    run_ok(&[
        "run".into(),
        "--config".into(),
        a.join("config_effective.toml").display().to_string(),
        "--out".into(),
        c.display().to_string(),
    ]);
    let metrics = read(&a.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 16);
    assert!(metrics.starts_with(
        "iteration,qd_score,coverage,best_reward,num_insertions,xnes_sigma,search_policy_f,wall_time_seconds\n"
    ));
    for file in ["metrics.csv", "iterations.jsonl", "archive_final.csv", "config_effective.toml"] {
        assert_eq!(read(&a.join(file)), read(&b.join(file)), "{file}");
        assert_eq!(read(&a.join(file)), read(&c.join(file)), "{file}");
    }
    assert_eq!(std::fs::read(a.join("archive_final.params")).unwrap(), std::fs::read(c.join("archive_final.params")).unwrap());
    assert!(a.join("checkpoints/iter_15/meta.json").is_file());
}

#[test]
fn zero_iterations_write_an_empty_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = sphere_args(dir.path());
    args.extend(["--override".into(), "iterations=0".into()]);
    run_ok(&args);
    assert_eq!(read(&dir.path().join("metrics.csv")).lines().count(), 1);
    let archive = GridArchive::load(&dir.path().join("archive_final")).unwrap();
    assert!(archive.is_empty());
}

#[test]
fn resumed_point_hopper_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, cut) = (dir.path().join("full"), dir.path().join("cut"));
    run_ok(&hopper_args(&full, 4, &[]));
    // Interrupted after iteration 3 with the last checkpoint at 2: the report
    // for iteration 3 is stale and must be recomputed.
    run_ok(&hopper_args(&cut, 3, &["--override", "checkpoint_every=2"]));
    std::fs::remove_dir_all(cut.join("checkpoints/iter_3")).unwrap();
    run_ok(&hopper_args(&cut, 4, &["--resume"]));
    for file in ["metrics.csv", "iterations.jsonl", "archive_final.csv"] {
        assert_eq!(read(&full.join(file)), read(&cut.join(file)), "{file}");
    }
    let mismatched = hopper_args(&cut, 5, &["--resume", "--override", "lambda=7"]);
    let refs: Vec<&str> = mismatched.iter().map(String::as_str).collect();
    assert_eq!(ppga(&refs).status.code(), Some(2));
}

fn archive_with(objectives: &[f64]) -> GridArchive {
    let spec = ArchiveSpec {
        resolution: vec![10],
        lower_bounds: vec![0.0],
        upper_bounds: vec![1.0],
        alpha: 1.0,
        threshold_min: 0.0,
        score_offset: 0.0,
    };
    let mut a = GridArchive::new(spec).unwrap();
    for (i, &f) in objectives.iter().enumerate() {
        a.insert(&[0.0], f, &[i as f64 / 10.0 + 0.05]).unwrap();
    }
    a
}

#[test]
fn cdf_export_examples() {
    let csv = String::from_utf8(cdf_csv(&archive_with(&[1.0, 2.0, 3.0]), 3).unwrap()).unwrap();
    assert_eq!(csv, "threshold,fraction\n1.0,1.0\n2.0,0.6666666666666666\n3.0,0.3333333333333333\n");
    let csv = String::from_utf8(cdf_csv(&archive_with(&[4.0]), 4).unwrap()).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1.0")));
    let csv = String::from_utf8(cdf_csv(&archive_with(&[5.0, 1.0]), 1).unwrap()).unwrap();
    assert_eq!(csv, "threshold,fraction\n1.0,1.0\n");

    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("arch");
    archive_with(&[1.0, 2.0, 3.0]).save(&stem).unwrap();
    let out = ppga(&["export-cdf", stem.with_extension("csv").to_str().unwrap(), "--bins", "3"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().nth(2), Some("2.0,0.6666666666666666"));
    let out = ppga(&["inspect", stem.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"num_elites\": 3"));
}

#[test]
fn correction_on_a_deterministic_domain() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&sphere_args(dir.path()));
    let stem = dir.path().join("archive_final");
    let original = GridArchive::load(&stem).unwrap();
    let out = ppga(&["correct", dir.path().to_str().unwrap(), "--n-reevals", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corrected = GridArchive::load(&dir.path().join("archive_corrected")).unwrap();
    let (o, c) = (original.metrics(), corrected.metrics());
    assert!(c.coverage <= o.coverage);
    assert_eq!(c.best_reward, o.best_reward);

    // One re-evaluation of a deterministic domain reinserts every elite unchanged.
    let config = resolve(&ConfigSources { file: Some(&dir.path().join("config_effective.toml")), ..Default::default() })
        .unwrap();
    let (once, _) = commands::correct(&stem, &config, 1, 0, &dir.path().join("once")).unwrap();
    let spec = ArchiveSpec { alpha: 1.0, ..original.spec().clone() };
    let mut reinserted = GridArchive::new(spec).unwrap();
    for e in original.elites() {
        reinserted.insert(&e.params, e.objective, &e.measures).unwrap();
    }
    assert_eq!(once.metrics(), reinserted.metrics());
    assert_eq!(once.filled_cells(), reinserted.filled_cells());

    let hopper = resolve(&ConfigSources { env: Some("pointhopper2"), ..Default::default() }).unwrap();
    assert!(commands::correct(&stem, &hopper, 1, 0, &dir.path().join("bad")).is_err());
}

#[test]
fn correction_of_stochastic_archives_lowers_qd_score() {
    let dir = tempfile::tempdir().unwrap();
    let mut lower = 0;
    for seed in 0..5u64 {
        let out = dir.path().join(format!("s{seed}"));
        run_ok(&hopper_args(&out, 3, &["--seed", &seed.to_string()]));
        let config =
            resolve(&ConfigSources { file: Some(&out.join("config_effective.toml")), ..Default::default() }).unwrap();
        let (_, s) = commands::correct(&out.join("archive_final"), &config, 50, seed, &out).unwrap();
        println!("seed {seed}: original {:.3} corrected {:.3}", s.original.qd_score, s.corrected.qd_score);
        if s.corrected.qd_score <= s.original.qd_score {
            lower += 1;
        }
    }
    assert!(lower >= 4, "corrected QD-score was lower in only {lower} of 5 seeds");
}

#[test]
fn single_cell_sweep_matches_run_and_caches_cells() {
    let dir = tempfile::tempdir().unwrap();
    let run_out = dir.path().join("run");
    run_ok(&sphere_args(&run_out));
    let config = resolve(&ConfigSources { file: Some(&run_out.join("config_effective.toml")), ..Default::default() })
        .unwrap();

    let sweep_out = dir.path().join("sweep");
    let cells = sweep::sweep(&config, &[(config.n1, config.n2)], &[config.seed], &sweep_out, 1).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].failures(), 0);
    let cell_dir = sweep::run_dir(&sweep_out, config.n1, config.n2, config.seed);
    assert_eq!(read(&run_out.join("metrics.csv")), read(&cell_dir.join("metrics.csv")));

    // Two cells; the first is cached, the second is interrupted before writing its summary.
    let pairs = [(config.n1, config.n2), (3, 4)];
    sweep::sweep(&config, &pairs, &[config.seed], &sweep_out, 1).unwrap();
    let second = sweep::run_dir(&sweep_out, 3, 4, config.seed);
    std::fs::remove_file(second.join(sweep::SUMMARY_FILE)).unwrap();
    std::fs::remove_file(cell_dir.join("metrics.csv")).unwrap();
    let cells = sweep::sweep(&config, &pairs, &[config.seed], &sweep_out, 1).unwrap();
    assert!(!cell_dir.join("metrics.csv").exists(), "cached cell was recomputed");
    assert!(second.join(sweep::SUMMARY_FILE).is_file());
    assert_eq!(cells.iter().map(|c| c.failures()).sum::<usize>(), 0);
    let table = read(&sweep_out.join(sweep::TABLE_FILE));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn failing_sweep_cells_are_recorded_and_the_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let run_out = dir.path().join("run");
    run_ok(&sphere_args(&run_out));
    let config = resolve(&ConfigSources { file: Some(&run_out.join("config_effective.toml")), ..Default::default() })
        .unwrap();
    // A file where a run directory should go makes that run fail.
    let out = dir.path().join("sweep");
    std::fs::create_dir_all(out.join("n1_2_n2_2")).unwrap();
    std::fs::write(out.join("n1_2_n2_2/seed_1"), b"blocked").unwrap();
    let cells = sweep::sweep(&config, &[(2, 2)], &[0, 1], &out, 1).unwrap();
    assert_eq!(cells[0].failures(), 1);
    assert!(cells[0].qd_score.is_some());
}
