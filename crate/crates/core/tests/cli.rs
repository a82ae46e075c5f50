use std::path::Path;
use std::process::{Command, Output};

use unissda::cli::{cmd_diagnose, cmd_run, reaggregate, read_run_index, ExperimentConfig, RunStatus};
use unissda::train::{Method, TrainHistory};

fn unissda(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unissda"));
    cmd.args(args).env_remove("UNISSDA_OUTPUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("UNISSDA_OUTPUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic.samples_per_class_per_domain = 20;
    cfg.train.iterations = 30;
    cfg.train.log_interval = 10;
    cfg.output_dir = dir.join("out");
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn dry_run_lists_grid_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = unissda(&["run", "--dry-run", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("15 runs"), "{text}");
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"tau": 2.0}}"#).unwrap();
    assert_eq!(unissda(&["run", "--dry-run", "--config", bad.to_str().unwrap()], None).status.code(), Some(2));
    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(unissda(&["run", "--dry-run", "--config", bad.to_str().unwrap()], None).status.code(), Some(2));
    assert_eq!(unissda(&["run", "--dry-run", "--methods", "bogus"], None).status.code(), Some(2));
    assert_eq!(unissda(&["run", "--dry-run", "--setting", "half_open"], None).status.code(), Some(2));
}

#[test]
fn diagnose_on_missing_directory_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = unissda(&["diagnose", dir.path().join("missing").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn generate_is_reproducible_and_records_digests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = unissda(&["generate", "--config", cfg.to_str().unwrap(), "--seeds", "1,2", "--out", out.to_str().unwrap()], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("manifest.json")).unwrap());
    let m: serde_json::Value = serde_json::from_str(&ma).unwrap();
    assert_eq!(m["csv_version"], 1);
    assert_eq!(m["group_sizes"]["common"], 6);
    assert_eq!(m["group_sizes"]["source_private"], 3);
    assert_eq!(m["group_sizes"]["target_private"], 3);
    assert_eq!(m["datasets"].as_array().unwrap().len(), 2);
    let target = unissda::datagen::read_binary(&a.join("data/seed1/target.bin")).unwrap();
    assert_eq!(m["datasets"][0]["target"], unissda::datagen::dataset_digest(&target));
    assert_eq!(target.indices(None, Some(true)).len(), 9 * 3);
}

#[test]
fn single_method_single_seed_and_env_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let env_out = dir.path().join("from_env");
    let o = unissda(&["run", "--config", cfg.to_str().unwrap(), "--methods", "s_plus_t", "--seeds", "1"], Some(&env_out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let index = read_run_index(&env_out).unwrap();
    assert_eq!(index.len(), 1);
    assert!(env_out.join(&index[0].dir).join("report.jsonl").exists());
    let agg = std::fs::read_to_string(env_out.join("aggregate.csv")).unwrap();
    let header: Vec<&str> = agg.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = agg.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("n_runs"), "1");
    assert_eq!(col("overall_accuracy_std"), "0");
    // the flag still wins over the environment
    let flag_out = dir.path().join("from_flag");
    let o = unissda(
        &["run", "--config", cfg.to_str().unwrap(), "--methods", "s_plus_t", "--seeds", "1", "--out", flag_out.to_str().unwrap()],
        Some(&env_out),
    );
    assert!(o.status.success());
    assert!(flag_out.join("aggregate.csv").exists());
}

#[test]
fn aggregates_are_reproduced_from_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic.samples_per_class_per_domain = 20;
    cfg.train.iterations = 30;
    cfg.seeds = (0..5).collect();
    cfg.output_dir = dir.path().to_path_buf();
    let out = cmd_run(&cfg, 3).unwrap();
    assert_eq!(out.index.len(), 15);
    let files = ["aggregate.csv", "aggregate_transductive.csv", "reports.csv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    for f in files {
        std::fs::remove_file(dir.path().join(f)).unwrap();
    }
    assert!(reaggregate(dir.path()).unwrap().is_empty());
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);
    let agg = String::from_utf8(before[0].clone()).unwrap();
    assert_eq!(agg.lines().count(), 1 + Method::ALL.len());
}

#[test]
fn diverging_runs_abort_and_are_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic.samples_per_class_per_domain = 20;
    cfg.train.iterations = 50;
    cfg.train.head_optimizer.learning_rate = 1e306;
    cfg.methods = vec![Method::SPlusT];
    cfg.seeds = vec![0];
    cfg.output_dir = dir.path().join("out");
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = unissda(&["run", "--config", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let index = read_run_index(&cfg.output_dir).unwrap();
    assert_eq!(index[0].status, RunStatus::Aborted);
    assert!(index[0].error.as_deref().unwrap().contains("iteration"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("excluding aborted run"));
    let agg = std::fs::read_to_string(cfg.output_dir.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1);
}

#[test]
fn diagnostics_favor_pgpr_over_naive_on_target_private_classes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::NaivePseudoLabel, Method::Pgpr],
        seeds: vec![0],
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cmd_run(&cfg, 2).unwrap();
    let written = cmd_diagnose(dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    let final_private = |m: Method| {
        let run = dir.path().join(cfg.run_dir(m, 0));
        let csv = std::fs::read_to_string(run.join("diagnostics.csv")).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "target_private_accuracy").unwrap();
        let last: f64 = csv.lines().last().unwrap().split(',').nth(col).unwrap().parse().unwrap();
        // values come straight from the logged evaluation reports
        let history = TrainHistory::read_jsonl(&run.join("history.jsonl")).unwrap();
        assert_eq!(last, history.records.last().unwrap().transductive.target_private_accuracy);
        last
    };
    assert!(final_private(Method::Pgpr) >= final_private(Method::NaivePseudoLabel));
}

#[test]
fn diagnostics_share_the_logging_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        methods: vec![Method::SPlusT, Method::Pgpr],
        seeds: vec![3],
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.train.iterations = 120;
    cmd_run(&cfg, 2).unwrap();
    let o = unissda(&["diagnose", dir.path().to_str().unwrap()], None);
    assert!(o.status.success());
    let iterations = |m: Method| -> Vec<String> {
        let csv = std::fs::read_to_string(dir.path().join(cfg.run_dir(m, 3)).join("diagnostics.csv")).unwrap();
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect()
    };
    let a = iterations(Method::SPlusT);
    assert_eq!(a, vec!["0", "50", "100", "119"]);
    assert_eq!(a, iterations(Method::Pgpr));
}
