//! End-to-end tests of the command-line surface, driving the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pbtnas"))
}

fn small_config(dir: &Path, algorithm: &str, seeds: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{algorithm}.toml"));
    std::fs::write(
        &path,
        format!(
            "algorithm = \"{algorithm}\"\npopulation = 4\nseeds = [{seeds}]\nworkers = 2\n\
             out_dir = \"{}\"\n\
             [task]\nkind = \"spirals\"\nn_per_class = 16\nnoise_std = 0.1\nbatch_size = 8\n\
             [search]\nfixed_width = 6\n\
             [select]\ntau = 50.0\n\
             [schedule]\ne_total = 6\ne_step = 2\n",
            dir.join("out").display()
        ),
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn run_is_deterministic_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "pbt-nas", "0");
    run_ok(bin().args(["run", "--config"]).arg(&cfg));
    let first = std::fs::read(tmp.path().join("out/pbt-nas/seed_0/events.csv")).unwrap();
    let second_out = tmp.path().join("out2");
    run_ok(
        bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", "0", "--out"])
            .arg(&second_out),
    );
    let second = std::fs::read(second_out.join("pbt-nas/seed_0/events.csv")).unwrap();
    assert_eq!(first, second, "reruns must produce identical output files");
}

#[test]
fn compare_reports_exact_p_value() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_config(tmp.path(), "pbt-nas", "0, 1, 2");
    let b = small_config(tmp.path(), "random", "0, 1, 2");
    run_ok(bin().args(["run", "--config"]).arg(&a));
    run_ok(bin().args(["run", "--config"]).arg(&b));
    let table = tmp.path().join("comparison.csv");
    let out = run_ok(
        bin()
            .arg("compare")
            .arg(tmp.path().join("out/pbt-nas"))
            .arg(tmp.path().join("out/random"))
            .args(["--alpha", "0.05", "--tests", "4", "--out"])
            .arg(&table),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("exact one-sided Wilcoxon p ="), "{stdout}");
    assert!(stdout.contains("threshold 0.0125"), "{stdout}");
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("algorithm_1,algorithm_2,setting,p_value"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg(tmp.path()).output().unwrap();
    assert!(!out.status.success(), "report on empty dir must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no run results"), "{stderr}");
    // and it must not leave report files behind
    assert!(!tmp.path().join("report.csv").exists());
}

#[test]
fn report_and_soup_on_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "pbt-nas", "0");
    run_ok(bin().args(["run", "--config"]).arg(&cfg));
    let run_root = tmp.path().join("out/pbt-nas");
    run_ok(bin().arg("report").arg(&run_root));
    assert!(run_root.join("report.csv").is_file());
    assert!(run_root.join("seed_0/curves.svg").is_file());
    assert!(run_root.join("seed_0/origins.svg").is_file());

    let out = run_ok(bin().arg("soup").arg(&run_root).args(["--what", "both"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("soup"), "{stdout}");
    let soup: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_root.join("seed_0/soup.json")).unwrap())
            .unwrap();
    assert!(soup["soup_heldout"].as_f64().unwrap() >= soup["best_individual_heldout"].as_f64().unwrap());
}

#[test]
fn invalid_configs_fail_with_described_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "algorithm = \"pbt-nas\"\nmystery = 1\n[task]\nkind = \"spirals\"\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));

    let bad_tau = tmp.path().join("bad_tau.toml");
    std::fs::write(
        &bad_tau,
        "algorithm = \"pbt-nas\"\n[task]\nkind = \"spirals\"\n[select]\ntau = 60.0\n",
    )
    .unwrap();
    let out = bin().args(["run", "--config"]).arg(&bad_tau).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}

#[test]
fn resume_requires_seed_and_matching_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "pbt-nas", "0");
    run_ok(bin().args(["run", "--config"]).arg(&cfg));
    let ckpt = tmp.path().join("out/pbt-nas/seed_0/checkpoint");
    // --resume without --seed is rejected
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--resume")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(!out.status.success());
    // resuming a finished run reproduces the same artifacts
    run_ok(
        bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", "0", "--resume"])
            .arg(&ckpt)
            .args(["--out"])
            .arg(tmp.path().join("resumed")),
    );
    let a = std::fs::read(tmp.path().join("out/pbt-nas/seed_0/events.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("resumed/pbt-nas/seed_0/events.csv")).unwrap();
    assert_eq!(a, b);
}
