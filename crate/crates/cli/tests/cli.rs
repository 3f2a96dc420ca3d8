use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn facet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facet"))
        .current_dir(dir)
        .env_remove("FACET_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = facet(dir, args);
    assert!(
        out.status.success(),
        "facet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Faces, a held-out target set, their mean and a small trained basis.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-faces", "--out", "faces", "--n", "80", "--geometry", "10x10x1", "--mean", "mean.pgm"]);
    ok(d, &["synth-faces", "--out", "targets", "--n", "4", "--geometry", "10x10x1", "--seed", "9"]);
    ok(d, &["train-basis", "--data", "faces", "--k", "6", "--out", "b.eigb", "--epochs", "20"]);
    dir
}

const SMALL_SEARCH: [&str; 8] = ["--budget", "800", "--restart-iters", "10", "--batch", "8", "--seed", "4"];

fn recover_args<'a>(restarts: &'a str, image: &'a str, traj: &'a str) -> Vec<&'a str> {
    let mut v = vec![
        "recover", "--basis", "b.eigb", "--oracle", "local:3", "--id", "t", "--target", "targets/face0001.pgm",
        "--restarts", restarts, "--out-image", image, "--out-trajectory", traj,
    ];
    v.extend(SMALL_SEARCH);
    v
}

#[test]
fn one_restart_reproduces_the_single_run() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &recover_args("0", "single.pgm", "single.csv"));
    ok(d, &recover_args("1", "multi.pgm", "multi.csv"));
    assert_eq!(fs::read(d.join("single.pgm")).unwrap(), fs::read(d.join("multi.pgm")).unwrap());
    assert_eq!(fs::read(d.join("single.csv")).unwrap(), fs::read(d.join("multi.csv")).unwrap());
}

#[test]
fn identical_invocations_write_identical_files() {
    let dir = workspace();
    let d = dir.path();
    let args = |out: &'static str| {
        let mut v = vec!["evaluate", "--targets", "targets", "--basis", "b.eigb", "--restarts", "2", "--out", out];
        v.extend(SMALL_SEARCH);
        v
    };
    fs::create_dir(d.join("a")).unwrap();
    fs::create_dir(d.join("b")).unwrap();
    ok(d, &args("a/ev.csv"));
    ok(d, &args("b/ev.csv"));
    for f in ["ev.csv", "ev.csv.summary.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let summary = fs::read_to_string(d.join("a/ev.csv.summary.csv")).unwrap();
    assert!(summary.contains("verification_accuracy,"));
}

#[test]
fn resolved_config_reruns_the_same_recovery() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &recover_args("2", "r.pgm", "r.csv"));
    let image = fs::read(d.join("r.pgm")).unwrap();
    let traj = fs::read(d.join("r.csv")).unwrap();
    let sidecar = fs::read_to_string(d.join("r.pgm.config")).unwrap();
    fs::rename(d.join("r.pgm.config"), d.join("saved.config")).unwrap();
    fs::remove_file(d.join("r.pgm")).unwrap();
    ok(d, &["recover", "--config", "saved.config"]);
    assert_eq!(fs::read(d.join("r.pgm")).unwrap(), image);
    assert_eq!(fs::read(d.join("r.csv")).unwrap(), traj);
    assert_eq!(fs::read_to_string(d.join("r.pgm.config")).unwrap(), sidecar);
}

#[test]
fn flags_override_config_and_the_seed_falls_back_to_the_environment() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("c.config"), "# shared settings\nbatch-size = 16\nepochs=3\nseed=5\n").unwrap();
    ok(d, &["train-basis", "--config", "c.config", "--data", "faces", "--k", "2", "--out", "x.eigb", "--epochs", "2"]);
    let side = fs::read_to_string(d.join("x.eigb.config")).unwrap();
    assert!(side.contains("batch_size=16\n") && side.contains("epochs=2\n") && side.contains("seed=5\n"), "{side}");

    let run = |extra: &[&str]| {
        let mut args = vec!["train-basis", "--data", "faces", "--k", "2", "--out", "y.eigb", "--epochs", "1"];
        args.extend(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_facet"))
            .current_dir(d)
            .env("FACET_SEED", "77")
            .args(&args)
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read_to_string(d.join("y.eigb.config")).unwrap()
    };
    assert!(run(&[]).contains("seed=77\n"));
    assert!(run(&["--seed", "8"]).contains("seed=8\n"));
    assert!(run(&["--config", "c.config"]).contains("seed=5\n"));
}

#[test]
fn budget_below_the_probe_phase_is_a_usage_error() {
    let dir = workspace();
    let d = dir.path();
    let mut args = recover_args("10", "r.pgm", "r.csv");
    let at = args.iter().position(|a| *a == "--budget").unwrap();
    args[at + 1] = "100";
    let out = facet(d, &args);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("probe phase"));
    assert!(!d.join("r.pgm").exists());
}

#[test]
fn bad_settings_and_missing_files_get_their_exit_codes() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("bad.config"), "k=4\nlearning_rate=0.1\n").unwrap();
    let out = facet(d, &["train-basis", "--config", "bad.config", "--data", "faces", "--out", "z.eigb"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(d.join("dup.config"), "k=4\nk=5\n").unwrap();
    assert_eq!(code(&facet(d, &["train-basis", "--config", "dup.config"])), 2);

    assert_eq!(code(&facet(d, &["train-basis", "--data", "faces"])), 2);
    assert_eq!(code(&facet(d, &["recover", "--accept", "sometimes"])), 2);

    let mut args = recover_args("0", "r.pgm", "r.csv");
    args[2] = "missing.eigb";
    assert_eq!(code(&facet(d, &args)), 3);
    assert_eq!(code(&facet(d, &["train-basis", "--data", "nowhere", "--out", "z.eigb"])), 3);

    let mut args = recover_args("0", "r.pgm", "r.csv");
    args[4] = "http://127.0.0.1:9";
    assert_eq!(code(&facet(d, &args)), 2, "--target conflicts with a remote oracle");

    ok(d, &["synth-faces", "--out", "big", "--n", "1", "--geometry", "12x10x1"]);
    let mut args = recover_args("0", "r.pgm", "r.csv");
    args[8] = "big/face0000.pgm";
    assert_eq!(code(&facet(d, &args)), 2, "target geometry differs from the basis");
}

#[test]
fn ablation_writes_one_row_per_cell() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train-basis", "--data", "faces", "--k", "6", "--out", "sl.eigb", "--epochs", "20", "--no-symmetry", "--no-generative"]);
    let mut args = vec!["ablation", "--targets", "targets", "--bases", "SL=sl.eigb,SR+GR=b.eigb", "--restarts", "0,2", "--out", "ab.csv"];
    args.extend(SMALL_SEARCH);
    ok(d, &args);
    let csv = fs::read_to_string(d.join("ab.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("loss,restarts,n_targets"));
    assert!(lines[1].starts_with("SL,0,4,") && lines[4].starts_with("SR+GR,2,4,"));
    assert!(d.join("ab.csv.config").exists());
}

#[test]
fn remote_recovery_stops_with_exit_4_when_the_server_budget_runs_out() {
    let dir = workspace();
    let d = dir.path();
    let mut server = Command::new(env!("CARGO_BIN_EXE_facet"))
        .current_dir(d)
        .args([
            "serve-oracle", "--basis-geometry", "10x10x1", "--seed", "3", "--bind", "127.0.0.1:0", "--budget", "100",
            "--enroll", "t=targets/face0001.pgm", "--reference", "mean.pgm",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut url = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut url).unwrap();
    let url = url.trim().to_string();
    assert!(url.starts_with("http://127.0.0.1:"));

    let unknown = facet(
        d,
        &["recover", "--basis", "b.eigb", "--oracle", &url, "--id", "nobody", "--restarts", "0", "--out-image", "x.pgm"],
    );
    let out = facet(
        d,
        &[
            "recover", "--basis", "b.eigb", "--oracle", &url, "--id", "t", "--restarts", "0", "--budget", "400",
            "--batch", "8", "--out-image", "remote.pgm", "--out-trajectory", "remote.csv",
        ],
    );
    server.kill().unwrap();
    server.wait().unwrap();

    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("remote.pgm").exists());
    let traj = fs::read_to_string(d.join("remote.csv")).unwrap();
    // 12 batches of 8 fit in 100 queries
    assert_eq!(traj.lines().count(), 1 + 12);
    assert!(String::from_utf8_lossy(&out.stdout).contains("queries=96"));
    assert_eq!(code(&unknown), 2);
}
