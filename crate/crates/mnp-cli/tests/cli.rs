//! End-to-end tests of the command-line surface: artifacts, exit codes,
//! determinism, and the override grammar.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mnp-cli"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn assert_exit(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {args:?}:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).expect("utf-8 stderr")
}

fn simulate_small(dir: &Path) {
    run_ok(&[
        "simulate",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--sim.n=200",
    ]);
}

/// Fit settings small enough for a test, shared by every invocation that
/// should agree with another.
const SMALL_FIT: &[&str] = &[
    "--train.max_epochs=2",
    "--train.batch_size=100",
    "--eval.draws=400",
];

fn fit_small(dir: &Path, extra: &[&str]) {
    let mut args = vec!["fit", "--out", dir.to_str().unwrap(), "--seed", "7"];
    args.extend_from_slice(SMALL_FIT);
    args.extend_from_slice(extra);
    run_ok(&args);
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A JSON document with its wall-clock fields removed, for comparisons
/// that should hold across reruns.
fn without_seconds(path: &Path) -> serde_json::Value {
    let mut value = read_json(path);
    value.as_object_mut().unwrap().remove("seconds");
    value
}

/// Trace CSV with the wall-clock column removed.
fn trace_without_seconds(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| line.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn pipeline_writes_all_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    simulate_small(dir);
    for name in ["dataset.jsonl", "truth.json", "resolved-config.json"] {
        assert!(dir.join(name).exists(), "missing {name}");
    }
    let first = std::fs::read(dir.join("dataset.jsonl")).unwrap();
    let truth_first = std::fs::read(dir.join("truth.json")).unwrap();
    simulate_small(dir);
    assert_eq!(first, std::fs::read(dir.join("dataset.jsonl")).unwrap());
    assert_eq!(truth_first, std::fs::read(dir.join("truth.json")).unwrap());

    fit_small(dir, &[]);
    let fit_path = dir.join("fit-combined.json");
    let trace_path = dir.join("trace-combined.csv");
    assert!(fit_path.exists() && trace_path.exists());
    let document = read_json(&fit_path);
    assert_eq!(document["method"], "cvi");
    assert_eq!(document["scheme"], "combined");
    assert_eq!(document["n"], 200);
    assert_eq!(document["d"], 3);
    let hash = document["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(document["encoder_weights"].is_array());
    // truth.json was present, so the embedded report carries an RMSE.
    assert!(document["metrics"]["rmse"].is_number());
    assert_eq!(document["trace_file"], "trace-combined.csv");
    assert_eq!(document["config"]["seed"], 7);

    let fit_snapshot = without_seconds(&fit_path);
    let trace_snapshot = trace_without_seconds(&trace_path);
    fit_small(dir, &[]);
    assert_eq!(fit_snapshot, without_seconds(&fit_path));
    assert_eq!(trace_snapshot, trace_without_seconds(&trace_path));

    let mut evaluate = vec!["evaluate", "--out", dir.to_str().unwrap(), "--seed", "7"];
    evaluate.extend_from_slice(SMALL_FIT);
    let stdout = run_ok(&evaluate);
    assert!(stdout.contains("in-sample") && stdout.contains("out-of-sample"));
    let metrics_path = dir.join("metrics-combined.json");
    let metrics = read_json(&metrics_path);
    assert_eq!(metrics["method"], "cvi");
    assert!(metrics["in_sample"]["hit_rate"].is_number());
    assert!(metrics["out_of_sample"]["log_score"].is_number());
    // No wall-clock fields: reruns are byte-identical.
    let bytes = std::fs::read(&metrics_path).unwrap();
    run_ok(&evaluate);
    assert_eq!(bytes, std::fs::read(&metrics_path).unwrap());
}

#[test]
fn mcmc_and_compare_produce_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir);
    fit_small(dir, &[]);
    run_ok(&[
        "mcmc",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--gibbs.iterations=60",
        "--gibbs.burn_in=20",
        "--eval.draws=400",
    ]);
    let document = read_json(&dir.join("fit-mcmc.json"));
    assert_eq!(document["method"], "mcmc");
    assert_eq!(document["retained_draws"], 40);
    assert!(document["encoder_weights"].is_null());

    let fit = dir.join("fit-combined.json");
    let mcmc = dir.join("fit-mcmc.json");
    let truth = dir.join("truth.json");
    let stdout = run_ok(&[
        "compare",
        fit.to_str().unwrap(),
        mcmc.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]);
    let table = std::fs::read_to_string(dir.join("compare.csv")).unwrap();
    assert!(stdout.contains(&table));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "method,scheme,hit_rate,log_score,brier_score,rmse,minutes"
    );
    assert!(lines[1].starts_with("cvi,combined,"));
    assert!(lines[2].starts_with("mcmc,-,"));

    // Evaluating the sampler goes through the same --fit door.
    let mut evaluate = vec![
        "evaluate",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--fit",
        mcmc.to_str().unwrap(),
    ];
    evaluate.extend_from_slice(SMALL_FIT);
    run_ok(&evaluate);
    assert_eq!(read_json(&dir.join("metrics-mcmc.json"))["method"], "mcmc");
}

#[test]
fn bootstrap_writes_the_summary_document() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir);
    let mut args = vec![
        "bootstrap",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--eval.bootstrap_replicates=3",
    ];
    args.extend_from_slice(SMALL_FIT);
    run_ok(&args);
    let document = read_json(&dir.join("bootstrap.json"));
    assert_eq!(document["scheme"], "combined");
    assert_eq!(document["replicates_requested"], 3);
    assert_eq!(document["result"]["replicates"].as_array().unwrap().len(), 3);
    assert_eq!(document["result"]["failures"].as_array().unwrap().len(), 0);
    assert!(document["result"]["sd"].is_array());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();

    let stderr = assert_exit(&["simulate", "--out", &out, "--sim.typo=1"], 2);
    assert!(stderr.contains("typo"), "{stderr}");

    let stderr = assert_exit(
        &["simulate", "--out", &out, "--override", "gibbs.burnin=5"],
        2,
    );
    assert!(stderr.contains("burnin"), "{stderr}");

    // Seeds live at the run level, not inside sections.
    let stderr = assert_exit(&["simulate", "--out", &out, "--train.seed=3"], 2);
    assert!(stderr.contains("seed"), "{stderr}");

    let stderr = assert_exit(&["fit", "--out", &out, "--scheme", "softmax"], 2);
    assert!(stderr.contains("softmax"), "{stderr}");

    let stderr = assert_exit(&["simulate", "--out", &out, "--override", "nonsense"], 2);
    assert!(stderr.contains("key=value"), "{stderr}");

    let out_err = bin()
        .args(["simulate", "--out", &out])
        .env("MNP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out_err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out_err.stderr).contains("MNP_THREADS"));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();

    // No dataset yet.
    let mut args = vec!["fit", "--out", &out, "--seed", "7"];
    args.extend_from_slice(SMALL_FIT);
    assert_exit(&args, 3);

    // Corrupt dataset: bad record on line 3.
    std::fs::write(
        dir.path().join("dataset.jsonl"),
        "{\"n\":2,\"d\":3,\"p\":2,\"layout\":\"custom\",\"seed\":0}\n\
         {\"y\":1,\"X\":[0.1,0.2,0.3,0.4,0.5,0.6]}\n\
         {\"y\":9,\"X\":[0.1,0.2,0.3,0.4,0.5,0.6]}\n",
    )
    .unwrap();
    let stderr = assert_exit(&args, 3);
    assert!(stderr.contains(":3:"), "{stderr}");

    // Evaluate without a stored fit.
    simulate_small(dir.path());
    assert_exit(&["evaluate", "--out", &out, "--seed", "7"], 3);
}

#[test]
fn numerical_failures_exit_4_and_leave_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    simulate_small(dir.path());
    let mut args = vec!["fit", "--out", &out, "--seed", "7"];
    args.extend_from_slice(SMALL_FIT);
    args.push("--train.learning_rate=1e30");
    let stderr = assert_exit(&args, 4);
    assert!(stderr.contains("numerical"), "{stderr}");
    let diagnostics = read_json(&dir.path().join("diagnostics.json"));
    assert_eq!(diagnostics["command"], "fit");
    assert!(diagnostics["message"].as_str().unwrap().contains("step"));
    assert_eq!(diagnostics["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn estimates_are_invariant_to_thread_count() {
    let one = tempfile::tempdir().unwrap();
    let four = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&one, "1"), (&four, "4")] {
        simulate_small(dir.path());
        fit_small(dir.path(), &["--threads", threads]);
        run_ok(&[
            "mcmc",
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "7",
            "--gibbs.iterations=40",
            "--gibbs.burn_in=10",
            "--eval.draws=400",
            "--threads",
            threads,
        ]);
    }
    for name in ["fit-combined.json", "fit-mcmc.json"] {
        let a = read_json(&one.path().join(name));
        let b = read_json(&four.path().join(name));
        assert_eq!(a["a"], b["a"], "{name}: taste estimates differ");
        assert_eq!(
            a["delta_sigma_bar"], b["delta_sigma_bar"],
            "{name}: covariance estimates differ"
        );
        assert_eq!(a["metrics"], b["metrics"], "{name}: metrics differ");
    }
}

#[test]
fn entropy_seed_is_drawn_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--sim.n=50",
    ]);
    let resolved = read_json(&dir.path().join("resolved-config.json"));
    let seed = resolved["seed"].as_u64().unwrap();
    assert_eq!(resolved["train"]["seed"].as_u64().unwrap(), seed);
    assert_eq!(resolved["gibbs"]["seed"].as_u64().unwrap(), seed);
    let header = std::fs::read_to_string(dir.path().join("dataset.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.contains(&format!("\"seed\":{seed}")), "{header}");
}

#[test]
fn override_spellings_agree() {
    let long = tempfile::tempdir().unwrap();
    let short = tempfile::tempdir().unwrap();
    run_ok(&[
        "simulate",
        "--out",
        long.path().to_str().unwrap(),
        "--seed",
        "7",
        "--override",
        "sim.n=150",
    ]);
    run_ok(&[
        "simulate",
        "--out",
        short.path().to_str().unwrap(),
        "--seed",
        "7",
        "--sim.n=150",
    ]);
    assert_eq!(
        std::fs::read(long.path().join("dataset.jsonl")).unwrap(),
        std::fs::read(short.path().join("dataset.jsonl")).unwrap()
    );
}

#[test]
fn config_file_drives_a_run_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    std::fs::write(
        &config_path,
        format!(
            "{{\"seed\": 11, \"output\": {:?}, \"sim\": {{\"n\": 60}}}}",
            out_a.to_str().unwrap()
        ),
    )
    .unwrap();

    // File alone: its seed and output directory apply.
    run_ok(&["simulate", "--config", config_path.to_str().unwrap()]);
    let resolved = read_json(&out_a.join("resolved-config.json"));
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["sim"]["n"], 60);

    // Flags beat the file.
    run_ok(&[
        "simulate",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    let resolved = read_json(&out_b.join("resolved-config.json"));
    assert_eq!(resolved["seed"], 12);
    assert!(out_b.join("dataset.jsonl").exists());
}
