//! Black-box tests of the command-line interface: exit codes, determinism,
//! and a miniature end-to-end pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_theftbench"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn theftbench")
}

fn assert_code(out: &Output, expected: i32) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_and_version_exit_zero() {
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
    assert_code(&run(&["synth", "--help"]), 0);
}

#[test]
fn usage_errors_exit_three() {
    // no subcommand / unknown subcommand / unknown flag
    assert_code(&run(&[]), 3);
    assert_code(&run(&["frobnicate"]), 3);
    assert_code(&run(&["synth", "--count", "4", "--out", "x.csv", "--bogus"]), 3);
    // zero worker count
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    assert_code(
        &run(&["--jobs", "0", "synth", "--count", "4", "--out", out.to_str().unwrap()]),
        3,
    );
}

#[test]
fn missing_input_exits_two() {
    let out = run(&["eval", "--model", "/nonexistent/model.json", "--data", "/nonexistent/d.csv"]);
    assert_code(&out, 2);
}

#[test]
fn va1_requires_alpha_and_normals() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m.json");
    // validation errors fire before the model is touched
    let out = run(&[
        "attack",
        "--defender",
        model.to_str().unwrap(),
        "--algo",
        "va1",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--alpha"));
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let mk = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        assert_code(
            &run(&["synth", "--count", "24", "--seed", seed, "--out", path.to_str().unwrap()]),
            0,
        );
        fs::read(path).unwrap()
    };
    assert_eq!(mk("a.csv", "5"), mk("b.csv", "5"));
    assert_ne!(mk("c.csv", "5"), mk("d.csv", "6"));
}

#[test]
fn seed_env_var_matches_flag() {
    let dir = TempDir::new().unwrap();
    let by_flag = dir.path().join("flag.csv");
    let by_env = dir.path().join("env.csv");
    assert_code(
        &run(&["synth", "--count", "12", "--seed", "9", "--out", by_flag.to_str().unwrap()]),
        0,
    );
    let out = bin()
        .env("THEFTBENCH_SEED", "9")
        .args(["synth", "--count", "12", "--out", by_env.to_str().unwrap()])
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert_eq!(fs::read(by_flag).unwrap(), fs::read(by_env).unwrap());
}

#[test]
fn ingest_canonical_keeps_only_complete_days() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw.csv");
    let mut text = String::from("meter_id,day_index,slot,kwh\n");
    for slot in 0..48 {
        text.push_str(&format!("m1,0,{slot},0.5\n"));
    }
    // incomplete day: dropped
    text.push_str("m1,1,0,0.5\nm1,1,1,0.5\n");
    fs::write(&raw, text).unwrap();

    let out_path = dir.path().join("normals.csv");
    let out = run(&[
        "ingest",
        "--format",
        "canonical",
        "--in",
        raw.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("1 complete days"), "stderr: {stderr}");
    assert!(stderr.contains("1 incomplete"), "stderr: {stderr}");
}

#[test]
fn ingest_with_no_complete_day_exits_three() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw.csv");
    fs::write(&raw, "meter_id,day_index,slot,kwh\nm1,0,0,0.5\n").unwrap();
    let out = run(&[
        "ingest",
        "--format",
        "canonical",
        "--in",
        raw.to_str().unwrap(),
        "--out",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

/// synth -> pollute -> train -> eval -> attack -> report on a tiny dataset
/// and a reduced architecture, exercising every subcommand end to end.
#[test]
fn small_pipeline_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |path: &Path| path.to_str().unwrap().to_string();

    let normals = p("normals.csv");
    assert_code(&run(&["synth", "--count", "80", "--seed", "3", "--out", &s(&normals)]), 0);

    let labeled = p("labeled.csv");
    assert_code(
        &run(&["pollute", "--in", &s(&normals), "--seed", "4", "--out", &s(&labeled)]),
        0,
    );

    // polluting an already-polluted dataset is a validation error
    assert_code(
        &run(&["pollute", "--in", &s(&labeled), "--seed", "4", "--out", &s(&p("x.csv"))]),
        3,
    );

    let model = p("model.json");
    let out = run(&[
        "train", "--arch", "f_fnn_small", "--data", &s(&labeled), "--seed", "1", "--epochs",
        "5", "--out", &s(&model),
    ]);
    assert_code(&out, 0);

    let out = run(&["eval", "--model", &s(&model), "--data", &s(&labeled)]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("accuracy="), "stdout: {stdout}");
    assert!(stdout.contains("fpr="), "stdout: {stdout}");

    // unknown preset name is a validation error
    assert_code(
        &run(&["train", "--arch", "f_mlp", "--data", &s(&labeled), "--out", &s(&p("y.json"))]),
        3,
    );

    // white-box attack; step=0 must also run cleanly (classifies the init)
    for (step, name) in [("3", "r.json"), ("0", "r0.json")] {
        let report = p(name);
        let out = run(&[
            "attack", "--defender", &s(&model), "--algo", "sff", "--step", step, "--n", "8",
            "--seed", "2", "--out", &s(&report),
        ]);
        assert_code(&out, 0);
        let text = fs::read_to_string(&report).unwrap();
        assert!(text.contains("detection_accuracy"), "report: {text}");
    }

    // identical attack invocations write byte-identical reports
    let again = p("r_again.json");
    assert_code(
        &run(&[
            "attack", "--defender", &s(&model), "--algo", "sff", "--step", "3", "--n", "8",
            "--seed", "2", "--out", &s(&again),
        ]),
        0,
    );
    assert_eq!(fs::read(p("r.json")).unwrap(), fs::read(&again).unwrap());

    // vanilla attacks through the CLI
    assert_code(
        &run(&[
            "attack", "--defender", &s(&model), "--algo", "va1", "--alpha", "0.5", "--normals",
            &s(&labeled), "--n", "8", "--out", &s(&p("va1.json")),
        ]),
        0,
    );
    assert_code(
        &run(&[
            "attack", "--defender", &s(&model), "--algo", "va2", "--u", "2.0", "--n", "8",
            "--out", &s(&p("va2.json")),
        ]),
        0,
    );

    // re-render the JSON report as CSV
    let out = run(&["report", "--in", &s(&p("r.json")), "--format", "csv"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.starts_with("cell_id,attack,params,detection_accuracy,avg_l1,success_local_rate,n"),
        "stdout: {stdout}"
    );

    // sweep from a plan file, CSV output, with a resumable cell cache
    let plan = p("plan.json");
    fs::write(
        &plan,
        format!(
            r#"{{
  "version": "theftbench-plan/1",
  "defender_model": "{model}",
  "attacker_model": null,
  "normals_data": "{labeled}",
  "attack": {{ "attack": "va2", "u": [1.0, 2.0] }},
  "n_vectors": 8,
  "base_seed": 11
}}"#,
            model = s(&model),
            labeled = s(&labeled),
        ),
    )
    .unwrap();
    let sweep_out = p("sweep.csv");
    let cache = p("cells");
    for _ in 0..2 {
        assert_code(
            &run(&[
                "sweep", "--plan", &s(&plan), "--out", &s(&sweep_out), "--cache", &s(&cache),
            ]),
            0,
        );
    }
    let text = fs::read_to_string(&sweep_out).unwrap();
    assert_eq!(text.lines().count(), 3, "header plus two cells: {text}");

    // a plan with an unsupported version is a format error
    let bad = p("bad_plan.json");
    fs::write(&bad, fs::read_to_string(&plan).unwrap().replace("plan/1", "plan/9")).unwrap();
    assert_code(&run(&["sweep", "--plan", &s(&bad), "--out", &s(&p("z.csv"))]), 3);
}
