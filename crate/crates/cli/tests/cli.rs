use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mergelens::analysis::{
    correlation_matrix, correlation_matrix_at, evaluate_behavior, load_behavior_suites,
    BehaviorReport, CorrelationMatrix, CorrelationMethod, Granularity,
};
use mergelens::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Tensor};
use mergelens::merge::{merge_linear, merge_ties};
use mergelens::pipeline::FAILURE_MARKER;
use mergelens::probe::{load_probe_tasks, run_probe_suite, ProbeConfig, ProbeReport};
use mergelens::toy::{
    generate, load_dataset, save_dataset, train_toy_model, DataSpec, ToyArchitecture, TrainConfig,
};
use mergelens::Exec;
use serde_json::json;

fn mergelens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mergelens"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy_run/manifest.json")
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn ckpt(values: &[f32]) -> Checkpoint {
    Checkpoint::new()
        .with("w", Tensor::new(vec![2, 2], values.to_vec()).unwrap())
        .with(
            "b",
            Tensor::from_vec(values[..2].iter().map(|v| v * 0.5).collect()),
        )
}

#[test]
fn merge_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cs = [
        ckpt(&[0.0, 0.0, 0.0, 0.0]),
        ckpt(&[1.0, -2.0, 0.5, 3.0]),
        ckpt(&[-1.0, 0.25, 2.0, 1.0]),
    ];
    for (name, c) in ["base", "a", "b"].iter().zip(&cs) {
        save_checkpoint(c, dir.path().join(format!("{name}.safetensors"))).unwrap();
    }

    let recipe = dir.path().join("linear.json");
    fs::write(
        &recipe,
        json!({"method": "linear", "parents": ["a.safetensors", "b.safetensors"], "weights": [1.0, 3.0]}).to_string(),
    )
    .unwrap();
    let out = dir.path().join("out/linear.safetensors");
    let run = mergelens(&["merge", "--recipe", s(&recipe), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let want = merge_linear(&[&cs[1], &cs[2]], &[1.0, 3.0], Exec::Sequential).unwrap();
    assert!(load_checkpoint(&out).unwrap().bitwise_eq(&want));

    let recipe = dir.path().join("ties.json");
    fs::write(
        &recipe,
        json!({"method": "ties", "parents": ["a.safetensors", "b.safetensors"], "base": "base.safetensors", "density": 0.5})
            .to_string(),
    )
    .unwrap();
    let run = mergelens(&[
        "--jobs",
        "1",
        "merge",
        "--recipe",
        s(&recipe),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&run), 0);
    let want = merge_ties(&cs[0], &[&cs[1], &cs[2]], 0.5, 1.0, Exec::Sequential).unwrap();
    assert!(load_checkpoint(&out).unwrap().bitwise_eq(&want));
}

#[test]
fn merge_errors_are_usage_or_stage() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("r.json");
    let out = dir.path().join("m.safetensors");

    fs::write(
        &recipe,
        r#"{"method": "slerp", "parents": ["a", "b", "c"], "t": 0.5}"#,
    )
    .unwrap();
    let run = mergelens(&["merge", "--recipe", s(&recipe), "--out", s(&out)]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("parents"));

    fs::write(
        &recipe,
        r#"{"method": "linear", "parents": ["a"], "surprise": 1}"#,
    )
    .unwrap();
    assert_eq!(
        code(&mergelens(&[
            "merge",
            "--recipe",
            s(&recipe),
            "--out",
            s(&out)
        ])),
        2
    );

    // well-formed recipe over parents with different layouts
    save_checkpoint(&ckpt(&[1.0; 4]), dir.path().join("a.safetensors")).unwrap();
    save_checkpoint(
        &Checkpoint::new().with("w", Tensor::zeros(vec![4])),
        dir.path().join("b.safetensors"),
    )
    .unwrap();
    fs::write(
        &recipe,
        r#"{"method": "linear", "parents": ["a.safetensors", "b.safetensors"]}"#,
    )
    .unwrap();
    assert_eq!(
        code(&mergelens(&[
            "merge",
            "--recipe",
            s(&recipe),
            "--out",
            s(&out)
        ])),
        1
    );
}

#[test]
fn gen_data_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DataSpec::Rings {
        n: 60,
        dim: 3,
        classes: 3,
        radius_noise: 0.05,
        label_noise: 0.1,
        seed: 9,
    };
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let want = generate(&spec).unwrap();
    for ext in ["json", "csv"] {
        let out = dir.path().join(format!("gen/data.{ext}"));
        assert_eq!(
            code(&mergelens(&[
                "gen-data",
                "--spec",
                s(&spec_path),
                "--out",
                s(&out)
            ])),
            0
        );
        assert_eq!(load_dataset(&out).unwrap(), want, "{ext}");
    }
}

/// A trained toy model plus probe tasks and behavior suites on disk.
struct Workspace {
    dir: tempfile::TempDir,
    model: PathBuf,
    checkpoint: Checkpoint,
    arch: ToyArchitecture,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let arch = ToyArchitecture::new(3, vec![6], 2);
    let xor = |seed| DataSpec::Xor {
        n: 80,
        dim: 3,
        axes: [0, 1],
        label_noise: 0.0,
        seed,
    };
    let config = TrainConfig {
        epochs: 30,
        learning_rate: 0.5,
        seed: 4,
    };
    let checkpoint = train_toy_model(
        &arch,
        &generate(&xor(1)).unwrap(),
        &config,
        Exec::Sequential,
    )
    .unwrap();
    let model = dir.path().join("toy.safetensors");
    save_checkpoint(&checkpoint, &model).unwrap();
    for seed in 2..5 {
        save_dataset(
            &generate(&xor(seed)).unwrap(),
            dir.path().join(format!("xor{seed}.json")),
        )
        .unwrap();
    }
    fs::write(
        dir.path().join("tasks.json"),
        json!({"tasks": [{"task_id": "xor", "phenomenon": "parity",
                          "train": "xor2.json", "dev": "xor3.json", "test": "xor4.json"}]})
        .to_string(),
    )
    .unwrap();
    fs::write(
        dir.path().join("suites.json"),
        json!({"suites": [{"suite_id": "logic", "tasks": [{"task_id": "xor", "data": "xor4.json"}]}]}).to_string(),
    )
    .unwrap();
    Workspace {
        dir,
        model,
        checkpoint,
        arch,
    }
}

#[test]
fn probe_matches_library() {
    let w = workspace();
    let tasks = w.dir.path().join("tasks.json");
    let want = run_probe_suite(
        "toy",
        &w.checkpoint,
        &w.arch,
        &load_probe_tasks(&tasks).unwrap(),
        &ProbeConfig::default(),
        Exec::Sequential,
    )
    .unwrap();
    let json_out = w.dir.path().join("probe.json");
    let run = mergelens(&[
        "probe",
        "--model",
        s(&w.model),
        "--tasks",
        s(&tasks),
        "--out",
        s(&json_out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(
        ProbeReport::from_json(&fs::read_to_string(&json_out).unwrap()).unwrap(),
        want
    );

    let csv_out = w.dir.path().join("probe.csv");
    let run = mergelens(&[
        "probe",
        "--model",
        s(&w.model),
        "--tasks",
        s(&tasks),
        "--out",
        s(&csv_out),
    ]);
    assert_eq!(code(&run), 0);
    assert_eq!(fs::read_to_string(&csv_out).unwrap(), want.to_csv());
}

#[test]
fn behave_matches_library() {
    let w = workspace();
    let suites = w.dir.path().join("suites.json");
    let want = evaluate_behavior(
        "renamed",
        &w.checkpoint,
        &w.arch,
        &load_behavior_suites(&suites).unwrap(),
        Exec::Sequential,
    )
    .unwrap();
    let out = w.dir.path().join("behavior.json");
    let run = mergelens(&[
        "behave",
        "--model",
        s(&w.model),
        "--suites",
        s(&suites),
        "--model-id",
        "renamed",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(
        BehaviorReport::from_json(&fs::read_to_string(&out).unwrap()).unwrap(),
        want
    );
}

#[test]
fn run_is_reproducible_and_correlate_matches_library() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = fixture();
    let first = mergelens(&["run", "--manifest", s(&manifest), "--out", s(a.path())]);
    assert_eq!(
        code(&first),
        0,
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let stderr = String::from_utf8_lossy(&first.stderr);
    for stage in [
        "parents",
        "merge",
        "behavior",
        "probe",
        "compare",
        "correlate",
    ] {
        assert!(stderr.contains(&format!("{stage}: ")), "{stderr}");
    }
    let second = mergelens(&[
        "--jobs",
        "1",
        "run",
        "--manifest",
        s(&manifest),
        "--out",
        s(b.path()),
    ]);
    assert_eq!(code(&second), 0);
    let ta = tree(a.path());
    assert_eq!(ta, tree(b.path()));

    let ids = [
        "xor_expert",
        "ring_expert",
        "linear",
        "slerp",
        "task_arithmetic",
        "ties",
        "dare_ties",
    ];
    let files = |kind: &str| -> Vec<PathBuf> {
        ids.iter()
            .map(|id| a.path().join(format!("{kind}/{id}.json")))
            .collect()
    };
    let (probe_files, behavior_files) = (files("probe"), files("behavior"));
    let load_probe: Vec<ProbeReport> = probe_files
        .iter()
        .map(|p| ProbeReport::from_json(&fs::read_to_string(p).unwrap()).unwrap())
        .collect();
    let load_behavior: Vec<BehaviorReport> = behavior_files
        .iter()
        .map(|p| BehaviorReport::from_json(&fs::read_to_string(p).unwrap()).unwrap())
        .collect();
    let want = correlation_matrix(
        &ProbeReport::combine(&load_probe),
        &BehaviorReport::combine(&load_behavior),
        CorrelationMethod::Spearman,
    );
    assert!(want.is_fully_defined());

    let out = a.path().join("cli/spearman.json");
    let mut args = vec![
        "correlate",
        "--method",
        "spearman",
        "--out",
        s(&out),
        "--probe",
    ];
    args.extend(probe_files.iter().map(|p| s(p)));
    args.push("--behavior");
    args.extend(behavior_files.iter().map(|p| s(p)));
    assert_eq!(code(&mergelens(&args)), 0);
    assert_eq!(
        CorrelationMatrix::from_json(&fs::read_to_string(&out).unwrap()).unwrap(),
        want
    );
    assert_eq!(
        fs::read(a.path().join("correlation/spearman.json")).unwrap(),
        fs::read(&out).unwrap()
    );

    let csv = a.path().join("cli/spearman.csv");
    args[4] = s(&csv);
    assert_eq!(code(&mergelens(&args)), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap(), want.to_wide_csv());
    args.push("--long");
    assert_eq!(code(&mergelens(&args)), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap(), want.to_long_csv());

    let by_task = correlation_matrix_at(
        &ProbeReport::combine(&load_probe),
        &BehaviorReport::combine(&load_behavior),
        CorrelationMethod::Spearman,
        Granularity::Task,
    );
    args.pop();
    args[4] = s(&out);
    args.extend(["--granularity", "task"]);
    assert_eq!(code(&mergelens(&args)), 0);
    let got = CorrelationMatrix::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(got, by_task);
    assert_eq!(got.granularity, Granularity::Task);
    assert_ne!(got.rows, want.rows);
}

#[test]
fn single_stage_rerun_and_failures() {
    let out = tempfile::tempdir().unwrap();
    let manifest = fixture();

    // merge before parents exist: a stage failure
    let run = mergelens(&[
        "run",
        "--manifest",
        s(&manifest),
        "--out",
        s(out.path()),
        "--stage",
        "merge",
    ]);
    assert_eq!(code(&run), 1);
    assert!(fs::read_to_string(out.path().join(FAILURE_MARKER))
        .unwrap()
        .starts_with("stage=merge\n"));

    assert_eq!(
        code(&mergelens(&[
            "run",
            "--manifest",
            s(&manifest),
            "--out",
            s(out.path())
        ])),
        0
    );
    assert!(!out.path().join(FAILURE_MARKER).exists());
    let before = tree(out.path());
    fs::remove_dir_all(out.path().join("behavior")).unwrap();
    let run = mergelens(&[
        "run",
        "--manifest",
        s(&manifest),
        "--out",
        s(out.path()),
        "--stage",
        "behavior",
    ]);
    assert_eq!(code(&run), 0);
    assert_eq!(tree(out.path()), before);

    let bad = mergelens(&[
        "run",
        "--manifest",
        s(&manifest),
        "--out",
        s(out.path()),
        "--stage",
        "nope",
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn seed_flag_overrides_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = fixture();
    let stage = |dir: &Path, seed: &str| {
        mergelens(&[
            "run",
            "--manifest",
            s(&manifest),
            "--out",
            s(dir),
            "--seed",
            seed,
            "--stage",
            "parents",
        ])
    };
    assert_eq!(code(&stage(a.path(), "17")), 0);
    assert_eq!(code(&stage(b.path(), "18")), 0);
    let base = |d: &Path| fs::read(d.join("checkpoints/base.safetensors")).unwrap();
    assert_ne!(base(a.path()), base(b.path()));
}

#[test]
fn usage_errors_exit_2() {
    let run = mergelens(&["frobnicate"]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("Usage"));

    assert_eq!(code(&mergelens(&[])), 2);

    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture()).unwrap()).unwrap();
    v["recipes"][1]["parents"] = json!(["xor_expert", "ring_expert", "xor_expert"]);
    fs::write(&manifest, v.to_string()).unwrap();
    let run = mergelens(&[
        "run",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("recipes[1].parents"));
    assert!(!dir.path().join("out").exists());

    let missing = dir.path().join("absent.json");
    assert_eq!(
        code(&mergelens(&[
            "run",
            "--manifest",
            s(&missing),
            "--out",
            "x"
        ])),
        2
    );
    assert_eq!(
        code(&mergelens(&[
            "gen-data",
            "--spec",
            s(&missing),
            "--out",
            "x.json"
        ])),
        2
    );
}
