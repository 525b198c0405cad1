use std::path::PathBuf;
use std::process::{Command, Output};

fn npusim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npusim")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("npusim-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const WORKLOAD: &str = r#"[
  {"request_id": "mlp", "model_file": "synthetic:mlp:width=64", "batch": 4},
  {"request_id": "conv", "model_file": "synthetic:conv_block:channels=8,size=8", "arrival_cycle": 50}
]"#;

#[test]
fn simulate_writes_report_and_side_files() {
    let dir = scratch("sim");
    let wl = dir.join("w.json");
    std::fs::write(&wl, WORKLOAD).unwrap();
    let report = dir.join("run.json");
    let out = npusim(&[
        "simulate",
        "--config",
        "mobile",
        "--workload",
        wl.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--timeline-window",
        "500",
        "--trace",
        "--override",
        "stats.latency_bucket=32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["config"]["stats"]["latency_bucket"], 32);
    assert_eq!(json["cores"].as_array().unwrap().len(), 4);
    assert_eq!(json["requests"].as_array().unwrap().len(), 2);
    let total = json["total_cycles"].as_u64().unwrap();
    assert!(total > 0);

    let csv = std::fs::read_to_string(dir.join("run.timeline.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, 1 + total.div_ceil(500));
    assert!(csv.starts_with("window_start,window_end,core0_systolic"));

    let hist = std::fs::read_to_string(dir.join("run.latency.csv")).unwrap();
    assert!(hist.starts_with("latency_bucket_start,count\n"));
    assert!(hist.lines().skip(1).all(|l| l.split(',').next().unwrap().parse::<u64>().unwrap() % 32 == 0));

    let trace = std::fs::read_to_string(dir.join("run.trace")).unwrap();
    assert!(trace.lines().any(|l| l.contains(" issue core=")));
    assert!(trace.lines().any(|l| l.contains(" dispatch tile=")));
}

#[test]
fn report_goes_to_stdout_without_path() {
    let dir = scratch("stdout");
    let wl = dir.join("w.json");
    std::fs::write(&wl, r#"[{"request_id": "g", "model_file": "synthetic:gemm:m=16,k=16,n=16"}]"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_npusim"))
        .current_dir(&dir)
        .args(["simulate", "--config", "server", "--workload", wl.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["total_cycles"].as_u64().unwrap() > 0);
    assert!(dir.join("npusim.latency.csv").exists());
}

#[test]
fn identical_runs_give_identical_reports() {
    let dir = scratch("det");
    let wl = dir.join("w.json");
    std::fs::write(&wl, WORKLOAD).unwrap();
    let run = || npusim(&["simulate", "--config", "mobile", "--workload", wl.to_str().unwrap()]).stdout;
    assert_eq!(run(), run());
}

#[test]
fn models_resolve_by_registered_name() {
    let dir = scratch("model");
    let model = dir.join("tiny.json");
    let graph = serde_json::json!({
        "name": "tiny",
        "tensors": [
            {"name": "a", "shape": [16, 32], "dtype": "fp16", "kind": "input"},
            {"name": "b", "shape": [32, 16], "dtype": "fp16", "kind": "weight"},
            {"name": "c", "shape": [16, 16], "dtype": "fp16", "kind": "output"}
        ],
        "nodes": [{"id": "mm", "op_type": "MatMul", "inputs": ["a", "b"], "outputs": ["c"]}]
    });
    std::fs::write(&model, graph.to_string()).unwrap();
    let wl = scratch("model-wl").join("w.json");
    std::fs::write(&wl, r#"[{"request_id": "x", "model_file": "tiny"}]"#).unwrap();
    let out = npusim(&[
        "simulate",
        "--config",
        "mobile",
        "--workload",
        wl.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--report",
        dir.join("r.json").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = scratch("err");
    let wl = dir.join("w.json");
    std::fs::write(&wl, WORKLOAD).unwrap();
    let w = wl.to_str().unwrap();

    let out = npusim(&["simulate", "--config", "nope", "--workload", w]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = npusim(&["simulate", "--config", "mobile", "--workload", w, "--override", "dram.channels=0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dram.channels"));

    std::fs::write(&wl, r#"[{"request_id": "a", "model_file": "missing.json"}]"#).unwrap();
    let out = npusim(&["simulate", "--config", "mobile", "--workload", w]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = npusim(&["simulate", "--config", "mobile"]);
    assert!(!out.status.success());
}

#[test]
fn tiles_dumps_lowered_programs() {
    let out = npusim(&["tiles", "--config", "mobile", "--model", "synthetic:gemm:m=16,k=16,n=16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("tile 0 node=gemm"));
    assert!(text.contains("GEMM_PRELOAD"));
    assert!(text.contains("MVOUT"));

    let out = npusim(&[
        "tiles",
        "--config",
        "mobile",
        "--model",
        "synthetic:transformer_block:d_model=64,heads=4,kv_heads=2",
        "--bind",
        "kv_len=32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = npusim(&["tiles", "--config", "mobile", "--model", "synthetic:transformer_block:d_model=64,heads=4,kv_heads=2"]);
    assert!(!out.status.success(), "unbound kv_len must be rejected");
}
