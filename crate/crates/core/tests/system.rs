use npusim::config::Policy;
use npusim::*;

fn model(spec: &str) -> ModelGraph {
    synthetic_from_spec(spec).unwrap()
}

fn mobile() -> SimConfig {
    SimConfig::preset("mobile").unwrap()
}

#[test]
fn spatial_partition_confines_tenants() {
    let mut cfg = mobile();
    cfg.scheduler.policy = Policy::Spatial;
    cfg.scheduler.partition.insert("a".into(), vec![1]);
    cfg.scheduler.partition.insert("b".into(), vec![3]);
    let reqs = vec![
        InferenceRequest::new("a", model("mlp:width=64"), 4, 0),
        InferenceRequest::new("b", model("conv_block:channels=8,size=8"), 1, 0),
    ];
    let r = simulate(&cfg, reqs).unwrap();
    let tiles: Vec<u64> = r.cores.iter().map(|c| c.tiles_completed).collect();
    assert_eq!(tiles[0], 0);
    assert_eq!(tiles[2], 0);
    assert!(tiles[1] > 0 && tiles[3] > 0);
    assert!(r.conservation.holds());
}

#[test]
fn nothing_runs_before_arrival() {
    let mut cfg = mobile();
    cfg.stats.trace = true;
    let r = simulate(&cfg, vec![InferenceRequest::new("late", model("gemm:m=32,k=32,n=32"), 1, 10_000)]).unwrap();
    let trace = r.trace.as_ref().unwrap();
    assert!(trace.dispatches.iter().all(|d| d.cycle >= 10_000));
    let req = r.request("late").unwrap();
    assert_eq!(req.latency, req.completion - 10_000);
    assert!(r.cores.iter().all(|c| c.busy_cycles <= r.total_cycles - 10_000 + 1));
}

#[test]
fn time_share_interleaves_requests() {
    let mut cfg = mobile();
    cfg.stats.node_records = true;
    let reqs = vec![
        InferenceRequest::new("x", model("mlp:layers=4,width=64"), 8, 0),
        InferenceRequest::new("y", model("mlp:layers=4,width=64"), 8, 0),
    ];
    let r = simulate(&cfg, reqs).unwrap();
    let nodes = r.nodes.as_ref().unwrap();
    let first_start = |id: &str| nodes.iter().filter(|n| n.request_id == id).filter_map(|n| n.start).min().unwrap();
    let x_done = r.request("x").unwrap().completion;
    let y_done = r.request("y").unwrap().completion;
    // Neither request runs to completion before the other begins.
    assert!(first_start("y") < x_done && first_start("x") < y_done);
}

#[test]
fn generative_tokens_slow_down_as_the_cache_grows() {
    let g = model("transformer_block:d_model=64,heads=4,kv_heads=2");
    let r = simulate(&mobile(), vec![InferenceRequest::new("llm", g, 1, 0).generative(16, 40)]).unwrap();
    let req = r.request("llm").unwrap();
    assert_eq!(req.tbt.len(), 40);
    assert_eq!(req.tbt.iter().sum::<u64>(), req.latency);
    let head: u64 = req.tbt[1..6].iter().sum();
    let tail: u64 = req.tbt[35..40].iter().sum();
    assert!(tail > head, "TBT {:?}", req.tbt);
    let p = r.tbt.unwrap();
    assert!(p.p50 <= p.p95 && p.p95 <= p.p99);
}

#[test]
fn bad_workloads_are_rejected() {
    let cfg = mobile();
    let dup = vec![
        InferenceRequest::new("a", model("gemm:m=8,k=8,n=8"), 1, 0),
        InferenceRequest::new("a", model("gemm:m=8,k=8,n=8"), 1, 0),
    ];
    assert!(matches!(simulate(&cfg, dup), Err(SimError::Workload(_))));

    let mut spatial = mobile();
    spatial.scheduler.policy = Policy::Spatial;
    spatial.scheduler.partition.insert("a".into(), vec![0]);
    let orphan = vec![InferenceRequest::new("b", model("gemm:m=8,k=8,n=8"), 1, 0)];
    assert!(simulate(&spatial, orphan).is_err());

    // kv_len left unbound.
    let g = model("transformer_block:d_model=64,heads=4,kv_heads=2");
    assert!(simulate(&cfg, vec![InferenceRequest::new("t", g, 1, 0)]).is_err());
}

#[test]
fn timeline_covers_the_run() {
    let mut cfg = mobile();
    cfg.stats.timeline_window = Some(700);
    let r = simulate(&cfg, vec![InferenceRequest::new("c", model("conv_block:channels=16,size=8"), 2, 0)]).unwrap();
    let csv = r.timeline_csv().unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len() as u64, r.total_cycles.div_ceil(700));
    for row in rows {
        let cols: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        let util = *cols.last().unwrap();
        assert!((0.0..=1.0).contains(&util), "{row}");
        assert!(cols[2..cols.len() - 2].iter().all(|&f| (0.0..=1.0).contains(&f)), "{row}");
    }
    let bytes: u64 = csv.lines().skip(1).map(|l| l.split(',').rev().nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert!(bytes <= r.dram.bytes);
}

#[test]
fn workload_file_with_graph_json() {
    let dir = std::env::temp_dir().join(format!("npusim-system-{}", std::process::id()));
    std::fs::create_dir_all(dir.join("models")).unwrap();
    let graph = serde_json::json!({
        "name": "mm",
        "tensors": [
            {"name": "a", "shape": ["batch", 32], "dtype": "int8", "kind": "input"},
            {"name": "w", "shape": [32, 16], "dtype": "int8", "kind": "weight"},
            {"name": "y", "shape": ["batch", 16], "dtype": "int8", "kind": "output"}
        ],
        "nodes": [{"id": "mm", "op_type": "MatMul", "inputs": ["a", "w"], "outputs": ["y"]}]
    });
    std::fs::write(dir.join("models/mm.json"), graph.to_string()).unwrap();
    std::fs::write(
        dir.join("w.json"),
        r#"[{"request_id": "r0", "model_file": "models/mm.json", "batch": 8},
            {"request_id": "r1", "model_file": "models/mm.json", "batch": 3, "arrival_cycle": 400}]"#,
    )
    .unwrap();
    let reqs = load_workload(&dir.join("w.json"), &[]).unwrap();
    assert_eq!(reqs.len(), 2);
    let r = simulate(&mobile(), reqs).unwrap();
    assert_eq!(r.requests.len(), 2);
    assert!(r.request("r1").unwrap().completion > 400);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_json_has_stable_top_level_keys() {
    let r = simulate(&mobile(), vec![InferenceRequest::new("g", model("gemm:m=16,k=16,n=16"), 1, 0)]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["config", "total_cycles", "drained_cycle", "cores", "dram", "noc", "requests", "conservation"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert!(r.drained_cycle >= r.total_cycles);
}
