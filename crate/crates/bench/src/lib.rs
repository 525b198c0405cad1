//! Workloads shared by the benchmarks.

use npusim::config::Policy;
use npusim::{synthetic_from_spec, InferenceRequest, SimConfig};

pub fn gemm(preset: &str, m: u64, k: u64, n: u64) -> (SimConfig, Vec<InferenceRequest>) {
    let cfg = SimConfig::preset(preset).expect("shipped preset");
    let g = synthetic_from_spec(&format!("gemm:m={m},k={k},n={n}")).expect("valid gemm");
    (cfg, vec![InferenceRequest::new("gemm", g, 1, 0)])
}

/// A decoder stream on core 0 next to a convolution job on cores 1-3.
pub fn multi_tenant(tokens: u64, conv_batch: u64) -> (SimConfig, Vec<InferenceRequest>) {
    let mut cfg = SimConfig::preset("mobile").expect("shipped preset");
    cfg.scheduler.policy = Policy::Spatial;
    cfg.scheduler.partition.insert("llm".into(), vec![0]);
    cfg.scheduler.partition.insert("cnn".into(), vec![1, 2, 3]);
    let llm = synthetic_from_spec("transformer_block:d_model=64,heads=4,kv_heads=4").expect("valid block");
    let conv = synthetic_from_spec("conv_block:channels=16,size=16").expect("valid conv");
    let reqs = vec![
        InferenceRequest::new("llm", llm, 1, 0).generative(32, tokens).with_tenant("llm"),
        InferenceRequest::new("cnn", conv, conv_batch, 0).with_tenant("cnn"),
    ];
    (cfg, reqs)
}
