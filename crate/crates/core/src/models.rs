//! Synthetic model builders, addressable from workloads as `synthetic:<kind>:k=v,...`.

use std::collections::BTreeMap;

use serde_json::json;

use crate::config::ConfigError;
use crate::graph::{DType, Dim, ModelGraph, OpNode, OpType, TensorDesc, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticModel {
    /// One `[M, K] x [K, N]` MatMul.
    Gemm { m: u64, k: u64, n: u64 },
    /// `layers` fully connected layers of `width`, GELU in between; input `[batch, width]`.
    Mlp { layers: u64, width: u64 },
    /// Residual block: conv3x3 -> ReLU -> conv3x3 -> Add(input) -> ReLU; input `[batch, C, H, W]`.
    ConvBlock { channels: u64, size: u64 },
    /// One decoder block over a KV cache of symbolic length `kv_len`.
    TransformerBlock { d_model: u64, heads: u64, kv_heads: u64, seq: u64 },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_dtype(s: &str) -> Result<DType, ConfigError> {
    match s {
        "int8" => Ok(DType::Int8),
        "fp16" => Ok(DType::Fp16),
        "fp32" => Ok(DType::Fp32),
        _ => Err(invalid("dtype", format!("unknown dtype `{s}`"))),
    }
}

/// Parse `kind:k=v,...` (the part after `synthetic:`). Returns the model and its dtype.
pub fn parse_synthetic(spec: &str) -> Result<(SyntheticModel, DType), ConfigError> {
    let (kind, args) = spec.split_once(':').unwrap_or((spec, ""));
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for part in args.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| invalid(part, "expected key=value"))?;
        kv.insert(k.trim(), v.trim());
    }
    let dtype = kv.remove("dtype").map(parse_dtype).transpose()?.unwrap_or(DType::Fp16);
    let mut take = |key: &str, default: Option<u64>| -> Result<u64, ConfigError> {
        match kv.remove(key) {
            Some(v) => v.parse().map_err(|_| invalid(key, format!("`{v}` is not an integer"))),
            None => default.ok_or_else(|| ConfigError::MissingField(format!("synthetic:{kind}.{key}"))),
        }
    };
    let model = match kind {
        "gemm" => SyntheticModel::Gemm {
            m: take("m", None)?,
            k: take("k", None)?,
            n: take("n", None)?,
        },
        "mlp" => SyntheticModel::Mlp {
            layers: take("layers", Some(2))?,
            width: take("width", None)?,
        },
        "conv_block" => SyntheticModel::ConvBlock {
            channels: take("channels", Some(16))?,
            size: take("size", Some(16))?,
        },
        "transformer_block" => SyntheticModel::TransformerBlock {
            d_model: take("d_model", None)?,
            heads: take("heads", None)?,
            kv_heads: take("kv_heads", None)?,
            seq: take("seq", Some(1))?,
        },
        _ => return Err(invalid("model_file", format!("unknown synthetic model `{kind}`"))),
    };
    if let Some(k) = kv.keys().next() {
        return Err(invalid(k, format!("unknown parameter for synthetic model `{kind}`")));
    }
    Ok((model, dtype))
}

/// Build from a `kind:k=v,...` spec.
pub fn synthetic_from_spec(spec: &str) -> Result<ModelGraph, ConfigError> {
    let (m, dtype) = parse_synthetic(spec)?;
    build_synthetic_model(m, dtype)
}

struct Builder {
    dtype: DType,
    tensors: Vec<TensorDesc>,
    nodes: Vec<OpNode>,
}

impl Builder {
    fn tensor(&mut self, name: &str, shape: Vec<Dim>, kind: TensorKind) -> String {
        self.tensors.push(TensorDesc::new(name, self.dtype, shape, kind));
        name.to_string()
    }

    fn node(&mut self, node: OpNode) {
        self.nodes.push(node);
    }

    fn finish(self, name: &str) -> ModelGraph {
        ModelGraph::new(name, self.tensors, self.nodes)
    }
}

fn d(v: u64) -> Dim {
    Dim::Fixed(v)
}

fn sym(s: &str) -> Dim {
    Dim::Sym(s.to_string())
}

pub fn build_synthetic_model(model: SyntheticModel, dtype: DType) -> Result<ModelGraph, ConfigError> {
    let positive = |field: &str, v: u64| if v == 0 { Err(invalid(field, "must be positive")) } else { Ok(()) };
    let mut b = Builder {
        dtype,
        tensors: Vec::new(),
        nodes: Vec::new(),
    };
    use TensorKind::*;
    match model {
        SyntheticModel::Gemm { m, k, n } => {
            positive("m", m)?;
            positive("k", k)?;
            positive("n", n)?;
            let a = b.tensor("A", vec![d(m), d(k)], Input);
            let w = b.tensor("B", vec![d(k), d(n)], Weight);
            let y = b.tensor("Y", vec![d(m), d(n)], Output);
            b.node(OpNode::new("gemm", OpType::MatMul, &[&a, &w], &[&y]));
            Ok(b.finish(&format!("gemm_{m}x{k}x{n}")))
        }
        SyntheticModel::Mlp { layers, width } => {
            positive("layers", layers)?;
            positive("width", width)?;
            let mut x = b.tensor("x", vec![sym("batch"), d(width)], Input);
            for l in 0..layers {
                if l > 0 {
                    let act = b.tensor(&format!("a{l}"), vec![sym("batch"), d(width)], Activation);
                    b.node(OpNode::new(&format!("gelu{l}"), OpType::GELU, &[&x], &[&act]));
                    x = act;
                }
                let w = b.tensor(&format!("w{l}"), vec![d(width), d(width)], Weight);
                let bias = b.tensor(&format!("b{l}"), vec![d(width)], Weight);
                let kind = if l + 1 == layers { Output } else { Activation };
                let y = b.tensor(&format!("h{l}"), vec![sym("batch"), d(width)], kind);
                b.node(OpNode::new(&format!("fc{l}"), OpType::Gemm, &[&x, &w, &bias], &[&y]));
                x = y;
            }
            Ok(b.finish(&format!("mlp_{layers}x{width}")))
        }
        SyntheticModel::ConvBlock { channels: c, size: s } => {
            positive("channels", c)?;
            positive("size", s)?;
            let act = |b: &mut Builder, name: &str, kind| b.tensor(name, vec![sym("batch"), d(c), d(s), d(s)], kind);
            let x = act(&mut b, "x", Input);
            let w1 = b.tensor("w1", vec![d(c), d(c), d(3), d(3)], Weight);
            let w2 = b.tensor("w2", vec![d(c), d(c), d(3), d(3)], Weight);
            let c1 = act(&mut b, "c1", Activation);
            let r1 = act(&mut b, "r1", Activation);
            let c2 = act(&mut b, "c2", Activation);
            let sum = act(&mut b, "sum", Activation);
            let y = act(&mut b, "y", Output);
            let conv = |id: &str, x: &str, w: &str, y: &str| {
                OpNode::new(id, OpType::Conv2D, &[x, w], &[y])
                    .with_attr("pads", json!([1, 1, 1, 1]))
                    .with_attr("strides", json!([1, 1]))
            };
            b.node(conv("conv1", &x, &w1, &c1));
            b.node(OpNode::new("relu1", OpType::ReLU, &[&c1], &[&r1]));
            b.node(conv("conv2", &r1, &w2, &c2));
            b.node(OpNode::new("add", OpType::Add, &[&c2, &x], &[&sum]));
            b.node(OpNode::new("relu2", OpType::ReLU, &[&sum], &[&y]));
            Ok(b.finish(&format!("conv_block_{c}x{s}")))
        }
        SyntheticModel::TransformerBlock { d_model, heads, kv_heads, seq } => {
            positive("d_model", d_model)?;
            positive("heads", heads)?;
            positive("kv_heads", kv_heads)?;
            positive("seq", seq)?;
            if heads % kv_heads != 0 {
                return Err(invalid("heads", format!("{heads} heads are not divisible into {kv_heads} kv groups")));
            }
            if d_model % heads != 0 {
                return Err(invalid("d_model", format!("{d_model} is not divisible by {heads} heads")));
            }
            let hd = d_model / heads;
            let g = heads / kv_heads;
            let kv = kv_heads * hd;
            let bsd = || vec![sym("batch"), d(seq), d(d_model)];
            let x = b.tensor("x", bsd(), Input);
            let gamma = b.tensor("ln_gamma", vec![d(d_model)], Weight);
            let beta = b.tensor("ln_beta", vec![d(d_model)], Weight);
            let h = b.tensor("h", bsd(), Activation);
            b.node(OpNode::new("ln", OpType::LayerNorm, &[&x, &gamma, &beta], &[&h]).with_attr("axis", json!(-1)));

            let wq = b.tensor("wq", vec![d(d_model), d(d_model)], Weight);
            let wk = b.tensor("wk", vec![d(d_model), d(kv)], Weight);
            let wv = b.tensor("wv", vec![d(d_model), d(kv)], Weight);
            // Queries grouped per KV head: a free reshape of the projection output.
            let q = b.tensor("q", vec![sym("batch"), d(kv_heads), d(g * seq), d(hd)], Activation);
            let k_new = b.tensor("k_new", vec![sym("batch"), d(seq), d(kv)], Output);
            let v_new = b.tensor("v_new", vec![sym("batch"), d(seq), d(kv)], Output);
            b.node(OpNode::new("q_proj", OpType::MatMul, &[&h, &wq], &[&q]));
            b.node(OpNode::new("k_proj", OpType::MatMul, &[&h, &wk], &[&k_new]));
            b.node(OpNode::new("v_proj", OpType::MatMul, &[&h, &wv], &[&v_new]));

            let k_cache = b.tensor("k_cache", vec![sym("batch"), d(kv_heads), d(hd), sym("kv_len")], Input);
            let v_cache = b.tensor("v_cache", vec![sym("batch"), d(kv_heads), sym("kv_len"), d(hd)], Input);
            let score_shape = || vec![sym("batch"), d(kv_heads), d(g * seq), sym("kv_len")];
            let score = b.tensor("score", score_shape(), Activation);
            let prob = b.tensor("prob", score_shape(), Activation);
            let ctx = b.tensor("ctx", bsd(), Activation);
            b.node(OpNode::new("attn_score", OpType::MatMul, &[&q, &k_cache], &[&score]));
            b.node(OpNode::new("attn_softmax", OpType::Softmax, &[&score], &[&prob]).with_attr("axis", json!(-1)));
            b.node(OpNode::new("attn_context", OpType::MatMul, &[&prob, &v_cache], &[&ctx]));

            let wo = b.tensor("wo", vec![d(d_model), d(d_model)], Weight);
            let proj = b.tensor("proj", bsd(), Activation);
            let y = b.tensor("y", bsd(), Output);
            b.node(OpNode::new("o_proj", OpType::MatMul, &[&ctx, &wo], &[&proj]));
            b.node(OpNode::new("residual", OpType::Add, &[&proj, &x], &[&y]));
            Ok(b.finish(&format!("transformer_d{d_model}_h{heads}_kv{kv_heads}_s{seq}")))
        }
    }
}

/// Nodes whose cost depends on the KV length.
pub const ATTENTION_NODES: [&str; 3] = ["attn_score", "attn_softmax", "attn_context"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    #[test]
    fn spec_parsing() {
        let (m, dt) = parse_synthetic("gemm:m=64,k=32,n=16,dtype=int8").unwrap();
        assert_eq!(m, SyntheticModel::Gemm { m: 64, k: 32, n: 16 });
        assert_eq!(dt, DType::Int8);
        assert!(matches!(parse_synthetic("gemm:m=64,k=32"), Err(ConfigError::MissingField(_))));
        assert!(parse_synthetic("gemm:m=64,k=32,n=1,x=2").is_err());
        assert!(parse_synthetic("nope").is_err());
    }

    #[test]
    fn builders_validate() {
        for spec in [
            "gemm:m=64,k=64,n=64",
            "mlp:layers=3,width=32",
            "conv_block:channels=8,size=8",
            "transformer_block:d_model=64,heads=4,kv_heads=2",
        ] {
            let g = synthetic_from_spec(spec).unwrap();
            assert!(validate_graph(&g).is_empty(), "{spec}: {:?}", validate_graph(&g));
        }
        assert!(synthetic_from_spec("transformer_block:d_model=64,heads=4,kv_heads=3").is_err());
    }
}
