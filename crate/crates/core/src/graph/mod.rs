//! Neutral JSON compute-graph IR.
//!
//! A [`ModelGraph`] is a table of tensors plus a list of operator nodes. Edges are
//! implied: a node consumes the tensors named in `inputs` and produces the ones named
//! in `outputs`. Shapes may carry symbolic dimensions (plain names such as `"kv_len"`)
//! until [`bind_shapes`] substitutes integers for them.

mod fuse;
mod order;
pub(crate) mod shape;
mod validate;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fuse::fuse_operators;
pub use order::topological_order;
pub use shape::{bind_shapes, Bindings};
pub use validate::{validate_graph, ValidationReport, Violation};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("malformed graph JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("node `{node}` uses unsupported operator `{op}`")]
    UnsupportedOperator { node: String, op: String },
    #[error("node `{node}` references undeclared tensor `{tensor}`")]
    Linkage { node: String, tensor: String },
    #[error("duplicate {what} `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error("unbound symbolic dimension `{0}`")]
    UnboundSymbol(String),
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("invalid attribute `{attr}` on node `{node}`: {detail}")]
    InvalidAttribute {
        node: String,
        attr: String,
        detail: String,
    },
    #[error("graph contains a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Int8,
    Fp16,
    Fp32,
}

impl DType {
    pub fn width(self) -> u64 {
        match self {
            DType::Int8 => 1,
            DType::Fp16 => 2,
            DType::Fp32 => 4,
        }
    }
}

/// One tensor dimension: a concrete extent or a symbol awaiting a binding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dim {
    Fixed(u64),
    Sym(String),
}

impl Dim {
    pub fn fixed(&self) -> Option<u64> {
        match self {
            Dim::Fixed(v) => Some(*v),
            Dim::Sym(_) => None,
        }
    }
}

impl From<u64> for Dim {
    fn from(v: u64) -> Self {
        Dim::Fixed(v)
    }
}

impl From<&str> for Dim {
    fn from(s: &str) -> Self {
        Dim::Sym(s.to_string())
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(v) => write!(f, "{v}"),
            Dim::Sym(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Input,
    Output,
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<Dim>,
    pub kind: TensorKind,
}

impl TensorDesc {
    pub fn new(name: &str, dtype: DType, shape: Vec<Dim>, kind: TensorKind) -> Self {
        Self {
            name: name.to_string(),
            dtype,
            shape,
            kind,
        }
    }

    /// Concrete dims, or `None` while any dim is symbolic.
    pub fn dims(&self) -> Option<Vec<u64>> {
        self.shape.iter().map(Dim::fixed).collect()
    }

    pub fn is_concrete(&self) -> bool {
        self.shape.iter().all(|d| d.fixed().is_some())
    }

    pub fn numel(&self) -> Option<u64> {
        self.dims().map(|d| d.iter().product())
    }

    pub fn byte_size(&self) -> Option<u64> {
        self.numel().map(|n| n * self.dtype.width())
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.shape.iter().filter_map(|d| match d {
            Dim::Sym(s) => Some(s.as_str()),
            Dim::Fixed(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpType {
    Gemm,
    MatMul,
    Conv2D,
    Add,
    Mul,
    GELU,
    ReLU,
    Softmax,
    LayerNorm,
}

impl OpType {
    pub const ALL: [OpType; 9] = [
        OpType::Gemm,
        OpType::MatMul,
        OpType::Conv2D,
        OpType::Add,
        OpType::Mul,
        OpType::GELU,
        OpType::ReLU,
        OpType::Softmax,
        OpType::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpType::Gemm => "Gemm",
            OpType::MatMul => "MatMul",
            OpType::Conv2D => "Conv2D",
            OpType::Add => "Add",
            OpType::Mul => "Mul",
            OpType::GELU => "GELU",
            OpType::ReLU => "ReLU",
            OpType::Softmax => "Softmax",
            OpType::LayerNorm => "LayerNorm",
        }
    }

    pub fn from_name(name: &str) -> Option<OpType> {
        OpType::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Allowed (min, max) input count and exact output count, before fusion extras.
    pub fn arity(self) -> ((usize, usize), usize) {
        match self {
            OpType::Gemm | OpType::Conv2D => ((2, 3), 1),
            OpType::MatMul | OpType::Add | OpType::Mul => ((2, 2), 1),
            OpType::GELU | OpType::ReLU | OpType::Softmax => ((1, 1), 1),
            OpType::LayerNorm => ((1, 3), 1),
        }
    }

    pub fn is_activation(self) -> bool {
        matches!(self, OpType::GELU | OpType::ReLU)
    }

    pub fn is_gemm_like(self) -> bool {
        matches!(self, OpType::Gemm | OpType::MatMul | OpType::Conv2D)
    }

    /// Fused tags that bring an extra input tensor with them.
    pub fn takes_fused_operand(self) -> bool {
        matches!(self, OpType::Add | OpType::Mul)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: String,
    pub op_type: OpType,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fused_ops: Vec<OpType>,
}

impl OpNode {
    pub fn new(id: &str, op_type: OpType, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            op_type,
            attrs: BTreeMap::new(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            fused_ops: Vec::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: serde_json::Value) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).and_then(|v| v.as_i64())
    }

    pub fn attr_ints(&self, key: &str) -> Option<Vec<i64>> {
        match self.attrs.get(key)? {
            serde_json::Value::Array(items) => items.iter().map(|v| v.as_i64()).collect(),
            serde_json::Value::Number(n) => n.as_i64().map(|v| vec![v]),
            _ => None,
        }
    }

    /// Inputs of the base operator, excluding operands brought in by fused tags.
    pub fn base_inputs(&self) -> &[String] {
        let n = self.inputs.len().saturating_sub(self.fused_operand_count());
        &self.inputs[..n]
    }

    /// Operands of fused `Add`/`Mul` tags, in fused-op order.
    pub fn fused_inputs(&self) -> &[String] {
        &self.inputs[self.base_inputs().len()..]
    }

    /// Number of inputs the node's fused tags contribute on top of the base signature.
    pub fn fused_operand_count(&self) -> usize {
        self.fused_ops
            .iter()
            .filter(|op| op.takes_fused_operand())
            .count()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub tensors: Vec<TensorDesc>,
    pub nodes: Vec<OpNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.tensors == other.tensors && self.nodes == other.nodes
    }
}

impl ModelGraph {
    pub fn new(name: &str, tensors: Vec<TensorDesc>, nodes: Vec<OpNode>) -> Self {
        let mut g = Self {
            name: name.to_string(),
            tensors,
            nodes,
            index: HashMap::new(),
        };
        g.reindex();
        g
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDesc> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn is_concrete(&self) -> bool {
        self.tensors.iter().all(TensorDesc::is_concrete)
    }

    /// Every symbol used by any tensor shape, sorted and deduplicated.
    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .tensors
            .iter()
            .flat_map(|t| t.symbols().map(str::to_string))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Producer node indices per tensor name, in file order.
    pub fn producers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.outputs {
                map.entry(t.as_str()).or_default().push(i);
            }
        }
        map
    }

    /// Consumer node indices per tensor name, in file order.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.inputs {
                let entry = map.entry(t.as_str()).or_default();
                if entry.last() != Some(&i) {
                    entry.push(i);
                }
            }
        }
        map
    }

    /// Deduplicated predecessor node indices of every node (sorted).
    pub fn node_predecessors(&self) -> Vec<Vec<usize>> {
        let producers = self.producers();
        self.nodes
            .iter()
            .map(|n| {
                let mut preds: Vec<usize> = n
                    .inputs
                    .iter()
                    .filter_map(|t| producers.get(t.as_str()))
                    .flatten()
                    .copied()
                    .collect();
                preds.sort_unstable();
                preds.dedup();
                preds
            })
            .collect()
    }

    /// Names of graph-level inputs and outputs (by tensor kind), each sorted.
    pub fn io_names(&self) -> (Vec<String>, Vec<String>) {
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for t in &self.tensors {
            match t.kind {
                TensorKind::Input => ins.push(t.name.clone()),
                TensorKind::Output => outs.push(t.name.clone()),
                _ => {}
            }
        }
        ins.sort();
        outs.sort();
        (ins, outs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }
}

#[derive(Deserialize)]
struct RawGraph {
    name: String,
    tensors: Vec<TensorDesc>,
    nodes: Vec<RawNode>,
}

#[derive(Deserialize)]
struct RawNode {
    id: String,
    op_type: String,
    #[serde(default)]
    attrs: BTreeMap<String, serde_json::Value>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default)]
    fused_ops: Vec<String>,
}

/// Parse a graph document, checking operator support and tensor linkage.
pub fn parse_graph(text: &str) -> Result<ModelGraph, GraphError> {
    let raw: RawGraph = serde_json::from_str(text).map_err(|e| GraphError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut seen = HashMap::new();
    for t in &raw.tensors {
        if seen.insert(t.name.as_str(), ()).is_some() {
            return Err(GraphError::Duplicate {
                what: "tensor",
                name: t.name.clone(),
            });
        }
    }
    let mut node_ids = HashMap::new();
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for rn in raw.nodes {
        if node_ids.insert(rn.id.clone(), ()).is_some() {
            return Err(GraphError::Duplicate {
                what: "node",
                name: rn.id,
            });
        }
        let op_type = OpType::from_name(&rn.op_type).ok_or_else(|| {
            GraphError::UnsupportedOperator {
                node: rn.id.clone(),
                op: rn.op_type.clone(),
            }
        })?;
        let fused_ops = rn
            .fused_ops
            .iter()
            .map(|f| {
                OpType::from_name(f).ok_or_else(|| GraphError::UnsupportedOperator {
                    node: rn.id.clone(),
                    op: f.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for t in rn.inputs.iter().chain(&rn.outputs) {
            if !seen.contains_key(t.as_str()) {
                return Err(GraphError::Linkage {
                    node: rn.id.clone(),
                    tensor: t.clone(),
                });
            }
        }
        nodes.push(OpNode {
            id: rn.id,
            op_type,
            attrs: rn.attrs,
            inputs: rn.inputs,
            outputs: rn.outputs,
            fused_ops,
        });
    }
    Ok(ModelGraph::new(&raw.name, raw.tensors, nodes))
}
