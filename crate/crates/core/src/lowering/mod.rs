//! Operator nodes to tile programs.
//!
//! Every node becomes a list of [`TileProgram`]s, each sized to one scratchpad and
//! accumulator partition. GEMM-like nodes split into an (m, n, k) tile grid; tiles
//! accumulating into the same output block are chained along k. Vector nodes split
//! into row or element chunks.

mod address;
mod conv;
mod gemm;
mod tiling;
mod vector;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::config::SimConfig;
use crate::graph::{topological_order, GraphError, ModelGraph, OpNode, OpType};
use crate::isa::{Instruction, Opcode};

pub use address::{AddressMap, Region};
pub use tiling::{candidates, search_tile, TileBudget, TileShape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoweringError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node `{node}` has a degenerate problem size {dims:?}")]
    Degenerate { node: String, dims: Vec<u64> },
    #[error("node `{node}`: normalization axis of {axis} elements exceeds the {capacity}-element partition")]
    AxisTooLarge { node: String, axis: u64, capacity: u64 },
    #[error("node `{node}`: tile needs {need} bytes of {what} but a partition holds {have}")]
    Footprint {
        node: String,
        what: &'static str,
        need: u64,
        have: u64,
    },
    #[error("node `{node}`: unsupported attribute `{attr}`: {detail}")]
    Unsupported {
        node: String,
        attr: String,
        detail: String,
    },
    #[error("tensor `{0}` has no DRAM address")]
    Unmapped(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TileProgram {
    pub id: u64,
    pub owner_node: String,
    pub request_id: String,
    pub instrs: Vec<Instruction>,
    pub spm_bytes: u64,
    pub acc_bytes: u64,
    /// Tiles that must finish (or, for `chain_pred`, be dispatched) first.
    pub preds: Vec<u64>,
    /// Previous tile accumulating into the same output block.
    pub chain_pred: Option<u64>,
}

impl TileProgram {
    pub fn dram_bytes(&self) -> u64 {
        self.instrs.iter().filter(|i| i.opcode.is_dma()).map(Instruction::bytes).sum()
    }

    /// (preload+gemm pairs)
    pub fn gemm_blocks(&self) -> usize {
        self.instrs.iter().filter(|i| i.opcode == Opcode::Gemm).count()
    }
}

/// Shared state across the nodes of one lowering session.
pub struct LowerCtx<'a> {
    pub cfg: &'a SimConfig,
    pub addrs: &'a AddressMap,
    pub request_id: String,
    cache: HashMap<((u64, u64, u64), TileBudget), Option<TileShape>>,
}

impl<'a> LowerCtx<'a> {
    pub fn new(cfg: &'a SimConfig, addrs: &'a AddressMap, request_id: &str) -> Self {
        Self {
            cfg,
            addrs,
            request_id: request_id.to_string(),
            cache: HashMap::new(),
        }
    }

    pub(crate) fn gemm_tile(&mut self, dims: (u64, u64, u64), budget: TileBudget) -> Option<TileShape> {
        *self
            .cache
            .entry((dims, budget))
            .or_insert_with(|| search_tile(dims, &budget, &|_, _| 0, true))
    }

    pub(crate) fn addr(&self, tensor: &str) -> Result<u64, LoweringError> {
        self.addrs
            .get(tensor)
            .map(|r| r.addr)
            .ok_or_else(|| LoweringError::Unmapped(tensor.to_string()))
    }

    fn finish(&self, node: &OpNode, mut tiles: Vec<TileProgram>) -> Result<Vec<TileProgram>, LoweringError> {
        let spm = self.cfg.core.spm_partition_bytes();
        let acc = self.cfg.core.acc_partition_bytes();
        for (i, t) in tiles.iter_mut().enumerate() {
            debug_assert_eq!(t.id, i as u64);
            t.owner_node = node.id.clone();
            t.request_id = self.request_id.clone();
            if t.spm_bytes > spm {
                return Err(LoweringError::Footprint {
                    node: node.id.clone(),
                    what: "scratchpad",
                    need: t.spm_bytes,
                    have: spm,
                });
            }
            if t.acc_bytes > acc {
                return Err(LoweringError::Footprint {
                    node: node.id.clone(),
                    what: "accumulator",
                    need: t.acc_bytes,
                    have: acc,
                });
            }
        }
        Ok(tiles)
    }
}

/// Tile shape the GEMM lowering would pick for a Gemm/MatMul/Conv2D node.
pub fn select_tile_shape(g: &ModelGraph, node: &OpNode, cfg: &SimConfig) -> Result<TileShape, LoweringError> {
    match node.op_type {
        OpType::Gemm | OpType::MatMul => gemm::tile_for(g, node, cfg),
        OpType::Conv2D => conv::tile_for(g, node, cfg),
        _ => Err(LoweringError::Unsupported {
            node: node.id.clone(),
            attr: "op_type".into(),
            detail: format!("{} has no GEMM view", node.op_type),
        }),
    }
}

/// Lower one node of a concrete graph. Tile ids are local (0-based) to the node.
pub fn lower_node(g: &ModelGraph, node: &OpNode, ctx: &mut LowerCtx) -> Result<Vec<TileProgram>, LoweringError> {
    let tiles = match node.op_type {
        OpType::Gemm | OpType::MatMul => gemm::lower_gemm(g, node, ctx)?,
        OpType::Conv2D => conv::lower_conv(g, node, ctx)?,
        _ => vector::lower_vector_node(g, node, ctx)?,
    };
    ctx.finish(node, tiles)
}

/// Whole-graph lowering with global tile ids and cross-node dependencies.
#[derive(Debug, Clone)]
pub struct LoweredGraph {
    pub tiles: Vec<TileProgram>,
    /// Node id -> range of tile ids.
    pub node_tiles: BTreeMap<String, std::ops::Range<u64>>,
}

pub fn lower_graph(g: &ModelGraph, cfg: &SimConfig, request_id: &str) -> Result<LoweredGraph, LoweringError> {
    let addrs = AddressMap::build(g, cfg.dram.base_addr, cfg.dram.access_bytes)?;
    let mut ctx = LowerCtx::new(cfg, &addrs, request_id);
    let mut tiles = Vec::new();
    let mut node_tiles = BTreeMap::new();
    for id in topological_order(g)? {
        let node = g.node(&id).expect("ordered id exists");
        let base = tiles.len() as u64;
        for mut t in lower_node(g, node, &mut ctx)? {
            t.id += base;
            t.chain_pred = t.chain_pred.map(|p| p + base);
            for p in &mut t.preds {
                *p += base;
            }
            tiles.push(t);
        }
        node_tiles.insert(id, base..tiles.len() as u64);
    }
    build_tile_dependencies(&mut tiles, &addrs);
    Ok(LoweredGraph { tiles, node_tiles })
}

fn touched(t: &TileProgram, addrs: &AddressMap, op: Opcode) -> BTreeSet<String> {
    t.instrs
        .iter()
        .filter(|i| i.opcode == op)
        .filter_map(|i| i.dram_addr.and_then(|a| addrs.tensor_at(a)))
        .map(str::to_string)
        .collect()
}

/// Add cross-node edges: a tile depends on every tile of another node that writes a
/// tensor it reads (whole-tensor granularity). Intra-node K-chains are kept.
pub fn build_tile_dependencies(tiles: &mut [TileProgram], addrs: &AddressMap) {
    let writes: Vec<BTreeSet<String>> = tiles.iter().map(|t| touched(t, addrs, Opcode::Mvout)).collect();
    let mut writers: BTreeMap<&str, Vec<(u64, &str)>> = BTreeMap::new();
    for (t, w) in tiles.iter().zip(&writes) {
        for name in w {
            writers.entry(name.as_str()).or_default().push((t.id, t.owner_node.as_str()));
        }
    }
    let extra: Vec<Vec<u64>> = tiles
        .iter()
        .map(|t| {
            let mut preds: Vec<u64> = touched(t, addrs, Opcode::Mvin)
                .iter()
                .filter_map(|name| writers.get(name.as_str()))
                .flatten()
                .filter(|(_, owner)| *owner != t.owner_node)
                .map(|(id, _)| *id)
                .collect();
            preds.extend(t.preds.iter().copied());
            preds.sort_unstable();
            preds.dedup();
            preds
        })
        .collect();
    for (t, p) in tiles.iter_mut().zip(extra) {
        t.preds = p;
    }
}

/// Stable text listing, one instruction per line.
pub fn dump_tiles(tiles: &[TileProgram]) -> String {
    let mut out = String::new();
    for t in tiles {
        let _ = write!(
            out,
            "tile {} node={} request={} spm={} acc={} preds={:?}",
            t.id, t.owner_node, t.request_id, t.spm_bytes, t.acc_bytes, t.preds
        );
        if let Some(c) = t.chain_pred {
            let _ = write!(out, " chain={c}");
        }
        out.push('\n');
        for (i, ins) in t.instrs.iter().enumerate() {
            let _ = writeln!(out, "  {i:>3}: {ins}");
        }
    }
    out
}
