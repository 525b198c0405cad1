use super::gemm::vector_kind;
use super::{LowerCtx, LoweringError, TileProgram};
use crate::graph::shape::dims_of;
use crate::graph::{ModelGraph, OpNode, OpType};
use crate::isa::{Instruction, Opcode, Space};

fn mvin(addr: u64, elems: u64, elem: u64, offset: u64) -> Instruction {
    Instruction::dma(Opcode::Mvin, addr, elems * elem, 1, elems, elem, Space::Scratchpad, vec![]).with_offset(offset)
}

struct Operand {
    addr: u64,
    numel: u64,
    elem: u64,
}

fn operand(g: &ModelGraph, ctx: &LowerCtx, name: &str) -> Result<Operand, LoweringError> {
    let t = g.tensor(name).ok_or_else(|| LoweringError::Unmapped(name.to_string()))?;
    Ok(Operand {
        addr: ctx.addr(name)?,
        numel: t.numel().unwrap_or(0),
        elem: t.dtype.width(),
    })
}

/// Elementwise and normalization nodes: load operands, one VECTOR op (plus fused
/// ones), store the result.
pub(super) fn lower_vector_node(g: &ModelGraph, node: &OpNode, ctx: &mut LowerCtx) -> Result<Vec<TileProgram>, LoweringError> {
    let x_dims = dims_of(g, node, &node.inputs[0])?;
    let out = operand(g, ctx, &node.outputs[0])?;
    if out.numel == 0 {
        return Err(LoweringError::Degenerate {
            node: node.id.clone(),
            dims: x_dims,
        });
    }
    let spm = ctx.cfg.core.spm_partition_bytes();
    let normalize = matches!(node.op_type, OpType::Softmax | OpType::LayerNorm);
    let base = node.base_inputs();
    let fused: Vec<Operand> = node
        .fused_inputs()
        .iter()
        .map(|n| operand(g, ctx, n))
        .collect::<Result<_, _>>()?;

    if normalize {
        let rank = x_dims.len() as i64;
        let axis = node.attr_int("axis").unwrap_or(-1);
        if axis != -1 && axis != rank - 1 {
            return Err(LoweringError::Unsupported {
                node: node.id.clone(),
                attr: "axis".into(),
                detail: format!("normalization over axis {axis} of a rank-{rank} tensor; only the last axis is supported"),
            });
        }
        let c = *x_dims.last().unwrap_or(&1);
        let rows = out.numel / c;
        let x = operand(g, ctx, &base[0])?;
        let params: Vec<Operand> = base[1..].iter().map(|n| operand(g, ctx, n)).collect::<Result<_, _>>()?;
        let param_bytes: u64 = params.iter().map(|p| p.numel * p.elem).sum();
        let row_bytes = c * x.elem + fused.iter().map(|f| c * f.elem).sum::<u64>();
        let rows_per_tile = spm.saturating_sub(param_bytes) / row_bytes;
        if rows_per_tile == 0 {
            return Err(LoweringError::AxisTooLarge {
                node: node.id.clone(),
                axis: c,
                capacity: spm / x.elem,
            });
        }
        let kind = vector_kind(node.op_type);
        let mut tiles = Vec::new();
        for r0 in (0..rows).step_by(rows_per_tile as usize) {
            let rr = rows_per_tile.min(rows - r0);
            let mut ins = vec![Instruction::dma(Opcode::Mvin, x.addr + r0 * c * x.elem, c * x.elem, rr, c, x.elem, Space::Scratchpad, vec![])];
            let mut off = rr * c * x.elem;
            for p in &params {
                ins.push(mvin(p.addr, p.numel, p.elem, off));
                off += p.numel * p.elem;
            }
            let loads: Vec<u32> = (0..ins.len() as u32).collect();
            ins.push(Instruction::vector(kind, rr, c, x.elem, Space::Scratchpad, loads));
            let mut last = (ins.len() - 1) as u32;
            let mut operands = fused.iter();
            for op in &node.fused_ops {
                let mut deps = vec![last];
                if op.takes_fused_operand() {
                    let f = operands.next().expect("fused operand per Add/Mul");
                    let start = (r0 * c) % f.numel.max(1);
                    let n = (rr * c).min(f.numel - start);
                    ins.push(mvin(f.addr + start * f.elem, n, f.elem, off));
                    off += rr * c * f.elem;
                    deps.push((ins.len() - 1) as u32);
                }
                ins.push(Instruction::vector(vector_kind(*op), rr, c, x.elem, Space::Scratchpad, deps));
                last = (ins.len() - 1) as u32;
            }
            ins.push(Instruction::dma(Opcode::Mvout, out.addr + r0 * c * out.elem, c * out.elem, rr, c, out.elem, Space::Scratchpad, vec![last]));
            tiles.push(TileProgram {
                id: tiles.len() as u64,
                owner_node: String::new(),
                request_id: String::new(),
                instrs: ins,
                spm_bytes: off,
                acc_bytes: 0,
                preds: vec![],
                chain_pred: None,
            });
        }
        return Ok(tiles);
    }

    // Elementwise: flat chunks, aligned to the DRAM access size where possible.
    let inputs: Vec<Operand> = base.iter().map(|n| operand(g, ctx, n)).collect::<Result<_, _>>()?;
    let per_elem: u64 = inputs.iter().chain(&fused).map(|o| o.elem).sum::<u64>().max(1);
    let mut chunk = spm / per_elem;
    let align = (ctx.cfg.dram.access_bytes / out.elem).max(1);
    if chunk >= align {
        chunk = chunk / align * align;
    }
    if chunk == 0 {
        return Err(LoweringError::Footprint {
            node: node.id.clone(),
            what: "scratchpad",
            need: per_elem,
            have: spm,
        });
    }
    let kind = vector_kind(node.op_type);
    let mut tiles = Vec::new();
    for e0 in (0..out.numel).step_by(chunk as usize) {
        let len = chunk.min(out.numel - e0);
        let mut ins = Vec::new();
        let mut off = 0;
        let load = |ins: &mut Vec<Instruction>, off: &mut u64, o: &Operand| {
            let start = e0 % o.numel.max(1);
            let n = len.min(o.numel - start);
            ins.push(mvin(o.addr + start * o.elem, n, o.elem, *off));
            *off += len * o.elem;
            (ins.len() - 1) as u32
        };
        let loads: Vec<u32> = inputs.iter().map(|o| load(&mut ins, &mut off, o)).collect();
        ins.push(Instruction::vector(kind, 1, len, out.elem, Space::Scratchpad, loads));
        let mut last = (ins.len() - 1) as u32;
        let mut operands = fused.iter();
        for op in &node.fused_ops {
            let mut deps = vec![last];
            if op.takes_fused_operand() {
                let f = operands.next().expect("fused operand per Add/Mul");
                deps.push(load(&mut ins, &mut off, f));
            }
            ins.push(Instruction::vector(vector_kind(*op), 1, len, out.elem, Space::Scratchpad, deps));
            last = (ins.len() - 1) as u32;
        }
        ins.push(Instruction::dma(Opcode::Mvout, out.addr + e0 * out.elem, len * out.elem, 1, len, out.elem, Space::Scratchpad, vec![last]));
        tiles.push(TileProgram {
            id: tiles.len() as u64,
            owner_node: String::new(),
            request_id: String::new(),
            instrs: ins,
            spm_bytes: off,
            acc_bytes: 0,
            preds: vec![],
            chain_pred: None,
        });
    }
    Ok(tiles)
}
