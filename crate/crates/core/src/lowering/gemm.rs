use super::{LowerCtx, LoweringError, TileBudget, TileProgram, TileShape};
use crate::config::SimConfig;
use crate::graph::shape::matmul_dims;
use crate::graph::{ModelGraph, OpNode, OpType};
use crate::isa::{Instruction, Opcode, Space, VectorKind};

/// Operand A as loaded into one tile: DMA transfers plus an optional layout transform.
pub(super) struct ALoad {
    pub mvins: Vec<Instruction>,
    pub im2col: Option<Instruction>,
    /// Scratchpad bytes reserved for A (raw staging may exceed the A tile itself).
    pub region: u64,
}

/// A matrix operand in DRAM: base address, row pitch in elements, element width.
#[derive(Debug, Clone, Copy)]
pub(super) struct Matrix {
    pub addr: u64,
    pub pitch: u64,
    pub elem: u64,
    pub transposed: bool,
    /// Bytes between consecutive batch entries (0 = broadcast).
    pub batch_stride: u64,
}

impl Matrix {
    /// MVIN of the (r0.., c0..) block in logical (untransposed) coordinates.
    fn load(&self, b: u64, r0: u64, rows: u64, c0: u64, cols: u64, space: Space) -> Instruction {
        let base = self.addr + b * self.batch_stride;
        if self.transposed {
            Instruction::dma(Opcode::Mvin, base + (c0 * self.pitch + r0) * self.elem, self.pitch * self.elem, cols, rows, self.elem, space, vec![])
        } else {
            Instruction::dma(Opcode::Mvin, base + (r0 * self.pitch + c0) * self.elem, self.pitch * self.elem, rows, cols, self.elem, space, vec![])
        }
    }
}

pub(super) struct GemmSpec<'a> {
    pub dims: (u64, u64, u64),
    pub batch: u64,
    pub tile: TileShape,
    pub load_a: &'a dyn Fn(u64, u64, u64, u64, u64) -> ALoad,
    pub b: Matrix,
    /// Bias preloaded into the accumulator on the first k tile; `rows_full` when it has M rows.
    pub bias: Option<(Matrix, bool)>,
    /// Fused tail in order: residual ops carry an operand, activations do not.
    pub tail: Vec<(VectorKind, Option<Matrix>)>,
    pub out: Matrix,
    pub acc_elem: u64,
    pub array: (u64, u64),
}

fn push(instrs: &mut Vec<Instruction>, ins: Instruction) -> u32 {
    instrs.push(ins);
    (instrs.len() - 1) as u32
}

pub(super) fn emit_tiles(spec: &GemmSpec) -> Vec<TileProgram> {
    let (mm, kk, nn) = spec.dims;
    let t = spec.tile;
    let (h, w) = spec.array;
    let (gm, gn, gk) = (mm.div_ceil(t.m), nn.div_ceil(t.n), kk.div_ceil(t.k));
    let mut tiles = Vec::with_capacity((spec.batch * gm * gn * gk) as usize);
    for b in 0..spec.batch {
        for mi in 0..gm {
            for ni in 0..gn {
                for ki in 0..gk {
                    let id = tiles.len() as u64;
                    let (m0, n0, k0) = (mi * t.m, ni * t.n, ki * t.k);
                    let (mt, nt, kt) = (t.m.min(mm - m0), t.n.min(nn - n0), t.k.min(kk - k0));
                    let mut ins = Vec::new();

                    let a = (spec.load_a)(b, m0, mt, k0, kt);
                    let mut off = 0;
                    let mut a_deps = Vec::new();
                    for mv in a.mvins {
                        let bytes = mv.bytes();
                        a_deps.push(push(&mut ins, mv.with_offset(off)));
                        off += bytes;
                    }
                    if let Some(mut ic) = a.im2col {
                        ic.deps = a_deps.clone();
                        a_deps = vec![push(&mut ins, ic)];
                    }
                    let mut spm_off = a.region;
                    let b_idx = push(&mut ins, spec.b.load(b, k0, kt, n0, nt, Space::Scratchpad).with_offset(spm_off));
                    spm_off += kt * nt * spec.b.elem;

                    let mut bias_dep = None;
                    if ki == 0 {
                        if let Some((bias, rows_full)) = spec.bias {
                            let (r0, rows) = if rows_full { (m0, mt) } else { (0, 1) };
                            let cols = if bias.pitch == 1 { 1 } else { nt };
                            let c0 = if bias.pitch == 1 { 0 } else { n0 };
                            bias_dep = Some(push(&mut ins, bias.load(b, r0, rows, c0, cols, Space::Accumulator)));
                        }
                    }

                    let mut prev_gemm: Option<u32> = None;
                    let mut tag = 0u32;
                    for kb in 0..kt.div_ceil(h) {
                        let k_rows = h.min(kt - kb * h);
                        for nb in 0..nt.div_ceil(w) {
                            let n_cols = w.min(nt - nb * w);
                            for mb in 0..mt.div_ceil(h) {
                                let m_rows = h.min(mt - mb * h);
                                let mut pdeps = vec![b_idx];
                                pdeps.extend(prev_gemm);
                                let p = push(&mut ins, Instruction::preload(k_rows, n_cols, spec.b.elem, tag, pdeps));
                                let mut gdeps = vec![p];
                                gdeps.extend(&a_deps);
                                gdeps.extend(bias_dep);
                                prev_gemm = Some(push(&mut ins, Instruction::gemm(m_rows, n_cols, spec.b.elem, tag, gdeps)));
                                tag += 1;
                            }
                        }
                    }
                    let mut last = prev_gemm.expect("a tile has at least one block");

                    if ki == gk - 1 {
                        for (kind, res) in &spec.tail {
                            let mut deps = vec![last];
                            if let Some(r) = res {
                                let mv = r.load(b, m0, mt, n0, nt, Space::Scratchpad).with_offset(spm_off);
                                spm_off += mt * nt * r.elem;
                                deps.push(push(&mut ins, mv));
                            }
                            last = push(&mut ins, Instruction::vector(*kind, mt, nt, spec.acc_elem, Space::Accumulator, deps));
                        }
                        let o = spec.out;
                        let base = o.addr + b * o.batch_stride;
                        push(
                            &mut ins,
                            Instruction::dma(
                                Opcode::Mvout,
                                base + (m0 * o.pitch + n0) * o.elem,
                                o.pitch * o.elem,
                                mt,
                                nt,
                                o.elem,
                                Space::Accumulator,
                                vec![last],
                            ),
                        );
                    }

                    let chain_pred = (ki > 0).then(|| id - 1);
                    tiles.push(TileProgram {
                        id,
                        owner_node: String::new(),
                        request_id: String::new(),
                        instrs: ins,
                        spm_bytes: spm_off,
                        acc_bytes: mt * nt * spec.acc_elem,
                        preds: chain_pred.into_iter().collect(),
                        chain_pred,
                    });
                }
            }
        }
    }
    tiles
}

pub(super) fn fused_tail(g: &ModelGraph, node: &OpNode, ctx: &LowerCtx, out: &Matrix, out_numel: u64) -> Result<Vec<(VectorKind, Option<Matrix>)>, LoweringError> {
    let mut operands = node.fused_inputs().iter();
    let mut tail = Vec::new();
    for op in &node.fused_ops {
        let kind = vector_kind(*op);
        let res = if op.takes_fused_operand() {
            let name = operands.next().expect("fused operand count matches fused ops");
            let t = g.tensor(name).ok_or_else(|| LoweringError::Unmapped(name.clone()))?;
            let numel = t.numel().unwrap_or(0);
            let elem = t.dtype.width();
            Some(Matrix {
                addr: ctx.addr(name)?,
                elem,
                // broadcast operands re-read their only row
                pitch: if numel == out_numel { out.pitch } else { 0 },
                transposed: false,
                batch_stride: if numel == out_numel { out.batch_stride / out.elem * elem } else { 0 },
            })
        } else {
            None
        };
        tail.push((kind, res));
    }
    Ok(tail)
}

pub(super) fn vector_kind(op: OpType) -> VectorKind {
    match op {
        OpType::Add => VectorKind::Add,
        OpType::Mul => VectorKind::Mul,
        OpType::GELU => VectorKind::Gelu,
        OpType::ReLU => VectorKind::Relu,
        OpType::Softmax => VectorKind::Softmax,
        OpType::LayerNorm => VectorKind::Layernorm,
        other => unreachable!("{other} is not a vector operation"),
    }
}

fn budget(g: &ModelGraph, node: &OpNode, cfg: &SimConfig) -> TileBudget {
    let w = |name: &String| g.tensor(name).map_or(1, |t| t.dtype.width());
    let elem = w(&node.inputs[0]).max(w(&node.inputs[1]));
    TileBudget::for_core(&cfg.core, elem, node.fused_operand_count() as u64)
}

fn no_tile(node: &OpNode, budget: &TileBudget) -> LoweringError {
    LoweringError::Footprint {
        node: node.id.clone(),
        what: "scratchpad",
        need: budget.spm_need(TileShape { m: 1, k: 1, n: 1 }),
        have: budget.spm_bytes,
    }
}

pub(super) fn tile_for(g: &ModelGraph, node: &OpNode, cfg: &SimConfig) -> Result<TileShape, LoweringError> {
    let (d, _) = matmul_dims(g, node)?;
    let b = budget(g, node, cfg);
    if d.m == 0 || d.k == 0 || d.n == 0 {
        return Err(LoweringError::Degenerate {
            node: node.id.clone(),
            dims: vec![d.m, d.k, d.n],
        });
    }
    super::search_tile((d.m, d.k, d.n), &b, &|_, _| 0, true).ok_or_else(|| no_tile(node, &b))
}

pub(super) fn lower_gemm(g: &ModelGraph, node: &OpNode, ctx: &mut LowerCtx) -> Result<Vec<TileProgram>, LoweringError> {
    let (d, out_dims) = matmul_dims(g, node)?;
    if d.m == 0 || d.k == 0 || d.n == 0 || d.batch == 0 {
        return Err(LoweringError::Degenerate {
            node: node.id.clone(),
            dims: vec![d.batch, d.m, d.k, d.n],
        });
    }
    let bud = budget(g, node, ctx.cfg);
    let tile = ctx.gemm_tile((d.m, d.k, d.n), bud).ok_or_else(|| no_tile(node, &bud))?;

    let width = |name: &String| g.tensor(name).map_or(1, |t| t.dtype.width());
    let (a_name, b_name) = (&node.inputs[0], &node.inputs[1]);
    let out_name = &node.outputs[0];
    let trans_a = node.op_type == OpType::Gemm && node.attr_int("transA").unwrap_or(0) != 0;
    let a = Matrix {
        addr: ctx.addr(a_name)?,
        pitch: if trans_a { d.m } else { d.k },
        elem: width(a_name),
        transposed: trans_a,
        batch_stride: d.m * d.k * width(a_name),
    };
    let bm = Matrix {
        addr: ctx.addr(b_name)?,
        pitch: if d.trans_b { d.k } else { d.n },
        elem: width(b_name),
        transposed: d.trans_b,
        batch_stride: if d.shared_b { 0 } else { d.k * d.n * width(b_name) },
    };
    let out = Matrix {
        addr: ctx.addr(out_name)?,
        pitch: d.n,
        elem: width(out_name),
        transposed: false,
        batch_stride: d.m * d.n * width(out_name),
    };
    let bias = match node.base_inputs().get(2) {
        Some(c) if node.op_type == OpType::Gemm => {
            let numel = g.tensor(c).and_then(|t| t.numel()).unwrap_or(1);
            let rows_full = numel == d.m * d.n;
            Some((
                Matrix {
                    addr: ctx.addr(c)?,
                    pitch: if numel == 1 { 1 } else { d.n },
                    elem: width(c),
                    transposed: false,
                    batch_stride: 0,
                },
                rows_full,
            ))
        }
        _ => None,
    };
    let tail = fused_tail(g, node, ctx, &out, out_dims.iter().product::<u64>())?;
    let load_a = move |b: u64, m0: u64, mt: u64, k0: u64, kt: u64| ALoad {
        mvins: vec![a.load(b, m0, mt, k0, kt, Space::Scratchpad)],
        im2col: None,
        region: mt * kt * a.elem,
    };
    Ok(emit_tiles(&GemmSpec {
        dims: (d.m, d.k, d.n),
        batch: d.batch,
        tile,
        load_a: &load_a,
        b: bm,
        bias,
        tail,
        out,
        acc_elem: ctx.cfg.core.acc_elem_bytes,
        array: (ctx.cfg.core.array_h, ctx.cfg.core.array_w),
    }))
}
