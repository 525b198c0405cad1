use super::gemm::{emit_tiles, fused_tail, ALoad, GemmSpec, Matrix};
use super::{search_tile, LowerCtx, LoweringError, TileBudget, TileProgram, TileShape};
use crate::config::SimConfig;
use crate::graph::shape::{conv_geometry, ConvGeometry};
use crate::graph::{ModelGraph, OpNode};
use crate::isa::{Instruction, Opcode, Space};

fn pointwise(geo: &ConvGeometry) -> bool {
    geo.kh == 1 && geo.kw == 1 && geo.stride == (1, 1) && geo.pad_top == 0 && geo.pad_left == 0 && geo.h == geo.out_h && geo.w == geo.out_w
}

/// Input channels touched by the k range [k0, k0 + kt) of the im2col matrix.
fn channel_slice(geo: &ConvGeometry, k0: u64, kt: u64) -> (u64, u64) {
    let c = geo.c_in;
    if kt >= c || k0 / c != (k0 + kt - 1) / c {
        (0, c)
    } else {
        (k0 % c, (k0 + kt - 1) % c + 1)
    }
}

/// Upper bound on raw input elements staged for an m x k tile at any grid position.
fn raw_bound(geo: &ConvGeometry, m: u64, k: u64) -> u64 {
    let plane = geo.out_h * geo.out_w;
    let images = (m.div_ceil(plane) + 1).min(geo.batch);
    let out_rows = (m.div_ceil(geo.out_w) + 1).min(geo.out_h);
    let in_rows = ((out_rows - 1) * geo.stride.0 + geo.kh).min(geo.h);
    let slice = if k < geo.c_in && geo.c_in % k == 0 { k } else { geo.c_in };
    images * in_rows * geo.w * slice
}

fn check_dilation(node: &OpNode, geo: &ConvGeometry) -> Result<(), LoweringError> {
    if geo.dilation != (1, 1) {
        return Err(LoweringError::Unsupported {
            node: node.id.clone(),
            attr: "dilations".into(),
            detail: format!("dilation {:?} is not supported", geo.dilation),
        });
    }
    Ok(())
}

fn budget(g: &ModelGraph, node: &OpNode, cfg: &SimConfig) -> TileBudget {
    let w = |name: &String| g.tensor(name).map_or(1, |t| t.dtype.width());
    let elem = w(&node.inputs[0]).max(w(&node.inputs[1]));
    TileBudget::for_core(&cfg.core, elem, node.fused_operand_count() as u64)
}

fn search(node: &OpNode, geo: &ConvGeometry, bud: &TileBudget) -> Result<TileShape, LoweringError> {
    let dims = geo.gemm_dims();
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(LoweringError::Degenerate {
            node: node.id.clone(),
            dims: vec![dims.0, dims.1, dims.2],
        });
    }
    let found = if pointwise(geo) {
        search_tile(dims, bud, &|_, _| 0, true)
    } else {
        let elem = bud.elem_bytes;
        search_tile(dims, bud, &|m, k| raw_bound(geo, m, k).saturating_sub(m * k) * elem, false)
    };
    found.ok_or_else(|| LoweringError::Footprint {
        node: node.id.clone(),
        what: "scratchpad",
        need: bud.spm_need(TileShape { m: 1, k: 1, n: 1 }),
        have: bud.spm_bytes,
    })
}

pub(super) fn tile_for(g: &ModelGraph, node: &OpNode, cfg: &SimConfig) -> Result<TileShape, LoweringError> {
    let geo = conv_geometry(g, node)?;
    check_dilation(node, &geo)?;
    search(node, &geo, &budget(g, node, cfg))
}

/// Convolution as an im2col GEMM over NHWC activations: M = N*OH*OW, K = KH*KW*C, N = C_out.
pub(super) fn lower_conv(g: &ModelGraph, node: &OpNode, ctx: &mut LowerCtx) -> Result<Vec<TileProgram>, LoweringError> {
    let geo = conv_geometry(g, node)?;
    check_dilation(node, &geo)?;
    let bud = budget(g, node, ctx.cfg);
    let tile = search(node, &geo, &bud)?;
    let (mm, kk, nn) = geo.gemm_dims();

    let width = |name: &String| g.tensor(name).map_or(1, |t| t.dtype.width());
    let x_name = &node.inputs[0];
    let x_addr = ctx.addr(x_name)?;
    let x_elem = width(x_name);
    let w_name = &node.inputs[1];
    let out_name = &node.outputs[0];
    let bm = Matrix {
        addr: ctx.addr(w_name)?,
        pitch: nn,
        elem: width(w_name),
        transposed: false,
        batch_stride: 0,
    };
    let out = Matrix {
        addr: ctx.addr(out_name)?,
        pitch: nn,
        elem: width(out_name),
        transposed: false,
        batch_stride: 0,
    };
    let bias = match node.base_inputs().get(2) {
        Some(c) => Some((
            Matrix {
                addr: ctx.addr(c)?,
                pitch: nn,
                elem: width(c),
                transposed: false,
                batch_stride: 0,
            },
            false,
        )),
        None => None,
    };
    let tail = fused_tail(g, node, ctx, &out, mm * nn)?;
    let direct = pointwise(&geo);

    let load_a = move |_b: u64, m0: u64, mt: u64, k0: u64, kt: u64| {
        if direct {
            let mv = Instruction::dma(Opcode::Mvin, x_addr + (m0 * geo.c_in + k0) * x_elem, geo.c_in * x_elem, mt, kt, x_elem, Space::Scratchpad, vec![]);
            return ALoad {
                mvins: vec![mv],
                im2col: None,
                region: mt * kt * x_elem,
            };
        }
        let plane = geo.out_h * geo.out_w;
        let (c_lo, c_hi) = channel_slice(&geo, k0, kt);
        let mut mvins = Vec::new();
        let mut raw = 0;
        for img in m0 / plane..=(m0 + mt - 1) / plane {
            let p_lo = m0.max(img * plane) - img * plane;
            let p_hi = (m0 + mt).min((img + 1) * plane) - img * plane - 1;
            let (oy_lo, oy_hi) = (p_lo / geo.out_w, p_hi / geo.out_w);
            let y_lo = (oy_lo * geo.stride.0).saturating_sub(geo.pad_top);
            let y_hi = (oy_hi * geo.stride.0 + geo.kh - 1).saturating_sub(geo.pad_top).min(geo.h - 1);
            let rows = (y_hi.max(y_lo) - y_lo + 1) * geo.w;
            let addr = x_addr + (((img * geo.h + y_lo) * geo.w) * geo.c_in + c_lo) * x_elem;
            let mv = Instruction::dma(Opcode::Mvin, addr, geo.c_in * x_elem, rows, c_hi - c_lo, x_elem, Space::Scratchpad, vec![]);
            raw += mv.bytes();
            mvins.push(mv);
        }
        ALoad {
            mvins,
            im2col: Some(Instruction::im2col(mt, kt, x_elem, vec![])),
            region: raw.max(mt * kt * x_elem),
        }
    };
    Ok(emit_tiles(&GemmSpec {
        dims: (mm, kk, nn),
        batch: 1,
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

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(c_in: u64, h: u64, k: u64, stride: u64, pad: u64) -> ConvGeometry {
        let out = (h + 2 * pad - k) / stride + 1;
        ConvGeometry {
            batch: 2,
            c_in,
            h,
            w: h,
            c_out: 8,
            kh: k,
            kw: k,
            stride: (stride, stride),
            pad_top: pad,
            pad_left: pad,
            dilation: (1, 1),
            out_h: out,
            out_w: out,
        }
    }

    #[test]
    fn channel_slices() {
        let g = geo(4, 8, 3, 1, 1);
        assert_eq!(channel_slice(&g, 0, 36), (0, 4));
        assert_eq!(channel_slice(&g, 4, 2), (0, 2));
        assert_eq!(channel_slice(&g, 6, 2), (2, 4));
        assert_eq!(channel_slice(&g, 3, 2), (0, 4));
    }

    #[test]
    fn pointwise_detection() {
        assert!(pointwise(&geo(4, 8, 1, 1, 0)));
        assert!(!pointwise(&geo(4, 8, 3, 1, 1)));
        assert!(!pointwise(&geo(4, 8, 1, 2, 0)));
    }
}
