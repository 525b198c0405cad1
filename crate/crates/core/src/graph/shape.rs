use std::collections::BTreeMap;

use super::order::topological_indices;
use super::{Dim, GraphError, ModelGraph, OpNode, OpType};

/// Symbol name to extent.
pub type Bindings = BTreeMap<String, u64>;

/// Substitute every symbolic dimension and re-check all node shapes.
///
/// The input graph is left untouched. Declared output shapes are kept when they agree
/// with the inferred shape, either exactly or as a row-major reinterpretation with the
/// same element count (reshape views are free in a timing-only model).
pub fn bind_shapes(g: &ModelGraph, bindings: &Bindings) -> Result<ModelGraph, GraphError> {
    let mut out = g.clone();
    for t in &mut out.tensors {
        for d in &mut t.shape {
            if let Dim::Sym(s) = d {
                let v = bindings
                    .get(s.as_str())
                    .ok_or_else(|| GraphError::UnboundSymbol(s.clone()))?;
                *d = Dim::Fixed(*v);
            }
        }
    }
    out.reindex();
    check_shapes(&out)?;
    Ok(out)
}

pub(crate) fn dims_of(g: &ModelGraph, node: &OpNode, tensor: &str) -> Result<Vec<u64>, GraphError> {
    let t = g.tensor(tensor).ok_or_else(|| GraphError::Linkage {
        node: node.id.clone(),
        tensor: tensor.to_string(),
    })?;
    t.dims().ok_or_else(|| {
        GraphError::UnboundSymbol(t.symbols().next().unwrap_or_default().to_string())
    })
}

fn check_shapes(g: &ModelGraph) -> Result<(), GraphError> {
    for idx in topological_indices(g)? {
        let node = &g.nodes[idx];
        let inferred = infer_output(g, node)?;
        let out_name = node.outputs.first().ok_or_else(|| GraphError::ShapeMismatch {
            node: node.id.clone(),
            detail: "node has no output".into(),
        })?;
        let declared = dims_of(g, node, out_name)?;
        let same_numel = declared.iter().product::<u64>() == inferred.iter().product::<u64>();
        if declared != inferred && !same_numel {
            return Err(GraphError::ShapeMismatch {
                node: node.id.clone(),
                detail: format!("output `{out_name}` declared {declared:?}, inferred {inferred:?}"),
            });
        }
    }
    Ok(())
}

fn mismatch(node: &OpNode, detail: String) -> GraphError {
    GraphError::ShapeMismatch {
        node: node.id.clone(),
        detail,
    }
}

fn broadcast(node: &OpNode, a: &[u64], b: &[u64]) -> Result<Vec<u64>, GraphError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(node, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// The (batch, M, K, N) GEMM view of a `MatMul` or `Gemm` node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MatmulDims {
    pub batch: u64,
    pub m: u64,
    pub k: u64,
    pub n: u64,
    /// B is shared by every batch entry (rank-2 weight broadcast).
    pub shared_b: bool,
    pub trans_b: bool,
}

pub(crate) fn matmul_dims(g: &ModelGraph, node: &OpNode) -> Result<(MatmulDims, Vec<u64>), GraphError> {
    let a = dims_of(g, node, &node.inputs[0])?;
    let b = dims_of(g, node, &node.inputs[1])?;
    match node.op_type {
        OpType::Gemm => {
            if a.len() != 2 || b.len() != 2 {
                return Err(mismatch(node, format!("Gemm needs rank-2 operands, got {a:?} x {b:?}")));
            }
            let trans_a = node.attr_int("transA").unwrap_or(0) != 0;
            let trans_b = node.attr_int("transB").unwrap_or(0) != 0;
            let (m, ka) = if trans_a { (a[1], a[0]) } else { (a[0], a[1]) };
            let (kb, n) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
            if ka != kb {
                return Err(mismatch(node, format!("inner dims {ka} vs {kb}")));
            }
            if let Some(c) = node.base_inputs().get(2) {
                let c = dims_of(g, node, c)?;
                broadcast(node, &[m, n], &c)?;
            }
            Ok((
                MatmulDims {
                    batch: 1,
                    m,
                    k: ka,
                    n,
                    shared_b: true,
                    trans_b,
                },
                vec![m, n],
            ))
        }
        OpType::MatMul => {
            if a.len() < 2 || b.len() < 2 {
                return Err(mismatch(node, format!("MatMul needs rank >= 2, got {a:?} x {b:?}")));
            }
            let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
            let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
            if ka != kb {
                return Err(mismatch(node, format!("inner dims {ka} vs {kb}")));
            }
            let a_batch = &a[..a.len() - 2];
            let b_batch = &b[..b.len() - 2];
            let shared_b = b_batch.iter().all(|&d| d == 1);
            if !shared_b && a_batch != b_batch {
                return Err(mismatch(
                    node,
                    format!("batch dims {a_batch:?} vs {b_batch:?}"),
                ));
            }
            let mut out = a_batch.to_vec();
            out.extend([m, n]);
            Ok((
                MatmulDims {
                    batch: a_batch.iter().product(),
                    m,
                    k: ka,
                    n,
                    shared_b,
                    trans_b: false,
                },
                out,
            ))
        }
        _ => Err(mismatch(node, "not a matrix product".into())),
    }
}

/// Convolution geometry in NCHW terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: u64,
    pub c_in: u64,
    pub h: u64,
    pub w: u64,
    pub c_out: u64,
    pub kh: u64,
    pub kw: u64,
    pub stride: (u64, u64),
    pub pad_top: u64,
    pub pad_left: u64,
    pub dilation: (u64, u64),
    pub out_h: u64,
    pub out_w: u64,
}

impl ConvGeometry {
    /// (M, K, N) of the im2col matrix product.
    pub fn gemm_dims(&self) -> (u64, u64, u64) {
        (
            self.batch * self.out_h * self.out_w,
            self.kh * self.kw * self.c_in,
            self.c_out,
        )
    }
}

fn pair_attr(node: &OpNode, key: &str, default: u64) -> Result<(u64, u64), GraphError> {
    match node.attr_ints(key) {
        None => Ok((default, default)),
        Some(v) if v.iter().any(|&x| x < 0) => Err(GraphError::InvalidAttribute {
            node: node.id.clone(),
            attr: key.into(),
            detail: format!("negative value in {v:?}"),
        }),
        Some(v) => match v.as_slice() {
            [x] => Ok((*x as u64, *x as u64)),
            [x, y] => Ok((*x as u64, *y as u64)),
            _ => Err(GraphError::InvalidAttribute {
                node: node.id.clone(),
                attr: key.into(),
                detail: format!("expected 1 or 2 values, got {v:?}"),
            }),
        },
    }
}

pub(crate) fn conv_geometry(g: &ModelGraph, node: &OpNode) -> Result<ConvGeometry, GraphError> {
    let x = dims_of(g, node, &node.inputs[0])?;
    let wt = dims_of(g, node, &node.inputs[1])?;
    if x.len() != 4 || wt.len() != 4 {
        return Err(mismatch(node, format!("Conv2D needs NCHW input and OIHW weight, got {x:?}, {wt:?}")));
    }
    if node.attr_int("group").unwrap_or(1) != 1 {
        return Err(GraphError::InvalidAttribute {
            node: node.id.clone(),
            attr: "group".into(),
            detail: "only group = 1 is supported".into(),
        });
    }
    if wt[1] != x[1] {
        return Err(mismatch(node, format!("input channels {} vs weight channels {}", x[1], wt[1])));
    }
    let stride = pair_attr(node, "strides", 1)?;
    let dilation = pair_attr(node, "dilations", 1)?;
    if stride.0 == 0 || stride.1 == 0 || dilation.0 == 0 || dilation.1 == 0 {
        return Err(GraphError::InvalidAttribute {
            node: node.id.clone(),
            attr: "strides".into(),
            detail: "strides and dilations must be positive".into(),
        });
    }
    // ONNX order: [top, left, bottom, right]; two values mean symmetric (h, w).
    let (pt, pl, pb, pr) = match node.attr_ints("pads") {
        None => (0, 0, 0, 0),
        Some(v) if v.iter().any(|&p| p < 0) => {
            return Err(GraphError::InvalidAttribute {
                node: node.id.clone(),
                attr: "pads".into(),
                detail: format!("negative padding {v:?}"),
            })
        }
        Some(v) => match v.as_slice() {
            [p] => (*p, *p, *p, *p),
            [ph, pw] => (*ph, *pw, *ph, *pw),
            [t, l, b, r] => (*t, *l, *b, *r),
            _ => {
                return Err(GraphError::InvalidAttribute {
                    node: node.id.clone(),
                    attr: "pads".into(),
                    detail: format!("expected 1, 2 or 4 values, got {v:?}"),
                })
            }
        },
    };
    let (pt, pl, pb, pr) = (pt as u64, pl as u64, pb as u64, pr as u64);
    let span_h = dilation.0 * (wt[2] - 1) + 1;
    let span_w = dilation.1 * (wt[3] - 1) + 1;
    if x[2] + pt + pb < span_h || x[3] + pl + pr < span_w {
        return Err(mismatch(node, "kernel larger than padded input".into()));
    }
    Ok(ConvGeometry {
        batch: x[0],
        c_in: x[1],
        h: x[2],
        w: x[3],
        c_out: wt[0],
        kh: wt[2],
        kw: wt[3],
        stride,
        pad_top: pt,
        pad_left: pl,
        dilation,
        out_h: (x[2] + pt + pb - span_h) / stride.0 + 1,
        out_w: (x[3] + pl + pr - span_w) / stride.1 + 1,
    })
}

fn infer_output(g: &ModelGraph, node: &OpNode) -> Result<Vec<u64>, GraphError> {
    let ((min_in, _), _) = node.op_type.arity();
    if node.inputs.len() < min_in {
        return Err(mismatch(node, format!("expected at least {min_in} inputs")));
    }
    let base = match node.op_type {
        OpType::Gemm | OpType::MatMul => matmul_dims(g, node)?.1,
        OpType::Conv2D => {
            let geo = conv_geometry(g, node)?;
            if let Some(bias) = node.base_inputs().get(2) {
                let b = dims_of(g, node, bias)?;
                if b.iter().product::<u64>() != geo.c_out {
                    return Err(mismatch(node, format!("bias {b:?} vs {} output channels", geo.c_out)));
                }
            }
            vec![geo.batch, geo.c_out, geo.out_h, geo.out_w]
        }
        OpType::Add | OpType::Mul => {
            let a = dims_of(g, node, &node.inputs[0])?;
            let b = dims_of(g, node, &node.inputs[1])?;
            broadcast(node, &a, &b)?
        }
        OpType::GELU | OpType::ReLU | OpType::Softmax => dims_of(g, node, &node.inputs[0])?,
        OpType::LayerNorm => {
            let x = dims_of(g, node, &node.inputs[0])?;
            let last = *x.last().unwrap_or(&1);
            for p in node.base_inputs().iter().skip(1) {
                let pd = dims_of(g, node, p)?;
                if pd.iter().product::<u64>() != last {
                    return Err(mismatch(node, format!("normalization parameter {p} {pd:?} vs axis {last}")));
                }
            }
            x
        }
    };
    // Operands brought in by fused Add/Mul sit at the end of the input list.
    for name in node.fused_inputs() {
        let d = dims_of(g, node, name)?;
        let b = broadcast(node, &base, &d)?;
        if b != base {
            return Err(mismatch(node, format!("fused operand {name} {d:?} widens output {base:?}")));
        }
    }
    Ok(base)
}
