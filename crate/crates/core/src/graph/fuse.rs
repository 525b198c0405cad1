use std::collections::HashSet;

use super::order::topological_indices;
use super::{ModelGraph, OpType, TensorKind};

fn next_allowed(host: OpType, fused: &[OpType], candidate: OpType) -> bool {
    match host {
        OpType::Gemm | OpType::Conv2D => match fused.last() {
            None => candidate == OpType::Add || candidate.is_activation(),
            Some(OpType::Add) => candidate.is_activation(),
            Some(_) => false,
        },
        OpType::LayerNorm => fused.is_empty() && candidate == OpType::Add,
        _ => false,
    }
}

/// Absorb elementwise successors into their producers.
///
/// Rules: Conv2D/Gemm absorb an optional skip `Add` followed by an optional activation;
/// LayerNorm absorbs a skip `Add`. One forward pass in topological order, each host
/// taking the longest chain it can. An intermediate tensor is only eliminated when its
/// single consumer is the absorbed node and it is not a graph output.
pub fn fuse_operators(g: &ModelGraph) -> ModelGraph {
    let Ok(order) = topological_indices(g) else {
        return g.clone();
    };
    let consumers: Vec<Vec<usize>> = {
        let map = g.consumers();
        g.tensors
            .iter()
            .map(|t| map.get(t.name.as_str()).cloned().unwrap_or_default())
            .collect()
    };

    let mut nodes = g.nodes.clone();
    let mut absorbed = vec![false; nodes.len()];
    let mut removed: HashSet<String> = HashSet::new();

    for v in order {
        if absorbed[v] || !matches!(nodes[v].op_type, OpType::Gemm | OpType::Conv2D | OpType::LayerNorm) {
            continue;
        }
        loop {
            let [out] = nodes[v].outputs.as_slice() else { break };
            let out = out.clone();
            let Some(ti) = g.tensor_index(&out) else { break };
            if g.tensors[ti].kind == TensorKind::Output {
                break;
            }
            let [c] = consumers[ti].as_slice() else { break };
            let c = *c;
            if absorbed[c] || c == v || nodes[c].outputs.len() != 1 || !nodes[c].fused_ops.is_empty() {
                break;
            }
            let cand = nodes[c].op_type;
            if !next_allowed(nodes[v].op_type, &nodes[v].fused_ops, cand) {
                break;
            }
            let residual = match cand {
                OpType::Add => match nodes[c].inputs.as_slice() {
                    [a, b] if *a == out && *b != out => Some(b.clone()),
                    [a, b] if *b == out && *a != out => Some(a.clone()),
                    _ => break,
                },
                _ if nodes[c].inputs.len() == 1 => None,
                _ => break,
            };
            let new_out = nodes[c].outputs.clone();
            let host = &mut nodes[v];
            host.fused_ops.push(cand);
            host.inputs.extend(residual);
            host.outputs = new_out;
            absorbed[c] = true;
            removed.insert(out);
        }
    }

    let nodes = nodes
        .into_iter()
        .zip(absorbed)
        .filter_map(|(n, gone)| (!gone).then_some(n))
        .collect();
    let tensors = g
        .tensors
        .iter()
        .filter(|t| !removed.contains(&t.name))
        .cloned()
        .collect();
    ModelGraph::new(&g.name, tensors, nodes)
}
