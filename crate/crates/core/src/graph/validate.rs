use std::fmt;

use serde::Serialize;

use super::{ModelGraph, OpType, TensorKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Nodes forming one strongly connected component, in file order.
    Cycle { nodes: Vec<String> },
    Arity {
        node: String,
        side: &'static str,
        expected: String,
        found: usize,
    },
    MultiProducer { tensor: String, producers: Vec<String> },
    MissingProducer { tensor: String },
    ProducedGraphInput { tensor: String, producer: String },
    IllegalFusion { node: String, fused: OpType },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(" -> ")),
            Violation::Arity {
                node,
                side,
                expected,
                found,
            } => write!(f, "node `{node}` has {found} {side}, expected {expected}"),
            Violation::MultiProducer { tensor, producers } => {
                write!(f, "tensor `{tensor}` has producers {producers:?}")
            }
            Violation::MissingProducer { tensor } => write!(f, "tensor `{tensor}` has no producer"),
            Violation::ProducedGraphInput { tensor, producer } => {
                write!(f, "graph input `{tensor}` is written by `{producer}`")
            }
            Violation::IllegalFusion { node, fused } => {
                write!(f, "node `{node}` cannot absorb `{fused}`")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn cycles(&self) -> impl Iterator<Item = &Vec<String>> {
        self.violations.iter().filter_map(|v| match v {
            Violation::Cycle { nodes } => Some(nodes),
            _ => None,
        })
    }
}

fn fusion_allowed(host: OpType, fused: OpType) -> bool {
    match host {
        OpType::Gemm | OpType::Conv2D => fused == OpType::Add || fused.is_activation(),
        OpType::LayerNorm => fused == OpType::Add,
        _ => false,
    }
}

/// Collect every invariant violation; an empty report means the graph is well formed.
pub fn validate_graph(g: &ModelGraph) -> ValidationReport {
    let mut violations = Vec::new();

    for node in &g.nodes {
        let ((min_in, max_in), outs) = node.op_type.arity();
        let extra = node.fused_operand_count();
        let (min_in, max_in) = (min_in + extra, max_in + extra);
        if node.inputs.len() < min_in || node.inputs.len() > max_in {
            let expected = if min_in == max_in {
                min_in.to_string()
            } else {
                format!("{min_in}..={max_in}")
            };
            violations.push(Violation::Arity {
                node: node.id.clone(),
                side: "inputs",
                expected,
                found: node.inputs.len(),
            });
        }
        if node.outputs.len() != outs {
            violations.push(Violation::Arity {
                node: node.id.clone(),
                side: "outputs",
                expected: outs.to_string(),
                found: node.outputs.len(),
            });
        }
        for &fused in &node.fused_ops {
            if !fusion_allowed(node.op_type, fused) {
                violations.push(Violation::IllegalFusion {
                    node: node.id.clone(),
                    fused,
                });
            }
        }
    }

    let producers = g.producers();
    for t in &g.tensors {
        let prods = producers.get(t.name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        match t.kind {
            TensorKind::Input | TensorKind::Weight => {
                if let Some(&p) = prods.first() {
                    violations.push(Violation::ProducedGraphInput {
                        tensor: t.name.clone(),
                        producer: g.nodes[p].id.clone(),
                    });
                }
            }
            TensorKind::Output | TensorKind::Activation => match prods.len() {
                0 => violations.push(Violation::MissingProducer {
                    tensor: t.name.clone(),
                }),
                1 => {}
                _ => violations.push(Violation::MultiProducer {
                    tensor: t.name.clone(),
                    producers: prods.iter().map(|&p| g.nodes[p].id.clone()).collect(),
                }),
            },
        }
    }

    for scc in cyclic_components(g) {
        violations.push(Violation::Cycle {
            nodes: scc.into_iter().map(|i| g.nodes[i].id.clone()).collect(),
        });
    }

    ValidationReport { violations }
}

/// Strongly connected components that contain a cycle (size > 1 or a self loop),
/// each sorted by file order; components ordered by their first node.
pub(crate) fn cyclic_components(g: &ModelGraph) -> Vec<Vec<usize>> {
    let n = g.nodes.len();
    let preds = g.node_predecessors();
    let mut succs = vec![Vec::new(); n];
    for (v, ps) in preds.iter().enumerate() {
        for &p in ps {
            succs[p].push(v);
        }
    }

    // Iterative Tarjan.
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next_index = 0;
    let mut comps = Vec::new();

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            if *edge < succs[v].len() {
                let w = succs[v][*edge];
                *edge += 1;
                if index[w] == usize::MAX {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    let self_loop = comp.len() == 1 && succs[v].contains(&v);
                    if comp.len() > 1 || self_loop {
                        comp.sort_unstable();
                        comps.push(comp);
                    }
                }
            }
        }
    }
    comps.sort_by_key(|c| c[0]);
    comps
}
