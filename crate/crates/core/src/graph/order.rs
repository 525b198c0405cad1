use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::validate::cyclic_components;
use super::{GraphError, ModelGraph};

/// Kahn's algorithm; among ready nodes the one declared first in the file goes first.
pub fn topological_order(g: &ModelGraph) -> Result<Vec<String>, GraphError> {
    topological_indices(g).map(|order| order.into_iter().map(|i| g.nodes[i].id.clone()).collect())
}

pub(crate) fn topological_indices(g: &ModelGraph) -> Result<Vec<usize>, GraphError> {
    let n = g.nodes.len();
    let preds = g.node_predecessors();
    let mut pending: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut succs = vec![Vec::new(); n];
    for (v, ps) in preds.iter().enumerate() {
        for &p in ps {
            succs[p].push(v);
        }
    }

    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| pending[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &s in &succs[v] {
            pending[s] -= 1;
            if pending[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }

    if order.len() != n {
        let nodes = cyclic_components(g)
            .into_iter()
            .next()
            .map(|c| c.into_iter().map(|i| g.nodes[i].id.clone()).collect())
            .unwrap_or_default();
        return Err(GraphError::Cycle(nodes));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, Dim, OpNode, OpType, TensorDesc, TensorKind};

    fn t(name: &str, kind: TensorKind) -> TensorDesc {
        TensorDesc::new(name, DType::Fp16, vec![Dim::Fixed(8)], kind)
    }

    #[test]
    fn chain_order() {
        let g = ModelGraph::new(
            "chain",
            vec![
                t("x", TensorKind::Input),
                t("a", TensorKind::Activation),
                t("b", TensorKind::Activation),
                t("c", TensorKind::Output),
            ],
            // Declared out of order on purpose.
            vec![
                OpNode::new("C", OpType::ReLU, &["b"], &["c"]),
                OpNode::new("A", OpType::ReLU, &["x"], &["a"]),
                OpNode::new("B", OpType::ReLU, &["a"], &["b"]),
            ],
        );
        assert_eq!(topological_order(&g).unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn diamond_keeps_file_order_between_branches() {
        let g = ModelGraph::new(
            "diamond",
            vec![
                t("x", TensorKind::Input),
                t("a", TensorKind::Activation),
                t("b", TensorKind::Activation),
                t("c", TensorKind::Activation),
                t("d", TensorKind::Output),
            ],
            vec![
                OpNode::new("A", OpType::ReLU, &["x"], &["a"]),
                OpNode::new("B", OpType::ReLU, &["a"], &["b"]),
                OpNode::new("C", OpType::GELU, &["a"], &["c"]),
                OpNode::new("D", OpType::Add, &["b", "c"], &["d"]),
            ],
        );
        assert_eq!(topological_order(&g).unwrap(), vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn single_node() {
        let g = ModelGraph::new(
            "one",
            vec![t("x", TensorKind::Input), t("y", TensorKind::Output)],
            vec![OpNode::new("only", OpType::ReLU, &["x"], &["y"])],
        );
        assert_eq!(topological_order(&g).unwrap(), vec!["only"]);
    }

    #[test]
    fn cycle_is_an_error() {
        let g = ModelGraph::new(
            "loop",
            vec![t("p", TensorKind::Activation), t("q", TensorKind::Activation)],
            vec![
                OpNode::new("A", OpType::ReLU, &["q"], &["p"]),
                OpNode::new("B", OpType::ReLU, &["p"], &["q"]),
            ],
        );
        assert_eq!(
            topological_order(&g).unwrap_err(),
            GraphError::Cycle(vec!["A".into(), "B".into()])
        );
    }
}
