use serde::{Deserialize, Serialize};

use crate::graph::{ModelGraph, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    /// FLOPs charged per multiply-accumulate.
    pub flops_per_mac: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { flops_per_mac: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: String,
    pub op: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_flops: u64,
    pub total_params: u64,
    pub per_layer: Vec<NodeCost>,
}

impl CostReport {
    pub fn node(&self, id: &str) -> Option<&NodeCost> {
        self.per_layer.iter().find(|n| n.node == id)
    }
}

/// FLOPs of a single node under `cfg`.
pub fn node_flops(g: &ModelGraph, node: &crate::graph::Node, cfg: CostConfig) -> u64 {
    let out: u64 = g
        .value_dims(node.output())
        .map_or(0, |d| d.iter().product::<usize>() as u64);
    let fpm = cfg.flops_per_mac;
    match &node.op {
        Op::Conv(_) => {
            let w = g.weight(&node.inputs[1]).expect("validated").shape();
            // out = Cout * Hout * Wout; per output: kh * kw * Cin/groups MACs.
            fpm * out * (w[1] * w[2] * w[3]) as u64
        }
        Op::Gemm(_) | Op::MatMul => {
            let fan_in = g.value_dims(&node.inputs[0]).expect("inferred")[0] as u64;
            fpm * fan_in * out
        }
        Op::BatchNorm { .. } | Op::Relu | Op::MaxPool(_) | Op::AveragePool(_) | Op::GlobalAveragePool | Op::Add => out,
        Op::Concat { .. } | Op::Flatten { .. } | Op::Reshape | Op::Opaque { .. } => 0,
    }
}

pub fn count_cost(g: &ModelGraph, cfg: CostConfig) -> CostReport {
    let per_layer: Vec<NodeCost> = g
        .nodes()
        .iter()
        .map(|n| NodeCost {
            node: n.id.clone(),
            op: n.op.op_type().to_string(),
            flops: node_flops(g, n, cfg),
            params: n
                .inputs
                .iter()
                .filter_map(|i| g.weight(i))
                .map(|t| t.len() as u64)
                .sum(),
        })
        .collect();
    CostReport {
        total_flops: per_layer.iter().map(|n| n.flops).sum(),
        total_params: per_layer.iter().map(|n| n.params).sum(),
        per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;
    use crate::graph::groups::build_channel_groups;
    use crate::graph::prune::apply_pruning;
    use crate::graph::toy::{build_toy_model, toy_exclusions, ToyArch};
    use crate::tensor::Tensor;
    use std::collections::BTreeSet;

    #[test]
    fn conv_example() {
        let mut b = GraphBuilder::new("c");
        let x = b.input("x", vec![2, 8, 8]);
        let c = b.conv("c", &x, Tensor::zeros(vec![4, 2, 3, 3]), None, [1, 1], [1; 4], 1);
        b.output(&c);
        let r = count_cost(&b.build().unwrap(), CostConfig::default());
        assert_eq!(r.node("c").unwrap().flops, 9216);
    }

    #[test]
    fn unit_conv() {
        let mut b = GraphBuilder::new("c");
        let x = b.input("x", vec![1, 1, 1]);
        let c = b.conv("c", &x, Tensor::zeros(vec![1, 1, 1, 1]), None, [1, 1], [0; 4], 1);
        b.output(&c);
        let g = b.build().unwrap();
        assert_eq!(count_cost(&g, CostConfig::default()).total_flops, 2);
        assert_eq!(count_cost(&g, CostConfig { flops_per_mac: 1 }).total_flops, 1);
    }

    #[test]
    fn toy_params_match_tensor_walk() {
        let g = build_toy_model(0, ToyArch::ToyMtA);
        let r = count_cost(&g, CostConfig::default());
        let walk: u64 = g.weights().values().map(|t| t.shape().iter().product::<usize>() as u64).sum();
        assert_eq!(r.total_params, walk);
        assert_eq!(r.total_flops, r.per_layer.iter().map(|n| n.flops).sum::<u64>());
    }

    #[test]
    fn pruning_reduces_cost() {
        let g = build_toy_model(0, ToyArch::ToyMtA);
        let a = build_channel_groups(&g, &toy_exclusions(ToyArch::ToyMtA)).unwrap();
        let before = count_cost(&g, CostConfig::default());
        for layer in a.layers() {
            let p = apply_pruning(&g, &a, &BTreeSet::from([layer.groups[0]]), 1).unwrap();
            let after = count_cost(&p, CostConfig::default());
            assert!(after.total_flops < before.total_flops, "{}", layer.name);
            assert!(after.total_params < before.total_params, "{}", layer.name);
        }
    }
}
