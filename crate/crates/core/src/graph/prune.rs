use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::graph::groups::{ChannelAnalysis, GroupId, SlotRole};
use crate::graph::{BiasLayout, ModelGraph, Op};

/// Index sets to delete, keyed by (weight name, axis).
type Cuts = BTreeMap<(String, usize), BTreeSet<usize>>;

/// Removes every slot of the dropped groups from `g`, returning a new graph.
///
/// Producer output channels lose their weight rows and bias entries,
/// consumers lose the matching input slices and per-channel vectors lose
/// their entries. Shapes are re-inferred; `g` is untouched.
pub fn apply_pruning(
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    dropped: &BTreeSet<GroupId>,
    min_channels: usize,
) -> Result<ModelGraph> {
    analysis.validate_drop(dropped)?;
    analysis.check_min_channels(dropped, min_channels)?;
    if dropped.is_empty() {
        return Ok(g.clone());
    }

    let mut cuts: Cuts = BTreeMap::new();
    let mut cut = |weight: &str, axis: usize, start: usize, span: usize| {
        cuts.entry((weight.to_string(), axis)).or_default().extend(start..start + span);
    };
    for &id in dropped {
        for slot in &analysis.group(id)?.slots {
            let node = g.node(&slot.node).expect("analysis matches graph");
            let (c, span) = (slot.channel, slot.span);
            match (&node.op, slot.role) {
                (Op::Conv(_), SlotRole::ProducerOut) => {
                    cut(&node.inputs[1], 0, c, span);
                    if let Some(b) = node.inputs.get(2) {
                        cut(b, 0, c, span);
                    }
                }
                (Op::Conv(_), SlotRole::ConsumerIn) => cut(&node.inputs[1], 1, c, span),
                (Op::Gemm(a), SlotRole::ProducerOut) => {
                    cut(&node.inputs[1], usize::from(!a.trans_b), c, span);
                    if let Some(b) = node.inputs.get(2) {
                        let shape = g.weight(b).expect("validated").shape();
                        if shape.iter().product::<usize>() > 1 {
                            cut(b, shape.len() - 1, c, span);
                        }
                    }
                }
                (Op::Gemm(a), SlotRole::ConsumerIn) => cut(&node.inputs[1], usize::from(a.trans_b), c, span),
                (Op::MatMul, SlotRole::ProducerOut) => cut(&node.inputs[1], 1, c, span),
                (Op::MatMul, SlotRole::ConsumerIn) => cut(&node.inputs[1], 0, c, span),
                (Op::BatchNorm { .. }, SlotRole::NormChannel) => {
                    for w in &node.inputs[1..5] {
                        cut(w, 0, c, span);
                    }
                }
                (Op::Add, SlotRole::NormChannel) => {
                    let act = g.activation_inputs(node).next().expect("validated");
                    let k = node.inputs.iter().find(|i| g.is_constant(i)).expect("validated");
                    let dims = g.value_dims(act).expect("inferred");
                    let shape = g.weight(k).expect("validated").shape();
                    if let Some(BiasLayout::PerChannel { axis }) = ModelGraph::bias_layout(dims, shape) {
                        cut(k, axis, c, span);
                    }
                }
                (op, role) => unreachable!("slot role {role:?} on op {}", op.op_type()),
            }
        }
    }

    let mut weights = g.weights().clone();
    for ((name, axis), idx) in &cuts {
        let t = weights.get_mut(name).expect("slot refers to weight");
        *t = t.remove_indices(*axis, idx);
    }

    let mut parts = g.to_parts();
    parts.weights = weights;
    parts.source_hash.clear();
    // Explicit reshape targets must follow the shrunken feature count.
    let explicit: Vec<String> = parts
        .shape_consts
        .iter()
        .filter(|(_, v)| v.len() == 2 && v[1] > 0)
        .map(|(k, _)| k.clone())
        .collect();
    for k in &explicit {
        parts.shape_consts.get_mut(k).unwrap()[1] = -1;
    }
    let mut pruned = ModelGraph::from_parts(parts)?;
    if !explicit.is_empty() {
        let mut parts = pruned.to_parts();
        for node in g.nodes().iter().filter(|n| matches!(n.op, Op::Reshape)) {
            if explicit.contains(&node.inputs[1]) {
                let features = pruned.value_dims(node.output()).expect("inferred")[0];
                parts.shape_consts.get_mut(&node.inputs[1]).unwrap()[1] = features as i64;
            }
        }
        pruned = ModelGraph::from_parts(parts)?;
    }
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::graph::builder::GraphBuilder;
    use crate::graph::groups::build_channel_groups;
    use crate::graph::onnx::{export_model, load_model, LoadOptions};
    use crate::graph::toy::{build_toy_model, toy_exclusions, ToyArch};
    use crate::tensor::Tensor;

    fn chain() -> ModelGraph {
        let mut b = GraphBuilder::new("chain");
        let x = b.input("x", vec![2, 5, 5]);
        let w1 = Tensor::from_fn(vec![4, 2, 3, 3], |i| i as f32);
        let c1 = b.conv("c1", &x, w1, Some(Tensor::from_fn(vec![4], |i| i as f32)), [1, 1], [1; 4], 1);
        let n1 = b.batch_norm("n1", &c1, Tensor::zeros(vec![4]), Tensor::zeros(vec![4]), Tensor::zeros(vec![4]), Tensor::zeros(vec![4]), 1e-5);
        let w2 = Tensor::from_fn(vec![3, 4, 3, 3], |i| i as f32);
        let c2 = b.conv("c2", &n1, w2, None, [1, 1], [1; 4], 1);
        b.output(&c2);
        b.build().unwrap()
    }

    #[test]
    fn empty_drop_is_identity() {
        let g = chain();
        let a = build_channel_groups(&g, &["c2"]).unwrap();
        assert!(apply_pruning(&g, &a, &BTreeSet::new(), 1).unwrap().same_as(&g));
    }

    #[test]
    fn drop_one_group_from_chain() {
        let g = chain();
        let a = build_channel_groups(&g, &["c2"]).unwrap();
        let id = a.producer_channels()["c1"][1];
        let p = apply_pruning(&g, &a, &BTreeSet::from([id]), 1).unwrap();
        assert_eq!(p.weight("c1.weight").unwrap().shape(), &[3, 2, 3, 3]);
        assert_eq!(p.weight("c1.bias").unwrap().data(), &[0.0, 2.0, 3.0]);
        assert_eq!(p.weight("n1.running_var").unwrap().shape(), &[3]);
        let w2 = p.weight("c2.weight").unwrap();
        assert_eq!(w2.shape(), &[3, 3, 3, 3]);
        // Second output filter, first kept input slice is original slice 0.
        assert_eq!(w2.data()[27], 36.0);
        assert_eq!(w2.data()[36], 54.0);
        assert_eq!(p.value_dims("c1"), Some(&[3, 5, 5][..]));
        assert!(g.weight("c1.weight").unwrap().shape()[0] == 4, "input untouched");
    }

    #[test]
    fn pinned_and_min_channel_errors() {
        let g = chain();
        let a = build_channel_groups(&g, &["c2"]).unwrap();
        let pinned = a.producer_channels()["c2"][0];
        assert!(matches!(apply_pruning(&g, &a, &BTreeSet::from([pinned]), 1), Err(Error::PinnedGroup(_))));
        let all: BTreeSet<_> = a.producer_channels()["c1"].iter().copied().collect();
        assert!(matches!(apply_pruning(&g, &a, &all, 1), Err(Error::BelowMinChannels { .. })));
        assert!(matches!(apply_pruning(&g, &a, &BTreeSet::from([999]), 1), Err(Error::UnknownGroup(999))));
    }

    #[test]
    fn toy_pruning_exports_and_reloads() {
        for arch in [ToyArch::ToyMtA, ToyArch::ToyMtB] {
            let g = build_toy_model(0, arch);
            let a = build_channel_groups(&g, &toy_exclusions(arch)).unwrap();
            let dropped: BTreeSet<GroupId> = a.layers().iter().map(|l| l.groups[0]).collect();
            let p = apply_pruning(&g, &a, &dropped, 1).unwrap();
            let back = load_model(&export_model(&p), &LoadOptions::default()).unwrap();
            assert!(back.same_as(&p));
            let pa = build_channel_groups(&p, &toy_exclusions(arch)).unwrap();
            assert_eq!(pa.prunable_groups().count(), a.prunable_groups().count() - dropped.len());
        }
    }

    #[test]
    fn explicit_reshape_target_follows_pruning() {
        let mut b = GraphBuilder::new("r");
        let x = b.input("x", vec![1, 2, 2]);
        let c = b.conv("c", &x, Tensor::zeros(vec![3, 1, 1, 1]), None, [1, 1], [0; 4], 1);
        let r = b.reshape_flatten("r", &c);
        let y = b.gemm("fc", &r, Tensor::zeros(vec![2, 12]), None);
        b.output(&y);
        let mut parts = b.build().unwrap().into_parts();
        parts.shape_consts.insert("r.shape".into(), vec![0, 12]);
        let g = ModelGraph::from_parts(parts).unwrap();
        let a = build_channel_groups(&g, &["fc"]).unwrap();
        let p = apply_pruning(&g, &a, &BTreeSet::from([a.producer_channels()["c"][0]]), 1).unwrap();
        assert_eq!(p.shape_consts()["r.shape"], vec![0, 8]);
        assert_eq!(p.weight("fc.weight").unwrap().shape(), &[2, 8]);
    }
}
