//! Channel-coupling analysis.
//!
//! Every producer output channel (Conv, Gemm, MatMul) becomes a channel
//! element. Elements are tracked through every value of the graph as a
//! layout of `(element, width)` entries, where `width` is the number of
//! dim-0 positions one channel occupies (1 for CHW values, `H*W` after a
//! flatten). Element-wise adds union elements index by index; concats only
//! concatenate layouts. Each resulting equivalence class that contains a
//! producer channel is a [`ChannelGroup`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BiasLayout, ModelGraph, Op};

pub type GroupId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRole {
    /// Output channel of a producer: weight rows plus bias entry.
    ProducerOut,
    /// Input slice of a consumer's weight.
    ConsumerIn,
    /// Per-channel vector entry (normalization statistics, additive bias).
    NormChannel,
}

/// One place a group lives: `span` consecutive indices starting at `channel`
/// along the role's axis of `node`'s weights.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelSlot {
    pub node: String,
    pub role: SlotRole,
    pub channel: usize,
    pub span: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub id: GroupId,
    pub slots: Vec<ChannelSlot>,
    pub pinned: bool,
    /// Index into [`ChannelAnalysis::layers`] for non-pinned groups.
    pub layer: Option<usize>,
}

impl ChannelGroup {
    pub fn producer_slots(&self) -> impl Iterator<Item = &ChannelSlot> {
        self.slots.iter().filter(|s| s.role == SlotRole::ProducerOut)
    }
}

/// A set of producers whose output channels are coupled; pruned as a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLayer {
    pub index: usize,
    /// Producer ids joined with `+`.
    pub name: String,
    pub producers: Vec<String>,
    /// Non-pinned groups, ascending.
    pub groups: Vec<GroupId>,
}

/// Positions to zero when a group is masked: `width` dim-0 entries of
/// `value` starting at `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroRange {
    pub value: String,
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct ChannelAnalysis {
    groups: Vec<ChannelGroup>,
    layers: Vec<PruneLayer>,
    zero_points: Vec<Vec<ZeroRange>>,
    producer_channels: BTreeMap<String, Vec<GroupId>>,
    warnings: Vec<String>,
}

impl ChannelAnalysis {
    /// All groups, pinned ones included; `groups()[id].id == id`.
    pub fn groups(&self) -> &[ChannelGroup] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> Result<&ChannelGroup> {
        self.groups.get(id).ok_or(Error::UnknownGroup(id))
    }

    pub fn prunable_groups(&self) -> impl Iterator<Item = &ChannelGroup> {
        self.groups.iter().filter(|g| !g.pinned)
    }

    pub fn layers(&self) -> &[PruneLayer] {
        &self.layers
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&PruneLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn zero_points(&self, id: GroupId) -> &[ZeroRange] {
        &self.zero_points[id]
    }

    /// Group of every output channel of each producer node.
    pub fn producer_channels(&self) -> &BTreeMap<String, Vec<GroupId>> {
        &self.producer_channels
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Rejects unknown and pinned groups.
    pub fn validate_drop(&self, dropped: &BTreeSet<GroupId>) -> Result<()> {
        for &id in dropped {
            if self.group(id)?.pinned {
                return Err(Error::PinnedGroup(id));
            }
        }
        Ok(())
    }

    /// Output channels of `node` left after dropping `dropped`.
    pub fn remaining_channels(&self, node: &str, dropped: &BTreeSet<GroupId>) -> usize {
        self.producer_channels
            .get(node)
            .map_or(0, |chs| chs.iter().filter(|g| !dropped.contains(g)).count())
    }

    pub fn check_min_channels(&self, dropped: &BTreeSet<GroupId>, min_channels: usize) -> Result<()> {
        for (node, chs) in &self.producer_channels {
            let remaining = chs.iter().filter(|g| !dropped.contains(g)).count();
            let touched = chs.iter().any(|g| dropped.contains(g));
            if touched && remaining < min_channels {
                return Err(Error::BelowMinChannels {
                    node: node.clone(),
                    remaining,
                    min: min_channels,
                });
            }
        }
        Ok(())
    }

    /// Length of the longest prefix of `order` that can be added to `base`
    /// without leaving any producer below `min_channels`.
    pub fn max_prefix(&self, order: &[GroupId], base: &BTreeSet<GroupId>, min_channels: usize) -> usize {
        let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
        for (node, chs) in &self.producer_channels {
            remaining.insert(node, chs.iter().filter(|g| !base.contains(g)).count());
        }
        for (k, &id) in order.iter().enumerate() {
            let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
            for s in self.groups[id].producer_slots() {
                *hits.entry(s.node.as_str()).or_default() += 1;
            }
            if hits.iter().any(|(n, &h)| remaining[n] < h + min_channels) {
                return k;
            }
            for (n, h) in hits {
                *remaining.get_mut(n).unwrap() -= h;
            }
        }
        order.len()
    }

    /// Machine-readable group table: zeroing points and slots per group.
    pub fn group_table(&self) -> GroupTable {
        GroupTable {
            groups: self
                .groups
                .iter()
                .map(|g| GroupTableEntry {
                    id: g.id,
                    pinned: g.pinned,
                    layer: g.layer.map(|l| self.layers[l].name.clone()),
                    zero: self.zero_points[g.id].clone(),
                    slots: g.slots.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub groups: Vec<GroupTableEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTableEntry {
    pub id: GroupId,
    pub pinned: bool,
    pub layer: Option<String>,
    pub zero: Vec<ZeroRange>,
    pub slots: Vec<ChannelSlot>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn add(&mut self) -> usize {
        self.0.push(self.0.len());
        self.0.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// Unions by smaller root so the representative is the oldest element.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

#[derive(Clone, Copy)]
struct Entry {
    elem: usize,
    width: usize,
}

struct Walker<'g> {
    g: &'g ModelGraph,
    uf: UnionFind,
    pinned: Vec<bool>,
    layouts: BTreeMap<String, Vec<Entry>>,
    slots: Vec<(usize, ChannelSlot)>,
    producers: Vec<(String, Vec<usize>)>,
    warnings: Vec<String>,
}

impl<'g> Walker<'g> {
    fn fresh(&mut self, n: usize, pinned: bool) -> Vec<Entry> {
        (0..n)
            .map(|_| {
                let elem = self.uf.add();
                self.pinned.push(pinned);
                Entry { elem, width: 1 }
            })
            .collect()
    }

    fn pin(&mut self, layout: &[Entry]) {
        for e in layout {
            self.pinned[e.elem] = true;
        }
    }

    fn layout(&self, value: &str) -> Vec<Entry> {
        self.layouts[value].clone()
    }

    fn slot(&mut self, elem: usize, node: &str, role: SlotRole, channel: usize, span: usize) {
        self.slots.push((
            elem,
            ChannelSlot {
                node: node.to_string(),
                role,
                channel,
                span,
            },
        ));
    }

    fn consumer_slots(&mut self, node: &str, layout: &[Entry], role: SlotRole) {
        let mut offset = 0;
        for e in layout {
            self.slot(e.elem, node, role, offset, e.width);
            offset += e.width;
        }
    }

    fn producer(&mut self, node: &str, input: &[Entry], out_channels: usize, pinned: bool) -> Vec<Entry> {
        self.consumer_slots(node, input, SlotRole::ConsumerIn);
        let out = self.fresh(out_channels, pinned);
        for (c, e) in out.iter().enumerate() {
            self.slot(e.elem, node, SlotRole::ProducerOut, c, 1);
        }
        self.producers.push((node.to_string(), out.iter().map(|e| e.elem).collect()));
        out
    }

    fn walk(&mut self, exclusions: &BTreeSet<&str>) {
        for spec in self.g.inputs() {
            let layout = self.fresh(spec.dims[0], true);
            self.layouts.insert(spec.name.clone(), layout);
        }
        for node in self.g.nodes() {
            let acts: Vec<&str> = self.g.activation_inputs(node).collect();
            let out = match &node.op {
                Op::Conv(a) => {
                    let x = self.layout(acts[0]);
                    let out_channels = self.g.weight(&node.inputs[1]).expect("validated").shape()[0];
                    let grouped = a.group > 1;
                    if grouped {
                        self.pin(&x);
                        self.warnings.push(format!(
                            "node `{}`: grouped convolution (group={}), its channels are pinned",
                            node.id, a.group
                        ));
                    }
                    self.producer(&node.id, &x, out_channels, grouped)
                }
                Op::Gemm(_) | Op::MatMul => {
                    let x = self.layout(acts[0]);
                    let out_channels = self.g.value_dims(node.output()).expect("inferred")[0];
                    self.producer(&node.id, &x, out_channels, false)
                }
                Op::BatchNorm { .. } => {
                    let x = self.layout(acts[0]);
                    self.consumer_slots(&node.id, &x, SlotRole::NormChannel);
                    x
                }
                Op::Relu | Op::MaxPool(_) | Op::AveragePool(_) | Op::GlobalAveragePool => self.layout(acts[0]),
                Op::Add if acts.len() == 2 => {
                    let a = self.layout(acts[0]);
                    let b = self.layout(acts[1]);
                    let aligned = a.len() == b.len() && a.iter().zip(&b).all(|(p, q)| p.width == q.width);
                    if aligned {
                        for (p, q) in a.iter().zip(&b) {
                            self.uf.union(p.elem, q.elem);
                        }
                    } else {
                        self.pin(&a);
                        self.pin(&b);
                        self.warnings.push(format!(
                            "node `{}`: add operands have misaligned channel layouts, channels pinned",
                            node.id
                        ));
                    }
                    a
                }
                Op::Add => {
                    let x = self.layout(acts[0]);
                    let c = node.inputs.iter().find(|i| self.g.is_constant(i)).expect("validated");
                    let dims = self.g.value_dims(acts[0]).expect("inferred");
                    let shape = self.g.weight(c).expect("validated").shape();
                    if let Some(BiasLayout::PerChannel { .. }) = ModelGraph::bias_layout(dims, shape) {
                        self.consumer_slots(&node.id, &x, SlotRole::NormChannel);
                    }
                    x
                }
                Op::Concat { .. } => acts.iter().flat_map(|v| self.layout(v)).collect(),
                Op::Flatten { .. } | Op::Reshape => {
                    let dims = self.g.value_dims(acts[0]).expect("inferred");
                    let factor: usize = dims[1..].iter().product();
                    self.layout(acts[0])
                        .into_iter()
                        .map(|e| Entry {
                            elem: e.elem,
                            width: e.width * factor,
                        })
                        .collect()
                }
                Op::Opaque { .. } => {
                    for v in &acts {
                        let x = self.layout(v);
                        self.pin(&x);
                    }
                    for o in &node.outputs[1..] {
                        let n = self.g.value_dims(o).expect("inferred")[0];
                        let layout = self.fresh(n, true);
                        self.layouts.insert(o.clone(), layout);
                    }
                    let n = self.g.value_dims(node.output()).expect("inferred")[0];
                    self.fresh(n, true)
                }
            };
            if exclusions.contains(node.id.as_str()) || exclusions.contains(node.op.op_type()) {
                self.pin(&out);
            }
            self.layouts.insert(node.output().to_string(), out);
        }
        for spec in self.g.outputs() {
            let layout = self.layout(&spec.name);
            self.pin(&layout);
        }
    }
}

/// Partitions the producer channels of `g` into coupled groups and layers.
///
/// `exclusions` lists node ids or op types whose outputs must never shrink;
/// graph outputs are always pinned. Entries matching nothing are rejected.
pub fn build_channel_groups(g: &ModelGraph, exclusions: &[impl AsRef<str>]) -> Result<ChannelAnalysis> {
    let excl: BTreeSet<&str> = exclusions.iter().map(AsRef::as_ref).collect();
    for e in &excl {
        if !g.nodes().iter().any(|n| n.id == *e || n.op.op_type() == *e) {
            return Err(Error::Config(format!("exclusion `{e}` matches no node id or op type")));
        }
    }
    let mut w = Walker {
        g,
        uf: UnionFind(Vec::new()),
        pinned: Vec::new(),
        layouts: BTreeMap::new(),
        slots: Vec::new(),
        producers: Vec::new(),
        warnings: Vec::new(),
    };
    w.walk(&excl);

    let n_elems = w.pinned.len();
    let mut root_pinned = vec![false; n_elems];
    for e in 0..n_elems {
        let r = w.uf.find(e);
        root_pinned[r] |= w.pinned[e];
    }

    let mut group_of_root: BTreeMap<usize, GroupId> = BTreeMap::new();
    let mut groups: Vec<ChannelGroup> = Vec::new();
    let mut producer_channels = BTreeMap::new();
    for (node, elems) in &w.producers {
        let mut chs = Vec::with_capacity(elems.len());
        for &e in elems {
            let r = w.uf.find(e);
            let id = *group_of_root.entry(r).or_insert_with(|| {
                groups.push(ChannelGroup {
                    id: groups.len(),
                    slots: Vec::new(),
                    pinned: root_pinned[r],
                    layer: None,
                });
                groups.len() - 1
            });
            chs.push(id);
        }
        producer_channels.insert(node.clone(), chs);
    }
    for (e, slot) in std::mem::take(&mut w.slots) {
        let r = w.uf.find(e);
        if let Some(&id) = group_of_root.get(&r) {
            groups[id].slots.push(slot);
        }
    }

    let mut zero_points = vec![Vec::new(); groups.len()];
    let values = g
        .inputs()
        .iter()
        .map(|s| s.name.as_str())
        .chain(g.nodes().iter().flat_map(|n| n.outputs.iter().map(String::as_str)));
    for v in values {
        let mut offset = 0;
        for e in &w.layouts[v] {
            let r = w.uf.find(e.elem);
            if let Some(&id) = group_of_root.get(&r) {
                zero_points[id].push(ZeroRange {
                    value: v.to_string(),
                    start: offset,
                    width: e.width,
                });
            }
            offset += e.width;
        }
    }

    // Producers sharing any group form one layer.
    let names: Vec<&str> = w.producers.iter().map(|(n, _)| n.as_str()).collect();
    let mut puf = UnionFind(Vec::new());
    for _ in &names {
        puf.add();
    }
    let mut first_producer: BTreeMap<GroupId, usize> = BTreeMap::new();
    for (pi, name) in names.iter().enumerate() {
        for &id in &producer_channels[*name] {
            match first_producer.get(&id) {
                Some(&other) => puf.union(other, pi),
                None => {
                    first_producer.insert(id, pi);
                }
            }
        }
    }
    let mut layer_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut layers: Vec<PruneLayer> = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let prunable: Vec<GroupId> = producer_channels[*name].iter().copied().filter(|&id| !groups[id].pinned).collect();
        if prunable.is_empty() {
            continue;
        }
        let r = puf.find(pi);
        let li = *layer_of_root.entry(r).or_insert_with(|| {
            layers.push(PruneLayer {
                index: layers.len(),
                name: String::new(),
                producers: Vec::new(),
                groups: Vec::new(),
            });
            layers.len() - 1
        });
        let layer = &mut layers[li];
        layer.producers.push(name.to_string());
        layer.groups.extend(prunable);
    }
    for layer in &mut layers {
        layer.name = layer.producers.join("+");
        layer.groups.sort_unstable();
        layer.groups.dedup();
        for &id in &layer.groups {
            groups[id].layer = Some(layer.index);
        }
    }
    for w in &w.warnings {
        log::warn!("{w}");
    }

    Ok(ChannelAnalysis {
        groups,
        layers,
        zero_points,
        producer_channels,
        warnings: w.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;
    use crate::graph::toy::{build_toy_model, toy_exclusions, ToyArch};
    use crate::tensor::Tensor;

    fn chain() -> ModelGraph {
        let mut b = GraphBuilder::new("chain");
        let x = b.input("x", vec![2, 6, 6]);
        let c1 = b.conv("c1", &x, Tensor::zeros(vec![4, 2, 3, 3]), None, [1, 1], [1, 1, 1, 1], 1);
        let r = b.relu("r1", &c1);
        let c2 = b.conv("c2", &r, Tensor::zeros(vec![3, 4, 3, 3]), None, [1, 1], [1, 1, 1, 1], 1);
        b.output(&c2);
        b.build().unwrap()
    }

    #[test]
    fn plain_chain_has_one_group_per_channel() {
        let a = build_channel_groups(&chain(), &["c2"]).unwrap();
        assert_eq!(a.prunable_groups().count(), 4);
        assert_eq!(a.layers().len(), 1);
        assert_eq!(a.layers()[0].name, "c1");
        for g in a.prunable_groups() {
            assert_eq!(g.producer_slots().count(), 1);
            assert!(g.slots.iter().any(|s| s.role == SlotRole::ConsumerIn && s.node == "c2"));
        }
        assert!(a.groups().iter().filter(|g| g.pinned).count() == 3);
    }

    #[test]
    fn unknown_exclusion_is_config_error() {
        assert!(matches!(build_channel_groups(&chain(), &["nope"]), Err(Error::Config(_))));
    }

    #[test]
    fn toy_a_counts_and_skip_coupling() {
        let g = build_toy_model(0, ToyArch::ToyMtA);
        let a = build_channel_groups(&g, &toy_exclusions(ToyArch::ToyMtA)).unwrap();
        // conv1 16 + conv2/conv3 16 + conv4 24 + conv5 8 + conv6 32 + fc1 24 + conv7 4
        assert_eq!(a.prunable_groups().count(), 124);
        assert_eq!(a.layers().len(), 7);
        let skip = a.layer_by_name("conv2+conv3").expect("coupled layer");
        assert_eq!(skip.groups.len(), 16);
        let c2 = &a.producer_channels()["conv2"];
        let c3 = &a.producer_channels()["conv3"];
        assert_eq!(c2, c3, "add-joined outputs share groups index by index");
        assert!(a.warnings().is_empty());
    }

    #[test]
    fn toy_b_counts() {
        let g = build_toy_model(0, ToyArch::ToyMtB);
        let a = build_channel_groups(&g, &toy_exclusions(ToyArch::ToyMtB)).unwrap();
        // conv1/conv3 12 + conv2 12 + conv4 16 + conv5 16 + conv6 24 + fc1 16
        assert_eq!(a.prunable_groups().count(), 96);
        assert!(a.layer_by_name("conv1+conv3").is_some());
    }

    #[test]
    fn partition_property() {
        for arch in [ToyArch::ToyMtA, ToyArch::ToyMtB] {
            let g = build_toy_model(3, arch);
            let a = build_channel_groups(&g, &toy_exclusions(arch)).unwrap();
            let slot_count: usize = a.prunable_groups().map(|g| g.producer_slots().count()).sum();
            let channel_count: usize = a
                .layers()
                .iter()
                .flat_map(|l| &l.producers)
                .map(|p| a.producer_channels()[p].len())
                .sum();
            assert_eq!(slot_count, channel_count);
            let mut seen = BTreeSet::new();
            for chs in a.producer_channels().values() {
                seen.extend(chs.iter().copied());
            }
            assert_eq!(seen.len(), a.groups().len());
        }
    }

    #[test]
    fn flatten_widths_propagate_to_dense_consumer() {
        let g = build_toy_model(0, ToyArch::ToyMtA);
        let a = build_channel_groups(&g, &toy_exclusions(ToyArch::ToyMtA)).unwrap();
        let conv7 = a.layer_by_name("conv7").unwrap();
        let grp = a.group(conv7.groups[1]).unwrap();
        let head = grp.slots.iter().find(|s| s.node == "head_reg").unwrap();
        assert_eq!((head.channel, head.span), (64, 64));
    }

    #[test]
    fn grouped_conv_pinned_with_warning() {
        let mut b = GraphBuilder::new("dw");
        let x = b.input("x", vec![2, 4, 4]);
        let c1 = b.conv("c1", &x, Tensor::zeros(vec![4, 2, 1, 1]), None, [1, 1], [0; 4], 1);
        let dw = b.conv("dw", &c1, Tensor::zeros(vec![4, 1, 3, 3]), None, [1, 1], [1; 4], 4);
        let c2 = b.conv("c2", &dw, Tensor::zeros(vec![2, 4, 1, 1]), None, [1, 1], [0; 4], 1);
        b.output(&c2);
        let a = build_channel_groups(&b.build().unwrap(), &["c2"]).unwrap();
        assert_eq!(a.prunable_groups().count(), 0);
        assert_eq!(a.warnings().len(), 1);
    }

    #[test]
    fn max_prefix_respects_min_channels() {
        let a = build_channel_groups(&chain(), &["c2"]).unwrap();
        let order: Vec<GroupId> = a.layers()[0].groups.clone();
        assert_eq!(a.max_prefix(&order, &BTreeSet::new(), 1), 3);
        assert_eq!(a.max_prefix(&order, &BTreeSet::from([order[0]]), 2), 1);
        assert!(a.check_min_channels(&order.iter().copied().collect(), 1).is_err());
    }
}
