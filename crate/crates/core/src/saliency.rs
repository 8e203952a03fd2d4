//! Group saliencies, pruning probabilities and joint-saliency checkers.
//!
//! Selection uses the filter ℓ1 criterion: each producer filter scores the
//! ℓ1 norm of its weights divided by its element count; a group scores the
//! mean over its producer filters. "At a state" `D`, input slices belonging
//! to groups in `D` are already gone and do not count.
//!
//! The checkers evaluate saliency as the change of a state function `f`:
//! `S(X | D) = ‖f(D) − f(D ∪ X)‖_r`.
//!
//! * `l1_weight`: `f(D)` is the ℓ1 mass of every producer weight left after
//!   removing `D`, each entry divided by the size of its filter. The state is
//!   scalar and monotone, so joint saliency equals the sum of conditionals.
//! * `loss_state`: `f(D)` is the per-sample task-loss vector with `D` masked;
//!   saliency is the batch mean of the per-sample norm.
//! * `clamped_loss_state`: as above with only loss increases counted,
//!   `‖max(f(D ∪ X) − f(D), 0)‖_r`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::groups::{ChannelAnalysis, GroupId, SlotRole};
use crate::graph::{ModelGraph, Op};
use crate::oracle::dataset::EvalDataset;
use crate::oracle::BuiltinOracle;

/// Relative slack of the subadditivity check.
pub const SUBADDITIVITY_RTOL: f64 = 1e-9;
/// Absolute slack of the probability-bound check.
pub const PROBABILITY_ATOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    L1Weight,
    LossState,
    ClampedLossState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyEntry {
    pub group: GroupId,
    pub layer: String,
    pub raw: f64,
    pub normalized: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTable {
    pub entries: BTreeMap<GroupId, SaliencyEntry>,
    pub state_kind: StateKind,
    pub norm_order: u32,
}

impl SaliencyTable {
    pub fn get(&self, id: GroupId) -> Option<&SaliencyEntry> {
        self.entries.get(&id)
    }

    /// `groups` sorted by ascending normalized saliency, ties by group id.
    pub fn ascending(&self, groups: &[GroupId]) -> Vec<GroupId> {
        let mut out = groups.to_vec();
        out.sort_by(|a, b| {
            let (sa, sb) = (self.entries[a].normalized, self.entries[b].normalized);
            sa.total_cmp(&sb).then(a.cmp(b))
        });
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group_id,layer,raw,normalized,probability\n");
        for e in self.entries.values() {
            let _ = writeln!(s, "{},{},{},{},{}", e.group, e.layer, e.raw, e.normalized, e.probability);
        }
        s
    }
}

/// Per-producer view of weights as an `out x in` matrix of ℓ1 blocks.
struct ProducerBlocks {
    node: String,
    out_groups: Vec<GroupId>,
    in_groups: Vec<Option<GroupId>>,
    /// ℓ1 of the weights linking output `o` to input position `i`.
    l1: Vec<f64>,
    /// Element count of each block (0 where a grouped conv has no link).
    count: Vec<usize>,
    /// Element count of each full filter.
    row_size: Vec<usize>,
}

impl ProducerBlocks {
    fn n_in(&self) -> usize {
        self.in_groups.len()
    }

    fn kept(&self, i: usize, dropped: &BTreeSet<GroupId>) -> bool {
        self.in_groups[i].is_none_or(|g| !dropped.contains(&g))
    }
}

/// Weight blocks of every producer, shared by the ℓ1 criterion and the ℓ1 state.
pub struct FilterIndex {
    producers: Vec<ProducerBlocks>,
    by_node: BTreeMap<String, usize>,
}

impl FilterIndex {
    pub fn new(g: &ModelGraph, analysis: &ChannelAnalysis) -> Self {
        let mut producers = Vec::new();
        let mut by_node = BTreeMap::new();
        for node in g.nodes().iter().filter(|n| n.op.is_producer()) {
            let w = g.weight(&node.inputs[1]).expect("validated");
            let n_in = g.value_dims(&node.inputs[0]).expect("inferred")[0];
            let out_groups = analysis.producer_channels()[&node.id].clone();
            let n_out = out_groups.len();
            let mut l1 = vec![0.0f64; n_out * n_in];
            let mut count = vec![0usize; n_out * n_in];
            let d = w.data();
            match &node.op {
                Op::Conv(a) => {
                    let s = w.shape();
                    let (cin_g, k) = (s[1], s[2] * s[3]);
                    let cout_g = n_out / a.group;
                    for o in 0..n_out {
                        for ci in 0..cin_g {
                            let i = (o / cout_g) * cin_g + ci;
                            let start = (o * cin_g + ci) * k;
                            l1[o * n_in + i] = d[start..start + k].iter().map(|v| f64::from(v.abs())).sum();
                            count[o * n_in + i] = k;
                        }
                    }
                }
                Op::Gemm(a) if a.trans_b => {
                    for o in 0..n_out {
                        for i in 0..n_in {
                            l1[o * n_in + i] = f64::from(d[o * n_in + i].abs());
                            count[o * n_in + i] = 1;
                        }
                    }
                }
                _ => {
                    for o in 0..n_out {
                        for i in 0..n_in {
                            l1[o * n_in + i] = f64::from(d[i * n_out + o].abs());
                            count[o * n_in + i] = 1;
                        }
                    }
                }
            }
            let row_size = (0..n_out).map(|o| count[o * n_in..(o + 1) * n_in].iter().sum()).collect();
            by_node.insert(node.id.clone(), producers.len());
            producers.push(ProducerBlocks {
                node: node.id.clone(),
                out_groups,
                in_groups: vec![None; n_in],
                l1,
                count,
                row_size,
            });
        }
        for grp in analysis.groups() {
            for s in grp.slots.iter().filter(|s| s.role == SlotRole::ConsumerIn) {
                let p = &mut producers[by_node[&s.node]];
                for i in s.channel..s.channel + s.span {
                    p.in_groups[i] = Some(grp.id);
                }
            }
        }
        Self { producers, by_node }
    }

    /// (raw ℓ1, element count) of filter `channel` of `node` at state `dropped`.
    pub fn filter_l1(&self, node: &str, channel: usize, dropped: &BTreeSet<GroupId>) -> (f64, usize) {
        let p = &self.producers[self.by_node[node]];
        let n_in = p.n_in();
        let mut raw = 0.0;
        let mut count = 0;
        for i in 0..n_in {
            if p.kept(i, dropped) {
                raw += p.l1[channel * n_in + i];
                count += p.count[channel * n_in + i];
            }
        }
        (raw, count)
    }

    /// Size-normalized ℓ1 mass removed by dropping `x` on top of `dropped`.
    pub fn removed_mass(&self, x: &BTreeSet<GroupId>, dropped: &BTreeSet<GroupId>) -> f64 {
        let mut total = 0.0;
        for p in &self.producers {
            let n_in = p.n_in();
            let hit_cols = p.in_groups.iter().any(|g| g.is_some_and(|g| x.contains(&g)));
            let hit_rows = p.out_groups.iter().any(|g| x.contains(g));
            if !hit_cols && !hit_rows {
                continue;
            }
            for (o, og) in p.out_groups.iter().enumerate() {
                if dropped.contains(og) || p.row_size[o] == 0 {
                    continue;
                }
                let row_hit = x.contains(og);
                let mut acc = 0.0;
                for i in 0..n_in {
                    if !p.kept(i, dropped) {
                        continue;
                    }
                    if row_hit || p.in_groups[i].is_some_and(|g| x.contains(&g)) {
                        acc += p.l1[o * n_in + i];
                    }
                }
                total += acc / p.row_size[o] as f64;
            }
        }
        total
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.producers.iter().map(|p| p.node.as_str())
    }
}

/// Filter ℓ1 saliency of every non-pinned group on the unpruned graph.
pub fn filter_l1_saliency(g: &ModelGraph, analysis: &ChannelAnalysis) -> SaliencyTable {
    filter_l1_saliency_at(g, analysis, &BTreeSet::new())
}

/// Filter ℓ1 saliency at the state where `dropped` is already removed.
pub fn filter_l1_saliency_at(g: &ModelGraph, analysis: &ChannelAnalysis, dropped: &BTreeSet<GroupId>) -> SaliencyTable {
    table_from_index(&FilterIndex::new(g, analysis), analysis, dropped)
}

pub fn table_from_index(index: &FilterIndex, analysis: &ChannelAnalysis, dropped: &BTreeSet<GroupId>) -> SaliencyTable {
    let mut entries = BTreeMap::new();
    for grp in analysis.prunable_groups() {
        let mut raw_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut n = 0usize;
        for s in grp.producer_slots() {
            let (raw, count) = index.filter_l1(&s.node, s.channel, dropped);
            raw_sum += raw;
            norm_sum += if count == 0 { 0.0 } else { raw / count as f64 };
            n += 1;
        }
        let normalized = norm_sum / n as f64;
        entries.insert(
            grp.id,
            SaliencyEntry {
                group: grp.id,
                layer: analysis.layers()[grp.layer.expect("non-pinned groups belong to a layer")].name.clone(),
                raw: raw_sum / n as f64,
                normalized,
                probability: (-normalized).exp(),
            },
        );
    }
    SaliencyTable {
        entries,
        state_kind: StateKind::L1Weight,
        norm_order: 1,
    }
}

/// Evaluates the state function for the checkers.
pub struct StateProbe {
    kind: StateKind,
    norm_order: u32,
    oracle: Option<BuiltinOracle>,
    index: Option<FilterIndex>,
    states: BTreeMap<BTreeSet<GroupId>, Vec<Vec<f64>>>,
}

impl StateProbe {
    pub fn l1_weight(g: &ModelGraph, analysis: &ChannelAnalysis) -> Self {
        Self {
            kind: StateKind::L1Weight,
            norm_order: 1,
            oracle: None,
            index: Some(FilterIndex::new(g, analysis)),
            states: BTreeMap::new(),
        }
    }

    /// Loss-vector state over `sample_batch`; `clamped` counts only increases.
    pub fn loss_state(sample_batch: EvalDataset, clamped: bool, norm_order: u32) -> Result<Self> {
        if norm_order == 0 {
            return Err(Error::Config("norm order must be positive".into()));
        }
        Ok(Self {
            kind: if clamped { StateKind::ClampedLossState } else { StateKind::LossState },
            norm_order,
            oracle: Some(BuiltinOracle::new(sample_batch)),
            index: None,
            states: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    /// Per-task, per-sample losses with `mask` applied; memoized.
    fn state(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<&Vec<Vec<f64>>> {
        if !self.states.contains_key(mask) {
            let oracle = self.oracle.as_mut().expect("loss-state probe");
            let v = oracle.per_sample(g, analysis, mask)?;
            self.states.insert(mask.clone(), v);
        }
        Ok(&self.states[mask])
    }

    /// Cached state values f(x; θ) of the unpruned graph (loss states only).
    pub fn reference_outputs(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis) -> Result<Option<Vec<Vec<f64>>>> {
        if self.kind == StateKind::L1Weight {
            return Ok(None);
        }
        Ok(Some(self.state(g, analysis, &BTreeSet::new())?.clone()))
    }

    /// `S(x | before)`.
    fn delta(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, before: &BTreeSet<GroupId>, x: &BTreeSet<GroupId>) -> Result<f64> {
        if self.kind == StateKind::L1Weight {
            return Ok(self.index.as_ref().expect("l1 probe").removed_mass(x, before));
        }
        let after: BTreeSet<GroupId> = before.union(x).copied().collect();
        let clamped = self.kind == StateKind::ClampedLossState;
        let order = self.norm_order;
        let r = f64::from(order);
        let fa = self.state(g, analysis, before)?.clone();
        let fb = self.state(g, analysis, &after)?;
        let n = fa[0].len();
        let mut total = 0.0;
        for s in 0..n {
            let mut acc = 0.0;
            for t in 0..fa.len() {
                let mut d = fb[t][s] - fa[t][s];
                if clamped {
                    d = d.max(0.0);
                }
                acc += d.abs().powf(r);
            }
            total += if order == 1 { acc } else { acc.powf(1.0 / r) };
        }
        Ok(total / n as f64)
    }
}

fn check_disjoint(analysis: &ChannelAnalysis, ids: &[GroupId]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &id in ids {
        analysis.group(id)?;
        if !seen.insert(id) {
            return Err(Error::InputMismatch(format!("group {id} appears twice")));
        }
    }
    Ok(())
}

/// Saliency of `next` after `first` has been pruned.
pub fn conditional_saliency(
    probe: &mut StateProbe,
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    first: &BTreeSet<GroupId>,
    next: GroupId,
) -> Result<f64> {
    if first.contains(&next) {
        return Err(Error::InputMismatch(format!("group {next} is already in the pruned set")));
    }
    let ids: Vec<GroupId> = first.iter().copied().chain([next]).collect();
    check_disjoint(analysis, &ids)?;
    probe.delta(g, analysis, first, &BTreeSet::from([next]))
}

pub fn marginal_saliency(probe: &mut StateProbe, g: &ModelGraph, analysis: &ChannelAnalysis, id: GroupId) -> Result<f64> {
    conditional_saliency(probe, g, analysis, &BTreeSet::new(), id)
}

/// Saliency of pruning all of `chain` at once.
pub fn joint_saliency(probe: &mut StateProbe, g: &ModelGraph, analysis: &ChannelAnalysis, chain: &[GroupId]) -> Result<f64> {
    check_disjoint(analysis, chain)?;
    probe.delta(g, analysis, &BTreeSet::new(), &chain.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubadditivityCheck {
    pub joint: f64,
    pub bound: f64,
    /// Marginal of the first element, then each conditional in chain order.
    pub terms: Vec<f64>,
    pub holds: bool,
}

/// Joint saliency of `chain` against the marginal-plus-conditionals bound.
pub fn check_subadditivity(probe: &mut StateProbe, g: &ModelGraph, analysis: &ChannelAnalysis, chain: &[GroupId]) -> Result<SubadditivityCheck> {
    if chain.len() < 2 {
        return Err(Error::InputMismatch("a chain needs at least two groups".into()));
    }
    check_disjoint(analysis, chain)?;
    let joint = joint_saliency(probe, g, analysis, chain)?;
    let mut terms = Vec::with_capacity(chain.len());
    let mut prefix = BTreeSet::new();
    for &id in chain {
        terms.push(probe.delta(g, analysis, &prefix, &BTreeSet::from([id]))?);
        prefix.insert(id);
    }
    let bound: f64 = terms.iter().sum();
    Ok(SubadditivityCheck {
        joint,
        bound,
        holds: joint <= bound + SUBADDITIVITY_RTOL * bound.max(1.0),
        terms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityCheck {
    pub p_joint: f64,
    pub p_product: f64,
    pub holds: bool,
}

/// `exp(−joint)` against the product of `exp(−term)` over the chain.
pub fn check_probability_bound(probe: &mut StateProbe, g: &ModelGraph, analysis: &ChannelAnalysis, chain: &[GroupId]) -> Result<ProbabilityCheck> {
    let s = check_subadditivity(probe, g, analysis, chain)?;
    let p_joint = (-s.joint).exp();
    let p_product: f64 = s.terms.iter().map(|t| (-t).exp()).product();
    Ok(ProbabilityCheck {
        p_joint,
        p_product,
        holds: p_joint >= p_product - PROBABILITY_ATOL,
    })
}
