//! The per-layer building blocks of an iteration.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::graph::cost::CostConfig;
use crate::graph::groups::{ChannelAnalysis, GroupId};
use crate::graph::prune::apply_pruning;
use crate::graph::ModelGraph;
use crate::oracle::{perf_drop, relative_change, DropMetric, LossOracle, TaskLossVector};
use crate::scheduler::flops_reduction;

/// The value compared against `d_i`: the sensitive task's `|Δℒ|` under
/// `linf`, the metric over all tasks otherwise.
pub fn constraint_value(delta: &[f64], metric: DropMetric, task: usize) -> f64 {
    match metric {
        DropMetric::Linf => delta[task].abs(),
        m => perf_drop(delta, m).0,
    }
}

/// Oracle calls for one layer search, memoized by mask.
pub struct LayerProbe<'a> {
    oracle: &'a mut dyn LossOracle,
    g: &'a ModelGraph,
    analysis: &'a ChannelAnalysis,
    base: &'a BTreeSet<GroupId>,
    seen: BTreeMap<usize, TaskLossVector>,
    evaluations: usize,
}

impl<'a> LayerProbe<'a> {
    /// `base` is already masked; requests extend it by prefixes of one order.
    pub fn new(oracle: &'a mut dyn LossOracle, g: &'a ModelGraph, analysis: &'a ChannelAnalysis, base: &'a BTreeSet<GroupId>) -> Result<Self> {
        oracle.prepare(g, analysis, base)?;
        Ok(Self {
            oracle,
            g,
            analysis,
            base,
            seen: BTreeMap::new(),
            evaluations: 0,
        })
    }

    /// Losses with `base` plus the first `k` groups of `order` masked.
    pub fn prefix(&mut self, order: &[GroupId], k: usize) -> Result<TaskLossVector> {
        if let Some(v) = self.seen.get(&k) {
            return Ok(v.clone());
        }
        let mut mask = self.base.clone();
        mask.extend(&order[..k]);
        let v = self.oracle.evaluate(self.g, self.analysis, &mask)?;
        self.evaluations += 1;
        self.seen.insert(k, v.clone());
        Ok(v)
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub task: usize,
    pub delta: Vec<f64>,
    pub no_sensitivity: bool,
}

/// Masks the first `chunk` groups of `order` and picks the task whose loss moves most.
pub fn detect_sensitive_task(
    probe: &mut LayerProbe<'_>,
    order: &[GroupId],
    chunk: usize,
    baseline: &TaskLossVector,
    metric: DropMetric,
) -> Result<Sensitivity> {
    let losses = probe.prefix(order, chunk.min(order.len()))?;
    let delta = relative_change(baseline, &losses)?.values;
    let (_, task) = perf_drop(&delta, metric);
    Ok(Sensitivity {
        task,
        no_sensitivity: delta.iter().all(|d| *d == 0.0),
        delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    /// Accepted prefix length of `order`.
    pub accepted: usize,
    pub achieved_drop: f64,
    pub losses: TaskLossVector,
}

/// Extends the mask chunk by chunk along `order` until the drop would exceed
/// `threshold`; the violating chunk is rolled back. At most `limit` groups.
#[allow(clippy::too_many_arguments)]
pub fn prune_layer_greedy(
    probe: &mut LayerProbe<'_>,
    order: &[GroupId],
    chunk: usize,
    limit: usize,
    threshold: f64,
    task: usize,
    baseline: &TaskLossVector,
    metric: DropMetric,
) -> Result<GreedyOutcome> {
    let limit = limit.min(order.len());
    let mut out = GreedyOutcome {
        accepted: 0,
        achieved_drop: 0.0,
        losses: baseline.clone(),
    };
    let chunk = chunk.max(1);
    while out.accepted < limit {
        let k = (out.accepted + chunk).min(limit);
        let losses = probe.prefix(order, k)?;
        let drop = constraint_value(&relative_change(baseline, &losses)?.values, metric, task);
        if drop > threshold {
            break;
        }
        out = GreedyOutcome {
            accepted: k,
            achieved_drop: drop,
            losses,
        };
    }
    Ok(out)
}

/// Keeps the `⌈p·n⌉` candidates with the largest FLOPs contribution on `g0`
/// (ties by layer index) and rebuilds `g0` with only their drops.
///
/// `candidates` holds `(layer index, dropped groups)`; returns the kept
/// positions into `candidates`, every contribution, and the rebuilt graph.
pub fn filter_top_p(
    g0: &ModelGraph,
    analysis: &ChannelAnalysis,
    candidates: &[(usize, Vec<GroupId>)],
    p: f64,
    min_channels: usize,
) -> Result<(Vec<usize>, Vec<u64>, ModelGraph)> {
    let cost = CostConfig::default();
    let contributions = candidates
        .iter()
        .map(|(_, d)| flops_reduction(g0, analysis, &d.iter().copied().collect(), cost))
        .collect::<Result<Vec<u64>>>()?;
    let keep = ((p * candidates.len() as f64).ceil() as usize).min(candidates.len());
    let mut ranked: Vec<usize> = (0..candidates.len()).collect();
    ranked.sort_by(|&a, &b| contributions[b].cmp(&contributions[a]).then(candidates[a].0.cmp(&candidates[b].0)));
    let mut kept: Vec<usize> = ranked[..keep].to_vec();
    kept.sort_unstable();
    let dropped: BTreeSet<GroupId> = kept.iter().flat_map(|&i| candidates[i].1.iter().copied()).collect();
    let rebuilt = apply_pruning(g0, analysis, &dropped, min_channels)?;
    Ok((kept, contributions, rebuilt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;
    use crate::graph::groups::build_channel_groups;
    use crate::graph::toy::{build_toy_model, toy_exclusions, ToyArch};
    use crate::tensor::Tensor;

    /// Task 0 loss grows by `step` per masked group; task 1 is constant.
    struct Counting {
        step: f64,
    }

    impl LossOracle for Counting {
        fn task_names(&self) -> Vec<String> {
            vec!["a".into(), "b".into()]
        }

        fn evaluate(&mut self, _: &ModelGraph, _: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<TaskLossVector> {
            TaskLossVector::new(&self.task_names(), &[1.0 + self.step * mask.len() as f64, 2.0], "mock")
        }
    }

    fn wide() -> (ModelGraph, ChannelAnalysis) {
        let mut b = GraphBuilder::new("wide");
        let x = b.input("x", vec![2]);
        let y = b.gemm("fc", &x, Tensor::from_fn(vec![10, 2], |i| i as f32), None);
        let z = b.gemm("head", &y, Tensor::from_fn(vec![1, 10], |_| 1.0), None);
        b.output(&z);
        let g = b.build().unwrap();
        let a = build_channel_groups(&g, &["head"]).unwrap();
        (g, a)
    }

    #[test]
    fn closed_form_mock_drops_five() {
        let (g, a) = wide();
        let mut oracle = Counting { step: 0.01 };
        let base = BTreeSet::new();
        let baseline = oracle.evaluate(&g, &a, &base).unwrap();
        let mut probe = LayerProbe::new(&mut oracle, &g, &a, &base).unwrap();
        let order: Vec<GroupId> = (0..10).collect();
        let s = detect_sensitive_task(&mut probe, &order, 1, &baseline, DropMetric::Linf).unwrap();
        assert_eq!(s.task, 0);
        assert!(!s.no_sensitivity);
        let out = prune_layer_greedy(&mut probe, &order, 1, 9, 0.055, s.task, &baseline, DropMetric::Linf).unwrap();
        assert_eq!(out.accepted, 5);
        assert!(out.achieved_drop <= 0.055);
        // The detection evaluation is reused for the first chunk.
        assert_eq!(probe.evaluations(), 6);
    }

    #[test]
    fn first_chunk_violation_drops_nothing() {
        let (g, a) = wide();
        let mut oracle = Counting { step: 0.01 };
        let base = BTreeSet::new();
        let baseline = oracle.evaluate(&g, &a, &base).unwrap();
        let mut probe = LayerProbe::new(&mut oracle, &g, &a, &base).unwrap();
        let order: Vec<GroupId> = (0..10).collect();
        let out = prune_layer_greedy(&mut probe, &order, 2, 9, 0.015, 0, &baseline, DropMetric::Linf).unwrap();
        assert_eq!((out.accepted, out.achieved_drop), (0, 0.0));
        assert_eq!(out.losses, baseline);
    }

    #[test]
    fn constant_oracle_reaches_limit() {
        let (g, a) = wide();
        let mut oracle = Counting { step: 0.0 };
        let base = BTreeSet::new();
        let baseline = oracle.evaluate(&g, &a, &base).unwrap();
        let mut probe = LayerProbe::new(&mut oracle, &g, &a, &base).unwrap();
        let order: Vec<GroupId> = (0..10).collect();
        let s = detect_sensitive_task(&mut probe, &order, 3, &baseline, DropMetric::Linf).unwrap();
        assert_eq!((s.task, s.no_sensitivity), (0, true));
        let out = prune_layer_greedy(&mut probe, &order, 3, 9, 0.01, 0, &baseline, DropMetric::Linf).unwrap();
        assert_eq!(out.accepted, 9);
    }

    #[test]
    fn sensitive_task_is_the_larger_mover() {
        struct Fixed;
        impl LossOracle for Fixed {
            fn task_names(&self) -> Vec<String> {
                vec!["a".into(), "b".into()]
            }
            fn evaluate(&mut self, _: &ModelGraph, _: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<TaskLossVector> {
                let v = if mask.is_empty() { [1.0, 1.0] } else { [1.01, 1.08] };
                TaskLossVector::new(&self.task_names(), &v, "mock")
            }
        }
        let (g, a) = wide();
        let mut oracle = Fixed;
        let base = BTreeSet::new();
        let baseline = oracle.evaluate(&g, &a, &base).unwrap();
        let mut probe = LayerProbe::new(&mut oracle, &g, &a, &base).unwrap();
        let s = detect_sensitive_task(&mut probe, &[0, 1], 1, &baseline, DropMetric::Linf).unwrap();
        assert_eq!(s.task, 1);
    }

    #[test]
    fn top_p_selection_and_isolation() {
        let arch = ToyArch::ToyMtA;
        let g = build_toy_model(0, arch);
        let a = build_channel_groups(&g, &toy_exclusions(arch)).unwrap();
        let pick = |name: &str, n: usize| (a.layer_by_name(name).unwrap().index, a.layer_by_name(name).unwrap().groups[..n].to_vec());
        let cands = vec![pick("conv1", 2), pick("conv6", 8), pick("conv7", 1)];
        let (kept, contrib, _) = filter_top_p(&g, &a, &cands, 2.0 / 3.0, 1).unwrap();
        let mut by_c: Vec<usize> = (0..3).collect();
        by_c.sort_by(|&x, &y| contrib[y].cmp(&contrib[x]));
        let mut top2 = by_c[..2].to_vec();
        top2.sort_unstable();
        assert_eq!(kept, top2);

        let (kept, _, full) = filter_top_p(&g, &a, &cands, 1.0, 1).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        let all: BTreeSet<GroupId> = cands.iter().flat_map(|c| c.1.iter().copied()).collect();
        assert!(full.same_as(&apply_pruning(&g, &a, &all, 1).unwrap()));

        let (kept, _, one) = filter_top_p(&g, &a, &cands, 0.1, 1).unwrap();
        assert_eq!(kept.len(), 1);
        let only: BTreeSet<GroupId> = cands[kept[0]].1.iter().copied().collect();
        assert!(one.same_as(&apply_pruning(&g, &a, &only, 1).unwrap()));
    }
}
