//! Layer ordering and the geometric drop-threshold schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::cost::{count_cost, CostConfig};
use crate::graph::groups::{ChannelAnalysis, GroupId};
use crate::graph::prune::apply_pruning;
use crate::graph::ModelGraph;
use crate::saliency::SaliencyTable;

pub const MAX_BISECTION_ITERATIONS: usize = 200;
pub const LAMBDA_RTOL: f64 = 1e-9;
pub const DEFAULT_PROBE_RATIO: f64 = 0.3;

/// `∏_{i<L} (1 + d1·λ^i)`.
pub fn threshold_product(d1: f64, lambda: f64, layers: usize) -> f64 {
    thresholds(d1, lambda, layers).iter().map(|d| 1.0 + d).product()
}

/// `d_1, λ·d_1, λ·(λ·d_1), ...`, built by repeated multiplication.
pub fn thresholds(d1: f64, lambda: f64, layers: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers);
    let mut d = d1;
    for _ in 0..layers {
        out.push(d);
        d *= lambda;
    }
    out
}

/// Finds λ with `∏ (1 + d1·λ^(i−1)) = alpha` over `layers` factors.
pub fn solve_lambda(alpha: f64, d1: f64, layers: usize) -> Result<f64> {
    if !(d1 > 0.0 && d1 < 1.0) {
        return Err(Error::Config(format!("d1 must lie in (0, 1), got {d1}")));
    }
    if layers == 0 {
        return Err(Error::Config("at least one layer is required".into()));
    }
    if !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be finite, got {alpha}")));
    }
    let tol = LAMBDA_RTOL * alpha;
    if layers == 1 {
        if (alpha - (1.0 + d1)).abs() <= tol {
            return Ok(1.0);
        }
        return Err(Error::Infeasible(format!("with one layer alpha must equal 1 + d1 = {}, got {alpha}", 1.0 + d1)));
    }
    if alpha <= 1.0 + d1 {
        return Err(Error::Infeasible(format!("alpha {alpha} must exceed 1 + d1 = {}", 1.0 + d1)));
    }
    let f = |l: f64| threshold_product(d1, l, layers);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) < alpha {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NonConvergence {
                iterations: 0,
                residual: f64::INFINITY,
            });
        }
    }
    if f(hi) == alpha {
        return Ok(hi);
    }
    let mut iterations = 0;
    while iterations < MAX_BISECTION_ITERATIONS {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if v == alpha {
            return Ok(mid);
        }
        if v < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rl, rh) = ((f(lo) - alpha).abs(), (f(hi) - alpha).abs());
    let (best, residual) = if rh <= rl { (hi, rh) } else { (lo, rl) };
    if residual <= tol {
        Ok(best)
    } else {
        Err(Error::NonConvergence { iterations, residual })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub d1: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub thresholds: Vec<f64>,
}

impl ThresholdSchedule {
    pub fn new(alpha: f64, d1: f64, layers: usize) -> Result<Self> {
        let lambda = solve_lambda(alpha, d1, layers)?;
        Ok(Self {
            d1,
            lambda,
            alpha,
            thresholds: thresholds(d1, lambda, layers),
        })
    }

    pub fn residual(&self) -> f64 {
        (self.thresholds.iter().map(|d| 1.0 + d).product::<f64>() - self.alpha).abs()
    }

    pub fn is_consistent(&self) -> bool {
        self.thresholds == thresholds(self.d1, self.lambda, self.thresholds.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOrder {
    /// Layer names in pruning order.
    pub sequence: Vec<String>,
    pub probe_ratio: f64,
    /// FLOPs removed by probe-pruning each layer alone.
    pub contributions: BTreeMap<String, u64>,
}

/// The lowest-saliency `⌈ratio·K⌉` groups of `layer`, capped by `min_channels`.
pub fn probe_drop(analysis: &ChannelAnalysis, saliency: &SaliencyTable, layer: usize, ratio: f64, min_channels: usize) -> BTreeSet<GroupId> {
    let groups = &analysis.layers()[layer].groups;
    let ordered = saliency.ascending(groups);
    let want = ((ratio * groups.len() as f64).ceil() as usize).min(groups.len());
    let allowed = analysis.max_prefix(&ordered, &BTreeSet::new(), min_channels);
    ordered[..want.min(allowed)].iter().copied().collect()
}

/// FLOPs removed from `g` by structurally dropping `dropped`.
pub fn flops_reduction(g: &ModelGraph, analysis: &ChannelAnalysis, dropped: &BTreeSet<GroupId>, cost: CostConfig) -> Result<u64> {
    if dropped.is_empty() {
        return Ok(0);
    }
    let before = count_cost(g, cost).total_flops;
    let after = count_cost(&apply_pruning(g, analysis, dropped, 1)?, cost).total_flops;
    Ok(before - after)
}

/// Orders the layers by the FLOPs reduction of a probe pruning at `probe_ratio`.
pub fn rank_layers(
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    saliency: &SaliencyTable,
    probe_ratio: f64,
    lambda: f64,
    min_channels: usize,
) -> Result<LayerOrder> {
    if !(probe_ratio > 0.0 && probe_ratio < 1.0) {
        return Err(Error::Config(format!("probe ratio must lie in (0, 1), got {probe_ratio}")));
    }
    let cost = CostConfig::default();
    let mut scored = Vec::new();
    for layer in analysis.layers() {
        let drop = probe_drop(analysis, saliency, layer.index, probe_ratio, min_channels);
        scored.push((layer.index, flops_reduction(g, analysis, &drop, cost)?));
    }
    Ok(order_by_contribution(analysis, scored, lambda, probe_ratio))
}

pub(crate) fn order_by_contribution(analysis: &ChannelAnalysis, mut scored: Vec<(usize, u64)>, lambda: f64, probe_ratio: f64) -> LayerOrder {
    if lambda < 1.0 {
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    } else {
        scored.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    }
    let name = |i: usize| analysis.layers()[i].name.clone();
    LayerOrder {
        sequence: scored.iter().map(|&(i, _)| name(i)).collect(),
        probe_ratio,
        contributions: scored.iter().map(|&(i, c)| (name(i), c)).collect(),
    }
}

/// One `rank_layers` result per probe ratio.
pub fn sequence_matrix(
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    saliency: &SaliencyTable,
    ratios: &[f64],
    lambda: f64,
    min_channels: usize,
) -> Result<Vec<LayerOrder>> {
    ratios
        .iter()
        .map(|&r| rank_layers(g, analysis, saliency, r, lambda, min_channels))
        .collect()
}

/// `probe_ratio,pos1,..,posL` with one row per order.
pub fn sequence_csv(orders: &[LayerOrder]) -> String {
    let width = orders.iter().map(|o| o.sequence.len()).max().unwrap_or(0);
    let mut s = String::from("probe_ratio");
    for i in 1..=width {
        let _ = write!(s, ",pos{i}");
    }
    s.push('\n');
    for o in orders {
        let _ = write!(s, "{}", o.probe_ratio);
        for name in &o.sequence {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;
    use crate::graph::cost::node_flops;
    use crate::graph::groups::build_channel_groups;
    use crate::graph::toy::{build_toy_model, toy_exclusions, ToyArch};
    use crate::saliency::filter_l1_saliency;
    use crate::tensor::Tensor;

    #[test]
    fn symmetric_case_is_exactly_one() {
        assert_eq!(solve_lambda(1.06 * 1.06, 0.06, 2).unwrap(), 1.0);
    }

    #[test]
    fn thirty_layers_residual() {
        let s = ThresholdSchedule::new(6.0, 0.06, 30).unwrap();
        assert!(s.residual() <= 1e-9 * 6.0);
        assert!(s.is_consistent());
        assert!(s.thresholds.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn infeasible_alpha() {
        assert!(matches!(solve_lambda(1.05, 0.06, 2), Err(Error::Infeasible(_))));
        assert!(matches!(solve_lambda(2.0, 0.06, 1), Err(Error::Infeasible(_))));
        assert_eq!(solve_lambda(1.06, 0.06, 1).unwrap(), 1.0);
        assert!(solve_lambda(2.0, 1.5, 3).is_err());
    }

    #[test]
    fn lambda_increases_with_alpha() {
        let ls: Vec<f64> = [1.5, 2.0, 6.0, 10.0].iter().map(|&a| solve_lambda(a, 0.06, 10).unwrap()).collect();
        assert!(ls.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sort_definition() {
        let mut b = GraphBuilder::new("three");
        let x = b.input("x", vec![2]);
        let mut outs = Vec::new();
        for id in ["a", "b", "c"] {
            outs.push(b.gemm(id, &x, Tensor::from_fn(vec![2, 2], |i| i as f32 + 1.0), None));
        }
        for (i, o) in outs.iter().enumerate() {
            let h = b.gemm(&format!("h{i}"), o, Tensor::from_fn(vec![1, 2], |_| 1.0), None);
            b.output(&h);
        }
        let g = b.build().unwrap();
        let a = build_channel_groups(&g, &["h0", "h1", "h2"]).unwrap();
        let idx = |n: &str| a.layer_by_name(n).unwrap().index;
        let scored = vec![(idx("a"), 100), (idx("b"), 50), (idx("c"), 80)];
        assert_eq!(order_by_contribution(&a, scored.clone(), 0.5, 0.3).sequence, ["a", "c", "b"]);
        assert_eq!(order_by_contribution(&a, scored, 2.0, 0.3).sequence, ["b", "c", "a"]);
        // Identical layers tie and fall back to layer id.
        let t = filter_l1_saliency(&g, &a);
        let o = rank_layers(&g, &a, &t, 0.5, 0.5, 1).unwrap();
        assert_eq!(o.sequence, ["a", "b", "c"]);
        assert_eq!(o.contributions["a"], o.contributions["c"]);
    }

    #[test]
    fn toy_order_and_contribution_floor() {
        let arch = ToyArch::ToyMtA;
        let g = build_toy_model(0, arch);
        let a = build_channel_groups(&g, &toy_exclusions(arch)).unwrap();
        let t = filter_l1_saliency(&g, &a);
        let orders = sequence_matrix(&g, &a, &t, &[0.1, 0.3, 0.5, 0.3], 0.8, 1).unwrap();
        assert_eq!(orders[1], orders[3]);
        let mut names: Vec<&String> = orders[0].sequence.iter().collect();
        names.sort();
        let mut all: Vec<&String> = a.layers().iter().map(|l| &l.name).collect();
        all.sort();
        assert_eq!(names, all);
        let csv = sequence_csv(&orders);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("probe_ratio,pos1,"));

        // Downstream effects only add to the probed filters' own FLOPs.
        let cfg = CostConfig::default();
        for layer in a.layers() {
            let drop = probe_drop(&a, &t, layer.index, 0.3, 1);
            let mut own = 0u64;
            for p in &layer.producers {
                let node = g.node(p).unwrap();
                let k = a.producer_channels()[p].len() as u64;
                let dropped = a.producer_channels()[p].iter().filter(|x| drop.contains(x)).count() as u64;
                own += node_flops(&g, node, cfg) / k * dropped;
            }
            assert!(orders[1].contributions[&layer.name] >= own, "{}", layer.name);
        }
    }
}
