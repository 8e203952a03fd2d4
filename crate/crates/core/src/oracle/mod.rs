//! Loss oracles: per-task losses of a (masked) graph on an evaluation set.

pub mod dataset;
pub mod external;
pub mod forward;
pub mod loss;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::groups::{ChannelAnalysis, GroupId};
use crate::graph::onnx::{export_model, sha256_hex};
use crate::graph::ModelGraph;
use dataset::EvalDataset;
use forward::{forward_cached, forward_incremental, ChannelMask, ValueCache};
use loss::per_sample_loss;

/// Baselines at or below this are compared with absolute instead of relative
/// change.
pub const RELATIVE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLossVector {
    pub values: Vec<TaskLoss>,
    pub batch_id: String,
}

impl TaskLossVector {
    pub fn new(names: &[String], losses: &[f64], batch_id: &str) -> Result<Self> {
        if names.len() != losses.len() {
            return Err(Error::InputMismatch(format!("{} task names for {} losses", names.len(), losses.len())));
        }
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                node: format!("loss of task `{}`", names[i]),
            });
        }
        Ok(Self {
            values: names
                .iter()
                .zip(losses)
                .map(|(t, &l)| TaskLoss { task: t.clone(), loss: l })
                .collect(),
            batch_id: batch_id.into(),
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.loss).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeChange {
    pub values: Vec<f64>,
    /// Components whose baseline was too small; these hold absolute change.
    pub absolute: Vec<bool>,
}

/// `(new_t - base_t) / base_t` per task; absolute change when `base_t <= 1e-12`.
pub fn relative_change(base: &TaskLossVector, new: &TaskLossVector) -> Result<RelativeChange> {
    if base.len() != new.len() || base.values.iter().zip(&new.values).any(|(a, b)| a.task != b.task) {
        return Err(Error::InputMismatch("loss vectors differ in task arity or order".into()));
    }
    let mut out = RelativeChange {
        values: Vec::with_capacity(base.len()),
        absolute: Vec::with_capacity(base.len()),
    };
    for (b, n) in base.values.iter().zip(&new.values) {
        if b.loss <= RELATIVE_EPS {
            log::warn!("task `{}` has baseline loss {:e}; using absolute change", b.task, b.loss);
            out.values.push(n.loss - b.loss);
            out.absolute.push(true);
        } else {
            out.values.push((n.loss - b.loss) / b.loss);
            out.absolute.push(false);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMetric {
    #[default]
    Linf,
    L1Sum,
    L2,
    Min,
}

impl std::str::FromStr for DropMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(DropMetric::Linf),
            "l1_sum" => Ok(DropMetric::L1Sum),
            "l2" => Ok(DropMetric::L2),
            "min" => Ok(DropMetric::Min),
            other => Err(Error::Config(format!("unknown drop metric `{other}`"))),
        }
    }
}

/// Aggregates per-task changes into one drop value plus the task index that
/// attains it: max |Δ| for `linf`, `l1_sum` and `l2` (ties to the lowest
/// index), min |Δ| for `min`.
pub fn perf_drop(delta: &[f64], metric: DropMetric) -> (f64, usize) {
    assert!(!delta.is_empty(), "perf_drop needs at least one task");
    let pick = |better: fn(f64, f64) -> bool| {
        delta
            .iter()
            .enumerate()
            .skip(1)
            .fold((delta[0].abs(), 0), |best, (i, d)| if better(d.abs(), best.0) { (d.abs(), i) } else { best })
    };
    let (max, argmax) = pick(|a, b| a > b);
    match metric {
        DropMetric::Linf => (max, argmax),
        DropMetric::L1Sum => (delta.iter().map(|d| d.abs()).sum(), argmax),
        DropMetric::L2 => (delta.iter().map(|d| d * d).sum::<f64>().sqrt(), argmax),
        DropMetric::Min => pick(|a, b| a < b),
    }
}

/// Source of per-task losses for a graph with some groups masked.
pub trait LossOracle {
    fn task_names(&self) -> Vec<String>;

    /// Hint that upcoming requests extend `base_mask` on `g`.
    fn prepare(&mut self, _g: &ModelGraph, _analysis: &ChannelAnalysis, _base_mask: &BTreeSet<GroupId>) -> Result<()> {
        Ok(())
    }

    fn evaluate(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<TaskLossVector>;
}

/// Per-task, per-sample losses: `result[t][n]`.
pub fn per_sample_losses(g: &ModelGraph, data: &EvalDataset, mask: &ChannelMask) -> Result<Vec<Vec<f64>>> {
    let cache = forward_cached(g, &data.inputs_for(g)?, mask)?;
    losses_from_cache(g, data, &cache)
}

fn losses_from_cache(g: &ModelGraph, data: &EvalDataset, cache: &ValueCache) -> Result<Vec<Vec<f64>>> {
    let outputs = cache.outputs(g);
    data.task_specs
        .iter()
        .zip(&data.targets)
        .map(|(spec, targets)| {
            let pos = g
                .outputs()
                .iter()
                .position(|o| o.name == spec.head)
                .ok_or_else(|| Error::Dataset(format!("`{}` is not a graph output", spec.head)))?;
            per_sample_loss(spec.loss, &outputs[pos], targets)
        })
        .collect()
}

fn mean_losses(data: &EvalDataset, per_sample: &[Vec<f64>]) -> Result<TaskLossVector> {
    let means: Vec<f64> = per_sample.iter().map(|l| l.iter().sum::<f64>() / l.len() as f64).collect();
    TaskLossVector::new(&data.task_names(), &means, &data.fingerprint())
}

/// Mean loss per task over all samples of `data`.
pub fn evaluate_losses(g: &ModelGraph, data: &EvalDataset, mask: &ChannelMask) -> Result<TaskLossVector> {
    mean_losses(data, &per_sample_losses(g, data, mask)?)
}

/// Content hash of a graph (SHA-256 of its export).
pub fn graph_fingerprint(g: &ModelGraph) -> String {
    sha256_hex(&export_model(g))
}

/// The built-in reference engine. Keeps the activations of the last
/// prepared state so masks extending it only recompute downstream nodes.
pub struct BuiltinOracle {
    data: EvalDataset,
    batch_id: String,
    base: Option<(String, ValueCache)>,
    evaluations: usize,
}

impl BuiltinOracle {
    pub fn new(data: EvalDataset) -> Self {
        let batch_id = data.fingerprint();
        Self {
            data,
            batch_id,
            base: None,
            evaluations: 0,
        }
    }

    pub fn data(&self) -> &EvalDataset {
        &self.data
    }

    /// Number of loss evaluations served so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    fn cache_for(&mut self, g: &ModelGraph, mask: &ChannelMask) -> Result<ValueCache> {
        if let Some((fp, base)) = &self.base {
            if base.mask().groups().is_subset(mask.groups()) && *fp == graph_fingerprint(g) {
                return forward_incremental(g, base, mask);
            }
        }
        forward_cached(g, &self.data.inputs_for(g)?, mask)
    }

    /// Per-task, per-sample losses under `mask`.
    pub fn per_sample(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<Vec<Vec<f64>>> {
        let m = ChannelMask::from_groups(g, analysis, mask)?;
        let cache = self.cache_for(g, &m)?;
        self.evaluations += 1;
        losses_from_cache(g, &self.data, &cache)
    }
}

impl LossOracle for BuiltinOracle {
    fn task_names(&self) -> Vec<String> {
        self.data.task_names()
    }

    fn prepare(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, base_mask: &BTreeSet<GroupId>) -> Result<()> {
        let m = ChannelMask::from_groups(g, analysis, base_mask)?;
        let fp = graph_fingerprint(g);
        let reusable = matches!(&self.base, Some((f, c)) if *f == fp && c.mask().groups() == m.groups());
        if !reusable {
            let cache = self.cache_for(g, &m)?;
            self.base = Some((fp, cache));
        }
        Ok(())
    }

    fn evaluate(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<TaskLossVector> {
        let per_sample = self.per_sample(g, analysis, mask)?;
        let means: Vec<f64> = per_sample.iter().map(|l| l.iter().sum::<f64>() / l.len() as f64).collect();
        TaskLossVector::new(&self.data.task_names(), &means, &self.batch_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::groups::build_channel_groups;
    use crate::graph::prune::apply_pruning;
    use crate::graph::toy::{build_toy_model, toy_exclusions, ToyArch};
    use dataset::{toy_dataset, toy_task_specs};

    fn tlv(v: &[f64]) -> TaskLossVector {
        let names: Vec<String> = (0..v.len()).map(|i| format!("t{i}")).collect();
        TaskLossVector::new(&names, v, "b").unwrap()
    }

    #[test]
    fn relative_change_examples() {
        let r = relative_change(&tlv(&[2.0]), &tlv(&[2.3])).unwrap();
        assert!((r.values[0] - 0.15).abs() < 1e-12);
        let r = relative_change(&tlv(&[1.0, 4.0]), &tlv(&[1.1, 3.0])).unwrap();
        assert!((r.values[0] - 0.1).abs() < 1e-12 && (r.values[1] + 0.25).abs() < 1e-12);
        let r = relative_change(&tlv(&[1.0, 4.0]), &tlv(&[1.0, 4.0])).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0]);
        let r = relative_change(&tlv(&[0.0]), &tlv(&[0.5])).unwrap();
        assert_eq!((r.values[0], r.absolute[0]), (0.5, true));
        assert!(relative_change(&tlv(&[1.0]), &tlv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn perf_drop_examples() {
        assert_eq!(perf_drop(&[0.10, -0.25, 0.05], DropMetric::Linf), (0.25, 1));
        assert_eq!(perf_drop(&[0.0], DropMetric::Linf), (0.0, 0));
        assert_eq!(perf_drop(&[0.2, -0.2], DropMetric::Linf), (0.2, 0));
        assert_eq!(perf_drop(&[0.1, -0.3], DropMetric::Min), (0.1, 0));
        let (l1, _) = perf_drop(&[0.1, -0.3], DropMetric::L1Sum);
        assert!((l1 - 0.4).abs() < 1e-15);
        let (l2, _) = perf_drop(&[0.3, -0.4], DropMetric::L2);
        assert!((l2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perf_drop_sign_and_permutation() {
        let d = [0.3, -0.1, 0.2];
        for m in [DropMetric::Linf, DropMetric::L1Sum, DropMetric::L2, DropMetric::Min] {
            let flipped: Vec<f64> = d.iter().map(|x| -x).collect();
            assert_eq!(perf_drop(&d, m).0, perf_drop(&flipped, m).0);
            let perm = [d[2], d[0], d[1]];
            assert!((perf_drop(&d, m).0 - perf_drop(&perm, m).0).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_targets_have_zero_loss() {
        let g = build_toy_model(0, ToyArch::ToyMtA);
        let specs = vec![dataset::TaskSpec::new("reg", loss::LossKind::Mse, "head_reg")];
        let mut d = toy_dataset(&g, &specs, 8, 3).unwrap();
        let out = forward::forward(&g, &d.inputs_for(&g).unwrap(), &ChannelMask::empty()).unwrap();
        d.targets[0] = loss::Targets::Values(out[1].clone());
        let l = evaluate_losses(&g, &d, &ChannelMask::empty()).unwrap();
        assert!(l.values[0].loss <= 1e-6);
    }

    #[test]
    fn builtin_is_deterministic_and_incremental_matches_full() {
        let arch = ToyArch::ToyMtA;
        let g = build_toy_model(0, arch);
        let a = build_channel_groups(&g, &toy_exclusions(arch)).unwrap();
        let d = toy_dataset(&g, &toy_task_specs(arch), 12, 5).unwrap();
        let base: BTreeSet<GroupId> = [a.layers()[0].groups[0], a.layers()[3].groups[2]].into();
        let mut more = base.clone();
        more.insert(a.layers()[1].groups[4]);

        let mut fresh = BuiltinOracle::new(d.clone());
        let full = fresh.evaluate(&g, &a, &more).unwrap();
        let mut inc = BuiltinOracle::new(d.clone());
        inc.prepare(&g, &a, &base).unwrap();
        let partial = inc.evaluate(&g, &a, &more).unwrap();
        assert_eq!(full, partial);
        assert_eq!(full, fresh.evaluate(&g, &a, &more).unwrap());

        let pruned = apply_pruning(&g, &a, &more, 1).unwrap();
        let structural = evaluate_losses(&pruned, &d, &ChannelMask::empty()).unwrap();
        for (m, s) in full.values.iter().zip(&structural.values) {
            assert!((m.loss - s.loss).abs() <= 1e-5 * s.loss.abs().max(1e-12), "{m:?} vs {s:?}");
        }
    }

    #[test]
    fn masking_everything_does_not_error() {
        let arch = ToyArch::ToyMtB;
        let g = build_toy_model(0, arch);
        let a = build_channel_groups(&g, &toy_exclusions(arch)).unwrap();
        let d = toy_dataset(&g, &toy_task_specs(arch), 4, 5).unwrap();
        let all: BTreeSet<GroupId> = a.layers()[0].groups.iter().copied().collect();
        let l = BuiltinOracle::new(d).evaluate(&g, &a, &all).unwrap();
        assert!(l.values.iter().all(|v| v.loss.is_finite()));
    }
}
