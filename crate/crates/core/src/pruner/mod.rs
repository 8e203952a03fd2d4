//! The outer pruning loop: per-layer greedy search under progressive drop
//! thresholds, top-P layer filtering, repeated until the cost target.

pub mod checkpoint;
pub mod plan;
pub mod steps;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::cost::{count_cost, CostConfig, CostReport};
use crate::graph::groups::{build_channel_groups, ChannelAnalysis, GroupId};
use crate::graph::onnx::{export_model, load_model, LoadOptions};
use crate::graph::ModelGraph;
use crate::oracle::{DropMetric, LossOracle};
use crate::saliency::{table_from_index, FilterIndex};
use crate::scheduler::{rank_layers, solve_lambda};

pub use checkpoint::Checkpoint;
pub use plan::{verify_constraints, IterationRecord, LayerDecision, PruningPlan, RunStatus, PLAN_FORMAT};
pub use steps::{constraint_value, detect_sensitive_task, filter_top_p, prune_layer_greedy, GreedyOutcome, LayerProbe, Sensitivity};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    #[default]
    Flops,
    Params,
}

impl TargetMetric {
    pub fn of(self, c: &CostReport) -> u64 {
        match self {
            TargetMetric::Flops => c.total_flops,
            TargetMetric::Params => c.total_params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Global loss budget: the thresholds compound to `alpha`.
    pub alpha: f64,
    /// First layer's drop threshold.
    pub d1: f64,
    /// Masking ratio: chunk size as a fraction of the layer's groups.
    pub gamma: f64,
    /// Fraction of pruned layers kept per iteration.
    #[serde(alias = "P")]
    pub filtering_ratio: f64,
    pub probe_ratio: f64,
    /// Stop once cost falls to this fraction of the original.
    #[serde(alias = "Gamma")]
    pub reserved_ratio: f64,
    pub target_metric: TargetMetric,
    /// Optional cap on remaining prunable groups.
    pub eta: Option<usize>,
    pub drop_metric: DropMetric,
    pub min_channels: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            alpha: 6.0,
            d1: 0.06,
            gamma: 0.05,
            filtering_ratio: 0.8,
            probe_ratio: 0.3,
            reserved_ratio: 0.6,
            target_metric: TargetMetric::Flops,
            eta: None,
            drop_metric: DropMetric::Linf,
            min_channels: 1,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        let checks = [
            (self.alpha > 1.0 && self.alpha.is_finite(), "alpha must be a finite number above 1"),
            (open(self.d1), "d1 must lie in (0, 1)"),
            (open(self.gamma), "gamma must lie in (0, 1)"),
            (self.filtering_ratio > 0.0 && self.filtering_ratio <= 1.0, "filtering_ratio must lie in (0, 1]"),
            (open(self.probe_ratio), "probe_ratio must lie in (0, 1)"),
            (self.reserved_ratio > 0.0 && self.reserved_ratio <= 1.0, "reserved_ratio must lie in (0, 1]"),
            (self.min_channels >= 1, "min_channels must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// External retraining step run after each iteration: invoked as
/// `command.. <pruned.onnx> <tuned.onnx>` and must keep the topology.
#[derive(Debug, Clone)]
pub struct FineTuneHook {
    pub command: Vec<String>,
    pub work_dir: PathBuf,
}

impl FineTuneHook {
    fn run(&self, g: &ModelGraph, iteration: usize, exclusions: &[String]) -> Result<ModelGraph> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::Config("fine-tune command is empty".into()))?;
        std::fs::create_dir_all(&self.work_dir)?;
        let input = self.work_dir.join(format!("iter{iteration}-pruned.onnx"));
        let output = self.work_dir.join(format!("iter{iteration}-tuned.onnx"));
        std::fs::write(&input, export_model(g))?;
        let status = Command::new(program)
            .args(args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::Hook(format!("cannot launch `{program}`: {e}")))?;
        if !status.success() {
            return Err(Error::Hook(format!("`{program}` failed ({status})")));
        }
        let bytes = std::fs::read(&output).map_err(|e| Error::Hook(format!("cannot read {}: {e}", output.display())))?;
        let tuned = load_model(&bytes, &LoadOptions::with_exclusions(exclusions))?;
        let same_nodes = tuned.nodes().len() == g.nodes().len()
            && tuned.nodes().iter().zip(g.nodes()).all(|(a, b)| a.id == b.id && a.op.op_type() == b.op.op_type());
        let same_weights = g.weights().len() == tuned.weights().len()
            && g.weights().iter().all(|(k, w)| tuned.weight(k).is_some_and(|t| t.shape() == w.shape()));
        if !same_nodes || !same_weights {
            return Err(Error::Hook("fine-tuned model changed the topology".into()));
        }
        g.with_weights(tuned.weights().clone())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Node ids or op types whose channels stay fixed.
    pub exclusions: Vec<String>,
    /// Written at every iteration boundary.
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub max_iterations: Option<usize>,
    pub fine_tune: Option<FineTuneHook>,
}

pub fn producer_widths(analysis: &ChannelAnalysis) -> BTreeMap<String, usize> {
    analysis.producer_channels().iter().map(|(k, v)| (k.clone(), v.len())).collect()
}

/// Runs the full pruning loop and returns the pruned graph with its plan.
pub fn run_pruning(g0: &ModelGraph, oracle: &mut dyn LossOracle, config: &PruneConfig, opts: &RunOptions) -> Result<(ModelGraph, PruningPlan)> {
    config.validate()?;
    let cost_cfg = CostConfig::default();
    let (mut g, mut plan) = match &opts.resume {
        Some(c) => {
            if c.config != *config {
                return Err(Error::Config("checkpoint was written with a different configuration".into()));
            }
            if c.exclusions != opts.exclusions {
                return Err(Error::Config("checkpoint was written with different exclusions".into()));
            }
            let mut plan = c.plan.clone();
            plan.status = RunStatus::InProgress;
            (c.graph()?, plan)
        }
        None => {
            let analysis = build_channel_groups(g0, &opts.exclusions)?;
            let cost = count_cost(g0, cost_cfg);
            let plan = PruningPlan {
                format: PLAN_FORMAT.into(),
                model: g0.name().to_string(),
                config: config.clone(),
                task_names: oracle.task_names(),
                contribution_graph: "iteration_start".into(),
                initial_widths: producer_widths(&analysis),
                final_cost: cost.clone(),
                initial_cost: cost,
                iterations: Vec::new(),
                status: RunStatus::InProgress,
                reserved_ratio: 1.0,
            };
            (g0.clone(), plan)
        }
    };
    let save = |plan: &PruningPlan, g: &ModelGraph| -> Result<()> {
        if let Some(p) = &opts.checkpoint {
            Checkpoint::new(config, &opts.exclusions, plan, g).save(p)?;
        }
        Ok(())
    };
    save(&plan, &g)?;
    let total = config.target_metric.of(&plan.initial_cost) as f64;

    let status = loop {
        let ratio = config.target_metric.of(&plan.final_cost) as f64 / total;
        plan.reserved_ratio = ratio;
        if ratio <= config.reserved_ratio {
            break RunStatus::Completed;
        }
        let analysis = build_channel_groups(&g, &opts.exclusions)?;
        if let Some(eta) = config.eta {
            if analysis.prunable_groups().count() <= eta {
                break RunStatus::EtaReached;
            }
        }
        if opts.max_iterations.is_some_and(|m| plan.iterations.len() >= m) {
            break RunStatus::IterationLimit;
        }
        let index = plan.iterations.len();
        let record = match run_iteration(&g, &analysis, oracle, config, opts, index) {
            Ok(r) => r,
            Err(e) => {
                return Err(match &opts.checkpoint {
                    Some(p) => Error::Aborted {
                        source: Box::new(e),
                        checkpoint: p.clone(),
                    },
                    None => e,
                })
            }
        };
        let Some((mut record, next)) = record else {
            break RunStatus::Stalled;
        };
        record.reserved_ratio = config.target_metric.of(&record.cost_after) as f64 / total;
        let stalled = record.selected_top_p.is_empty();
        plan.final_cost = record.cost_after.clone();
        plan.reserved_ratio = record.reserved_ratio;
        plan.iterations.push(record);
        g = next;
        save(&plan, &g)?;
        if stalled {
            break RunStatus::Stalled;
        }
    };
    plan.status = status;
    log::info!(
        "pruning finished: {:?} after {} iterations, reserved ratio {:.4}",
        status,
        plan.iterations.len(),
        plan.reserved_ratio
    );
    Ok((g, plan))
}

/// One iteration on `g`; `None` when no layer can drop anything.
fn run_iteration(
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    oracle: &mut dyn LossOracle,
    config: &PruneConfig,
    opts: &RunOptions,
    index: usize,
) -> Result<Option<(IterationRecord, ModelGraph)>> {
    let cost_cfg = CostConfig::default();
    let none = BTreeSet::new();
    let filters = FilterIndex::new(g, analysis);
    let saliency = table_from_index(&filters, analysis, &none);
    let droppable = |l: usize| {
        let order = saliency.ascending(&analysis.layers()[l].groups);
        analysis.max_prefix(&order, &none, config.min_channels) > 0
    };
    let candidates: BTreeSet<usize> = analysis.layers().iter().map(|l| l.index).filter(|&l| droppable(l)).collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let lambda = if candidates.len() == 1 {
        1.0
    } else {
        solve_lambda(config.alpha, config.d1, candidates.len())?
    };
    let ranked = rank_layers(g, analysis, &saliency, config.probe_ratio, lambda, config.min_channels)?;
    let order: Vec<String> = ranked
        .sequence
        .into_iter()
        .filter(|n| candidates.contains(&analysis.layer_by_name(n).expect("ranked layer").index))
        .collect();
    log::info!("iteration {index}: {} layers, lambda {lambda:.6}", order.len());

    oracle.prepare(g, analysis, &none)?;
    let mut baseline = oracle.evaluate(g, analysis, &none)?;
    let mut trajectory = vec![baseline.clone()];
    let mut accumulated: BTreeSet<GroupId> = BTreeSet::new();
    let mut decisions = Vec::new();
    let mut threshold = config.d1;
    let task_names = oracle.task_names();
    for (position, name) in order.iter().enumerate() {
        let layer = analysis.layer_by_name(name).expect("ranked layer");
        let at_state = table_from_index(&filters, analysis, &accumulated);
        let ordered = at_state.ascending(&layer.groups);
        let k = ordered.len();
        let chunk = ((config.gamma * k as f64).ceil() as usize).max(1);
        let limit = analysis.max_prefix(&ordered, &accumulated, config.min_channels);
        let mut probe = LayerProbe::new(oracle, g, analysis, &accumulated)?;
        let (sens, outcome) = if limit == 0 {
            (None, None)
        } else {
            let s = detect_sensitive_task(&mut probe, &ordered, chunk.min(limit), &baseline, config.drop_metric)?;
            let o = prune_layer_greedy(&mut probe, &ordered, chunk, limit, threshold, s.task, &baseline, config.drop_metric)?;
            (Some(s), Some(o))
        };
        let evaluations = probe.evaluations();
        let accepted = outcome.as_ref().map_or(0, |o| o.accepted);
        let dropped = ordered[..accepted].to_vec();
        let loss_after = outcome.as_ref().map_or_else(|| baseline.clone(), |o| o.losses.clone());
        let task = sens.as_ref().map_or(0, |s| s.task);
        log::debug!("  {name}: dropped {accepted}/{k} at d = {threshold:.5}");
        decisions.push(LayerDecision {
            layer: name.clone(),
            layer_index: layer.index,
            position,
            sensitive_task: task,
            sensitive_task_name: task_names[task].clone(),
            no_sensitivity: sens.as_ref().is_none_or(|s| s.no_sensitivity),
            masked_delta: sens.map(|s| s.delta).unwrap_or_default(),
            total_groups: k,
            chunk_size: chunk,
            ratio: accepted as f64 / k as f64,
            threshold,
            achieved_drop: outcome.as_ref().map_or(0.0, |o| o.achieved_drop),
            loss_before: baseline.clone(),
            loss_after: loss_after.clone(),
            evaluations,
            contribution: None,
            selected: false,
            dropped,
        });
        if accepted > 0 {
            accumulated.extend(&ordered[..accepted]);
            baseline = loss_after;
            trajectory.push(baseline.clone());
        }
        threshold *= lambda;
    }

    let pruned: Vec<usize> = (0..decisions.len()).filter(|&i| !decisions[i].dropped.is_empty()).collect();
    let cands: Vec<(usize, Vec<GroupId>)> = pruned.iter().map(|&i| (decisions[i].layer_index, decisions[i].dropped.clone())).collect();
    let (kept, contributions, mut next) = filter_top_p(g, analysis, &cands, config.filtering_ratio, config.min_channels)?;
    for (j, &i) in pruned.iter().enumerate() {
        decisions[i].contribution = Some(contributions[j]);
        decisions[i].selected = kept.contains(&j);
    }
    let selected_top_p: Vec<String> = kept.iter().map(|&j| decisions[pruned[j]].layer.clone()).collect();
    let mut fine_tuned = false;
    if let Some(hook) = &opts.fine_tune {
        if !selected_top_p.is_empty() {
            next = hook.run(&next, index, &opts.exclusions)?;
            fine_tuned = true;
        }
    }
    let next_analysis = build_channel_groups(&next, &opts.exclusions)?;
    trajectory.push(oracle.evaluate(&next, &next_analysis, &none)?);
    let cost_before = count_cost(g, cost_cfg);
    let cost_after = count_cost(&next, cost_cfg);
    let record = IterationRecord {
        index,
        lambda,
        layers: candidates.len(),
        order,
        decisions,
        selected_top_p,
        cost_before,
        cost_after,
        loss_trajectory: trajectory,
        reserved_ratio: 0.0,
        widths: producer_widths(&next_analysis),
        fine_tuned,
    };
    Ok(Some((record, next)))
}
