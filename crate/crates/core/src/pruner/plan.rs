use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::cost::CostReport;
use crate::graph::groups::GroupId;
use crate::oracle::{relative_change, TaskLossVector};
use crate::pruner::steps::constraint_value;
use crate::pruner::PruneConfig;

pub const PLAN_FORMAT: &str = "gcprune-plan-v1";

/// Relative slack when re-checking `d_{i+1} = λ·d_i`.
pub const THRESHOLD_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    InProgress,
    /// The reserved ratio reached the target.
    Completed,
    /// An iteration could not drop any group.
    Stalled,
    /// Remaining prunable groups fell to `eta`.
    EtaReached,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: String,
    pub layer_index: usize,
    /// Position in the iteration's layer order, from 0.
    pub position: usize,
    pub sensitive_task: usize,
    pub sensitive_task_name: String,
    /// Masking the first chunk changed no task loss.
    pub no_sensitivity: bool,
    pub masked_delta: Vec<f64>,
    pub total_groups: usize,
    pub chunk_size: usize,
    /// Accepted groups, in ascending saliency order.
    pub dropped: Vec<GroupId>,
    /// `R_l`: dropped over total groups of the layer.
    pub ratio: f64,
    /// `d_i` for this position.
    pub threshold: f64,
    pub achieved_drop: f64,
    pub loss_before: TaskLossVector,
    pub loss_after: TaskLossVector,
    pub evaluations: usize,
    /// FLOPs removed by this layer alone on the iteration's starting graph.
    pub contribution: Option<u64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub lambda: f64,
    /// Candidate layers entering the schedule.
    pub layers: usize,
    pub order: Vec<String>,
    pub decisions: Vec<LayerDecision>,
    pub selected_top_p: Vec<String>,
    pub cost_before: CostReport,
    pub cost_after: CostReport,
    /// Baseline, each accepted layer state, then the rebuilt graph.
    pub loss_trajectory: Vec<TaskLossVector>,
    pub reserved_ratio: f64,
    /// Output channels of every producer after this iteration.
    pub widths: BTreeMap<String, usize>,
    pub fine_tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub format: String,
    pub model: String,
    pub config: PruneConfig,
    pub task_names: Vec<String>,
    /// Graph on which top-P contributions are measured.
    pub contribution_graph: String,
    pub initial_cost: CostReport,
    pub initial_widths: BTreeMap<String, usize>,
    pub iterations: Vec<IterationRecord>,
    pub status: RunStatus,
    pub final_cost: CostReport,
    pub reserved_ratio: f64,
}

impl PruningPlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        let plan: PruningPlan = serde_json::from_str(text)?;
        if plan.format != PLAN_FORMAT {
            return Err(crate::Error::Malformed(format!("unknown plan format `{}`", plan.format)));
        }
        Ok(plan)
    }

    pub fn total_dropped(&self) -> usize {
        self.iterations
            .iter()
            .flat_map(|it| &it.decisions)
            .filter(|d| d.selected)
            .map(|d| d.dropped.len())
            .sum()
    }

    pub fn flops_reduction(&self) -> f64 {
        1.0 - self.final_cost.total_flops as f64 / self.initial_cost.total_flops as f64
    }

    pub fn params_reduction(&self) -> f64 {
        1.0 - self.final_cost.total_params as f64 / self.initial_cost.total_params as f64
    }
}

/// Re-checks the plan's invariants from its recorded values; returns every violation.
pub fn verify_constraints(plan: &PruningPlan) -> Vec<String> {
    let mut bad = Vec::new();
    let metric = plan.config.drop_metric;
    let mut prev_cost = &plan.initial_cost;
    for it in &plan.iterations {
        let tag = |d: &LayerDecision| format!("iteration {} layer {}", it.index, d.layer);
        for d in &it.decisions {
            if d.dropped.is_empty() {
                continue;
            }
            if d.achieved_drop > d.threshold {
                bad.push(format!("{}: drop {} exceeds threshold {}", tag(d), d.achieved_drop, d.threshold));
            }
            match relative_change(&d.loss_before, &d.loss_after) {
                Ok(delta) => {
                    let v = constraint_value(&delta.values, metric, d.sensitive_task);
                    if v != d.achieved_drop {
                        bad.push(format!("{}: recorded drop {} but losses give {v}", tag(d), d.achieved_drop));
                    }
                }
                Err(e) => bad.push(format!("{}: {e}", tag(d))),
            }
            let ratio = d.dropped.len() as f64 / d.total_groups as f64;
            if ratio != d.ratio {
                bad.push(format!("{}: ratio {} but {} of {} groups dropped", tag(d), d.ratio, d.dropped.len(), d.total_groups));
            }
        }
        for w in it.decisions.windows(2) {
            let expected = it.lambda * w[0].threshold;
            if (w[1].threshold - expected).abs() > THRESHOLD_RTOL * expected.abs() {
                bad.push(format!("iteration {}: threshold {} does not follow {} by λ", it.index, w[1].threshold, w[0].threshold));
            }
        }
        if let Some(first) = it.decisions.first() {
            if first.threshold != plan.config.d1 {
                bad.push(format!("iteration {}: first threshold {} is not d1", it.index, first.threshold));
            }
        }
        if it.cost_before != *prev_cost {
            bad.push(format!("iteration {}: starting cost does not match the previous result", it.index));
        }
        if it.cost_after.total_flops > it.cost_before.total_flops || it.cost_after.total_params > it.cost_before.total_params {
            bad.push(format!("iteration {}: cost increased", it.index));
        }
        prev_cost = &it.cost_after;
    }
    if *prev_cost != plan.final_cost {
        bad.push("final cost does not match the last iteration".into());
    }
    bad
}
