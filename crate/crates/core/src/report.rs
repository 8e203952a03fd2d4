//! Tables derived from a recorded [`PruningPlan`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::TaskLossVector;
use crate::pruner::{PruningPlan, RunStatus};

/// Producer widths: one row per producer, initial width then one column per iteration.
pub fn width_table_csv(plan: &PruningPlan) -> Result<String> {
    let mut s = String::from("node,initial");
    for it in &plan.iterations {
        let _ = write!(s, ",iter{}", it.index + 1);
    }
    s.push('\n');
    for (node, w0) in &plan.initial_widths {
        let _ = write!(s, "{node},{w0}");
        let mut prev = *w0;
        for it in &plan.iterations {
            let w = *it
                .widths
                .get(node)
                .ok_or_else(|| Error::Malformed(format!("iteration {} has no width for `{node}`", it.index)))?;
            if w > prev {
                return Err(Error::Malformed(format!("width of `{node}` grows in iteration {}", it.index)));
            }
            prev = w;
            let _ = write!(s, ",{w}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// One row per layer decision: the sensitive task and the realized ratio.
pub fn sensitivity_csv(plan: &PruningPlan) -> String {
    let mut s = String::from("iteration,position,layer,sensitive_task,task_name,ratio,threshold,achieved_drop,selected\n");
    for it in &plan.iterations {
        for d in &it.decisions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                it.index + 1,
                d.position,
                d.layer,
                d.sensitive_task,
                d.sensitive_task_name,
                d.ratio,
                d.threshold,
                d.achieved_drop,
                d.selected
            );
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub status: RunStatus,
    pub iterations: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flops_reduction_pct: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub params_reduction_pct: f64,
    pub initial_losses: Option<TaskLossVector>,
    pub final_losses: Option<TaskLossVector>,
}

impl Summary {
    pub fn from_plan(plan: &PruningPlan) -> Self {
        let first = plan.iterations.first().and_then(|it| it.loss_trajectory.first()).cloned();
        let last = plan.iterations.last().and_then(|it| it.loss_trajectory.last()).cloned();
        Self {
            model: plan.model.clone(),
            status: plan.status,
            iterations: plan.iterations.len(),
            flops_before: plan.initial_cost.total_flops,
            flops_after: plan.final_cost.total_flops,
            flops_reduction_pct: 100.0 * plan.flops_reduction(),
            params_before: plan.initial_cost.total_params,
            params_after: plan.final_cost.total_params,
            params_reduction_pct: 100.0 * plan.params_reduction(),
            initial_losses: first,
            final_losses: last,
        }
    }

    /// Replaces missing loss rows, e.g. when the plan has no iterations.
    pub fn with_losses(mut self, initial: TaskLossVector, fin: TaskLossVector) -> Self {
        self.initial_losses.get_or_insert(initial);
        self.final_losses.get_or_insert(fin);
        self
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "model,{}", self.model);
        let _ = writeln!(s, "status,{}", serde_json::to_value(self.status).expect("enum").as_str().expect("string"));
        let _ = writeln!(s, "iterations,{}", self.iterations);
        let _ = writeln!(s, "flops_before,{}", self.flops_before);
        let _ = writeln!(s, "flops_after,{}", self.flops_after);
        let _ = writeln!(s, "flops_reduction_pct,{:.2}", self.flops_reduction_pct);
        let _ = writeln!(s, "params_before,{}", self.params_before);
        let _ = writeln!(s, "params_after,{}", self.params_after);
        let _ = writeln!(s, "params_reduction_pct,{:.2}", self.params_reduction_pct);
        for (tag, v) in [("initial", &self.initial_losses), ("final", &self.final_losses)] {
            for l in v.iter().flat_map(|v| &v.values) {
                let _ = writeln!(s, "{tag}_loss_{},{}", l.task, l.loss);
            }
        }
        s
    }
}
