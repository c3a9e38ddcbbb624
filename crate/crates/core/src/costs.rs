//! FLOPs and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP. Convolution and linear
//! layers contribute FLOPs; batch norm, pooling, activations and adds
//! contribute none. Batch norm contributes its two learnable vectors to the
//! parameter count; running statistics are buffers and are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::manifest::{LayerKind, LayerOp, ModelManifest, NodeShape};
use crate::planner::PruningPlan;

pub const CONVENTION: &str =
    "1 MAC = 1 FLOP; conv2d and linear only; params include biases and batchnorm gamma/beta";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn layer(&self, id: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.layer_id == id)
    }
}

pub fn count_costs(manifest: &ModelManifest) -> Result<CostReport> {
    let info = manifest.analyze()?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for &i in &info.order {
        let l = &manifest.layers[i];
        let (params, flops) = match &l.op {
            LayerOp::Conv2d(p) => {
                let NodeShape::Spatial { height, width, .. } = info.shapes[i] else {
                    unreachable!("conv output is spatial")
                };
                let weights = (p.out_channels * p.in_channels * p.kernel * p.kernel) as u64;
                let bias = if p.has_bias { p.out_channels as u64 } else { 0 };
                (weights + bias, weights * (height * width) as u64)
            }
            LayerOp::Linear(p) => {
                let weights = (p.out_features * p.in_features) as u64;
                let bias = if p.has_bias { p.out_features as u64 } else { 0 };
                (weights + bias, weights)
            }
            LayerOp::BatchNorm2d(p) => (2 * p.channels as u64, 0),
            _ => (0, 0),
        };
        layers.push(LayerCost {
            layer_id: l.id.clone(),
            kind: l.kind(),
            params,
            flops,
        });
    }
    Ok(CostReport {
        convention: CONVENTION.to_string(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// `100 * (1 - pruned / baseline)`, 0 for an empty baseline.
pub fn pruning_ratio(baseline: u64, pruned: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        100.0 * (1.0 - pruned as f64 / baseline as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCostReport {
    pub convention: String,
    pub baseline: CostReport,
    pub pruned: CostReport,
    pub flops_pr: f64,
    pub params_pr: f64,
}

impl PlanCostReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table with `FLOPs[M] / PR[%]` and `Params[M] / PR[%]`
    /// columns, one row per layer that has a cost, then the total.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.convention);
        let _ = writeln!(out, "{:<24} {:<12} {:>22} {:>22}", "layer", "kind", "FLOPs[M] / PR[%]", "Params[M] / PR[%]");
        for (b, p) in self.baseline.layers.iter().zip(&self.pruned.layers) {
            if b.params == 0 && b.flops == 0 {
                continue;
            }
            let _ = writeln!(
                out,
                "{:<24} {:<12} {:>22} {:>22}",
                b.layer_id,
                format!("{:?}", b.kind).to_lowercase(),
                cell(p.flops, pruning_ratio(b.flops, p.flops)),
                cell(p.params, pruning_ratio(b.params, p.params)),
            );
        }
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:>22} {:>22}",
            "total",
            "",
            cell(self.pruned.total_flops, self.flops_pr),
            cell(self.pruned.total_params, self.params_pr),
        );
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:>22} {:>22}",
            "baseline",
            "",
            format!("{:.2}", self.baseline.total_flops as f64 / 1e6),
            format!("{:.2}", self.baseline.total_params as f64 / 1e6),
        );
        out
    }
}

fn cell(count: u64, pr: f64) -> String {
    format!("{:.2} / {:.1}", count as f64 / 1e6, pr)
}

pub fn evaluate_plan_costs(manifest: &ModelManifest, plan: &PruningPlan) -> Result<PlanCostReport> {
    let info = manifest.analyze()?;
    plan.check_against(manifest, &info)?;
    let baseline = count_costs(manifest)?;
    let pruned = count_costs(&plan.pruned_manifest(manifest))?;
    Ok(PlanCostReport {
        convention: CONVENTION.to_string(),
        flops_pr: pruning_ratio(baseline.total_flops, pruned.total_flops),
        params_pr: pruning_ratio(baseline.total_params, pruned.total_params),
        baseline,
        pruned,
    })
}
