//! Structural filter pruning for convolutional networks.
//!
//! Filters are ranked by how much information their kernels can carry
//! (entropy of a softmax over intra-filter kernel distances) and how
//! replaceable they are (summed distance to sibling filters). The lowest
//! ranked filters of each layer are removed from the weight tensors, with
//! removals propagated to downstream consumers and shared across residual
//! coupling groups.
//!
//! Pipeline: [`archive::Model::load`] → [`scoring::score_model`] →
//! [`planner::build_plan`] → [`applier::apply_plan`], with
//! [`costs::evaluate_plan_costs`] for FLOPs/parameter reports and
//! [`refnet::masked_equivalence`] to check the pruned network against the
//! masked original.

pub mod applier;
pub mod archive;
pub mod costs;
pub mod diagnostics;
pub mod error;
pub mod manifest;
pub mod planner;
pub mod refnet;
pub mod scoring;
pub mod tensor;
pub mod zoo;

pub use applier::{apply_plan, PrunedModel};
pub use archive::{load_archive, save_archive, Model, TensorMap};
pub use costs::{count_costs, evaluate_plan_costs, CostReport, PlanCostReport};
pub use error::{Error, Result};
pub use manifest::{LayerSpec, ModelManifest};
pub use planner::{build_plan, keep_count, select_filters, PlanOptions, PruningPlan, PruningRates, Strategy};
pub use scoring::{score_model, DistanceMetric, MNearest, ScoreTable, ScoringConfig};
pub use tensor::TensorRecord;

/// Scores, plans and applies in one go.
pub fn prune(model: &Model, scoring: &ScoringConfig, options: &PlanOptions) -> Result<(ScoreTable, PruningPlan, PrunedModel)> {
    let scores = score_model(model, scoring)?;
    let plan = build_plan(&model.manifest, &scores, options)?;
    let pruned = apply_plan(model, &plan)?;
    Ok((scores, plan, pruned))
}
