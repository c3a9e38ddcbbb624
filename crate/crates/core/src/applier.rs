use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{Model, TensorMap};
use crate::error::{Error, Result};
use crate::manifest::LayerOp;
use crate::planner::{PlanConfig, PruningPlan};
use crate::tensor::TensorRecord;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source_fingerprint: String,
    pub plan_hash: String,
    pub pruned_fingerprint: String,
    pub config: PlanConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub model: Model,
    pub provenance: Provenance,
}

impl PrunedModel {
    /// Writes the archive plus `provenance.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let dir = path.as_ref();
        self.model.save(dir)?;
        let mut text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        text.push('\n');
        let p = dir.join(PROVENANCE_FILE);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Slices every affected tensor according to the plan. The plan must have
/// been built for exactly this archive; a pruned archive therefore cannot
/// be pruned again with the same plan.
pub fn apply_plan(model: &Model, plan: &PruningPlan) -> Result<PrunedModel> {
    let source_fingerprint = model.fingerprint();
    if plan.archive_fingerprint != source_fingerprint {
        return Err(Error::PlanMismatch(format!(
            "plan targets archive {} but this archive is {}",
            short(&plan.archive_fingerprint),
            short(&source_fingerprint)
        )));
    }
    let info = model.graph()?;
    plan.check_against(&model.manifest, &info)?;

    let mut tensors: TensorMap = model.tensors.clone();
    let mut replace = |t: TensorRecord| {
        tensors.insert(t.name.clone(), t);
    };
    for l in &model.manifest.layers {
        let out = plan.layer(&l.id).map(|p| p.kept_out_indices.as_slice());
        let inp = plan.derived_for(&l.id).map(|d| d.kept.as_slice());
        match &l.op {
            LayerOp::Conv2d(p) => {
                if out.is_none() && inp.is_none() {
                    continue;
                }
                let mut w = model.tensor(&p.weight).clone();
                if let Some(keep) = out {
                    w = w.gather_axis0(keep);
                }
                if let Some(keep) = inp {
                    w = w.gather_axis1(keep);
                }
                replace(w);
                if let (Some(b), Some(keep)) = (&p.bias, out) {
                    replace(model.tensor(b).gather_axis0(keep));
                }
            }
            LayerOp::Linear(p) => {
                if out.is_none() && inp.is_none() {
                    continue;
                }
                let mut w = model.tensor(&p.weight).clone();
                if let Some(keep) = out {
                    w = w.gather_axis0(keep);
                }
                if let Some(keep) = inp {
                    w = w.gather_axis1(keep);
                }
                replace(w);
                if let (Some(b), Some(keep)) = (&p.bias, out) {
                    replace(model.tensor(b).gather_axis0(keep));
                }
            }
            LayerOp::BatchNorm2d(p) => {
                if let Some(keep) = inp {
                    for name in [&p.gamma, &p.beta, &p.mean, &p.var] {
                        replace(model.tensor(name).gather_axis0(keep));
                    }
                }
            }
            _ => {}
        }
    }

    let manifest = plan.pruned_manifest(&model.manifest);
    let pruned = Model::new(manifest, tensors)?;
    Ok(PrunedModel {
        provenance: Provenance {
            source_fingerprint,
            plan_hash: plan.hash(),
            pruned_fingerprint: pruned.fingerprint(),
            config: plan.config.clone(),
        },
        model: pruned,
    })
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
