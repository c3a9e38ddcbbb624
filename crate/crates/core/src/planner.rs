//! Turns per-filter scores and pruning rates into a whole-network plan.
//!
//! Selection happens per pruning unit: a coupling group, or a single
//! prunable layer outside any group. A group is ranked by the elementwise
//! sum of its members' combined scores so that every member keeps the same
//! channels. Removed output channels are then propagated to consumers:
//! conv input channels, batch-norm statistics, and linear columns (whole
//! `h * w` blocks after a flatten).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::sha256_hex;
use crate::error::{Error, Result};
use crate::manifest::{ChannelOrigin, GraphInfo, LayerKind, LayerOp, ModelManifest};
use crate::scoring::{ScoreTable, ScoringConfig};

/// Slack for `ceil` so that decimal rates like 0.7 do not round up
/// because `1 - 0.7` is slightly above 0.3 in binary.
const CEIL_SLACK: f64 = 1e-9;

/// Number of filters kept at rate `rate`: `ceil((1 - rate) * n)`, at least 1.
pub fn keep_count(rate: f64, n: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate {
            layer: "<keep_count>".into(),
            rate,
        });
    }
    if n == 0 {
        return Err(Error::InvalidConfig("keep_count needs n >= 1".into()));
    }
    let exact = (1.0 - rate) * n as f64;
    let k = (exact - CEIL_SLACK * exact.max(1.0)).ceil() as usize;
    Ok(k.clamp(1, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Remove the lowest-scoring filters.
    #[default]
    LeastImportant,
    /// Remove the highest-scoring filters.
    MostImportant,
    /// Keep a uniformly random subset.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::LeastImportant => "least",
            Strategy::MostImportant => "most",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least" | "least_important" => Ok(Strategy::LeastImportant),
            "most" | "most_important" => Ok(Strategy::MostImportant),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::InvalidConfig(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Picks `keep` indices and returns them ascending. Ties keep the smaller
/// index. `stream` decorrelates random draws between units sharing a seed.
pub fn select_filters(scores: &[f64], keep: usize, strategy: Strategy, seed: u64, stream: u64) -> Vec<usize> {
    let n = scores.len();
    let keep = keep.min(n);
    let mut kept: Vec<usize> = match strategy {
        Strategy::LeastImportant | Strategy::MostImportant => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                let ord = scores[a].total_cmp(&scores[b]);
                let ord = if strategy == Strategy::LeastImportant { ord.reverse() } else { ord };
                ord.then(a.cmp(&b))
            });
            idx.truncate(keep);
            idx
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            sample(&mut rng, n, keep).into_vec()
        }
    };
    kept.sort_unstable();
    kept
}

/// Rates file contents. Per-layer entries override `global`; `protected`,
/// when present, replaces the default protected set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningRates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected: Option<Vec<String>>,
}

impl PruningRates {
    pub fn uniform(rate: f64) -> Self {
        PruningRates {
            global: Some(rate),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("rates", e))
    }

    fn check(&self, manifest: &ModelManifest) -> Result<()> {
        if let Some(g) = self.global {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::InvalidRate { layer: "global".into(), rate: g });
            }
        }
        for (id, &r) in &self.layers {
            let l = manifest.layer(id).ok_or_else(|| Error::UnknownLayer(id.clone()))?;
            if !l.prunable {
                return Err(Error::InvalidConfig(format!("rate given for non-prunable layer `{id}`")));
            }
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidRate { layer: id.clone(), rate: r });
            }
        }
        for id in self.protected.iter().flatten() {
            if manifest.layer(id).is_none() {
                return Err(Error::UnknownLayer(id.clone()));
            }
        }
        Ok(())
    }
}

/// The last linear layer in topological order, which usually maps onto
/// the class logits.
pub fn default_protected(manifest: &ModelManifest, info: &GraphInfo) -> Vec<String> {
    info.order
        .iter()
        .rev()
        .map(|&i| &manifest.layers[i])
        .find(|l| l.kind() == LayerKind::Linear)
        .map(|l| vec![l.id.clone()])
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub scoring: ScoringConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub rates: PruningRates,
    /// Effective protected layer ids, sorted.
    pub protected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPlan {
    pub layer_id: String,
    /// Index into the manifest's coupling groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_group: Option<usize>,
    pub rate: f64,
    pub protected: bool,
    pub original: usize,
    pub keep: usize,
    pub kept_out_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalAxis {
    /// Conv weight axis 1.
    InChannels,
    /// Linear weight columns.
    InFeatures,
    /// Batch-norm parameter vectors.
    Channels,
}

/// Input-side slicing a layer inherits from its producers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedRemoval {
    pub layer_id: String,
    pub axis: RemovalAxis,
    pub original: usize,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub archive_fingerprint: String,
    pub config: PlanConfig,
    pub layers: Vec<LayerPlan>,
    pub derived: Vec<DerivedRemoval>,
}

impl PruningPlan {
    pub fn layer(&self, id: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn derived_for(&self, id: &str) -> Option<&DerivedRemoval> {
        self.derived.iter().find(|d| d.layer_id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("plan", e))
    }

    /// SHA-256 of the canonical plan JSON.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    /// Checks that the plan fits this manifest's current shapes.
    pub fn check_against(&self, manifest: &ModelManifest, info: &GraphInfo) -> Result<()> {
        let mut seen = HashSet::new();
        for lp in &self.layers {
            let idx = manifest
                .layer_index(&lp.layer_id)
                .ok_or_else(|| Error::PlanMismatch(format!("plan names unknown layer `{}`", lp.layer_id)))?;
            let l = &manifest.layers[idx];
            if !l.prunable || l.out_width() != Some(lp.original) {
                return Err(Error::PlanMismatch(format!(
                    "layer `{}` has width {:?}, plan expects {}",
                    lp.layer_id,
                    l.out_width(),
                    lp.original
                )));
            }
            check_indices(&lp.layer_id, &lp.kept_out_indices, lp.original)?;
            if lp.kept_out_indices.len() != lp.keep || lp.keep == 0 {
                return Err(Error::PlanMismatch(format!("layer `{}` keep count disagrees with its index set", lp.layer_id)));
            }
            seen.insert(idx);
        }
        for &i in info.unit_of.keys() {
            if !seen.contains(&i) {
                return Err(Error::PlanMismatch(format!("plan has no entry for prunable layer `{}`", manifest.layers[i].id)));
            }
        }
        for d in &self.derived {
            if manifest.layer(&d.layer_id).is_none() {
                return Err(Error::PlanMismatch(format!("plan names unknown layer `{}`", d.layer_id)));
            }
            check_indices(&d.layer_id, &d.kept, d.original)?;
        }
        Ok(())
    }

    /// The manifest with every channel and feature count the plan changes.
    pub fn pruned_manifest(&self, manifest: &ModelManifest) -> ModelManifest {
        let mut out = manifest.clone();
        for l in &mut out.layers {
            let keep = self.layer(&l.id).map(|p| p.keep);
            let kept_in = self.derived_for(&l.id).map(|d| d.kept.len());
            match &mut l.op {
                LayerOp::Conv2d(p) => {
                    if let Some(k) = keep {
                        p.out_channels = k;
                    }
                    if let Some(k) = kept_in {
                        p.in_channels = k;
                    }
                }
                LayerOp::Linear(p) => {
                    if let Some(k) = keep {
                        p.out_features = k;
                    }
                    if let Some(k) = kept_in {
                        p.in_features = k;
                    }
                }
                LayerOp::BatchNorm2d(p) => {
                    if let Some(k) = kept_in {
                        p.channels = k;
                    }
                }
                _ => {}
            }
        }
        out
    }
}

fn check_indices(layer: &str, idx: &[usize], len: usize) -> Result<()> {
    for w in idx.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::PlanMismatch(format!("indices for `{layer}` are not strictly ascending")));
        }
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
        return Err(Error::IndexOutOfRange {
            layer: layer.to_string(),
            index: bad,
            len,
        });
    }
    Ok(())
}

/// Builder inputs besides the manifest and scores.
#[derive(Debug, Clone, Default)]
pub struct PlanOptions {
    pub rates: PruningRates,
    pub strategy: Strategy,
    pub seed: u64,
    /// Added on top of the rates file's (or default) protected set.
    pub extra_protected: Vec<String>,
}

pub fn build_plan(manifest: &ModelManifest, scores: &ScoreTable, options: &PlanOptions) -> Result<PruningPlan> {
    let info = manifest.analyze()?;
    let rates = &options.rates;
    rates.check(manifest)?;
    for id in &options.extra_protected {
        if manifest.layer(id).is_none() {
            return Err(Error::UnknownLayer(id.clone()));
        }
    }
    let protected: BTreeSet<String> = rates
        .protected
        .clone()
        .unwrap_or_else(|| default_protected(manifest, &info))
        .into_iter()
        .chain(options.extra_protected.iter().cloned())
        .collect();

    let mut unit_kept: Vec<Vec<usize>> = Vec::with_capacity(info.units.len());
    let mut layers = Vec::new();
    for (u, unit) in info.units.iter().enumerate() {
        let ids: Vec<&str> = unit.members.iter().map(|&m| manifest.layers[m].id.as_str()).collect();

        let explicit: BTreeSet<u64> = ids.iter().filter_map(|id| rates.layers.get(*id)).map(|r| r.to_bits()).collect();
        let rate = match explicit.len() {
            0 => rates.global.ok_or_else(|| Error::MissingRate(ids[0].to_string()))?,
            1 => f64::from_bits(*explicit.iter().next().unwrap()),
            _ => {
                return Err(Error::RateConflict {
                    group: ids.iter().map(|s| s.to_string()).collect(),
                    detail: ids
                        .iter()
                        .filter_map(|id| rates.layers.get(*id).map(|r| format!("{id}={r}")))
                        .collect::<Vec<_>>()
                        .join(", "),
                })
            }
        };
        let is_protected = ids.iter().any(|id| protected.contains(*id));

        let mut group_score = vec![0.0f64; unit.width];
        for id in &ids {
            let row = scores.layer(id).ok_or_else(|| Error::MissingScores(id.to_string()))?;
            if row.len() != unit.width {
                return Err(Error::MissingScores(format!("{id} (score row has {} entries, layer has {})", row.len(), unit.width)));
            }
            for (acc, v) in group_score.iter_mut().zip(&row.combined) {
                *acc += v;
            }
        }

        let kept = if is_protected {
            (0..unit.width).collect()
        } else {
            let keep = keep_count(rate, unit.width).map_err(|_| Error::InvalidRate { layer: ids[0].to_string(), rate })?;
            select_filters(&group_score, keep, options.strategy, options.seed, u as u64)
        };
        for &m in &unit.members {
            layers.push(LayerPlan {
                layer_id: manifest.layers[m].id.clone(),
                coupling_group: unit.group,
                rate,
                protected: is_protected,
                original: unit.width,
                keep: kept.len(),
                kept_out_indices: kept.clone(),
            });
        }
        unit_kept.push(kept);
    }

    let mut derived = Vec::new();
    for &i in &info.order {
        let l = &manifest.layers[i];
        let origin = info.input_origin_of(i, 0);
        let ChannelOrigin::Unit { unit, block } = origin else {
            continue;
        };
        let kept = &unit_kept[unit];
        let (axis, original, kept) = match &l.op {
            LayerOp::Conv2d(p) => (RemovalAxis::InChannels, p.in_channels, kept.clone()),
            LayerOp::BatchNorm2d(p) => (RemovalAxis::Channels, p.channels, kept.clone()),
            LayerOp::Linear(p) => {
                let cols = kept.iter().flat_map(|&c| c * block..(c + 1) * block).collect();
                (RemovalAxis::InFeatures, p.in_features, cols)
            }
            _ => continue,
        };
        derived.push(DerivedRemoval {
            layer_id: l.id.clone(),
            axis,
            original,
            kept,
        });
    }

    Ok(PruningPlan {
        archive_fingerprint: scores.archive_fingerprint.clone(),
        config: PlanConfig {
            scoring: scores.config,
            strategy: options.strategy,
            seed: options.seed,
            rates: rates.clone(),
            protected: protected.into_iter().collect(),
        },
        layers,
        derived,
    })
}
