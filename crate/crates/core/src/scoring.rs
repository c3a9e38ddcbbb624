//! Filter importance from pretrained weights.
//!
//! Each filter gets two raw metrics:
//!
//! * **capacity**: one minus the Shannon entropy (base 2) of a softmax over
//!   its kernels, where each kernel's logit is the summed Euclidean distance
//!   to the other kernels of the same filter (optionally only the `M`
//!   nearest ones);
//! * **independence**: the summed distance from the filter to every other
//!   filter of the same layer.
//!
//! Both are min-max normalized within the layer and blended with weight
//! `sigma` on capacity. Fully connected layers are scored the same way,
//! treating each output row as a filter of 1x1 kernels.
//!
//! All reductions run left to right over ascending indices so results are
//! bit-identical regardless of how layers are scheduled across threads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::archive::Model;
use crate::error::{Error, Result};
use crate::manifest::{LayerKind, LayerOp};

pub const DEFAULT_SIGMA: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Manhattan,
    Chebyshev,
    Cosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 4] = [
        DistanceMetric::Euclidean,
        DistanceMetric::Manhattan,
        DistanceMetric::Chebyshev,
        DistanceMetric::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Manhattan => "manhattan",
            DistanceMetric::Chebyshev => "chebyshev",
            DistanceMetric::Cosine => "cosine",
        }
    }

    /// Distance between two equal-length vectors. A zero vector is at
    /// cosine distance 1 from everything.
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            DistanceMetric::Euclidean => euclidean(a, b),
            DistanceMetric::Manhattan => a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum(),
            DistanceMetric::Chebyshev => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .fold(0.0, f64::max),
            DistanceMetric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (x as f64, y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
                }
            }
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric `{s}`")))
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// How many neighbouring kernels contribute to a kernel's similarity sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MNearest {
    /// Sum over every other kernel.
    #[default]
    Exact,
    /// Sum over the `M` nearest other kernels, clamped to `n - 1`.
    Nearest(usize),
}

impl fmt::Display for MNearest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MNearest::Exact => f.write_str("exact"),
            MNearest::Nearest(m) => write!(f, "{m}"),
        }
    }
}

impl FromStr for MNearest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(MNearest::Exact);
        }
        match s.parse::<usize>() {
            Ok(m) if m > 0 => Ok(MNearest::Nearest(m)),
            _ => Err(Error::InvalidConfig(format!("m_nearest must be `exact` or a positive integer, got `{s}`"))),
        }
    }
}

impl Serialize for MNearest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MNearest::Exact => s.serialize_str("exact"),
            MNearest::Nearest(m) => s.serialize_u64(*m as u64),
        }
    }
}

impl<'de> Deserialize<'de> for MNearest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("m_nearest must be positive")),
            Raw::Count(m) => Ok(MNearest::Nearest(m as usize)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub sigma: f64,
    pub m_nearest: MNearest,
    pub metric: DistanceMetric,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            sigma: DEFAULT_SIGMA,
            m_nearest: MNearest::Exact,
            metric: DistanceMetric::Euclidean,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidConfig(format!("sigma {} outside [0, 1]", self.sigma)));
        }
        if self.m_nearest == MNearest::Nearest(0) {
            return Err(Error::InvalidConfig("m_nearest must be positive".into()));
        }
        Ok(())
    }
}

/// Per-kernel similarity sums for one filter stored as consecutive kernels
/// of `kernel_len` values each.
pub fn kernel_similarity(filter: &[f32], kernel_len: usize, m_nearest: MNearest) -> Vec<f64> {
    assert!(kernel_len > 0 && filter.len().is_multiple_of(kernel_len), "filter is not a whole number of kernels");
    let kernels: Vec<&[f32]> = filter.chunks_exact(kernel_len).collect();
    let n = kernels.len();
    let mut dist = vec![0.0f64; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let d = euclidean(kernels[a], kernels[b]);
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }
    match m_nearest {
        MNearest::Exact => (0..n)
            .map(|q| (0..n).filter(|&o| o != q).map(|o| dist[q * n + o]).sum())
            .collect(),
        MNearest::Nearest(m) => {
            let m = m.min(n.saturating_sub(1));
            (0..n)
                .map(|q| {
                    let mut row: Vec<f64> = (0..n).filter(|&o| o != q).map(|o| dist[q * n + o]).collect();
                    row.sort_by(f64::total_cmp);
                    row[..m].iter().sum()
                })
                .collect()
        }
    }
}

/// Softmax with max subtraction.
pub fn kernel_probabilities(sim: &[f64]) -> Vec<f64> {
    if sim.is_empty() {
        return Vec::new();
    }
    let max = sim.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sim.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn filter_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum();
    // -0.0 for degenerate distributions
    if h == 0.0 {
        0.0
    } else {
        -h
    }
}

/// Returns `(entropy, 1 - entropy)` for one filter.
pub fn information_capacity(filter: &[f32], kernel_len: usize, m_nearest: MNearest) -> (f64, f64) {
    let h = filter_entropy(&kernel_probabilities(&kernel_similarity(filter, kernel_len, m_nearest)));
    (h, 1.0 - h)
}

/// Summed distance from each filter to every other filter of the layer.
pub fn information_independence(filters: &[&[f32]], metric: DistanceMetric) -> Vec<f64> {
    let n = filters.len();
    let mut dist = vec![0.0f64; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let d = metric.distance(filters[a], filters[b]);
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }
    (0..n)
        .map(|i| (0..n).filter(|&o| o != i).map(|o| dist[i * n + o]).sum())
        .collect()
}

/// Min-max normalization onto [0, 1]; a constant array maps to zeros.
pub fn min_max_normalize(x: &[f64]) -> Vec<f64> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

/// `sigma * Norm(capacity) + (1 - sigma) * Norm(independence)`.
pub fn combine(capacity_norm: &[f64], independence_norm: &[f64], sigma: f64) -> Vec<f64> {
    capacity_norm
        .iter()
        .zip(independence_norm)
        .map(|(&c, &i)| sigma * c + (1.0 - sigma) * i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerScores {
    pub layer_id: String,
    pub kind: LayerKind,
    pub entropy: Vec<f64>,
    pub capacity_raw: Vec<f64>,
    pub independence_raw: Vec<f64>,
    pub capacity_norm: Vec<f64>,
    pub independence_norm: Vec<f64>,
    pub combined: Vec<f64>,
}

impl LayerScores {
    pub fn len(&self) -> usize {
        self.combined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combined.is_empty()
    }

    /// Builds the normalized and combined columns from raw metrics.
    pub fn from_raw(
        layer_id: impl Into<String>,
        kind: LayerKind,
        entropy: Vec<f64>,
        independence_raw: Vec<f64>,
        sigma: f64,
    ) -> Self {
        let capacity_raw: Vec<f64> = entropy.iter().map(|h| 1.0 - h).collect();
        let capacity_norm = min_max_normalize(&capacity_raw);
        let independence_norm = min_max_normalize(&independence_raw);
        let combined = combine(&capacity_norm, &independence_norm, sigma);
        LayerScores {
            layer_id: layer_id.into(),
            kind,
            entropy,
            capacity_raw,
            independence_raw,
            capacity_norm,
            independence_norm,
            combined,
        }
    }
}

/// Scores every filter of one layer. `filters` are the flattened filters
/// (rows of the weight tensor), each made of kernels of `kernel_len` values.
pub fn score_layer(
    layer_id: &str,
    kind: LayerKind,
    filters: &[&[f32]],
    kernel_len: usize,
    config: &ScoringConfig,
) -> LayerScores {
    let entropy: Vec<f64> = filters
        .iter()
        .map(|f| information_capacity(f, kernel_len, config.m_nearest).0)
        .collect();
    let independence = information_independence(filters, config.metric);
    LayerScores::from_raw(layer_id, kind, entropy, independence, config.sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    pub archive_fingerprint: String,
    pub config: ScoringConfig,
    pub layers: Vec<LayerScores>,
}

impl ScoreTable {
    pub fn layer(&self, id: &str) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scores serialize");
        s.push('\n');
        s
    }
}

/// Scores every prunable layer in topological order. Layers are scored in
/// parallel on the current rayon pool.
pub fn score_model(model: &Model, config: &ScoringConfig) -> Result<ScoreTable> {
    config.validate()?;
    let info = model.graph()?;
    let targets: Vec<usize> = info.order.iter().copied().filter(|&i| model.manifest.layers[i].prunable).collect();
    let layers = targets
        .par_iter()
        .map(|&i| {
            let l = &model.manifest.layers[i];
            let kernel_len = match &l.op {
                LayerOp::Conv2d(p) => p.kernel * p.kernel,
                LayerOp::Linear(_) => 1,
                _ => unreachable!("only conv2d and linear are prunable"),
            };
            let w = model.tensor(l.weight_name().expect("weighted layer"));
            let filters: Vec<&[f32]> = (0..w.shape[0]).map(|r| w.row(r)).collect();
            score_layer(&l.id, l.kind(), &filters, kernel_len, config)
        })
        .collect();
    Ok(ScoreTable {
        archive_fingerprint: model.fingerprint(),
        config: *config,
        layers,
    })
}
