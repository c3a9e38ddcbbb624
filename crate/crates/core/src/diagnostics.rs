//! Feature-map diagnostics: matrix-based Rényi entropy, map rank and the
//! Pearson correlation between filter entropy and feature-map entropy.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::Model;
use crate::error::{Error, Result};
use crate::manifest::NodeShape;
use crate::refnet::{forward_trace, Activation};

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const RANK_TOLERANCE: f64 = 1e-6;
/// Eigenvalues of the normalized Gram matrix below this are treated as a
/// broken kernel rather than round-off.
const PSD_SLACK: f64 = 1e-8;

/// One channel's maps over `samples` inputs, stored `[samples, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSample {
    pub layer_id: String,
    pub channel: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMapSample {
    pub fn new(samples: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if samples * height * width != values.len() {
            return Err(Error::LengthMismatch(samples * height * width, values.len()));
        }
        Ok(FeatureMapSample {
            layer_id: String::new(),
            channel: 0,
            samples,
            height,
            width,
            values,
        })
    }

    pub fn map(&self, s: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[s * n..(s + 1) * n]
    }

    fn require_pairs(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::TooFewSamples(self.samples));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance between the flattened maps, or 1
/// when every map is identical.
pub fn median_kernel_width(sample: &FeatureMapSample) -> Result<f64> {
    sample.require_pairs()?;
    let mut d = Vec::new();
    for i in 0..sample.samples {
        for j in i + 1..sample.samples {
            d.push(sq_dist(sample.map(i), sample.map(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Gaussian Gram matrix over the samples, scaled to unit trace.
pub fn normalized_gram(sample: &FeatureMapSample, kernel_width: f64) -> Result<DMatrix<f64>> {
    sample.require_pairs()?;
    if !(kernel_width.is_finite() && kernel_width > 0.0) {
        return Err(Error::InvalidConfig(format!("kernel width {kernel_width} must be positive")));
    }
    let s = sample.samples;
    let denom = 2.0 * kernel_width * kernel_width;
    let mut k = DMatrix::<f64>::identity(s, s);
    for i in 0..s {
        for j in i + 1..s {
            let v = (-sq_dist(sample.map(i), sample.map(j)) / denom).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let tr = k.trace();
    Ok(k / tr)
}

/// `log2(sum(lambda^alpha)) / (1 - alpha)` over the spectrum of the
/// unit-trace Gaussian Gram matrix. Lies in `[0, log2(samples)]`.
pub fn renyi_matrix_entropy(sample: &FeatureMapSample, alpha: f64, kernel_width: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) || alpha == 1.0 {
        return Err(Error::InvalidConfig(format!("alpha {alpha} must be positive and not 1")));
    }
    let a = normalized_gram(sample, kernel_width)?;
    let eig = SymmetricEigen::new(a).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_SLACK {
        return Err(Error::NotPositiveDefinite(min));
    }
    let power: f64 = eig.iter().map(|&l| l.max(0.0).powf(alpha)).sum();
    let h = power.log2() / (1.0 - alpha);
    let cap = (sample.samples as f64).log2();
    // round-off around the rank-1 and uniform extremes
    Ok(if h.abs() < 1e-12 { 0.0 } else { h.clamp(0.0, cap) })
}

/// Rank of the sample-averaged map: singular values above
/// `RANK_TOLERANCE * max_singular_value`.
pub fn feature_rank(sample: &FeatureMapSample) -> usize {
    let (h, w) = (sample.height, sample.width);
    let mut mean = DMatrix::<f64>::zeros(h, w);
    for s in 0..sample.samples {
        let m = sample.map(s);
        for r in 0..h {
            for c in 0..w {
                mean[(r, c)] += m[r * w + c];
            }
        }
    }
    mean /= sample.samples.max(1) as f64;
    let sv = mean.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > RANK_TOLERANCE * max).count()
}

/// Pearson correlation coefficient.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::ZeroVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Output maps of `layer_id` (pre-activation for a conv) for each input,
/// one sample per channel.
pub fn capture_feature_maps(model: &Model, inputs: &[Activation], layer_id: &str) -> Result<Vec<FeatureMapSample>> {
    if inputs.len() < 2 {
        return Err(Error::TooFewSamples(inputs.len()));
    }
    let idx = model
        .manifest
        .layer_index(layer_id)
        .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
    let info = model.graph()?;
    let NodeShape::Spatial { channels, height, width } = info.shapes[idx] else {
        return Err(Error::ShapeMismatch {
            layer: layer_id.to_string(),
            reason: "feature maps need a spatial layer output".into(),
        });
    };
    let outs: Vec<Activation> = inputs
        .par_iter()
        .map(|x| forward_trace(model, x, None).map(|mut t| t.swap_remove(idx)))
        .collect::<Result<_>>()?;
    let plane = height * width;
    Ok((0..channels)
        .map(|c| FeatureMapSample {
            layer_id: layer_id.to_string(),
            channel: c,
            samples: inputs.len(),
            height,
            width,
            values: outs
                .iter()
                .flat_map(|a| a.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64))
                .collect(),
        })
        .collect())
}
