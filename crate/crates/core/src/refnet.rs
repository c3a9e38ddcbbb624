//! Small deterministic forward engine for manifest networks.
//!
//! Straightforward loops, no im2col or SIMD: the point is a trustworthy
//! reference for checking that structural pruning matches masking, and a
//! source of feature maps for the diagnostics. Convolution is
//! cross-correlation with zero padding; accumulation runs over input
//! channels ascending, then kernel rows, then kernel columns.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::archive::Model;
use crate::error::{Error, Result};
use crate::manifest::{ChannelOrigin, GraphInfo, LayerOp, ModelManifest, NodeShape, INPUT_ID};
use crate::planner::PruningPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: NodeShape,
    pub data: Vec<f32>,
}

impl Activation {
    pub fn spatial(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let shape = NodeShape::Spatial { channels, height, width };
        Self::new(shape, data)
    }

    pub fn flat(data: Vec<f32>) -> Self {
        Activation {
            shape: NodeShape::Flat { features: data.len() },
            data,
        }
    }

    pub fn new(shape: NodeShape, data: Vec<f32>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch {
                layer: INPUT_ID.into(),
                reason: format!("activation {shape:?} needs {} values, got {}", shape.numel(), data.len()),
            });
        }
        Ok(Activation { shape, data })
    }

    fn plane(&self) -> usize {
        match self.shape {
            NodeShape::Spatial { height, width, .. } => height * width,
            NodeShape::Flat { .. } => 1,
        }
    }
}

/// Keep-vectors per prunable layer; `false` entries are zeroed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelMask {
    pub layers: BTreeMap<String, Vec<bool>>,
}

impl ChannelMask {
    pub fn from_plan(plan: &PruningPlan) -> Self {
        let layers = plan
            .layers
            .iter()
            .map(|lp| {
                let mut keep = vec![false; lp.original];
                for &i in &lp.kept_out_indices {
                    keep[i] = true;
                }
                (lp.layer_id.clone(), keep)
            })
            .collect();
        ChannelMask { layers }
    }

    /// Resolves the mask per pruning unit; members of one unit must agree.
    fn per_unit(&self, manifest: &ModelManifest, info: &GraphInfo) -> Result<Vec<Option<Vec<bool>>>> {
        for id in self.layers.keys() {
            let ok = manifest.layer_index(id).is_some_and(|i| info.unit_of.contains_key(&i));
            if !ok {
                return Err(Error::UnknownLayer(format!("{id} (mask entry for a non-prunable layer)")));
            }
        }
        let mut out = Vec::with_capacity(info.units.len());
        for unit in &info.units {
            let mut found: Option<&Vec<bool>> = None;
            for &m in &unit.members {
                let id = &manifest.layers[m].id;
                if let Some(v) = self.layers.get(id) {
                    if v.len() != unit.width {
                        return Err(Error::ShapeMismatch {
                            layer: id.clone(),
                            reason: format!("mask has {} entries, layer has {}", v.len(), unit.width),
                        });
                    }
                    if found.is_some_and(|f| f != v) {
                        return Err(Error::CouplingGroup(format!("mask for `{id}` differs from its group")));
                    }
                    found = Some(v);
                }
            }
            out.push(found.cloned());
        }
        Ok(out)
    }
}

/// Runs the network and returns every node's output, indexed like
/// `manifest.layers`.
pub fn forward_trace(model: &Model, input: &Activation, mask: Option<&ChannelMask>) -> Result<Vec<Activation>> {
    let info = model.graph()?;
    forward_with(model, &info, input, mask)
}

fn forward_with(model: &Model, info: &GraphInfo, input: &Activation, mask: Option<&ChannelMask>) -> Result<Vec<Activation>> {
    let manifest = &model.manifest;
    if input.shape != manifest.input_node_shape() {
        return Err(Error::ShapeMismatch {
            layer: INPUT_ID.into(),
            reason: format!("input is {:?}, manifest expects {:?}", input.shape, manifest.input_node_shape()),
        });
    }
    let unit_masks = match mask {
        Some(m) => m.per_unit(manifest, info)?,
        None => vec![None; info.units.len()],
    };

    let mut acts: Vec<Option<Activation>> = vec![None; manifest.layers.len()];
    for &i in &info.order {
        let l = &manifest.layers[i];
        let arg = |slot: usize| -> &Activation {
            match info.inputs[i][slot] {
                Some(src) => acts[src].as_ref().expect("topological order"),
                None => input,
            }
        };
        let mut out = match &l.op {
            LayerOp::Conv2d(p) => {
                let w = model.tensor(&p.weight);
                let b = p.bias.as_ref().map(|n| model.tensor(n).data.as_slice());
                conv2d(arg(0), &w.data, b, p.out_channels, p.kernel, p.stride, p.padding)
            }
            LayerOp::Linear(p) => {
                let w = model.tensor(&p.weight);
                let b = p.bias.as_ref().map(|n| model.tensor(n).data.as_slice());
                linear(arg(0), &w.data, b, p.out_features)
            }
            LayerOp::BatchNorm2d(p) => {
                let t = |n: &String| model.tensor(n).data.as_slice();
                batchnorm(arg(0), t(&p.gamma), t(&p.beta), t(&p.mean), t(&p.var), p.eps)
            }
            LayerOp::Relu => {
                let x = arg(0);
                Activation {
                    shape: x.shape,
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                }
            }
            LayerOp::MaxPool2d(p) => pool(arg(0), p.kernel, p.stride, true),
            LayerOp::AvgPool2d(p) => pool(arg(0), p.kernel, p.stride, false),
            LayerOp::Flatten(_) => Activation::flat(arg(0).data.clone()),
            LayerOp::Add => {
                let (a, b) = (arg(0), arg(1));
                Activation {
                    shape: a.shape,
                    data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                }
            }
        };
        if out.shape != info.shapes[i] {
            return Err(Error::ShapeMismatch {
                layer: l.id.clone(),
                reason: format!("computed {:?}, manifest implies {:?}", out.shape, info.shapes[i]),
            });
        }
        if let ChannelOrigin::Unit { unit, block } = info.origins[i] {
            if let Some(keep) = &unit_masks[unit] {
                let span = block * out.plane();
                for (c, &k) in keep.iter().enumerate() {
                    if !k {
                        out.data[c * span..(c + 1) * span].fill(0.0);
                    }
                }
            }
        }
        acts[i] = Some(out);
    }
    Ok(acts.into_iter().map(|a| a.expect("every node runs")).collect())
}

/// Network output for one input.
pub fn forward(model: &Model, input: &Activation, mask: Option<&ChannelMask>) -> Result<Activation> {
    let info = model.graph()?;
    let mut trace = forward_with(model, &info, input, mask)?;
    Ok(trace.swap_remove(info.sink))
}

/// Runs a batch of inputs in parallel; output order follows `inputs`.
pub fn forward_batch(model: &Model, inputs: &[Activation], mask: Option<&ChannelMask>) -> Result<Vec<Activation>> {
    let info = model.graph()?;
    inputs
        .par_iter()
        .map(|x| forward_with(model, &info, x, mask).map(|mut t| t.swap_remove(info.sink)))
        .collect()
}

fn conv2d(x: &Activation, w: &[f32], bias: Option<&[f32]>, out_c: usize, k: usize, stride: usize, pad: usize) -> Activation {
    let NodeShape::Spatial { channels: in_c, height: h, width: wd } = x.shape else {
        unreachable!("validated spatial input")
    };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; out_c * oh * ow];
    for o in 0..out_c {
        let wo = &w[o * in_c * k * k..(o + 1) * in_c * k * k];
        let b = bias.map_or(0.0, |b| b[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for c in 0..in_c {
                    let xc = &x.data[c * h * wd..(c + 1) * h * wd];
                    let wc = &wo[c * k * k..(c + 1) * k * k];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wc[ky * k + kx] * xc[iy as usize * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc + b;
            }
        }
    }
    Activation {
        shape: NodeShape::Spatial { channels: out_c, height: oh, width: ow },
        data: out,
    }
}

fn linear(x: &Activation, w: &[f32], bias: Option<&[f32]>, out_f: usize) -> Activation {
    let in_f = x.data.len();
    let data = (0..out_f)
        .map(|o| {
            let row = &w[o * in_f..(o + 1) * in_f];
            let acc: f32 = row.iter().zip(&x.data).fold(0.0, |a, (wv, xv)| a + wv * xv);
            acc + bias.map_or(0.0, |b| b[o])
        })
        .collect();
    Activation {
        shape: NodeShape::Flat { features: out_f },
        data,
    }
}

fn batchnorm(x: &Activation, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f64) -> Activation {
    let plane = x.plane();
    let mut data = x.data.clone();
    for c in 0..gamma.len() {
        let scale = gamma[c] as f64 / (var[c] as f64 + eps).sqrt();
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = ((*v as f64 - mean[c] as f64) * scale + beta[c] as f64) as f32;
        }
    }
    Activation { shape: x.shape, data }
}

fn pool(x: &Activation, k: usize, stride: usize, max: bool) -> Activation {
    let NodeShape::Spatial { channels, height: h, width: w } = x.shape else {
        unreachable!("validated spatial input")
    };
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let xc = &x.data[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let window = (0..k).flat_map(|ky| (0..k).map(move |kx| (oy * stride + ky) * w + ox * stride + kx));
                let v = if max {
                    window.map(|i| xc[i]).fold(f32::NEG_INFINITY, f32::max)
                } else {
                    window.map(|i| xc[i]).sum::<f32>() / (k * k) as f32
                };
                out.push(v);
            }
        }
    }
    Activation {
        shape: NodeShape::Spatial { channels, height: oh, width: ow },
        data: out,
    }
}

/// Uniform [-1, 1) inputs matching the manifest's input shape.
pub fn random_inputs(manifest: &ModelManifest, count: usize, seed: u64) -> Vec<Activation> {
    let shape = manifest.input_node_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Activation {
            shape,
            data: (0..shape.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        })
        .collect()
}

/// Indices of the network output that survive the plan.
pub fn kept_output_indices(manifest: &ModelManifest, plan: &PruningPlan) -> Result<Vec<usize>> {
    let info = manifest.analyze()?;
    let shape = info.shapes[info.sink];
    let plane = match shape {
        NodeShape::Spatial { height, width, .. } => height * width,
        NodeShape::Flat { .. } => 1,
    };
    Ok(match info.origins[info.sink] {
        ChannelOrigin::Fixed => (0..shape.numel()).collect(),
        ChannelOrigin::Unit { unit, block } => {
            let member = &manifest.layers[info.units[unit].members[0]].id;
            let lp = plan.layer(member).ok_or_else(|| Error::MissingScores(member.clone()))?;
            let span = block * plane;
            lp.kept_out_indices.iter().flat_map(|&c| c * span..(c + 1) * span).collect()
        }
    })
}

/// Largest absolute difference between the pruned network's output and
/// the masked original's output gathered on kept dimensions.
pub fn masked_equivalence(original: &Model, plan: &PruningPlan, pruned: &Model, inputs: &[Activation]) -> Result<f64> {
    let mask = ChannelMask::from_plan(plan);
    let kept = kept_output_indices(&original.manifest, plan)?;
    let masked = forward_batch(original, inputs, Some(&mask))?;
    let small = forward_batch(pruned, inputs, None)?;
    let mut worst = 0.0f64;
    for (m, s) in masked.iter().zip(&small) {
        if s.data.len() != kept.len() {
            return Err(Error::ShapeMismatch {
                layer: "output".into(),
                reason: format!("pruned output has {} values, plan keeps {}", s.data.len(), kept.len()),
            });
        }
        for (&k, &v) in kept.iter().zip(&s.data) {
            worst = worst.max((m.data[k] as f64 - v as f64).abs());
        }
    }
    Ok(worst)
}
