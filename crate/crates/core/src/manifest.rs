//! Layer graph description and structural validation.
//!
//! A manifest lists layers in any order; edges come from each layer's
//! `inputs`, where the reserved id [`INPUT_ID`] names the network input.
//! [`ModelManifest::analyze`] checks the graph and propagates shapes and
//! channel provenance, which the planner, applier, cost model and forward
//! engine all consume.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::TensorRecord;

/// Reserved id for the network input in `inputs` lists.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Batchnorm2d,
    Relu,
    Maxpool2d,
    Avgpool2d,
    Flatten,
    Add,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub groups: usize,
    pub has_bias: bool,
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub out_features: usize,
    pub in_features: usize,
    pub has_bias: bool,
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormParams {
    pub channels: usize,
    pub gamma: String,
    pub beta: String,
    pub mean: String,
    pub var: String,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
}

/// Spatial size the flatten layer expects, used to map channels to
/// feature-column blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlattenParams {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d(Conv2dParams),
    Linear(LinearParams),
    BatchNorm2d(BatchNormParams),
    Relu,
    MaxPool2d(PoolParams),
    AvgPool2d(PoolParams),
    Flatten(FlattenParams),
    Add,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv2d(_) => LayerKind::Conv2d,
            LayerOp::Linear(_) => LayerKind::Linear,
            LayerOp::BatchNorm2d(_) => LayerKind::Batchnorm2d,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::MaxPool2d(_) => LayerKind::Maxpool2d,
            LayerOp::AvgPool2d(_) => LayerKind::Avgpool2d,
            LayerOp::Flatten(_) => LayerKind::Flatten,
            LayerOp::Add => LayerKind::Add,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerSpecRepr", into = "LayerSpecRepr")]
pub struct LayerSpec {
    pub id: String,
    pub inputs: Vec<String>,
    pub op: LayerOp,
    pub prunable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSpecRepr {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    params: Value,
    #[serde(default)]
    prunable: bool,
}

impl TryFrom<LayerSpecRepr> for LayerSpec {
    type Error = String;

    fn try_from(r: LayerSpecRepr) -> std::result::Result<Self, String> {
        fn params<T: serde::de::DeserializeOwned>(id: &str, v: Value) -> std::result::Result<T, String> {
            serde_json::from_value(v).map_err(|e| format!("layer `{id}` params: {e}"))
        }
        let id = r.id;
        let op = match r.kind {
            LayerKind::Conv2d => LayerOp::Conv2d(params(&id, r.params)?),
            LayerKind::Linear => LayerOp::Linear(params(&id, r.params)?),
            LayerKind::Batchnorm2d => LayerOp::BatchNorm2d(params(&id, r.params)?),
            LayerKind::Maxpool2d => LayerOp::MaxPool2d(params(&id, r.params)?),
            LayerKind::Avgpool2d => LayerOp::AvgPool2d(params(&id, r.params)?),
            LayerKind::Flatten => LayerOp::Flatten(params(&id, r.params)?),
            LayerKind::Relu | LayerKind::Add => {
                let empty = match &r.params {
                    Value::Null => true,
                    Value::Object(m) => m.is_empty(),
                    _ => false,
                };
                if !empty {
                    return Err(format!("layer `{id}` params: {:?} takes no params", r.kind));
                }
                if r.kind == LayerKind::Relu {
                    LayerOp::Relu
                } else {
                    LayerOp::Add
                }
            }
        };
        Ok(LayerSpec {
            id,
            inputs: r.inputs,
            op,
            prunable: r.prunable,
        })
    }
}

impl From<LayerSpec> for LayerSpecRepr {
    fn from(l: LayerSpec) -> Self {
        let kind = l.op.kind();
        let params = match l.op {
            LayerOp::Conv2d(p) => serde_json::to_value(p),
            LayerOp::Linear(p) => serde_json::to_value(p),
            LayerOp::BatchNorm2d(p) => serde_json::to_value(p),
            LayerOp::MaxPool2d(p) | LayerOp::AvgPool2d(p) => serde_json::to_value(p),
            LayerOp::Flatten(p) => serde_json::to_value(p),
            LayerOp::Relu | LayerOp::Add => Ok(Value::Null),
        }
        .expect("params serialize to json");
        LayerSpecRepr {
            id: l.id,
            kind,
            inputs: l.inputs,
            params,
            prunable: l.prunable,
        }
    }
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    /// Output width of a conv or linear layer.
    pub fn out_width(&self) -> Option<usize> {
        match &self.op {
            LayerOp::Conv2d(p) => Some(p.out_channels),
            LayerOp::Linear(p) => Some(p.out_features),
            _ => None,
        }
    }

    pub fn weight_name(&self) -> Option<&str> {
        match &self.op {
            LayerOp::Conv2d(p) => Some(&p.weight),
            LayerOp::Linear(p) => Some(&p.weight),
            _ => None,
        }
    }

    /// Tensor names this layer references with the shapes its params imply.
    pub fn tensor_refs(&self) -> Vec<(&str, Vec<usize>)> {
        match &self.op {
            LayerOp::Conv2d(p) => {
                let mut v = vec![(
                    p.weight.as_str(),
                    vec![p.out_channels, p.in_channels, p.kernel, p.kernel],
                )];
                if let Some(b) = &p.bias {
                    v.push((b.as_str(), vec![p.out_channels]));
                }
                v
            }
            LayerOp::Linear(p) => {
                let mut v = vec![(p.weight.as_str(), vec![p.out_features, p.in_features])];
                if let Some(b) = &p.bias {
                    v.push((b.as_str(), vec![p.out_features]));
                }
                v
            }
            LayerOp::BatchNorm2d(p) => [&p.gamma, &p.beta, &p.mean, &p.var]
                .into_iter()
                .map(|n| (n.as_str(), vec![p.channels]))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingGroup {
    pub layer_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub coupling_groups: Vec<CouplingGroup>,
}

/// Shape of the activation a node produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeShape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        features: usize,
    },
}

impl NodeShape {
    pub fn width(&self) -> usize {
        match *self {
            NodeShape::Spatial { channels, .. } => channels,
            NodeShape::Flat { features } => features,
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            NodeShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            NodeShape::Flat { features } => features,
        }
    }
}

/// Which pruning unit decides the channel (or feature) set of an
/// activation. `block` is the number of consecutive features per unit
/// channel: 1 everywhere except after a flatten, where it is `h * w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOrigin {
    Fixed,
    Unit { unit: usize, block: usize },
}

/// A set of prunable layers that share one kept-index set: either a
/// coupling group or a single ungrouped prunable layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneUnit {
    /// Layer indices into `ModelManifest::layers`, in topological order.
    pub members: Vec<usize>,
    pub width: usize,
    /// Index into `coupling_groups` when the unit came from one.
    pub group: Option<usize>,
}

/// Result of structural validation.
#[derive(Debug, Clone)]
pub struct GraphInfo {
    /// Layer indices in topological order.
    pub order: Vec<usize>,
    /// Output shape per layer index.
    pub shapes: Vec<NodeShape>,
    /// Resolved input node per layer: `None` is the network input.
    pub inputs: Vec<Vec<Option<usize>>>,
    pub consumers: Vec<Vec<usize>>,
    pub origins: Vec<ChannelOrigin>,
    pub units: Vec<PruneUnit>,
    /// Unit index per prunable layer index.
    pub unit_of: HashMap<usize, usize>,
    pub sink: usize,
}

impl GraphInfo {
    pub fn input_shape_of(&self, manifest: &ModelManifest, layer: usize, slot: usize) -> NodeShape {
        match self.inputs[layer][slot] {
            Some(src) => self.shapes[src],
            None => manifest.input_node_shape(),
        }
    }

    pub fn input_origin_of(&self, layer: usize, slot: usize) -> ChannelOrigin {
        match self.inputs[layer][slot] {
            Some(src) => self.origins[src],
            None => ChannelOrigin::Fixed,
        }
    }
}

fn graph_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::InvalidGraph {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

fn shape_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

fn sliding_out(layer: &str, size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(shape_err(layer, "kernel and stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(shape_err(
            layer,
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ModelManifest {
    pub fn input_node_shape(&self) -> NodeShape {
        let [channels, height, width] = self.input_shape;
        NodeShape::Spatial {
            channels,
            height,
            width,
        }
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Checks structure and propagates shapes and channel provenance.
    /// Tensor references are not checked here; see [`validate`].
    pub fn analyze(&self) -> Result<GraphInfo> {
        if self.input_shape.contains(&0) {
            return Err(shape_err(INPUT_ID, "input_shape dimensions must be positive"));
        }
        let n = self.layers.len();
        if n == 0 {
            return Err(graph_err(INPUT_ID, "manifest has no layers"));
        }
        let mut index: HashMap<&str, usize> = HashMap::with_capacity(n);
        for (i, l) in self.layers.iter().enumerate() {
            if l.id == INPUT_ID {
                return Err(graph_err(&l.id, "layer id `input` is reserved"));
            }
            if index.insert(l.id.as_str(), i).is_some() {
                return Err(graph_err(&l.id, "duplicate layer id"));
            }
        }

        let mut inputs = Vec::with_capacity(n);
        let mut consumers = vec![Vec::new(); n];
        for (i, l) in self.layers.iter().enumerate() {
            let arity = if l.kind() == LayerKind::Add { 2 } else { 1 };
            if l.inputs.len() != arity {
                return Err(graph_err(
                    &l.id,
                    format!("{:?} takes {arity} input(s), got {}", l.kind(), l.inputs.len()),
                ));
            }
            let mut resolved = Vec::with_capacity(arity);
            for name in &l.inputs {
                if name == INPUT_ID {
                    resolved.push(None);
                } else {
                    let src = *index.get(name.as_str()).ok_or_else(|| Error::DanglingReference {
                        layer: l.id.clone(),
                        what: "layer",
                        target: name.clone(),
                    })?;
                    consumers[src].push(i);
                    resolved.push(Some(src));
                }
            }
            inputs.push(resolved);
        }

        let order = self.topo_order(&inputs, &consumers)?;

        let sinks: Vec<usize> = (0..n).filter(|&i| consumers[i].is_empty()).collect();
        if sinks.len() != 1 {
            let ids: Vec<&str> = sinks.iter().map(|&i| self.layers[i].id.as_str()).collect();
            return Err(graph_err(ids.first().copied().unwrap_or(INPUT_ID), format!("graph must have exactly one sink, found {ids:?}")));
        }

        for l in &self.layers {
            if l.prunable && !matches!(l.kind(), LayerKind::Conv2d | LayerKind::Linear) {
                return Err(graph_err(&l.id, "only conv2d and linear layers can be prunable"));
            }
        }

        let (units, unit_of) = self.build_units(&index, &order)?;

        let mut shapes = vec![NodeShape::Flat { features: 0 }; n];
        let mut origins = vec![ChannelOrigin::Fixed; n];
        let input_shape = self.input_node_shape();
        for &i in &order {
            let l = &self.layers[i];
            let in_shape = |slot: usize| match inputs[i][slot] {
                Some(src) => shapes[src],
                None => input_shape,
            };
            let in_origin = |slot: usize| match inputs[i][slot] {
                Some(src) => origins[src],
                None => ChannelOrigin::Fixed,
            };
            let own_origin = match unit_of.get(&i) {
                Some(&unit) => ChannelOrigin::Unit { unit, block: 1 },
                None => ChannelOrigin::Fixed,
            };
            let (shape, origin) = match &l.op {
                LayerOp::Conv2d(p) => {
                    if p.groups != 1 {
                        return Err(Error::Unsupported(format!("grouped conv (layer `{}`, groups={})", l.id, p.groups)));
                    }
                    if p.out_channels == 0 || p.in_channels == 0 {
                        return Err(shape_err(&l.id, "channel counts must be positive"));
                    }
                    let NodeShape::Spatial { channels, height, width } = in_shape(0) else {
                        return Err(shape_err(&l.id, "conv2d needs a spatial input"));
                    };
                    if channels != p.in_channels {
                        return Err(shape_err(&l.id, format!("in_channels {} but input has {channels}", p.in_channels)));
                    }
                    let h = sliding_out(&l.id, height, p.kernel, p.stride, p.padding)?;
                    let w = sliding_out(&l.id, width, p.kernel, p.stride, p.padding)?;
                    (
                        NodeShape::Spatial { channels: p.out_channels, height: h, width: w },
                        own_origin,
                    )
                }
                LayerOp::Linear(p) => {
                    if p.out_features == 0 || p.in_features == 0 {
                        return Err(shape_err(&l.id, "feature counts must be positive"));
                    }
                    let NodeShape::Flat { features } = in_shape(0) else {
                        return Err(shape_err(&l.id, "linear needs a flat input (insert a flatten layer)"));
                    };
                    if features != p.in_features {
                        return Err(shape_err(&l.id, format!("in_features {} but input has {features}", p.in_features)));
                    }
                    (NodeShape::Flat { features: p.out_features }, own_origin)
                }
                LayerOp::BatchNorm2d(p) => {
                    let src = inputs[i][0];
                    let ok = src.is_some_and(|s| self.layers[s].kind() == LayerKind::Conv2d);
                    if !ok {
                        return Err(graph_err(&l.id, "batchnorm2d input must be a conv2d layer"));
                    }
                    let s = in_shape(0);
                    if s.width() != p.channels {
                        return Err(shape_err(&l.id, format!("channels {} but input conv has {}", p.channels, s.width())));
                    }
                    if !(p.eps.is_finite() && p.eps > 0.0) {
                        return Err(shape_err(&l.id, "eps must be positive and finite"));
                    }
                    (s, in_origin(0))
                }
                LayerOp::Relu => (in_shape(0), in_origin(0)),
                LayerOp::MaxPool2d(p) | LayerOp::AvgPool2d(p) => {
                    let NodeShape::Spatial { channels, height, width } = in_shape(0) else {
                        return Err(shape_err(&l.id, "pooling needs a spatial input"));
                    };
                    let h = sliding_out(&l.id, height, p.kernel, p.stride, 0)?;
                    let w = sliding_out(&l.id, width, p.kernel, p.stride, 0)?;
                    (NodeShape::Spatial { channels, height: h, width: w }, in_origin(0))
                }
                LayerOp::Flatten(p) => {
                    let NodeShape::Spatial { channels, height, width } = in_shape(0) else {
                        return Err(shape_err(&l.id, "flatten needs a spatial input"));
                    };
                    if (height, width) != (p.height, p.width) {
                        return Err(shape_err(
                            &l.id,
                            format!("flatten records {}x{} but input is {height}x{width}", p.height, p.width),
                        ));
                    }
                    let origin = match in_origin(0) {
                        ChannelOrigin::Unit { unit, .. } => ChannelOrigin::Unit { unit, block: height * width },
                        ChannelOrigin::Fixed => ChannelOrigin::Fixed,
                    };
                    (NodeShape::Flat { features: channels * height * width }, origin)
                }
                LayerOp::Add => {
                    let (a, b) = (in_shape(0), in_shape(1));
                    if a.width() != b.width() {
                        return Err(Error::AddChannelMismatch {
                            layer: l.id.clone(),
                            left: a.width().to_string(),
                            right: b.width().to_string(),
                        });
                    }
                    if a != b {
                        return Err(shape_err(&l.id, format!("add inputs differ: {a:?} vs {b:?}")));
                    }
                    let (oa, ob) = (in_origin(0), in_origin(1));
                    if oa != ob {
                        return Err(Error::CouplingGroup(format!(
                            "add `{}` joins branches pruned by different units ({} vs {}); put their producers in one coupling group",
                            l.id,
                            self.describe_origin(&units, oa),
                            self.describe_origin(&units, ob)
                        )));
                    }
                    (a, oa)
                }
            };
            shapes[i] = shape;
            origins[i] = origin;
        }

        Ok(GraphInfo {
            sink: sinks[0],
            order,
            shapes,
            inputs,
            consumers,
            origins,
            units,
            unit_of,
        })
    }

    fn describe_origin(&self, units: &[PruneUnit], origin: ChannelOrigin) -> String {
        match origin {
            ChannelOrigin::Fixed => "unpruned".to_string(),
            ChannelOrigin::Unit { unit, .. } => {
                let ids: Vec<&str> = units[unit].members.iter().map(|&m| self.layers[m].id.as_str()).collect();
                format!("{ids:?}")
            }
        }
    }

    /// Kahn's algorithm, always releasing the ready layer listed first in
    /// the manifest so the order is reproducible.
    fn topo_order(&self, inputs: &[Vec<Option<usize>>], consumers: &[Vec<usize>]) -> Result<Vec<usize>> {
        let n = self.layers.len();
        let mut pending: Vec<usize> = inputs.iter().map(|ins| ins.iter().filter(|s| s.is_some()).count()).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| pending[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                pending[c] -= 1;
                if pending[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != n {
            let cyc = (0..n).filter(|&i| pending[i] > 0).map(|i| self.layers[i].id.clone()).collect();
            return Err(Error::CyclicGraph(cyc));
        }
        Ok(order)
    }

    fn build_units(&self, index: &HashMap<&str, usize>, order: &[usize]) -> Result<(Vec<PruneUnit>, HashMap<usize, usize>)> {
        let mut group_of: HashMap<usize, usize> = HashMap::new();
        for (g, group) in self.coupling_groups.iter().enumerate() {
            if group.layer_ids.is_empty() {
                return Err(Error::CouplingGroup(format!("group {g} is empty")));
            }
            let mut width = None;
            for id in &group.layer_ids {
                let &li = index.get(id.as_str()).ok_or_else(|| {
                    Error::CouplingGroup(format!("group {g} names unknown layer `{id}`"))
                })?;
                let l = &self.layers[li];
                if !l.prunable {
                    return Err(Error::CouplingGroup(format!("group {g} member `{id}` is not prunable")));
                }
                let w = l.out_width().expect("prunable layers have a width");
                if *width.get_or_insert(w) != w {
                    return Err(Error::CouplingGroup(format!(
                        "group {g} members have different out-channel counts ({} vs {w} at `{id}`)",
                        width.unwrap()
                    )));
                }
                if let Some(prev) = group_of.insert(li, g) {
                    let why = if prev == g { "twice in group" } else { "in two groups" };
                    return Err(Error::CouplingGroup(format!("layer `{id}` appears {why} {prev}/{g}")));
                }
            }
        }

        let mut units: Vec<PruneUnit> = Vec::new();
        let mut unit_of = HashMap::new();
        let mut unit_of_group: HashMap<usize, usize> = HashMap::new();
        for &i in order {
            let l = &self.layers[i];
            if !l.prunable {
                continue;
            }
            let width = l.out_width().expect("prunable layers have a width");
            let u = match group_of.get(&i) {
                Some(&g) => *unit_of_group.entry(g).or_insert_with(|| {
                    units.push(PruneUnit { members: Vec::new(), width, group: Some(g) });
                    units.len() - 1
                }),
                None => {
                    units.push(PruneUnit { members: Vec::new(), width, group: None });
                    units.len() - 1
                }
            };
            units[u].members.push(i);
            unit_of.insert(i, u);
        }
        Ok((units, unit_of))
    }

    /// All tensor names referenced by the manifest with their implied shapes.
    pub fn tensor_refs(&self) -> Vec<(&str, &str, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| l.tensor_refs().into_iter().map(move |(n, s)| (l.id.as_str(), n, s)))
            .collect()
    }
}

/// Tensor names become file names, so keep them to a portable character set.
pub fn check_tensor_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "manifest"
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidTensorName(name.to_string()))
    }
}

/// Full validation: structure plus every tensor reference, shape and value.
/// Tensors not referenced by any layer are rejected so that saving and
/// loading stay inverse to each other.
pub fn validate(manifest: &ModelManifest, tensors: &BTreeMap<String, TensorRecord>) -> Result<GraphInfo> {
    let info = manifest.analyze()?;
    let mut seen: HashSet<&str> = HashSet::new();
    for l in &manifest.layers {
        let has_bias = match &l.op {
            LayerOp::Conv2d(p) => Some((p.has_bias, p.bias.is_some())),
            LayerOp::Linear(p) => Some((p.has_bias, p.bias.is_some())),
            _ => None,
        };
        if let Some((flag, named)) = has_bias {
            if flag != named {
                return Err(graph_err(&l.id, "has_bias must be true exactly when a bias tensor is named"));
            }
        }
        for (name, shape) in l.tensor_refs() {
            check_tensor_name(name)?;
            if !seen.insert(name) {
                return Err(graph_err(&l.id, format!("tensor `{name}` is referenced more than once")));
            }
            let t = tensors.get(name).ok_or_else(|| Error::DanglingReference {
                layer: l.id.clone(),
                what: "tensor",
                target: name.to_string(),
            })?;
            t.check_shape()?;
            if t.shape != shape {
                return Err(Error::SizeMismatch {
                    name: name.to_string(),
                    expected: shape.iter().product(),
                    shape,
                    found: t.numel(),
                });
            }
            t.check_finite()?;
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !seen.contains(k.as_str())) {
        return Err(Error::UnreferencedTensor(extra.clone()));
    }
    Ok(info)
}
