//! Synthetic networks: a small builder plus the CIFAR VGG-16 and ResNet
//! layouts, and random toy topologies for property tests and demos.
//! Weights are random, drawn from a seeded generator.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{Model, TensorMap};
use crate::error::{Error, Result};
use crate::manifest::{
    BatchNormParams, Conv2dParams, CouplingGroup, FlattenParams, LayerOp, LayerSpec, LinearParams, ModelManifest,
    NodeShape, PoolParams, INPUT_ID,
};
use crate::tensor::TensorRecord;

/// Incrementally builds a manifest, tracking shapes so callers only give
/// output widths.
pub struct NetBuilder {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    groups: Vec<CouplingGroup>,
    tensors: TensorMap,
    shapes: HashMap<String, NodeShape>,
    rng: ChaCha8Rng,
    materialize: bool,
}

impl NetBuilder {
    pub fn new(input_shape: [usize; 3], seed: u64) -> Self {
        let [channels, height, width] = input_shape;
        let mut shapes = HashMap::new();
        shapes.insert(INPUT_ID.to_string(), NodeShape::Spatial { channels, height, width });
        NetBuilder {
            input_shape,
            layers: Vec::new(),
            groups: Vec::new(),
            tensors: TensorMap::new(),
            shapes,
            rng: ChaCha8Rng::seed_from_u64(seed),
            materialize: true,
        }
    }

    /// Skip generating tensors; only [`NetBuilder::manifest`] is usable.
    pub fn without_weights(mut self) -> Self {
        self.materialize = false;
        self
    }

    fn shape(&self, id: &str) -> NodeShape {
        *self.shapes.get(id).unwrap_or_else(|| panic!("unknown builder node `{id}`"))
    }

    fn spatial(&self, id: &str) -> (usize, usize, usize) {
        match self.shape(id) {
            NodeShape::Spatial { channels, height, width } => (channels, height, width),
            NodeShape::Flat { .. } => panic!("`{id}` is not spatial"),
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, lo: f32, hi: f32) {
        if !self.materialize {
            return;
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        let t = TensorRecord::new(name.clone(), shape, data).expect("builder shapes are consistent");
        self.tensors.insert(name, t);
    }

    fn push(&mut self, id: &str, input: &[&str], op: LayerOp, prunable: bool, shape: NodeShape) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            inputs: input.iter().map(|s| s.to_string()).collect(),
            op,
            prunable,
        });
        self.shapes.insert(id.to_string(), shape);
        id.to_string()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, id: &str, input: &str, out: usize, kernel: usize, stride: usize, padding: usize, bias: bool, prunable: bool) -> String {
        let (cin, h, w) = self.spatial(input);
        let bound = (3.0 / (cin * kernel * kernel) as f32).sqrt();
        let weight = format!("{id}.weight");
        self.tensor(weight.clone(), vec![out, cin, kernel, kernel], -bound, bound);
        let bias_name = bias.then(|| format!("{id}.bias"));
        if let Some(b) = &bias_name {
            self.tensor(b.clone(), vec![out], -0.1, 0.1);
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let op = LayerOp::Conv2d(Conv2dParams {
            out_channels: out,
            in_channels: cin,
            kernel,
            stride,
            padding,
            groups: 1,
            has_bias: bias,
            weight,
            bias: bias_name,
        });
        self.push(id, &[input], op, prunable, NodeShape::Spatial { channels: out, height: oh, width: ow })
    }

    pub fn bn(&mut self, id: &str, input: &str) -> String {
        let shape = self.shape(input);
        let c = shape.width();
        let names: Vec<String> = ["gamma", "beta", "mean", "var"].iter().map(|s| format!("{id}.{s}")).collect();
        self.tensor(names[0].clone(), vec![c], 0.5, 1.5);
        self.tensor(names[1].clone(), vec![c], -0.2, 0.2);
        self.tensor(names[2].clone(), vec![c], -0.2, 0.2);
        self.tensor(names[3].clone(), vec![c], 0.5, 1.5);
        let op = LayerOp::BatchNorm2d(BatchNormParams {
            channels: c,
            gamma: names[0].clone(),
            beta: names[1].clone(),
            mean: names[2].clone(),
            var: names[3].clone(),
            eps: 1e-5,
        });
        self.push(id, &[input], op, false, shape)
    }

    pub fn relu(&mut self, id: &str, input: &str) -> String {
        let shape = self.shape(input);
        self.push(id, &[input], LayerOp::Relu, false, shape)
    }

    fn pool(&mut self, id: &str, input: &str, kernel: usize, stride: usize, max: bool) -> String {
        let (c, h, w) = self.spatial(input);
        let p = PoolParams { kernel, stride };
        let op = if max { LayerOp::MaxPool2d(p) } else { LayerOp::AvgPool2d(p) };
        let shape = NodeShape::Spatial {
            channels: c,
            height: (h - kernel) / stride + 1,
            width: (w - kernel) / stride + 1,
        };
        self.push(id, &[input], op, false, shape)
    }

    pub fn maxpool(&mut self, id: &str, input: &str, kernel: usize, stride: usize) -> String {
        self.pool(id, input, kernel, stride, true)
    }

    pub fn avgpool(&mut self, id: &str, input: &str, kernel: usize, stride: usize) -> String {
        self.pool(id, input, kernel, stride, false)
    }

    pub fn flatten(&mut self, id: &str, input: &str) -> String {
        let (c, h, w) = self.spatial(input);
        let op = LayerOp::Flatten(FlattenParams { height: h, width: w });
        self.push(id, &[input], op, false, NodeShape::Flat { features: c * h * w })
    }

    pub fn linear(&mut self, id: &str, input: &str, out: usize, bias: bool, prunable: bool) -> String {
        let fin = self.shape(input).width();
        let bound = (3.0 / fin as f32).sqrt();
        let weight = format!("{id}.weight");
        self.tensor(weight.clone(), vec![out, fin], -bound, bound);
        let bias_name = bias.then(|| format!("{id}.bias"));
        if let Some(b) = &bias_name {
            self.tensor(b.clone(), vec![out], -0.1, 0.1);
        }
        let op = LayerOp::Linear(LinearParams {
            out_features: out,
            in_features: fin,
            has_bias: bias,
            weight,
            bias: bias_name,
        });
        self.push(id, &[input], op, prunable, NodeShape::Flat { features: out })
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        let shape = self.shape(a);
        self.push(id, &[a, b], LayerOp::Add, false, shape)
    }

    pub fn group(&mut self, ids: &[String]) {
        self.groups.push(CouplingGroup { layer_ids: ids.to_vec() });
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            coupling_groups: self.groups.clone(),
        }
    }

    pub fn finish(self) -> Result<Model> {
        if !self.materialize {
            return Err(Error::InvalidConfig("builder was created without weights".into()));
        }
        let manifest = self.manifest();
        Model::new(manifest, self.tensors)
    }
}

/// Conv widths of the CIFAR VGG-16 variant; 0 marks a 2x2 max pool.
pub const VGG16_CIFAR_CFG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];

/// VGG-16 for 32x32 inputs: 13 conv3x3+BN+ReLU stages, then
/// linear(512, 512) + ReLU + linear(512, classes).
pub fn vgg16_cifar_builder(classes: usize, seed: u64) -> NetBuilder {
    let mut b = NetBuilder::new([3, 32, 32], seed);
    let mut x = INPUT_ID.to_string();
    let (mut conv_i, mut pool_i) = (0, 0);
    for &w in &VGG16_CIFAR_CFG {
        if w == 0 {
            pool_i += 1;
            x = b.maxpool(&format!("pool{pool_i}"), &x, 2, 2);
        } else {
            conv_i += 1;
            let c = b.conv(&format!("conv{conv_i}"), &x, w, 3, 1, 1, false, true);
            let n = b.bn(&format!("bn{conv_i}"), &c);
            x = b.relu(&format!("relu{conv_i}"), &n);
        }
    }
    let f = b.flatten("flatten", &x);
    let l1 = b.linear("fc1", &f, 512, true, true);
    let r = b.relu("fc1_relu", &l1);
    b.linear("fc2", &r, classes, true, true);
    b
}

pub fn vgg16_cifar(classes: usize, seed: u64) -> Result<Model> {
    vgg16_cifar_builder(classes, seed).finish()
}

/// CIFAR ResNet of depth `6n + 2` with 16/32/64 channel stages. Stage
/// transitions use a 1x1 stride-2 conv + BN shortcut. Every convolution
/// whose output reaches a residual add shares a coupling group with the
/// rest of its stage.
pub fn resnet_cifar_builder(depth: usize, classes: usize, seed: u64) -> Result<NetBuilder> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::InvalidConfig(format!("resnet depth {depth} is not 6n + 2")));
    }
    let blocks = (depth - 2) / 6;
    let mut b = NetBuilder::new([3, 32, 32], seed);
    let stem = b.conv("conv1", INPUT_ID, 16, 3, 1, 1, false, true);
    let n = b.bn("bn1", &stem);
    let mut x = b.relu("relu1", &n);
    let mut group = vec![stem];
    for (s, width) in [16usize, 32, 64].into_iter().enumerate() {
        let stage = s + 1;
        for blk in 0..blocks {
            let p = format!("layer{stage}.{blk}");
            let stride = if stage > 1 && blk == 0 { 2 } else { 1 };
            let shortcut = if stride == 2 {
                b.group(&std::mem::take(&mut group));
                let d = b.conv(&format!("{p}.downsample"), &x, width, 1, 2, 0, false, true);
                group.push(d.clone());
                b.bn(&format!("{p}.downsample_bn"), &d)
            } else {
                x.clone()
            };
            let c1 = b.conv(&format!("{p}.conv1"), &x, width, 3, stride, 1, false, true);
            let n1 = b.bn(&format!("{p}.bn1"), &c1);
            let r1 = b.relu(&format!("{p}.relu1"), &n1);
            let c2 = b.conv(&format!("{p}.conv2"), &r1, width, 3, 1, 1, false, true);
            group.push(c2.clone());
            let n2 = b.bn(&format!("{p}.bn2"), &c2);
            let sum = b.add(&format!("{p}.add"), &n2, &shortcut);
            x = b.relu(&format!("{p}.relu2"), &sum);
        }
    }
    b.group(&group);
    let pool = b.avgpool("avgpool", &x, 8, 8);
    let f = b.flatten("flatten", &pool);
    b.linear("fc", &f, classes, true, true);
    Ok(b)
}

pub fn resnet_cifar(depth: usize, classes: usize, seed: u64) -> Result<Model> {
    resnet_cifar_builder(depth, classes, seed)?.finish()
}

/// conv8 -> bn -> relu -> conv4 -> relu -> flatten -> fc10 on 3x8x8 inputs.
pub fn toy_chain(seed: u64) -> Result<Model> {
    let mut b = NetBuilder::new([3, 8, 8], seed);
    let c1 = b.conv("conv1", INPUT_ID, 8, 3, 1, 1, true, true);
    let n1 = b.bn("bn1", &c1);
    let r1 = b.relu("relu1", &n1);
    let c2 = b.conv("conv2", &r1, 4, 3, 1, 1, true, true);
    let r2 = b.relu("relu2", &c2);
    let f = b.flatten("flatten", &r2);
    b.linear("fc", &f, 10, true, true);
    b.finish()
}

/// Random conv chain ending in a conv -> flatten -> fc -> fc boundary.
pub fn random_chain(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4a1);
    let cin = rng.gen_range(1..=4);
    let hw = if rng.gen_bool(0.5) { 6 } else { 8 };
    let mut b = NetBuilder::new([cin, hw, hw], seed);
    let mut x = INPUT_ID.to_string();
    let convs = rng.gen_range(2..=3);
    for i in 1..=convs {
        let width = rng.gen_range(2..=12);
        let k = if rng.gen_bool(0.7) { 3 } else { 1 };
        let c = b.conv(&format!("conv{i}"), &x, width, k, 1, k / 2, rng.gen_bool(0.5), true);
        x = if rng.gen_bool(0.6) { b.bn(&format!("bn{i}"), &c) } else { c };
        x = b.relu(&format!("relu{i}"), &x);
        if i == 1 && rng.gen_bool(0.5) {
            x = b.maxpool("pool", &x, 2, 2);
        }
    }
    let f = b.flatten("flatten", &x);
    let hidden = rng.gen_range(4..=16);
    let l = b.linear("fc1", &f, hidden, true, true);
    let r = b.relu("fc1_relu", &l);
    b.linear("fc2", &r, rng.gen_range(2..=10), true, true);
    b.finish()
}

/// Stem plus two residual blocks (identity, then strided with a 1x1
/// shortcut), average pool, flatten and a classifier.
pub fn random_residual(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e51_d0a1);
    let cin = rng.gen_range(1..=3);
    let mut b = NetBuilder::new([cin, 8, 8], seed);
    let w1 = rng.gen_range(4..=10);
    let w2 = rng.gen_range(4..=12);

    let stem = b.conv("stem", INPUT_ID, w1, 3, 1, 1, false, true);
    let n = b.bn("stem_bn", &stem);
    let x = b.relu("stem_relu", &n);

    let a1 = b.conv("block1.conv1", &x, rng.gen_range(3..=10), 3, 1, 1, false, true);
    let a1n = b.bn("block1.bn1", &a1);
    let a1r = b.relu("block1.relu1", &a1n);
    let a2 = b.conv("block1.conv2", &a1r, w1, 3, 1, 1, false, true);
    let a2n = b.bn("block1.bn2", &a2);
    let s1 = b.add("block1.add", &a2n, &x);
    let x = b.relu("block1.relu2", &s1);
    b.group(&[stem, a2]);

    let d = b.conv("block2.downsample", &x, w2, 1, 2, 0, false, true);
    let dn = b.bn("block2.downsample_bn", &d);
    let c1 = b.conv("block2.conv1", &x, rng.gen_range(3..=10), 3, 2, 1, true, true);
    let c1r = b.relu("block2.relu1", &c1);
    let c2 = b.conv("block2.conv2", &c1r, w2, 3, 1, 1, false, true);
    let c2n = b.bn("block2.bn2", &c2);
    let s2 = b.add("block2.add", &c2n, &dn);
    let x = b.relu("block2.relu2", &s2);
    b.group(&[d, c2]);

    let p = b.avgpool("avgpool", &x, 2, 2);
    let f = b.flatten("flatten", &p);
    b.linear("fc", &f, rng.gen_range(2..=10), true, true);
    b.finish()
}
