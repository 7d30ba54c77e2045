use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "cornet-z")]
    CornetZ,
    #[serde(rename = "cornet-z-mini")]
    CornetZMini,
    #[serde(rename = "vgg16")]
    Vgg16,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::CornetZ => "cornet-z",
            Architecture::CornetZMini => "cornet-z-mini",
            Architecture::Vgg16 => "vgg16",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cornet-z" => Ok(Architecture::CornetZ),
            "cornet-z-mini" => Ok(Architecture::CornetZMini),
            "vgg16" => Ok(Architecture::Vgg16),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Convolutions (each followed by ReLU), then an optional max pool
/// (`pool <= 1` means none).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub convs: Vec<ConvSpec>,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// Channels, height, width of one input image.
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockSpec>,
    /// Widths of the two hidden fully connected layers; the third maps to
    /// `num_classes`.
    pub decoder_hidden: Vec<usize>,
    /// Retention probability of the dropout in front of each FC layer.
    pub dropout_retention: f64,
    pub num_classes: usize,
    /// Tag name to index into the compiled layer list; the tagged layer's
    /// output is what gets captured.
    pub tags: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
        weight: usize,
        bias: usize,
    },
    Relu,
    MaxPool { size: usize },
    Flatten,
    Dropout { retention: f64 },
    Linear {
        in_features: usize,
        out_features: usize,
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub layer: Layer,
    /// Output shape for a single item.
    pub out_shape: Vec<usize>,
}

const CORNET_TAGS: [&str; 4] = ["V1", "V2", "V4", "IT"];

impl NetworkSpec {
    fn cornet(arch: Architecture, widths: [usize; 4], hidden: [usize; 2], num_classes: usize, input_shape: [usize; 3]) -> Self {
        let blocks = CORNET_TAGS
            .iter()
            .zip(widths)
            .map(|(name, w)| BlockSpec {
                name: name.to_string(),
                convs: vec![ConvSpec { out_channels: w, kernel: 3 }],
                pool: 2,
            })
            .collect();
        let mut spec = Self {
            arch,
            input_shape,
            blocks,
            decoder_hidden: hidden.to_vec(),
            dropout_retention: 0.5,
            num_classes,
            tags: BTreeMap::new(),
        };
        // conv, relu, pool per block: the pool output is the block output.
        for (b, name) in CORNET_TAGS.iter().enumerate() {
            spec.tags.insert(name.to_string(), b * 3 + 2);
        }
        spec
    }

    pub fn cornet_z(num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self::cornet(Architecture::CornetZ, [64, 128, 256, 512], [1024, 512], num_classes, input_shape)
    }

    pub fn cornet_z_mini(num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self::cornet(Architecture::CornetZMini, [16, 32, 64, 128], [256, 128], num_classes, input_shape)
    }

    /// VGG-16: 13 3×3 convolutions in five pooled blocks. Tags `conv1`..`conv13`
    /// point at the ReLU output of each convolution.
    pub fn vgg16(num_classes: usize, input_shape: [usize; 3]) -> Self {
        let layout: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
        let mut blocks = Vec::new();
        let mut tags = BTreeMap::new();
        let mut layer = 0;
        let mut conv = 0;
        for (b, widths) in layout.iter().enumerate() {
            for _ in widths.iter() {
                conv += 1;
                tags.insert(format!("conv{conv}"), layer + 1);
                layer += 2;
            }
            layer += 1; // pool
            blocks.push(BlockSpec {
                name: format!("block{}", b + 1),
                convs: widths.iter().map(|&w| ConvSpec { out_channels: w, kernel: 3 }).collect(),
                pool: 2,
            });
        }
        Self {
            arch: Architecture::Vgg16,
            input_shape,
            blocks,
            decoder_hidden: vec![4096, 4096],
            dropout_retention: 0.5,
            num_classes,
            tags,
        }
    }

    pub fn for_arch(arch: Architecture, num_classes: usize, input_shape: [usize; 3]) -> Self {
        match arch {
            Architecture::CornetZ => Self::cornet_z(num_classes, input_shape),
            Architecture::CornetZMini => Self::cornet_z_mini(num_classes, input_shape),
            Architecture::Vgg16 => Self::vgg16(num_classes, input_shape),
        }
    }

    /// Default layer for the representational-similarity hook.
    pub fn default_teacher_tag(&self) -> &'static str {
        match self.arch {
            Architecture::Vgg16 => "conv3",
            _ => "V1",
        }
    }

    /// Compile the block description into a flat layer list, checking every
    /// structural invariant on the way.
    pub fn compile(&self) -> Result<Vec<LayerPlan>> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input_shape.contains(&0) {
            return cfg(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.num_classes < 2 {
            return cfg(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.decoder_hidden.len() != 2 || self.decoder_hidden.contains(&0) {
            return cfg(format!(
                "decoder must have exactly 3 fully connected layers (2 positive hidden widths), got {:?}",
                self.decoder_hidden
            ));
        }
        if !(self.dropout_retention > 0.0 && self.dropout_retention <= 1.0) {
            return cfg(format!("dropout retention {} not in (0, 1]", self.dropout_retention));
        }
        if matches!(self.arch, Architecture::CornetZ | Architecture::CornetZMini) {
            let ok = self.blocks.len() == 4 && self.blocks.iter().all(|b| b.convs.len() == 1 && b.pool >= 2);
            if !ok {
                return cfg("cornet blocks must be exactly four conv → ReLU → maxpool units".into());
            }
        }

        let [mut c, mut h, mut w] = self.input_shape;
        let mut plan = Vec::new();
        let mut param = 0;
        for block in &self.blocks {
            for (i, conv) in block.convs.iter().enumerate() {
                if conv.out_channels == 0 || conv.kernel == 0 || conv.kernel % 2 == 0 {
                    return cfg(format!("block {}: conv needs positive width and odd kernel", block.name));
                }
                let out = conv.out_channels;
                plan.push(LayerPlan {
                    name: format!("{}.conv{}", block.name, i + 1),
                    layer: Layer::Conv {
                        in_channels: c,
                        out_channels: out,
                        kernel: conv.kernel,
                        pad: conv.kernel / 2,
                        weight: param,
                        bias: param + 1,
                    },
                    out_shape: vec![out, h, w],
                });
                param += 2;
                c = out;
                plan.push(LayerPlan {
                    name: format!("{}.relu{}", block.name, i + 1),
                    layer: Layer::Relu,
                    out_shape: vec![c, h, w],
                });
            }
            if block.pool >= 2 {
                if h < block.pool || w < block.pool {
                    return cfg(format!("block {}: pooling shrinks {h}x{w} to nothing", block.name));
                }
                h /= block.pool;
                w /= block.pool;
                plan.push(LayerPlan {
                    name: format!("{}.pool", block.name),
                    layer: Layer::MaxPool { size: block.pool },
                    out_shape: vec![c, h, w],
                });
            }
        }
        let mut features = c * h * w;
        plan.push(LayerPlan {
            name: "flatten".into(),
            layer: Layer::Flatten,
            out_shape: vec![features],
        });
        let widths = [self.decoder_hidden[0], self.decoder_hidden[1], self.num_classes];
        for (i, &width) in widths.iter().enumerate() {
            plan.push(LayerPlan {
                name: format!("fc{}.dropout", i + 1),
                layer: Layer::Dropout { retention: self.dropout_retention },
                out_shape: vec![features],
            });
            plan.push(LayerPlan {
                name: format!("fc{}", i + 1),
                layer: Layer::Linear {
                    in_features: features,
                    out_features: width,
                    weight: param,
                    bias: param + 1,
                },
                out_shape: vec![width],
            });
            param += 2;
            features = width;
            if i < 2 {
                plan.push(LayerPlan {
                    name: format!("fc{}.relu", i + 1),
                    layer: Layer::Relu,
                    out_shape: vec![width],
                });
            }
        }
        for (tag, &idx) in &self.tags {
            if idx >= plan.len() {
                return cfg(format!("tag `{tag}` points at layer {idx}, but there are {} layers", plan.len()));
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.compile().map(|_| ())
    }

    /// 1-based ordinal of the convolution feeding the tagged layer.
    pub fn tagged_conv_ordinal(&self, tag: &str) -> Option<usize> {
        let plan = self.compile().ok()?;
        let idx = *self.tags.get(tag)?;
        let convs_before = plan[..=idx]
            .iter()
            .filter(|l| matches!(l.layer, Layer::Conv { .. }))
            .count();
        (convs_before > 0).then_some(convs_before)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    plan: Vec<LayerPlan>,
    params: Vec<Tensor<T>>,
    mode: Mode,
}

/// Graph nodes produced by [`Network::forward_graph`].
pub struct ForwardNodes {
    /// `None` when the pass stopped after the last captured tag.
    pub logits: Option<NodeId>,
    pub captured: BTreeMap<String, NodeId>,
}

/// Materialized outputs of [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real> {
    pub logits: Option<Tensor<T>>,
    pub captured: BTreeMap<String, Tensor<T>>,
}

/// Images per chunk when running inference without gradients.
const INFER_CHUNK: usize = 128;

/// Random initialization: fan-in scaled uniform weights `U(-√(6/fan_in), √(6/fan_in))`
/// drawn from ChaCha8 seeded with `seed`, in parameter order; biases are zero.
pub fn build_network<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    let plan = spec.compile()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for lp in &plan {
        let (wshape, fan_in, bshape) = match lp.layer {
            Layer::Conv { in_channels, out_channels, kernel, .. } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                vec![out_channels],
            ),
            Layer::Linear { in_features, out_features, .. } => {
                (vec![out_features, in_features], in_features, vec![out_features])
            }
            _ => continue,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = wshape.iter().product();
        let w: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        params.push(Tensor::new(wshape, w)?);
        params.push(Tensor::zeros(&bshape));
    }
    Ok(Network {
        spec: spec.clone(),
        plan,
        params,
        mode: Mode::Train,
    })
}

impl<T: Real> Network<T> {
    /// Reassemble a network from stored parameters.
    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let mut net = build_network::<T>(&spec, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (have, want) in params.iter().zip(&net.params) {
            if have.shape() != want.shape() {
                return Err(Error::Shape {
                    context: "parameter".into(),
                    expected: want.shape().to_vec(),
                    actual: have.shape().to_vec(),
                });
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerPlan] {
        &self.plan
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.params.iter().map(|p| p.shape()).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn tag_index(&self, tag: &str) -> Result<usize> {
        self.spec
            .tags
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown layer tag `{tag}`")))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Shape {
                context: "network input".into(),
                expected: vec![shape.first().copied().unwrap_or(0), c, h, w],
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Record a forward pass on `graph`. Dropout draws from `rng` in train mode
    /// and is the identity in eval mode. With `stop_after_capture`, layers past
    /// the deepest captured tag are skipped and no logits are produced.
    pub fn forward_graph(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        capture: &[&str],
        stop_after_capture: bool,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardNodes> {
        self.check_input(graph.value(input).shape())?;
        let mut wanted = BTreeMap::new();
        for &tag in capture {
            wanted.insert(self.tag_index(tag)?, tag.to_string());
        }
        let last = match (stop_after_capture, wanted.keys().next_back()) {
            (true, Some(&deepest)) => deepest,
            _ => self.plan.len() - 1,
        };
        let mut captured = BTreeMap::new();
        let mut x = input;
        for (i, lp) in self.plan.iter().enumerate().take(last + 1) {
            x = match lp.layer {
                Layer::Conv { pad, weight, bias, .. } => {
                    let w = graph.param(weight, &self.params[weight]);
                    let b = graph.param(bias, &self.params[bias]);
                    graph.conv2d(x, w, b, pad)?
                }
                Layer::Relu => graph.relu(x),
                Layer::MaxPool { size } => graph.maxpool(x, size)?,
                Layer::Flatten => graph.flatten(x),
                Layer::Dropout { retention } => {
                    if self.mode == Mode::Train && retention < 1.0 {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::InvalidArgument("train-mode forward needs a dropout rng".into())
                        })?;
                        graph.dropout(x, retention, rng)
                    } else {
                        x
                    }
                }
                Layer::Linear { weight, bias, .. } => {
                    let w = graph.param(weight, &self.params[weight]);
                    let b = graph.param(bias, &self.params[bias]);
                    graph.linear(x, w, b)?
                }
            };
            if !graph.value(x).is_finite() {
                return Err(Error::NumericFailure { layer: lp.name.clone() });
            }
            if let Some(tag) = wanted.get(&i) {
                captured.insert(tag.clone(), x);
            }
        }
        let logits = (last == self.plan.len() - 1).then_some(x);
        Ok(ForwardNodes { logits, captured })
    }

    /// Eval-semantics forward pass (dropout is the identity) without keeping a
    /// tape. Returns unnormalized logits and the outputs of the captured tags.
    pub fn forward(&self, batch: &Tensor<T>, capture: &[&str]) -> Result<ForwardOutput<T>> {
        self.run_inference(batch, capture, false)
    }

    /// Outputs of the captured tags only, skipping the remaining layers.
    pub fn capture(&self, batch: &Tensor<T>, capture: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        Ok(self.run_inference(batch, capture, true)?.captured)
    }

    fn run_inference(&self, batch: &Tensor<T>, capture: &[&str], stop: bool) -> Result<ForwardOutput<T>> {
        self.check_input(batch.shape())?;
        let mut eval = self.clone();
        eval.mode = Mode::Eval;
        let n = batch.batch();
        let mut logits: Vec<T> = Vec::new();
        let mut logit_cols = 0;
        let mut captured: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
        for start in (0..n).step_by(INFER_CHUNK) {
            let rows: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let chunk = batch.select_rows(&rows)?;
            let mut g = Graph::new();
            let input = g.leaf(chunk);
            let out = eval.forward_graph(&mut g, input, capture, stop, None)?;
            if let Some(l) = out.logits {
                let v = g.value(l);
                logit_cols = v.row_len();
                logits.extend_from_slice(v.data());
            }
            for (tag, id) in out.captured {
                let v = g.value(id);
                let entry = captured
                    .entry(tag)
                    .or_insert_with(|| (v.shape()[1..].to_vec(), Vec::new()));
                entry.1.extend_from_slice(v.data());
            }
        }
        let logits = if logits.is_empty() {
            None
        } else {
            Some(Tensor::new(vec![n, logit_cols], logits)?)
        };
        let captured = captured
            .into_iter()
            .map(|(tag, (inner, data))| {
                let mut shape = vec![n];
                shape.extend(inner);
                Tensor::new(shape, data).map(|t| (tag, t))
            })
            .collect::<Result<_>>()?;
        Ok(ForwardOutput { logits, captured })
    }

    /// Plain SGD: `p ← p − learning_rate · grad(p)`.
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], learning_rate: f64) -> Result<()> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                context: "sgd gradients".into(),
                expected: vec![self.params.len()],
                actual: vec![grads.len()],
            });
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    context: "sgd gradient".into(),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        let lr = T::from_f64(learning_rate);
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.add_scaled(g, -lr);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            mode: self.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini(classes: usize) -> NetworkSpec {
        NetworkSpec::cornet_z_mini(classes, [3, 32, 32])
    }

    #[test]
    fn cornet_mini_layout() {
        let net = build_network::<f32>(&mini(10), 1).unwrap();
        let convs = net.layers().iter().filter(|l| matches!(l.layer, Layer::Conv { .. })).count();
        let fcs = net.layers().iter().filter(|l| matches!(l.layer, Layer::Linear { .. })).count();
        assert_eq!((convs, fcs), (4, 3));
        assert_eq!(net.params().len(), 14);
        let v1 = &net.layers()[net.tag_index("V1").unwrap()];
        assert!(matches!(v1.layer, Layer::MaxPool { .. }));
        assert_eq!(v1.out_shape, vec![16, 16, 16]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network::<f64>(&mini(10), 7).unwrap();
        let b = build_network::<f64>(&mini(10), 7).unwrap();
        let c = build_network::<f64>(&mini(10), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn vgg_conv3_is_third_convolution() {
        let spec = NetworkSpec::vgg16(100, [3, 32, 32]);
        spec.validate().unwrap();
        assert_eq!(spec.tagged_conv_ordinal("conv3"), Some(3));
        let plan = spec.compile().unwrap();
        assert_eq!(plan.iter().filter(|l| matches!(l.layer, Layer::Conv { .. })).count(), 13);
        assert_eq!(plan[spec.tags["conv3"]].name, "block2.relu1");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = mini(10);
        s.tags.insert("bogus".into(), 999);
        assert!(matches!(build_network::<f32>(&s, 1), Err(Error::Config(_))));
        let mut s = mini(10);
        s.decoder_hidden = vec![10];
        assert!(s.validate().is_err());
        let mut s = mini(10);
        s.input_shape = [3, 0, 32];
        assert!(s.validate().is_err());
        let mut s = mini(10);
        s.blocks[2].pool = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_activations() {
        let net = build_network::<f64>(&mini(5), 3).unwrap();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let out = net.forward(&x, &["V1", "IT"]).unwrap();
        assert!(out.captured["V1"].data().iter().all(|&v| v == 0.0));
        assert!(out.logits.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn capture_returns_exactly_requested() {
        let net = build_network::<f32>(&mini(5), 3).unwrap();
        let x = Tensor::filled(&[3, 3, 32, 32], 0.5);
        let out = net.forward(&x, &["V1"]).unwrap();
        assert_eq!(out.captured.len(), 1);
        assert_eq!(out.captured["V1"].shape(), &[3, 16, 16, 16]);
        assert_eq!(out.logits.unwrap().shape(), &[3, 5]);
        assert!(net.forward(&Tensor::zeros(&[1, 3, 16, 16]), &[]).is_err());
        assert!(net.forward(&x, &["nope"]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let spec = mini(3);
        let mut net = build_network::<f64>(&spec, 1).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(1.0);
        }
        let grads: Vec<Tensor<f64>> = net.params().iter().map(|p| Tensor::filled(p.shape(), 0.5)).collect();
        net.sgd_step(&grads, 0.01).unwrap();
        assert!(net.params().iter().all(|p| p.data().iter().all(|&v| v == 0.995)));
        let zeros: Vec<Tensor<f64>> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let before = net.params().to_vec();
        net.sgd_step(&zeros, 0.01).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert!(net.sgd_step(&zeros[..3], 0.01).is_err());
        assert!(net.sgd_step(&zeros, 0.0).is_err());
    }
}
