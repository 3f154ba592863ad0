//! CNN description, forward evaluation and bookkeeping.

mod build;
pub mod checkpoint;
mod flops;

pub use build::{build_toy_cnn, plant_duplicate_filters, widen_conv, ToyCnnConfig};
pub use flops::{count_flops, FlopsReport, LayerCost};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// Geometry of one convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub prunable: bool,
}

impl ConvSpec {
    /// Square `k`×`k` kernel, stride 1, "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, prunable: bool) -> Self {
        Self { in_channels, out_channels, kernel_h: k, kernel_w: k, stride: 1, pad: k / 2, prunable }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w + self.out_channels
    }

    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.kernel_h || w + 2 * self.pad < self.kernel_w || self.stride == 0 {
            return shape_err(format!(
                "conv {}x{} (stride {}, pad {}) does not fit a {h}x{w} input",
                self.kernel_h, self.kernel_w, self.stride, self.pad
            ));
        }
        Ok(((h + 2 * self.pad - self.kernel_h) / self.stride + 1, (w + 2 * self.pad - self.kernel_w) / self.stride + 1))
    }
}

/// Two convolutions plus a skip path: `relu(conv2(relu(conv1(x))) + skip(x))`.
///
/// The skip path maps each output channel `j` to input channel `skip[j]`
/// (identity after construction); `None` entries contribute zero, which is
/// what pruning an upstream producer leaves behind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub skip: Vec<Option<usize>>,
}

impl ResidualSpec {
    pub fn identity(channels: usize, inner: usize, k: usize, coupled: bool) -> Self {
        Self {
            conv1: ConvSpec::same(channels, inner, k, true),
            conv2: ConvSpec::same(inner, channels, k, coupled),
            skip: (0..channels).map(Some).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Pool { kh: usize, kw: usize },
    Relu,
    Flatten,
    Fc { in_dim: usize, out_dim: usize },
    Residual(ResidualSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Residual(_) => "residual",
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.num_params(),
            LayerSpec::Fc { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::Residual(r) => r.conv1.num_params() + r.conv2.num_params(),
            _ => 0,
        }
    }

    fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv(_) | LayerSpec::Fc { .. } | LayerSpec::Residual(_))
    }
}

/// Shape of the activation flowing between layers (batch axis omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

/// Which convolution inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitPart {
    Plain,
    BlockFirst,
    BlockSecond,
}

/// Address of one convolution of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvUnit {
    pub layer: usize,
    pub part: UnitPart,
}

impl ConvUnit {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix())
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix())
    }

    fn prefix(&self) -> String {
        match self.part {
            UnitPart::Plain => format!("{}", self.layer),
            UnitPart::BlockFirst => format!("{}.conv1", self.layer),
            UnitPart::BlockSecond => format!("{}.conv2", self.layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    pub version: u32,
    pub seed: u64,
}

/// An ordered CNN together with all of its weights.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub meta: ModelMeta,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerSpec>,
    params: ParamStore,
}

impl ModelGraph {
    /// Assembles a model and checks that layer shapes compose and every
    /// parameter matches its layer.
    pub fn new(
        meta: ModelMeta,
        input_shape: [usize; 3],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        params: ParamStore,
    ) -> Result<Self> {
        let model = Self { meta, input_shape, num_classes, layers, params };
        model.validate()?;
        Ok(model)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Closed-form parameter count summed over layers.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_params).sum()
    }

    /// Activation shape after each layer, starting from the model input.
    pub fn layer_output_shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        let mut cur = ActShape::Map { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = next_shape(idx, layer, cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Activation shape entering layer `idx`.
    pub fn layer_input_shape(&self, idx: usize) -> Result<ActShape> {
        if idx == 0 {
            let [c, h, w] = self.input_shape;
            return Ok(ActShape::Map { c, h, w });
        }
        Ok(self.layer_output_shapes()?[idx - 1])
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_output_shapes()?;
        match shapes.last() {
            Some(ActShape::Flat(d)) if *d == self.num_classes => {}
            Some(other) => {
                return shape_err(format!("model ends in {other:?}, expected {} class logits", self.num_classes))
            }
            None => return shape_err("model has no layers"),
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            for (name, shape) in expected_params(idx, layer) {
                let Some(t) = self.params.get(&name) else {
                    return shape_err(format!("missing parameter {name}"));
                };
                if t.shape() != shape.as_slice() {
                    return shape_err(format!("parameter {name} has shape {:?}, layer expects {shape:?}", t.shape()));
                }
            }
        }
        let expected: usize = self.layers.iter().enumerate().map(|(i, l)| expected_params(i, l).len()).sum();
        if expected != self.params.len() {
            return shape_err(format!(
                "model stores {} parameters but its layers declare {expected}",
                self.params.len()
            ));
        }
        Ok(())
    }

    /// Every convolution in network order.
    pub fn conv_units(&self) -> Vec<ConvUnit> {
        let mut units = Vec::new();
        for (layer, spec) in self.layers.iter().enumerate() {
            match spec {
                LayerSpec::Conv(_) => units.push(ConvUnit { layer, part: UnitPart::Plain }),
                LayerSpec::Residual(_) => {
                    units.push(ConvUnit { layer, part: UnitPart::BlockFirst });
                    units.push(ConvUnit { layer, part: UnitPart::BlockSecond });
                }
                _ => {}
            }
        }
        units
    }

    pub fn conv_unit(&self, index: usize) -> Result<ConvUnit> {
        self.conv_units().get(index).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("conv unit {index} does not exist (model has {})", self.conv_units().len()))
        })
    }

    /// Indices (into [`Self::conv_units`]) of the prunable convolutions.
    pub fn prunable_units(&self) -> Vec<usize> {
        self.conv_units().iter().enumerate().filter(|(_, u)| self.conv_spec(**u).prunable).map(|(i, _)| i).collect()
    }

    pub fn conv_spec(&self, unit: ConvUnit) -> &ConvSpec {
        match (&self.layers[unit.layer], unit.part) {
            (LayerSpec::Conv(c), UnitPart::Plain) => c,
            (LayerSpec::Residual(r), UnitPart::BlockFirst) => &r.conv1,
            (LayerSpec::Residual(r), UnitPart::BlockSecond) => &r.conv2,
            _ => panic!("{unit:?} does not address a convolution"),
        }
    }

    pub(crate) fn conv_spec_mut(&mut self, unit: ConvUnit) -> &mut ConvSpec {
        match (&mut self.layers[unit.layer], unit.part) {
            (LayerSpec::Conv(c), UnitPart::Plain) => c,
            (LayerSpec::Residual(r), UnitPart::BlockFirst) => &mut r.conv1,
            (LayerSpec::Residual(r), UnitPart::BlockSecond) => &mut r.conv2,
            _ => panic!("{unit:?} does not address a convolution"),
        }
    }

    pub fn unit_weight(&self, unit: ConvUnit) -> &Tensor {
        self.params.get(&unit.weight_name()).expect("validated model has every conv weight")
    }

    pub fn unit_bias(&self, unit: ConvUnit) -> &Tensor {
        self.params.get(&unit.bias_name()).expect("validated model has every conv bias")
    }

    /// Total filters over all prunable convolutions.
    pub fn prunable_filter_count(&self) -> usize {
        let units = self.conv_units();
        self.prunable_units().into_iter().map(|i| self.conv_spec(units[i]).out_channels).sum()
    }

    /// Records the forward pass of a batch `x` [N,C,H,W] into `g`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_masked(g, x, &[])
    }

    /// Forward pass where the output maps of selected convolutions are
    /// multiplied channel-wise by the given factors. `masks` holds
    /// `(conv unit index, factor per filter)` pairs. For a second block conv
    /// the factor applies to the block output.
    pub fn forward_masked(&self, g: &mut Graph, x: Var, masks: &[(usize, Vec<f64>)]) -> Result<Var> {
        let units = self.conv_units();
        let mask_for = |unit: ConvUnit| -> Option<Vec<f64>> {
            masks.iter().find(|(i, _)| units.get(*i) == Some(&unit)).map(|(_, m)| m.clone())
        };
        let mut cur = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv(spec) => {
                    let unit = ConvUnit { layer: idx, part: UnitPart::Plain };
                    let y = self.conv(g, cur, unit, spec)?;
                    match mask_for(unit) {
                        Some(m) => g.channel_scale(y, m)?,
                        None => y,
                    }
                }
                LayerSpec::Pool { kh, kw } => g.max_pool(cur, *kh, *kw)?,
                LayerSpec::Relu => g.relu(cur),
                LayerSpec::Flatten => g.flatten(cur)?,
                LayerSpec::Fc { .. } => {
                    let w = g.param(&self.params, self.param_id(&format!("{idx}.weight"))?);
                    let b = g.param(&self.params, self.param_id(&format!("{idx}.bias"))?);
                    g.linear(cur, w, b)?
                }
                LayerSpec::Residual(r) => {
                    let first = ConvUnit { layer: idx, part: UnitPart::BlockFirst };
                    let second = ConvUnit { layer: idx, part: UnitPart::BlockSecond };
                    let mut h = self.conv(g, cur, first, &r.conv1)?;
                    if let Some(m) = mask_for(first) {
                        h = g.channel_scale(h, m)?;
                    }
                    let h = g.relu(h);
                    let y = self.conv(g, h, second, &r.conv2)?;
                    let s = g.channel_gather(cur, r.skip.clone())?;
                    let sum = g.add(y, s)?;
                    let out = g.relu(sum);
                    match mask_for(second) {
                        Some(m) => g.channel_scale(out, m)?,
                        None => out,
                    }
                }
            };
        }
        Ok(cur)
    }

    fn conv(&self, g: &mut Graph, x: Var, unit: ConvUnit, spec: &ConvSpec) -> Result<Var> {
        let w = g.param(&self.params, self.param_id(&unit.weight_name())?);
        let b = g.param(&self.params, self.param_id(&unit.bias_name())?);
        g.conv2d(x, w, b, spec.stride, spec.pad)
    }

    fn param_id(&self, name: &str) -> Result<crate::optim::ParamId> {
        self.params.id_of(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    /// Class logits for a batch of images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Class logits with channel masks applied; see [`Self::forward_masked`].
    pub fn logits_masked(&self, images: &Tensor, masks: &[(usize, Vec<f64>)]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let y = self.forward_masked(&mut g, x, masks)?;
        Ok(g.value(y).clone())
    }

    /// Mean cross-entropy of a batch; records into `g` and returns the loss node.
    pub fn loss(&self, g: &mut Graph, images: &Tensor, labels: &[usize]) -> Result<Var> {
        let x = g.input(images.clone());
        let y = self.forward(g, x)?;
        g.softmax_cross_entropy(y, labels)
    }
}

fn next_shape(idx: usize, layer: &LayerSpec, cur: ActShape) -> Result<ActShape> {
    let err = |msg: String| Error::Shape(format!("layer {idx} ({}): {msg}", layer.kind()));
    match (layer, cur) {
        (LayerSpec::Conv(c), ActShape::Map { c: ch, h, w }) => {
            if c.in_channels != ch {
                return Err(err(format!("expects {} input channels, receives {ch}", c.in_channels)));
            }
            let (oh, ow) = c.output_hw(h, w).map_err(|e| err(e.to_string()))?;
            Ok(ActShape::Map { c: c.out_channels, h: oh, w: ow })
        }
        (LayerSpec::Pool { kh, kw }, ActShape::Map { c, h, w }) => {
            if *kh == 0 || *kw == 0 || h < *kh || w < *kw {
                return Err(err(format!("window {kh}x{kw} does not fit {h}x{w}")));
            }
            Ok(ActShape::Map { c, h: h / kh, w: w / kw })
        }
        (LayerSpec::Relu, s) => Ok(s),
        (LayerSpec::Flatten, ActShape::Map { c, h, w }) => Ok(ActShape::Flat(c * h * w)),
        (LayerSpec::Flatten, s @ ActShape::Flat(_)) => Ok(s),
        (LayerSpec::Fc { in_dim, out_dim }, ActShape::Flat(d)) => {
            if *in_dim != d {
                return Err(err(format!("expects {in_dim} inputs, receives {d}")));
            }
            Ok(ActShape::Flat(*out_dim))
        }
        (LayerSpec::Residual(r), ActShape::Map { c, h, w }) => {
            if r.conv1.in_channels != c {
                return Err(err(format!("expects {} input channels, receives {c}", r.conv1.in_channels)));
            }
            if r.conv2.in_channels != r.conv1.out_channels {
                return Err(err("second conv does not consume the first conv's output".into()));
            }
            let (h1, w1) = r.conv1.output_hw(h, w).map_err(|e| err(e.to_string()))?;
            let (h2, w2) = r.conv2.output_hw(h1, w1).map_err(|e| err(e.to_string()))?;
            if (h2, w2) != (h, w) {
                return Err(err("block convolutions must preserve spatial size".into()));
            }
            if r.skip.len() != r.conv2.out_channels {
                return Err(err(format!(
                    "skip path has {} channels, second conv has {}",
                    r.skip.len(),
                    r.conv2.out_channels
                )));
            }
            if r.skip.iter().flatten().any(|&s| s >= c) {
                return Err(err("skip path reads a channel that does not exist".into()));
            }
            Ok(ActShape::Map { c: r.conv2.out_channels, h, w })
        }
        (_, s) => Err(err(format!("cannot consume activation {s:?}"))),
    }
}

/// Parameter names and shapes a layer owns.
pub(crate) fn expected_params(idx: usize, layer: &LayerSpec) -> Vec<(String, Vec<usize>)> {
    let conv = |unit: ConvUnit, c: &ConvSpec| {
        vec![(unit.weight_name(), c.weight_shape().to_vec()), (unit.bias_name(), vec![c.out_channels])]
    };
    match layer {
        LayerSpec::Conv(c) => conv(ConvUnit { layer: idx, part: UnitPart::Plain }, c),
        LayerSpec::Fc { in_dim, out_dim } => {
            vec![(format!("{idx}.weight"), vec![*out_dim, *in_dim]), (format!("{idx}.bias"), vec![*out_dim])]
        }
        LayerSpec::Residual(r) => {
            let mut v = conv(ConvUnit { layer: idx, part: UnitPart::BlockFirst }, &r.conv1);
            v.extend(conv(ConvUnit { layer: idx, part: UnitPart::BlockSecond }, &r.conv2));
            v
        }
        _ => {
            debug_assert!(!layer.has_weights());
            Vec::new()
        }
    }
}

impl ModelGraph {
    /// The layer consuming the output of `unit`, and for a fully-connected
    /// consumer the number of flattened positions each channel feeds.
    pub(crate) fn consumer_of(&self, unit: ConvUnit) -> Result<Consumer> {
        if unit.part == UnitPart::BlockFirst {
            return Ok(Consumer::BlockSecond(unit.layer));
        }
        let producer_channels = self.conv_spec(unit).out_channels;
        for (idx, layer) in self.layers.iter().enumerate().skip(unit.layer + 1) {
            match layer {
                LayerSpec::Conv(_) => return Ok(Consumer::Conv(idx)),
                LayerSpec::Residual(_) => return Ok(Consumer::Block(idx)),
                LayerSpec::Fc { in_dim, .. } => {
                    if in_dim % producer_channels != 0 {
                        return shape_err(format!(
                            "fc layer {idx} input {in_dim} is not a multiple of {producer_channels} channels"
                        ));
                    }
                    return Ok(Consumer::Fc { layer: idx, positions: in_dim / producer_channels });
                }
                _ => {}
            }
        }
        Err(Error::InvalidArgument(format!("conv unit at layer {} has no downstream consumer", unit.layer)))
    }

    /// Returns a copy in which filter `j` of `unit` is old filter
    /// `producer_map[j]` (zero when `None`) and the consumer's input channel
    /// `j` is old channel `consumer_map[j]` (zero when `None`).
    pub(crate) fn rewire_unit(
        &self,
        unit: ConvUnit,
        producer_map: &[Option<usize>],
        consumer_map: &[Option<usize>],
    ) -> Result<ModelGraph> {
        if producer_map.len() != consumer_map.len() {
            return Err(Error::InvalidArgument("producer and consumer maps differ in length".into()));
        }
        let consumer = self.consumer_of(unit)?;
        let mut out = self.clone();
        let new_len = producer_map.len();

        let w = self.unit_weight(unit).gather_axis(0, producer_map)?;
        let b = self.unit_bias(unit).gather_axis(0, producer_map)?;
        out.params.insert(unit.weight_name(), w);
        out.params.insert(unit.bias_name(), b);
        out.conv_spec_mut(unit).out_channels = new_len;
        if unit.part == UnitPart::BlockSecond {
            if let LayerSpec::Residual(r) = &mut out.layers[unit.layer] {
                let old = r.skip.clone();
                r.skip = producer_map.iter().map(|m| m.and_then(|i| old[i])).collect();
            }
        }

        let conv_inputs = |out: &mut ModelGraph, cu: ConvUnit| -> Result<()> {
            let w = out.unit_weight(cu).gather_axis(1, consumer_map)?;
            out.params.insert(cu.weight_name(), w);
            out.conv_spec_mut(cu).in_channels = new_len;
            Ok(())
        };
        match consumer {
            Consumer::BlockSecond(layer) => {
                conv_inputs(&mut out, ConvUnit { layer, part: UnitPart::BlockSecond })?;
            }
            Consumer::Conv(layer) => {
                conv_inputs(&mut out, ConvUnit { layer, part: UnitPart::Plain })?;
            }
            Consumer::Block(layer) => {
                conv_inputs(&mut out, ConvUnit { layer, part: UnitPart::BlockFirst })?;
                if let LayerSpec::Residual(r) = &mut out.layers[layer] {
                    r.skip = r
                        .skip
                        .iter()
                        .map(|s| s.and_then(|c| consumer_map.iter().position(|m| *m == Some(c))))
                        .collect();
                }
            }
            Consumer::Fc { layer, positions } => {
                let name = format!("{layer}.weight");
                let w = self.params.get(&name).expect("validated fc weight");
                let rows = w.shape()[0];
                let old_channels = w.shape()[1] / positions;
                let w3 = w.reshape(&[rows, old_channels, positions])?;
                let new_w = w3.gather_axis(1, consumer_map)?.reshape(&[rows, new_len * positions])?;
                out.params.insert(name, new_w);
                if let LayerSpec::Fc { in_dim, .. } = &mut out.layers[layer] {
                    *in_dim = new_len * positions;
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Consumer {
    BlockSecond(usize),
    Conv(usize),
    Block(usize),
    Fc { layer: usize, positions: usize },
}
