use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConvSpec, LayerSpec, ModelGraph, ModelMeta, ResidualSpec, UnitPart};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// Shape of a desk-scale test network.
///
/// Plain (`residual = false`): one 3×3 conv per entry of `widths`, each
/// followed by ReLU and a 2×2 max-pool while the map is at least 2×2, then a
/// single classifier layer.
///
/// Residual: `widths[0]` is a stem conv; every further entry is the inner
/// width of a two-conv residual block operating at the stem's channel count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCnnConfig {
    pub name: String,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub residual: bool,
    /// Second block convs become prunable, with the skip path sharing their
    /// action.
    pub coupled: bool,
    pub seed: u64,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        Self {
            name: "toy-vgg".into(),
            widths: vec![16, 16, 32],
            num_classes: 10,
            input_shape: [1, 16, 16],
            residual: false,
            coupled: false,
            seed: 0,
        }
    }
}

pub fn build_toy_cnn(cfg: &ToyCnnConfig) -> Result<ModelGraph> {
    if cfg.residual && cfg.widths.len() < 2 {
        return Err(Error::InvalidArgument(
            "a residual network needs a stem conv and at least one block (two widths)".into(),
        ));
    }
    if cfg.widths.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 conv layers, got {}", cfg.widths.len())));
    }
    if let Some(w) = cfg.widths.iter().find(|&&w| w < 2) {
        return Err(Error::InvalidArgument(format!("conv width {w} is below 2")));
    }
    if cfg.num_classes == 0 || cfg.input_shape.contains(&0) {
        return Err(Error::InvalidArgument("empty input shape or class count".into()));
    }

    let [mut c, mut h, mut w] = cfg.input_shape;
    let mut layers = Vec::new();
    let pool_if_room = |layers: &mut Vec<LayerSpec>, h: &mut usize, w: &mut usize| {
        if *h >= 2 && *w >= 2 {
            layers.push(LayerSpec::Pool { kh: 2, kw: 2 });
            *h /= 2;
            *w /= 2;
        }
    };

    if cfg.residual {
        let stem = cfg.widths[0];
        // The stem's channels are tied to every skip path.
        layers.push(LayerSpec::Conv(ConvSpec::same(c, stem, 3, false)));
        layers.push(LayerSpec::Relu);
        pool_if_room(&mut layers, &mut h, &mut w);
        c = stem;
        for &inner in &cfg.widths[1..] {
            layers.push(LayerSpec::Residual(ResidualSpec::identity(c, inner, 3, cfg.coupled)));
            pool_if_room(&mut layers, &mut h, &mut w);
        }
    } else {
        for &width in &cfg.widths {
            layers.push(LayerSpec::Conv(ConvSpec::same(c, width, 3, true)));
            layers.push(LayerSpec::Relu);
            pool_if_room(&mut layers, &mut h, &mut w);
            c = width;
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Fc { in_dim: c * h * w, out_dim: cfg.num_classes });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    for (idx, layer) in layers.iter().enumerate() {
        for (name, shape) in super::expected_params(idx, layer) {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            };
            params.insert(name, value);
        }
    }

    ModelGraph::new(
        ModelMeta { name: cfg.name.clone(), version: 1, seed: cfg.seed },
        cfg.input_shape,
        cfg.num_classes,
        layers,
        params,
    )
}

/// Appends filters to a plain conv without changing what the network
/// computes: `extra[j] = Some(i)` adds a copy of filter `i`, `None` adds an
/// all-zero filter, and the consumer reads every appended channel with zero
/// weights.
pub fn widen_conv(model: &ModelGraph, unit_index: usize, extra: &[Option<usize>]) -> Result<ModelGraph> {
    let unit = model.conv_unit(unit_index)?;
    if unit.part != UnitPart::Plain {
        return Err(Error::InvalidArgument("only plain convolutions can be widened".into()));
    }
    let k = model.conv_spec(unit).out_channels;
    if let Some(bad) = extra.iter().flatten().find(|&&i| i >= k) {
        return Err(Error::InvalidArgument(format!("filter {bad} does not exist (layer has {k})")));
    }
    let producer: Vec<Option<usize>> = (0..k).map(Some).chain(extra.iter().copied()).collect();
    let consumer: Vec<Option<usize>> = (0..k).map(Some).chain(extra.iter().map(|_| None)).collect();
    model.rewire_unit(unit, &producer, &consumer)
}

/// Doubles every prunable plain conv with exact duplicates of its filters,
/// so half of each layer is removable with no change to the network output.
pub fn plant_duplicate_filters(model: &ModelGraph) -> Result<ModelGraph> {
    let mut out = model.clone();
    let units = model.conv_units();
    for idx in model.prunable_units() {
        if units[idx].part != UnitPart::Plain {
            return Err(Error::InvalidArgument("planting supports plain convolutions only".into()));
        }
        let k = out.conv_spec(units[idx]).out_channels;
        let extra: Vec<Option<usize>> = (0..k).map(Some).collect();
        out = widen_conv(&out, idx, &extra)?;
    }
    Ok(out)
}
