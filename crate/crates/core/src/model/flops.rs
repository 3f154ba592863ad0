use serde::{Deserialize, Serialize};

use super::{ActShape, ConvSpec, LayerSpec, ModelGraph};
use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    pub flops: u64,
    pub params: u64,
}

/// Per-image FLOPs and parameter counts. One multiply-accumulate counts as
/// two FLOPs; pooling, activations and the residual add count as zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerCost>,
    pub total_flops: u64,
    pub total_params: u64,
}

fn conv_flops(c: &ConvSpec, out_h: usize, out_w: usize) -> u64 {
    2 * (out_h * out_w * c.out_channels * c.in_channels * c.kernel_h * c.kernel_w) as u64
}

pub fn count_flops(model: &ModelGraph, input_shape: [usize; 3]) -> Result<FlopsReport> {
    let [c, h, w] = input_shape;
    let mut cur = ActShape::Map { c, h, w };
    let mut layers = Vec::with_capacity(model.layers().len());
    for (idx, layer) in model.layers().iter().enumerate() {
        let next = super::next_shape(idx, layer, cur)?;
        let flops = match (layer, next) {
            (LayerSpec::Conv(spec), ActShape::Map { h, w, .. }) => conv_flops(spec, h, w),
            (LayerSpec::Residual(r), ActShape::Map { h, w, .. }) => {
                // Block convs preserve spatial size.
                conv_flops(&r.conv1, h, w) + conv_flops(&r.conv2, h, w)
            }
            (LayerSpec::Fc { in_dim, out_dim }, _) => 2 * (in_dim * out_dim) as u64,
            (LayerSpec::Conv(_) | LayerSpec::Residual(_), _) => {
                return shape_err(format!("layer {idx} produced a flat activation"))
            }
            _ => 0,
        };
        layers.push(LayerCost { layer: idx, kind: layer.kind().to_string(), flops, params: layer.num_params() as u64 });
        cur = next;
    }
    Ok(FlopsReport {
        total_flops: layers.iter().map(|l| l.flops).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}
