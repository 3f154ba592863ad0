//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use prunekit::autodiff::{Graph, Var};
use prunekit::model::{ActShape, LayerSpec, ModelGraph, UnitPart};
use prunekit::optim::ParamStore;
use prunekit::tensor::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// ‖a − n‖ / max(‖a‖, ‖n‖), or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Analytic gradient of the scalar built by `build`, flattened over `store`.
pub fn analytic(store: &ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let mut s = store.clone();
    s.zero_grad();
    g.backward(loss).unwrap().accumulate_into(&mut s).unwrap();
    s.flat_grads()
}

fn scalar(store: &ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.value(loss).data()[0]
}

/// Central differences at the flat coordinates `coords` (all when `None`).
pub fn numeric(
    store: &ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
    coords: Option<&[usize]>,
) -> Vec<f64> {
    let mut index = Vec::new();
    for id in store.ids() {
        for k in 0..store.value(id).numel() {
            index.push((id, k));
        }
    }
    let all: Vec<usize> = (0..index.len()).collect();
    let coords = coords.unwrap_or(&all);
    coords
        .iter()
        .map(|&c| {
            let (id, k) = index[c];
            let mut s = store.clone();
            s.value_mut(id).data_mut()[k] += FD_STEP;
            let up = scalar(&s, build);
            s.value_mut(id).data_mut()[k] -= 2.0 * FD_STEP;
            let down = scalar(&s, build);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error between analytic and numeric gradients, optionally on a
/// random subset of `sample` coordinates.
pub fn gradient_error(
    store: &ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
    sample: Option<(usize, &mut dyn rand::RngCore)>,
) -> f64 {
    let a = analytic(store, build);
    match sample {
        None => relative_error(&a, &numeric(store, build, None)),
        Some((k, rng)) if k < a.len() => {
            let coords: Vec<usize> = (0..k).map(|_| rng.random_range(0..a.len())).collect();
            let sub: Vec<f64> = coords.iter().map(|&c| a[c]).collect();
            relative_error(&sub, &numeric(store, build, Some(&coords)))
        }
        Some(_) => relative_error(&a, &numeric(store, build, None)),
    }
}

/// Six nested loops, no tricks.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[ki];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((ki * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, k, oh, ow], out).unwrap()
}

/// The engine's convolution, through the graph API.
pub fn engine_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(x, w, b, stride, pad).unwrap();
    g.value(y).clone()
}

/// Parameters of a model closed-form: `K·C·kh·kw + K` per conv, `in·out + out` per fc.
pub fn closed_form_params(model: &ModelGraph) -> usize {
    let conv =
        |c: &prunekit::model::ConvSpec| c.out_channels * c.in_channels * c.kernel_h * c.kernel_w + c.out_channels;
    model
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Conv(c) => conv(c),
            LayerSpec::Residual(r) => conv(&r.conv1) + conv(&r.conv2),
            LayerSpec::Fc { in_dim, out_dim } => in_dim * out_dim + out_dim,
            _ => 0,
        })
        .sum()
}

/// FLOPs recomputed independently from layer geometry:
/// `2·H'·W'·K·C·kh·kw` per conv, `2·in·out` per fc.
pub fn closed_form_flops(model: &ModelGraph) -> u64 {
    let [_, mut h, mut w] = model.input_shape();
    let mut total = 0u64;
    let conv = |spec: &prunekit::model::ConvSpec, h: usize, w: usize| {
        let oh = (h + 2 * spec.pad - spec.kernel_h) / spec.stride + 1;
        let ow = (w + 2 * spec.pad - spec.kernel_w) / spec.stride + 1;
        let f = 2 * oh * ow * spec.out_channels * spec.in_channels * spec.kernel_h * spec.kernel_w;
        (f as u64, oh, ow)
    };
    for layer in model.layers() {
        match layer {
            LayerSpec::Conv(s) => {
                let (f, oh, ow) = conv(s, h, w);
                total += f;
                h = oh;
                w = ow;
            }
            LayerSpec::Residual(r) => {
                let (f1, h1, w1) = conv(&r.conv1, h, w);
                let (f2, _, _) = conv(&r.conv2, h1, w1);
                total += f1 + f2;
            }
            LayerSpec::Pool { kh, kw } => {
                h /= kh;
                w /= kw;
            }
            LayerSpec::Fc { in_dim, out_dim } => total += 2 * (*in_dim as u64) * (*out_dim as u64),
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
    }
    total
}

pub fn unit_part(model: &ModelGraph, unit: usize) -> UnitPart {
    model.conv_units()[unit].part
}

pub fn output_is_logits(model: &ModelGraph) -> bool {
    matches!(model.layer_output_shapes().unwrap().last(), Some(ActShape::Flat(d)) if *d == model.num_classes())
}
pub mod grad;
pub mod reinforce;
pub mod surgery;
