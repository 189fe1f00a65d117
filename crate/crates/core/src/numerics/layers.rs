//! The fixed layer set of the instance classifier: forward and backward passes.
//!
//! Activations are single-instance tensors. Spatial layers take `[channels,
//! height, width]`; affine layers accept any shape and treat it as flat.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::gemm::{gemm, Op};
use super::rng::Prng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// Stride 1, no padding, square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// 2x2 window, stride 2; an odd trailing row/column is dropped.
    MaxPool2x2,
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    /// Inverted dropout with drop probability `rate`.
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    /// Output shape for a given input shape, or `None` if incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => match input {
                &[c, h, w] if c == in_channels && h >= kernel && w >= kernel && kernel > 0 => {
                    Some(vec![out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => None,
            },
            LayerSpec::MaxPool2x2 => match input {
                &[c, h, w] if h >= 2 && w >= 2 => Some(vec![c, h / 2, w / 2]),
                _ => None,
            },
            LayerSpec::Affine { inputs, outputs } => (input.iter().product::<usize>() == inputs).then(|| vec![outputs]),
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => Some(input.to_vec()),
        }
    }

    /// Shapes of the learnable tensors (weight then bias), empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerSpec::Affine { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => Vec::new(),
        }
    }

    /// Fan-in and fan-out of the weight tensor, for initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            LayerSpec::Affine { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } if in_channels == 0 || out_channels == 0 || kernel == 0 => {
                Err(Error::config(format!("degenerate layer {self}")))
            }
            LayerSpec::Affine { inputs, outputs } if inputs == 0 || outputs == 0 => {
                Err(Error::config(format!("degenerate layer {self}")))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::config(format!("dropout rate must lie in [0, 1), got {rate}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "conv2d:{in_channels}:{out_channels}:{kernel}"),
            LayerSpec::MaxPool2x2 => f.write_str("maxpool2x2"),
            LayerSpec::Affine { inputs, outputs } => write!(f, "affine:{inputs}:{outputs}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Sigmoid => f.write_str("sigmoid"),
            LayerSpec::Dropout { rate } => write!(f, "dropout:{rate}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let int = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::config(format!("bad integer {p:?} in layer {s:?}")))
        };
        let spec = match parts.as_slice() {
            ["conv2d", i, o, k] => LayerSpec::Conv2d {
                in_channels: int(i)?,
                out_channels: int(o)?,
                kernel: int(k)?,
            },
            ["maxpool2x2"] => LayerSpec::MaxPool2x2,
            ["affine", i, o] => LayerSpec::Affine {
                inputs: int(i)?,
                outputs: int(o)?,
            },
            ["relu"] => LayerSpec::Relu,
            ["sigmoid"] => LayerSpec::Sigmoid,
            ["dropout", p] => LayerSpec::Dropout {
                rate: p
                    .parse()
                    .map_err(|_| Error::config(format!("bad dropout rate in {s:?}")))?,
            },
            _ => return Err(Error::config(format!("unknown layer spec {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// What a forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv2d {
        input_shape: Vec<usize>,
        cols: Vec<f64>,
    },
    MaxPool2x2 {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
        /// Smallest gap between a window's winner and runner-up.
        min_gap: f64,
    },
    Affine {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Sigmoid {
        output: Tensor,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
}

impl LayerCache {
    /// Distance of the cached forward pass from the nearest non-differentiable
    /// point (relu at 0, maxpool ties). `f64::INFINITY` for smooth layers.
    pub fn kink_margin(&self) -> f64 {
        match self {
            LayerCache::Relu { input } => input.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
            LayerCache::MaxPool2x2 { min_gap, .. } => *min_gap,
            _ => f64::INFINITY,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_error(spec: &LayerSpec, input: &[usize]) -> Error {
    let expected = match *spec {
        LayerSpec::Conv2d {
            in_channels, kernel, ..
        } => vec![in_channels, kernel, kernel],
        LayerSpec::MaxPool2x2 => vec![1, 2, 2],
        LayerSpec::Affine { inputs, .. } => vec![inputs],
        _ => input.to_vec(),
    };
    Error::Shape {
        layer: 0,
        expected,
        actual: input.to_vec(),
    }
}

fn check_params(spec: &LayerSpec, params: &[Tensor]) -> Result<()> {
    let want = spec.param_shapes();
    if want.len() != params.len() || want.iter().zip(params).any(|(w, p)| w.as_slice() != p.shape()) {
        return Err(Error::Internal(format!(
            "parameters for {spec} have shapes {:?}, expected {want:?}",
            params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    let mut cols = vec![0.0; c * k * k * p];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = (ch * h + oy + ki) * w + kj;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&input[src..src + ow]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = (ch * h + oy + ki) * w + kj;
                    for (o, s) in out[dst..dst + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *o += s;
                    }
                }
            }
        }
    }
    out
}

/// Forward pass of one layer. `rng` is drawn from only by dropout in train mode.
pub fn layer_forward(
    spec: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
    mode: Mode,
    rng: &mut Prng,
) -> Result<(Tensor, LayerCache)> {
    let out_shape = spec
        .output_shape(input.shape())
        .ok_or_else(|| shape_error(spec, input.shape()))?;
    check_params(spec, params)?;

    match *spec {
        LayerSpec::Conv2d {
            in_channels: c,
            out_channels: oc,
            kernel: k,
        } => {
            let (h, w) = (input.shape()[1], input.shape()[2]);
            let p = out_shape[1] * out_shape[2];
            let cols = im2col(input.data(), c, h, w, k);
            let mut out = Vec::with_capacity(oc * p);
            for &b in params[1].data() {
                out.extend(std::iter::repeat_n(b, p));
            }
            gemm(oc, c * k * k, p, params[0].data(), Op::N, &cols, Op::N, 1.0, &mut out);
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::Conv2d {
                    input_shape: input.shape().to_vec(),
                    cols,
                },
            ))
        }
        LayerSpec::MaxPool2x2 => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let x = input.data();
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            let mut min_gap = f64::INFINITY;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (ch * h + 2 * oy) * w + 2 * ox;
                        let window = [base, base + 1, base + w, base + w + 1];
                        // first maximum wins ties
                        let mut best = window[0];
                        for &i in &window[1..] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        for &i in &window {
                            if i != best {
                                min_gap = min_gap.min(x[best] - x[i]);
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::MaxPool2x2 {
                    input_shape: input.shape().to_vec(),
                    argmax,
                    min_gap,
                },
            ))
        }
        LayerSpec::Affine { inputs, outputs } => {
            let wts = params[0].data();
            let x = input.data();
            let out: Vec<f64> = (0..outputs)
                .map(|o| {
                    let row = &wts[o * inputs..(o + 1) * inputs];
                    params[1].data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::Affine { input: input.clone() },
            ))
        }
        LayerSpec::Relu => Ok((input.map(|v| v.max(0.0)), LayerCache::Relu { input: input.clone() })),
        LayerSpec::Sigmoid => {
            let out = input.map(sigmoid);
            Ok((out.clone(), LayerCache::Sigmoid { output: out }))
        }
        LayerSpec::Dropout { rate } => match mode {
            Mode::Eval => Ok((input.clone(), LayerCache::Dropout { mask: None })),
            Mode::Train => {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let mut out = input.clone();
                out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Ok((out, LayerCache::Dropout { mask: Some(mask) }))
            }
        },
    }
}

/// Backward pass: returns the gradient with respect to the layer input and
/// one gradient tensor per parameter tensor.
pub fn layer_backward(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    upstream: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let stale = || Error::Internal(format!("cache does not belong to layer {spec}"));
    match (*spec, cache) {
        (
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: oc,
                kernel: k,
            },
            LayerCache::Conv2d { input_shape, cols },
        ) => {
            let (h, w) = (input_shape[1], input_shape[2]);
            let p = (h - k + 1) * (w - k + 1);
            let ckk = c * k * k;
            if upstream.len() != oc * p || cols.len() != ckk * p {
                return Err(stale());
            }
            let dy = upstream.data();
            let mut dw = vec![0.0; oc * ckk];
            gemm(oc, p, ckk, dy, Op::N, cols, Op::T, 0.0, &mut dw);
            let db: Vec<f64> = dy.chunks_exact(p).map(|r| r.iter().sum()).collect();
            let mut dcols = vec![0.0; ckk * p];
            gemm(ckk, oc, p, params[0].data(), Op::T, dy, Op::N, 0.0, &mut dcols);
            let dx = col2im(&dcols, c, h, w, k);
            Ok((
                Tensor::new(input_shape.clone(), dx)?,
                vec![Tensor::new(vec![oc, c, k, k], dw)?, Tensor::new(vec![oc], db)?],
            ))
        }
        (
            LayerSpec::MaxPool2x2,
            LayerCache::MaxPool2x2 {
                input_shape, argmax, ..
            },
        ) => {
            if upstream.len() != argmax.len() {
                return Err(stale());
            }
            let mut dx = Tensor::zeros(input_shape);
            for (&i, &g) in argmax.iter().zip(upstream.data()) {
                dx.data_mut()[i] += g;
            }
            Ok((dx, Vec::new()))
        }
        (LayerSpec::Affine { inputs, outputs }, LayerCache::Affine { input }) => {
            if upstream.len() != outputs || input.len() != inputs {
                return Err(stale());
            }
            let dy = upstream.data();
            let x = input.data();
            let wts = params[0].data();
            let mut dw = vec![0.0; outputs * inputs];
            let mut dx = vec![0.0; inputs];
            for (o, &g) in dy.iter().enumerate() {
                let row = o * inputs..(o + 1) * inputs;
                for ((dwv, &xv), (dxv, &wv)) in dw[row.clone()].iter_mut().zip(x).zip(dx.iter_mut().zip(&wts[row])) {
                    *dwv = g * xv;
                    *dxv += g * wv;
                }
            }
            Ok((
                Tensor::new(input.shape().to_vec(), dx)?,
                vec![
                    Tensor::new(vec![outputs, inputs], dw)?,
                    Tensor::new(vec![outputs], dy.to_vec())?,
                ],
            ))
        }
        (LayerSpec::Relu, LayerCache::Relu { input }) => {
            if upstream.len() != input.len() {
                return Err(stale());
            }
            let dx: Vec<f64> = input
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Ok((Tensor::new(input.shape().to_vec(), dx)?, Vec::new()))
        }
        (LayerSpec::Sigmoid, LayerCache::Sigmoid { output }) => {
            if upstream.len() != output.len() {
                return Err(stale());
            }
            let dx: Vec<f64> = output
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect();
            Ok((Tensor::new(output.shape().to_vec(), dx)?, Vec::new()))
        }
        (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => match mask {
            None => Ok((upstream.clone(), Vec::new())),
            Some(mask) => {
                if mask.len() != upstream.len() {
                    return Err(stale());
                }
                let mut dx = upstream.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                Ok((dx, Vec::new()))
            }
        },
        _ => Err(stale()),
    }
}
