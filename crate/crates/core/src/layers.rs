//! Layer kinds and their per-example forward/backward kernels.
//!
//! Activations are flat row-major buffers: `[channels, height, width]` for
//! image-shaped layers and `[features]` after `Flatten`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) stride-1 convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    MaxPool2x2,
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::shape(&[inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => match *input {
                [c, h, w] if c == in_channels && h >= kernel_h && w >= kernel_w => {
                    Ok(vec![out_channels, h - kernel_h + 1, w - kernel_w + 1])
                }
                _ => Err(Error::shape(&[in_channels, kernel_h, kernel_w], input)),
            },
            LayerSpec::MaxPool2x2 => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(Error::InvalidInput(format!(
                    "maxpool2x2 needs a [c, h>=2, w>=2] input, got {input:?}"
                ))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Weight and bias shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    /// `(fan_in, fan_out)` used by the uniform initializer.
    pub(crate) fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let area = kernel_h * kernel_w;
                Some((in_channels * area, out_channels * area))
            }
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs},{outputs})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => write!(
                f,
                "conv2d({in_channels},{out_channels},{kernel_h},{kernel_w})"
            ),
            LayerSpec::MaxPool2x2 => f.write_str("maxpool2x2"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Format(format!("unrecognized layer `{s}`"));
        match s {
            "maxpool2x2" => return Ok(LayerSpec::MaxPool2x2),
            "relu" => return Ok(LayerSpec::Relu),
            "flatten" => return Ok(LayerSpec::Flatten),
            _ => {}
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if nums.contains(&0) {
            return Err(bad());
        }
        match (name, nums.as_slice()) {
            ("dense", &[inputs, outputs]) => Ok(LayerSpec::Dense { inputs, outputs }),
            ("conv2d", &[in_channels, out_channels, kernel_h, kernel_w]) => Ok(LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            }),
            _ => Err(bad()),
        }
    }
}

/// Per-layer state kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Saved {
    None,
    /// Layer input.
    Input(Vec<f64>),
    /// im2col matrix of the layer input, `[c*kh*kw, oh*ow]`.
    Columns(Vec<f64>),
    /// Flat input index chosen by each pooling window.
    Argmax(Vec<usize>),
}

pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn conv(in_shape: &[usize], kh: usize, kw: usize) -> Self {
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let src = &x[(c * g.h + oi + ki) * g.w + kj..][..g.ow];
                    dst[oi * g.ow..(oi + 1) * g.ow].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let dst = &mut x[(c * g.h + oi + ki) * g.w + kj..][..g.ow];
                    for (d, s) in dst.iter_mut().zip(&src[oi * g.ow..(oi + 1) * g.ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with explicit strides so callers
/// can pass transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`; every
    // caller derives them from the buffers' own dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    x: &[f64],
    g: &Geometry,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let oc = bias.len();
    let k = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let cols = im2col(x, g);
    let mut out = vec![0.0; oc * p];
    for (o, b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].fill(*b);
    }
    gemm(oc, k, p, weight, (k, 1), &cols, (p, 1), 1.0, &mut out);
    (out, cols)
}

/// Returns the input gradient when `need_input` is set; accumulates into
/// `grads` when given.
pub(crate) fn conv_backward(
    dout: &[f64],
    cols: &[f64],
    g: &Geometry,
    weight: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Option<Vec<f64>> {
    let k = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let oc = dout.len() / p;
    if let Some((dw, db)) = grads {
        // dW += dout · colsᵀ
        gemm(oc, p, k, dout, (p, 1), cols, (1, p), 1.0, dw);
        for (o, d) in db.iter_mut().enumerate() {
            *d += dout[o * p..(o + 1) * p].iter().sum::<f64>();
        }
    }
    if !need_input {
        return None;
    }
    // dcols = Wᵀ · dout
    let mut dcols = vec![0.0; k * p];
    gemm(k, oc, p, weight, (1, k), dout, (p, 1), 0.0, &mut dcols);
    Some(col2im(&dcols, g))
}

pub(crate) fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + dot(&weight[o * n..(o + 1) * n], x))
        .collect()
}

pub(crate) fn dense_backward(
    dout: &[f64],
    x: &[f64],
    weight: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Option<Vec<f64>> {
    let n = x.len();
    if let Some((dw, db)) = grads {
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            db[o] += d;
            for (w, &xi) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
                *w += d * xi;
            }
        }
    }
    if !need_input {
        return None;
    }
    let mut dx = vec![0.0; n];
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (g, &w) in dx.iter_mut().zip(&weight[o * n..(o + 1) * n]) {
            *g += d * w;
        }
    }
    Some(dx)
}

pub(crate) fn maxpool_forward(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ch * h + 2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(dout: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&d, &i) in dout.iter().zip(argmax) {
        dx[i] += d;
    }
    dx
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub(crate) fn relu_backward(dout: &[f64], x: &[f64]) -> Vec<f64> {
    dout.iter()
        .zip(x)
        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
