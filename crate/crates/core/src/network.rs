//! Networks, the forward pass, and reverse-mode gradients with respect to
//! parameters and inputs.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Geometry, LayerSpec, Saved};
use crate::softmax::{softmax_jacobian, softmax_unchecked, Temperature};
use crate::tensor::{argmax, Tensor};

pub const NUM_CLASSES: usize = 10;

/// Largest activation or parameter tensor an architecture may declare.
const MAX_ELEMENTS: usize = 1 << 31;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Input shape plus ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv(32) conv(32) pool conv(64) conv(64) pool dense(200) dense(200) dense(10),
    /// relu after every conv and hidden dense layer.
    pub fn cnn9() -> Self {
        let conv = |in_channels, out_channels| LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
        };
        use LayerSpec::*;
        Architecture {
            input_shape: vec![1, 28, 28],
            layers: vec![
                conv(1, 32),
                Relu,
                conv(32, 32),
                Relu,
                MaxPool2x2,
                conv(32, 64),
                Relu,
                conv(64, 64),
                Relu,
                MaxPool2x2,
                Flatten,
                Dense {
                    inputs: 1024,
                    outputs: 200,
                },
                Relu,
                Dense {
                    inputs: 200,
                    outputs: 200,
                },
                Relu,
                Dense {
                    inputs: 200,
                    outputs: NUM_CLASSES,
                },
            ],
        }
    }

    /// Small fully connected profile for fast runs.
    pub fn mlp() -> Self {
        use LayerSpec::*;
        Architecture {
            input_shape: vec![1, 28, 28],
            layers: vec![
                Flatten,
                Dense {
                    inputs: 784,
                    outputs: 256,
                },
                Relu,
                Dense {
                    inputs: 256,
                    outputs: 256,
                },
                Relu,
                Dense {
                    inputs: 256,
                    outputs: NUM_CLASSES,
                },
            ],
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "cnn9" => Ok(Self::cnn9()),
            "mlp" => Ok(Self::mlp()),
            other => Err(Error::Config(format!(
                "unknown architecture profile `{other}` (expected cnn9 or mlp)"
            ))),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let too_big = |dims: &[usize]| {
            dims.iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .is_none_or(|n| n == 0 || n > MAX_ELEMENTS)
        };
        if let Some(s) = shapes.iter().find(|s| too_big(s)) {
            return Err(Error::InvalidInput(format!(
                "activation shape {s:?} is empty or too large"
            )));
        }
        for layer in &self.layers {
            if let Some((w, b)) = layer.param_shapes() {
                if too_big(&w) || too_big(&b) {
                    return Err(Error::InvalidInput(format!(
                        "{layer} has an empty or oversized parameter"
                    )));
                }
            }
        }
        let out = shapes.last().unwrap();
        if out != &[NUM_CLASSES] {
            return Err(Error::shape(&[NUM_CLASSES], out));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        write!(f, "input({})", dims.join("x"))?;
        for layer in &self.layers {
            write!(f, " {layer}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("input("))
            .and_then(|p| p.strip_suffix(')'))
            .ok_or_else(|| {
                Error::Format(format!("architecture must start with input(..): `{s}`"))
            })?;
        let input_shape = input
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad input dimension `{d}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = parts.map(str::parse).collect::<Result<Vec<_>>>()?;
        Ok(Architecture {
            input_shape,
            layers,
        })
    }
}

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    fn zeros_for(spec: &LayerSpec) -> Option<Self> {
        spec.param_shapes().map(|(w, b)| Params {
            weight: Tensor::zeros(&w),
            bias: Tensor::zeros(&b),
        })
    }
}

/// Gradients shaped like a network's parameters (`None` for
/// parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Params>>,
}

impl Gradients {
    pub fn zeros(arch: &Architecture) -> Self {
        Gradients {
            layers: arch.layers.iter().map(Params::zeros_for).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
            p.bias.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn clear(&mut self) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.fill(0.0);
            p.bias.fill(0.0);
        }
    }

    /// All values in deterministic layer order (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }
}

/// Which output a Jacobian differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSpace {
    /// The logits `Z`.
    Logits,
    /// `softmax(Z / T)` for the temperature passed alongside.
    Softmax,
}

/// Everything the backward passes need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    generation: u64,
    shapes: Vec<Vec<usize>>,
    saved: Vec<Saved>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    temperature: Temperature,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn temperature(&self) -> Temperature {
        self.temperature
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub cache: ForwardCache,
}

#[derive(Debug)]
pub struct Network {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Params>>,
    training_temperature: Temperature,
    rng_seed: u64,
    id: u64,
    generation: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self.params.clone(),
            training_temperature: self.training_temperature,
            rng_seed: self.rng_seed,
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params == other.params
            && self.training_temperature == other.training_temperature
            && self.rng_seed == other.rng_seed
    }
}

impl Network {
    /// Fresh network: weights uniform in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .map(|spec| {
                let mut p = Params::zeros_for(spec)?;
                let (fan_in, fan_out) = spec.fans()?;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                p.weight
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.gen_range(-bound..bound));
                Some(p)
            })
            .collect();
        Self::from_parts(arch, params, Temperature::ONE, seed)
    }

    /// Assemble a network from existing parameters, validating every shape.
    pub fn from_parts(
        arch: Architecture,
        params: Vec<Option<Params>>,
        training_temperature: Temperature,
        rng_seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(Error::InvalidInput(format!(
                "{} parameter slots for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (spec, p) in arch.layers.iter().zip(&params) {
            match (spec.param_shapes(), p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) => {
                    if p.weight.shape() != w.as_slice() {
                        return Err(Error::shape(&w, p.weight.shape()));
                    }
                    if p.bias.shape() != b.as_slice() {
                        return Err(Error::shape(&b, p.bias.shape()));
                    }
                }
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "parameter presence does not match layer {spec}"
                    )))
                }
            }
        }
        let shapes = arch.shapes()?;
        Ok(Network {
            arch,
            shapes,
            params,
            training_temperature,
            rng_seed,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    /// Mutable parameter access. Invalidates every outstanding forward cache.
    pub fn params_mut(&mut self) -> &mut [Option<Params>] {
        self.generation += 1;
        &mut self.params
    }

    pub fn training_temperature(&self) -> Temperature {
        self.training_temperature
    }

    pub fn set_training_temperature(&mut self, t: Temperature) {
        self.training_temperature = t;
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn set_rng_seed(&mut self, seed: u64) {
        self.rng_seed = seed;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let shape = x.shape();
        if x.len() != self.input_len()
            || (shape.len() != 1 && shape != self.arch.input_shape.as_slice())
        {
            return Err(Error::shape(&self.arch.input_shape, shape));
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput(
                "input contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], keep: bool) -> (Vec<f64>, Vec<Saved>) {
        let mut act = x.to_vec();
        let mut saved = Vec::with_capacity(if keep { self.arch.layers.len() } else { 0 });
        for (i, spec) in self.arch.layers.iter().enumerate() {
            let in_shape = &self.shapes[i];
            let (next, state) = match *spec {
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let out = layers::dense_forward(&act, p.weight.data(), p.bias.data());
                    (out, Saved::Input(act))
                }
                LayerSpec::Conv2d {
                    kernel_h, kernel_w, ..
                } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let g = Geometry::conv(in_shape, kernel_h, kernel_w);
                    let (out, cols) =
                        layers::conv_forward(&act, &g, p.weight.data(), p.bias.data());
                    (out, Saved::Columns(cols))
                }
                LayerSpec::MaxPool2x2 => {
                    let (out, arg) = layers::maxpool_forward(&act, in_shape);
                    (out, Saved::Argmax(arg))
                }
                LayerSpec::Relu => {
                    let out = layers::relu_forward(&act);
                    (out, Saved::Input(act))
                }
                LayerSpec::Flatten => (act, Saved::None),
            };
            if keep {
                saved.push(state);
            }
            act = next;
        }
        (act, saved)
    }

    /// Logits `Z(θ, x)` without keeping backward state.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x.data(), false).0)
    }

    /// Predicted class: argmax of the logits, identical to argmax of
    /// `softmax(Z/T)` for every `T > 0`.
    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Logits, `softmax(Z/T)`, and the cache for backward passes.
    pub fn forward(&self, x: &Tensor, t: Temperature) -> Result<Forward> {
        self.check_input(x)?;
        let (logits, saved) = self.run(x.data(), true);
        let probs = softmax_unchecked(&logits, t);
        Ok(Forward {
            logits: logits.clone(),
            probs: probs.clone(),
            cache: ForwardCache {
                net_id: self.id,
                generation: self.generation,
                shapes: self.shapes.clone(),
                saved,
                logits,
                probs,
                temperature: t,
            },
        })
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.net_id != self.id {
            return Err(Error::Cache(
                "cache was produced by a different network".into(),
            ));
        }
        if cache.generation != self.generation {
            return Err(Error::Cache(
                "parameters changed since the forward pass".into(),
            ));
        }
        if cache.shapes != self.shapes || cache.saved.len() != self.arch.layers.len() {
            return Err(Error::Cache(
                "cache layout does not match the network".into(),
            ));
        }
        Ok(())
    }

    /// Reverse pass from `dL/dZ`. Accumulates parameter gradients into
    /// `grads` when given; returns `dL/dx` when `need_input` is set.
    fn backprop(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        mut grads: Option<&mut Gradients>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let mut grad = grad_logits.to_vec();
        let last_param = self
            .arch
            .layers
            .iter()
            .position(|l| l.param_shapes().is_some())
            .unwrap_or(0);
        for i in (0..self.arch.layers.len()).rev() {
            // Below the first parameterized layer nothing needs a gradient
            // unless the caller wants dL/dx.
            let want_input = need_input || i > last_param;
            let in_shape = &cache.shapes[i];
            let layer_grads = grads
                .as_deref_mut()
                .and_then(|g| g.layers[i].as_mut())
                .map(|p| (p.weight.data_mut(), p.bias.data_mut()));
            let next = match (self.arch.layers[i], &cache.saved[i]) {
                (LayerSpec::Dense { .. }, Saved::Input(x)) => {
                    let p = self.params[i].as_ref().expect("validated");
                    layers::dense_backward(&grad, x, p.weight.data(), layer_grads, want_input)
                }
                (
                    LayerSpec::Conv2d {
                        kernel_h, kernel_w, ..
                    },
                    Saved::Columns(cols),
                ) => {
                    let p = self.params[i].as_ref().expect("validated");
                    let g = Geometry::conv(in_shape, kernel_h, kernel_w);
                    layers::conv_backward(&grad, cols, &g, p.weight.data(), layer_grads, want_input)
                }
                (LayerSpec::MaxPool2x2, Saved::Argmax(arg)) => want_input
                    .then(|| layers::maxpool_backward(&grad, arg, in_shape.iter().product())),
                (LayerSpec::Relu, Saved::Input(x)) => {
                    want_input.then(|| layers::relu_backward(&grad, x))
                }
                (LayerSpec::Flatten, Saved::None) => Some(grad),
                _ => unreachable!("cache layout checked against architecture"),
            };
            grad = next?;
        }
        Some(grad)
    }

    fn check_grad(&self, grad: &[f64]) -> Result<()> {
        if grad.len() != NUM_CLASSES {
            return Err(Error::shape(&[NUM_CLASSES], &[grad.len()]));
        }
        Ok(())
    }

    /// Parameter gradients from an upstream gradient on the probabilities
    /// `F = softmax(Z/T)` computed by the forward pass.
    pub fn backward_params(&self, cache: &ForwardCache, grad_probs: &[f64]) -> Result<Gradients> {
        self.check_cache(cache)?;
        self.check_grad(grad_probs)?;
        let jac = softmax_jacobian(&cache.probs, cache.temperature);
        let grad_logits: Vec<f64> = (0..NUM_CLASSES)
            .map(|k| {
                (0..NUM_CLASSES)
                    .map(|j| grad_probs[j] * jac[j * NUM_CLASSES + k])
                    .sum()
            })
            .collect();
        self.backward_params_logits(cache, &grad_logits)
    }

    /// Parameter gradients from an upstream gradient on the logits.
    pub fn backward_params_logits(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros(&self.arch);
        self.accumulate_gradients(cache, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for `grad_logits` into `grads`.
    pub fn accumulate_gradients(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_cache(cache)?;
        self.check_grad(grad_logits)?;
        if grads.layers.len() != self.arch.layers.len() {
            return Err(Error::InvalidInput(
                "gradient buffer has wrong layout".into(),
            ));
        }
        self.backprop(cache, grad_logits, Some(grads), false);
        Ok(())
    }

    /// `dL/dx` for an upstream gradient on the logits.
    pub fn input_gradient(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        self.check_grad(grad_logits)?;
        Ok(self
            .backprop(cache, grad_logits, None, true)
            .expect("input gradient requested"))
    }

    /// `10 × n` Jacobian of the logits (or of `softmax(Z/t)`) with respect to
    /// the input, one reverse pass per output class.
    pub fn input_jacobian(&self, x: &Tensor, space: OutputSpace, t: Temperature) -> Result<Tensor> {
        let fwd = self.forward(x, t)?;
        self.jacobian_from_cache(&fwd.cache, space, t)
    }

    pub fn jacobian_from_cache(
        &self,
        cache: &ForwardCache,
        space: OutputSpace,
        t: Temperature,
    ) -> Result<Tensor> {
        self.check_cache(cache)?;
        let n = self.input_len();
        let mut logit_jac = Vec::with_capacity(NUM_CLASSES * n);
        let mut seed = [0.0; NUM_CLASSES];
        for class in 0..NUM_CLASSES {
            seed.fill(0.0);
            seed[class] = 1.0;
            let row = self
                .backprop(cache, &seed, None, true)
                .expect("input gradient requested");
            logit_jac.extend_from_slice(&row);
        }
        let data = match space {
            OutputSpace::Logits => logit_jac,
            OutputSpace::Softmax => {
                // dF̂/dx = (dF̂/dZ) · (dZ/dx)
                let probs = softmax_unchecked(&cache.logits, t);
                let s = softmax_jacobian(&probs, t);
                let mut out = vec![0.0; NUM_CLASSES * n];
                layers::gemm(
                    NUM_CLASSES,
                    NUM_CLASSES,
                    n,
                    &s,
                    (NUM_CLASSES, 1),
                    &logit_jac,
                    (n, 1),
                    0.0,
                    &mut out,
                );
                out
            }
        };
        Tensor::new(vec![NUM_CLASSES, n], data)
    }
}
