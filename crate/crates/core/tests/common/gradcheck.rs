//! Central finite differences against analytic gradients.

use defdistill::network::NUM_CLASSES;
use defdistill::softmax::cross_entropy;
use defdistill::training::loss_and_gradients;
use defdistill::{softmax_t, Architecture, LayerSpec, Network, OutputSpace, Temperature, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps gradients that are
/// zero up to rounding from turning cancellation noise into huge ratios.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn dense(inputs: usize, outputs: usize) -> LayerSpec {
    LayerSpec::Dense { inputs, outputs }
}

pub fn conv(in_channels: usize, out_channels: usize, k: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel_h: k,
        kernel_w: k,
    }
}

/// Small architectures that together exercise every layer kind.
pub fn architectures() -> Vec<Architecture> {
    use LayerSpec::*;
    vec![
        Architecture {
            input_shape: vec![1, 6, 6],
            layers: vec![
                conv(1, 2, 3),
                Relu,
                MaxPool2x2,
                Flatten,
                dense(8, NUM_CLASSES),
            ],
        },
        Architecture {
            input_shape: vec![2, 7, 7],
            layers: vec![
                conv(2, 3, 2),
                Relu,
                conv(3, 2, 3),
                MaxPool2x2,
                Flatten,
                dense(8, 5),
                Relu,
                dense(5, NUM_CLASSES),
            ],
        },
        Architecture {
            input_shape: vec![1, 1, 5],
            layers: vec![Flatten, dense(5, 7), Relu, dense(7, NUM_CLASSES)],
        },
        Architecture {
            input_shape: vec![1, 5, 4],
            layers: vec![conv(1, 3, 2), Relu, Flatten, dense(36, NUM_CLASSES)],
        },
    ]
}

/// A network with Glorot weights and non-zero biases, so no unit sits on a
/// relu kink by construction.
pub fn random_net(arch: Architecture, rng: &mut ChaCha8Rng) -> Network {
    let mut net = Network::new(arch, rng.gen()).unwrap();
    for p in net.params_mut().iter_mut().flatten() {
        for b in p.bias.data_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
    net
}

pub fn random_input(net: &Network, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = net.architecture().input_shape.clone();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub fn random_target(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.gen::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

pub fn loss(net: &Network, x: &Tensor, target: &[f64], t: Temperature) -> f64 {
    let probs = softmax_t(&net.logits(x).unwrap(), t).unwrap();
    cross_entropy(target, &probs)
}

/// Worst relative error over every parameter of `net` for a batch loss.
pub fn param_gradient_error(
    net: &Network,
    batch: &[(Tensor, Vec<f64>)],
    t: Temperature,
    sample: Option<(usize, &mut ChaCha8Rng)>,
) -> f64 {
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for (x, y) in batch {
        let (_, g) = loss_and_gradients(net, x, y, t).unwrap();
        analytic.push(g.flat());
    }
    let total: Vec<f64> = (0..analytic[0].len())
        .map(|i| analytic.iter().map(|g| g[i]).sum())
        .collect();
    let batch_loss = |n: &Network| batch.iter().map(|(x, y)| loss(n, x, y, t)).sum::<f64>();

    let coords: Vec<(usize, bool, usize)> = net
        .params()
        .iter()
        .enumerate()
        .filter_map(|(l, p)| p.as_ref().map(|p| (l, p)))
        .flat_map(|(l, p)| {
            let w = (0..p.weight.len()).map(move |i| (l, true, i));
            let b = (0..p.bias.len()).map(move |i| (l, false, i));
            w.chain(b)
        })
        .collect();
    let flat_index: Vec<usize> = (0..coords.len()).collect();
    let chosen: Vec<usize> = match sample {
        None => flat_index,
        Some((k, rng)) => (0..k).map(|_| rng.gen_range(0..coords.len())).collect(),
    };

    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for c in chosen {
        let (layer, is_weight, i) = coords[c];
        let nudge = |probe: &mut Network, delta: f64| {
            let p = probe.params_mut()[layer].as_mut().unwrap();
            let data = if is_weight {
                p.weight.data_mut()
            } else {
                p.bias.data_mut()
            };
            data[i] += delta;
        };
        nudge(&mut probe, STEP);
        let up = batch_loss(&probe);
        nudge(&mut probe, -2.0 * STEP);
        let down = batch_loss(&probe);
        nudge(&mut probe, STEP);
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(total[c], numeric));
    }
    worst
}

pub fn outputs(net: &Network, x: &Tensor, space: OutputSpace, t: Temperature) -> Vec<f64> {
    let z = net.logits(x).unwrap();
    match space {
        OutputSpace::Logits => z,
        OutputSpace::Softmax => softmax_t(&z, t).unwrap(),
    }
}

pub fn jacobian_error(net: &Network, x: &Tensor, space: OutputSpace, t: Temperature) -> f64 {
    let jac = net.input_jacobian(x, space, t).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe.data_mut()[i] = x.data()[i] + STEP;
        let up = outputs(net, &probe, space, t);
        probe.data_mut()[i] = x.data()[i] - STEP;
        let down = outputs(net, &probe, space, t);
        probe.data_mut()[i] = x.data()[i];
        for j in 0..NUM_CLASSES {
            let numeric = (up[j] - down[j]) / (2.0 * STEP);
            worst = worst.max(rel_err(jac.get2(j, i), numeric));
        }
    }
    worst
}

pub const TEMPERATURES: [f64; 3] = [1.0, 20.0, 100.0];

#[derive(Debug, Clone, Copy, Default)]
pub struct FdSummary {
    pub instances: usize,
    pub worst_param: f64,
    pub worst_logits: f64,
    pub worst_softmax: f64,
}

impl FdSummary {
    pub fn worst(&self) -> f64 {
        self.worst_param
            .max(self.worst_logits)
            .max(self.worst_softmax)
    }
}

/// Parameter gradients and both input Jacobians of `rounds` random
/// networks per architecture.
pub fn small_network_suite(seed: u64, rounds: usize) -> FdSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = FdSummary::default();
    for round in 0..rounds {
        for arch in architectures() {
            let net = random_net(arch, &mut rng);
            let t = Temperature::new(TEMPERATURES[round % 3]).unwrap();
            let batch: Vec<_> = (0..2)
                .map(|_| (random_input(&net, &mut rng), random_target(&mut rng)))
                .collect();
            s.worst_param = s
                .worst_param
                .max(param_gradient_error(&net, &batch, t, None));
            let x = &batch[0].0;
            s.worst_logits = s
                .worst_logits
                .max(jacobian_error(&net, x, OutputSpace::Logits, t));
            s.worst_softmax = s
                .worst_softmax
                .max(jacobian_error(&net, x, OutputSpace::Softmax, t));
            s.instances += 1;
        }
    }
    s
}

/// Worst error over 50 sampled parameters of a random cnn9 on a batch of 4.
pub fn cnn9_sampled_parameters(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(Architecture::cnn9(), &mut rng);
    let batch: Vec<_> = (0..4)
        .map(|_| {
            let mut y = vec![0.0; NUM_CLASSES];
            y[rng.gen_range(0..NUM_CLASSES)] = 1.0;
            (random_input(&net, &mut rng), y)
        })
        .collect();
    param_gradient_error(&net, &batch, Temperature::ONE, Some((50, &mut rng)))
}
