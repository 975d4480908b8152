//! Exhaustive oracles for pixel selection on four-pixel inputs.

use defdistill::attack::{
    run_attack_observed, select_pair, AttackConfig, AttackMode, SearchDomain,
};
use defdistill::network::NUM_CLASSES;
use defdistill::{softmax_t, Architecture, LayerSpec, Network, OutputSpace, Temperature, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PIXELS: usize = 4;

/// dense(4, 8) relu dense(8, 10) with Glorot weights and random biases.
pub fn four_pixel_net(rng: &mut ChaCha8Rng) -> Network {
    two_layer_net(rng, true)
}

/// As [`four_pixel_net`], optionally without the hidden relu.
pub fn two_layer_net(rng: &mut ChaCha8Rng, relu: bool) -> Network {
    use LayerSpec::*;
    let mut layers = vec![
        Flatten,
        Dense {
            inputs: PIXELS,
            outputs: 8,
        },
    ];
    if relu {
        layers.push(Relu);
    }
    layers.push(Dense {
        inputs: 8,
        outputs: NUM_CLASSES,
    });
    let arch = Architecture {
        input_shape: vec![1, 2, 2],
        layers,
    };
    let mut net = Network::new(arch, rng.gen()).unwrap();
    for p in net.params_mut().iter_mut().flatten() {
        for b in p.bias.data_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    net
}

pub fn image(data: Vec<f64>) -> Tensor {
    Tensor::new(vec![1, 2, 2], data).unwrap()
}

/// Every pair in `domain`, scored straight from the definition; ties keep
/// the lexicographically first pair.
pub fn exhaustive_pair(jac: &Tensor, t: usize, domain: &[usize]) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (a, &p) in domain.iter().enumerate() {
        for &q in &domain[a + 1..] {
            let alpha = jac.get2(t, p) + jac.get2(t, q);
            let mut beta = 0.0;
            for j in (0..NUM_CLASSES).filter(|&j| j != t) {
                beta += jac.get2(j, p) + jac.get2(j, q);
            }
            if alpha > 0.0 && beta < 0.0 {
                let score = -alpha * beta;
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, p, q));
                }
            }
        }
    }
    best.map(|(_, p, q)| (p, q))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PairAgreement {
    pub trials: usize,
    pub matches: usize,
    /// Trials in which at least one pair was admissible.
    pub with_pair: usize,
}

/// `select_pair` against [`exhaustive_pair`] on random matrices and on
/// Jacobians of random four-pixel networks, with random sub-domains.
pub fn pair_agreement(seed: u64, trials: usize) -> PairAgreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PairAgreement::default();
    for trial in 0..trials {
        let jac = if trial % 2 == 0 {
            let data = (0..NUM_CLASSES * PIXELS)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Tensor::new(vec![NUM_CLASSES, PIXELS], data).unwrap()
        } else {
            let net = four_pixel_net(&mut rng);
            let x = image((0..PIXELS).map(|_| rng.gen()).collect());
            let space = if rng.gen_bool(0.5) {
                OutputSpace::Logits
            } else {
                OutputSpace::Softmax
            };
            net.input_jacobian(&x, space, Temperature::ONE).unwrap()
        };
        let t = rng.gen_range(0..NUM_CLASSES);
        let keep: Vec<usize> = (0..PIXELS).filter(|_| rng.gen_bool(0.85)).collect();
        let domain = SearchDomain::from_indices(PIXELS, keep.iter().copied());
        let expected = exhaustive_pair(&jac, t, &keep);
        out.trials += 1;
        out.matches += (select_pair(&jac, t, &domain) == expected) as usize;
        out.with_pair += expected.is_some() as usize;
    }
    out
}

/// The pixel in `domain` whose saturation to 0 or 1 most increases
/// `softmax(Z/ta)_t`, or `None` if no saturation increases it.
pub fn exhaustive_saturation(
    net: &Network,
    x: &Tensor,
    domain: &[usize],
    t: usize,
    ta: Temperature,
) -> Option<usize> {
    let prob = |v: &Tensor| softmax_t(&net.logits(v).unwrap(), ta).unwrap()[t];
    let base = prob(x);
    let mut best: Option<(f64, usize)> = None;
    for &p in domain {
        for end in [0.0, 1.0] {
            let mut v = x.clone();
            v.data_mut()[p] = end;
            let gain = prob(&v) - base;
            if gain > 0.0 && best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, p));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SingleAgreement {
    pub trials: usize,
    /// Trials in which every choice matched the oracle.
    pub trials_agreeing: usize,
    pub choices: usize,
    pub choices_agreeing: usize,
}

/// Modified-single attacks on a blank four-pixel image. Each choice the
/// attack makes, including the final "no pixel helps", is compared with
/// [`exhaustive_saturation`] over the pixels still in the domain.
pub fn single_agreement(
    seed: u64,
    trials: usize,
    relu: bool,
    temperatures: &[f64],
) -> SingleAgreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SingleAgreement::default();
    while out.trials < trials {
        let net = two_layer_net(&mut rng, relu);
        let x = image(vec![0.0; PIXELS]);
        let ta = Temperature::new(temperatures[rng.gen_range(0..temperatures.len())]).unwrap();
        let class = net.classify(&x).unwrap();
        let t = (class + rng.gen_range(1..NUM_CLASSES)) % NUM_CLASSES;
        let cfg = AttackConfig::new(AttackMode::ModifiedSingle, t, ta);

        let mut current = x.clone();
        let mut domain: Vec<usize> = (0..PIXELS).collect();
        let mut verdicts = Vec::new();
        let result = run_attack_observed(&net, &x, &cfg, |step| {
            let chosen = step.pixels[0];
            verdicts.push(exhaustive_saturation(&net, &current, &domain, t, ta) == Some(chosen));
            current.data_mut()[chosen] = if step.jacobian.get2(t, chosen) > 0.0 {
                1.0
            } else {
                0.0
            };
            domain.retain(|&p| p != chosen);
        })
        .unwrap();
        if !result.success && !domain.is_empty() {
            verdicts.push(exhaustive_saturation(&net, &current, &domain, t, ta).is_none());
        }
        if verdicts.is_empty() {
            continue;
        }
        out.trials += 1;
        out.trials_agreeing += verdicts.iter().all(|&v| v) as usize;
        out.choices += verdicts.len();
        out.choices_agreeing += verdicts.iter().filter(|&&v| v).count();
    }
    out
}
