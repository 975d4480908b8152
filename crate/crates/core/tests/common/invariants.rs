//! Randomized attacks on small networks, each checked against the
//! properties every attack result must satisfy.

// `!(a < b)` in `ensure!` is deliberate: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use defdistill::attack::{
    run_attack, run_attack_observed, single_score, AttackConfig, AttackMode, Saturation,
};
use defdistill::network::NUM_CLASSES;
use defdistill::{Architecture, LayerSpec, Network, Temperature, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn small_arch(rng: &mut ChaCha8Rng) -> Architecture {
    use LayerSpec::*;
    if rng.gen_bool(0.5) {
        Architecture {
            input_shape: vec![1, 5, 5],
            layers: vec![
                Flatten,
                Dense {
                    inputs: 25,
                    outputs: 16,
                },
                Relu,
                Dense {
                    inputs: 16,
                    outputs: NUM_CLASSES,
                },
            ],
        }
    } else {
        Architecture {
            input_shape: vec![1, 6, 6],
            layers: vec![
                Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel_h: 3,
                    kernel_w: 3,
                },
                Relu,
                MaxPool2x2,
                Flatten,
                Dense {
                    inputs: 12,
                    outputs: NUM_CLASSES,
                },
            ],
        }
    }
}

pub fn random_net(rng: &mut ChaCha8Rng) -> Network {
    let arch = small_arch(rng);
    let mut net = Network::new(arch, rng.gen()).unwrap();
    let gain = rng.gen_range(1.0..4.0);
    for p in net.params_mut().iter_mut().flatten() {
        for w in p.weight.data_mut() {
            *w *= gain;
        }
        for b in p.bias.data_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
    }
    net
}

/// Pixels drawn from {0, 1, uniform} so some start saturated.
pub fn random_image(net: &Network, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = net.architecture().input_shape.clone();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen::<f64>(),
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_config(rng: &mut ChaCha8Rng, n: usize) -> AttackConfig {
    let mode = AttackMode::ALL[rng.gen_range(0..AttackMode::ALL.len())];
    let t = [1.0, 20.0, 100.0][rng.gen_range(0..3)];
    let mut cfg = AttackConfig::new(
        mode,
        rng.gen_range(0..NUM_CLASSES),
        Temperature::new(t).unwrap(),
    );
    cfg.max_pixels = rng.gen_range(1..=n);
    if rng.gen_bool(0.25) {
        cfg.saturation = Saturation::BestEndpoint;
    }
    cfg
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub attacks: usize,
    pub successes: usize,
    pub failures: usize,
    pub vacuous: usize,
    pub pair_selections: usize,
    pub single_selections: usize,
}

/// Checks made on every selection the attack reports.
fn check_selection(
    mode: AttackMode,
    t: usize,
    n: usize,
    pixels: &[usize],
    jac: &Tensor,
    tally: &mut Tally,
) -> Result<(), String> {
    ensure!(
        jac.shape() == [NUM_CLASSES, n],
        "Jacobian shape {:?}",
        jac.shape()
    );
    match mode {
        AttackMode::OriginalPair | AttackMode::OriginalPairSoftmax => {
            let (p, q) = (pixels[0], pixels[1]);
            ensure!(p != q, "pair repeats pixel {p}");
            let alpha = jac.get2(t, p) + jac.get2(t, q);
            let beta: f64 = (0..NUM_CLASSES)
                .filter(|&j| j != t)
                .map(|j| jac.get2(j, p) + jac.get2(j, q))
                .sum();
            ensure!(alpha > 0.0, "selected pair has alpha {alpha}");
            ensure!(beta < 0.0, "selected pair has beta {beta}");
            tally.pair_selections += 1;
        }
        AttackMode::ModifiedSingle => {
            for p in 0..n {
                let twice_target = 2.0 * jac.get2(t, p);
                let score = single_score(jac, t, p);
                ensure!(
                    (score - twice_target).abs() <= 1e-8,
                    "score {score} vs 2*dF_t/dx {twice_target} at pixel {p}"
                );
            }
            tally.single_selections += 1;
        }
        AttackMode::ModifiedSingleProduct => {
            let p = pixels[0];
            let alpha = jac.get2(t, p);
            let beta: f64 = (0..NUM_CLASSES)
                .filter(|&j| j != t)
                .map(|j| jac.get2(j, p))
                .sum();
            ensure!(alpha > 0.0, "selected pixel has alpha {alpha}");
            ensure!(beta < 0.0, "selected pixel has beta {beta}");
            tally.single_selections += 1;
        }
    }
    Ok(())
}

fn check_attack(
    net: &Network,
    x: &Tensor,
    cfg: &AttackConfig,
    tally: &mut Tally,
) -> Result<(), String> {
    let n = x.len();
    let t = cfg.target;
    let mut domain_sizes = Vec::new();
    let mut step_sizes = Vec::new();
    let mut violation = Ok(());
    let result = run_attack_observed(net, x, cfg, |step| {
        domain_sizes.push(step.domain_len);
        step_sizes.push(step.pixels.len());
        if violation.is_ok() {
            violation = check_selection(cfg.mode, t, n, step.pixels, step.jacobian, tally);
        }
    })
    .map_err(|e| e.to_string())?;
    violation?;

    ensure!(
        result.pixels_changed <= cfg.max_pixels,
        "{} pixels changed with budget {}",
        result.pixels_changed,
        cfg.max_pixels
    );
    let per_step = cfg.mode.pixels_per_step();
    ensure!(
        step_sizes.iter().all(|&s| s == per_step),
        "step sizes {step_sizes:?}"
    );
    ensure!(
        domain_sizes.windows(2).all(|w| w[1] < w[0]),
        "domain did not shrink: {domain_sizes:?}"
    );
    ensure!(
        result.iterations <= n,
        "{} iterations on {n} pixels",
        result.iterations
    );

    let mut changed = 0;
    for (a, b) in x.data().iter().zip(result.adversarial.data()) {
        if a.to_bits() != b.to_bits() {
            ensure!(*b == 0.0 || *b == 1.0, "changed pixel holds {b}");
            changed += 1;
        }
    }
    ensure!(
        changed == result.pixels_changed,
        "{changed} pixels differ but {} reported",
        result.pixels_changed
    );

    let class = net
        .classify(&result.adversarial)
        .map_err(|e| e.to_string())?;
    ensure!(
        class == result.final_class,
        "final class {} but image classifies as {class}",
        result.final_class
    );
    ensure!(
        result.success == (class == t),
        "success flag {} with class {class}, target {t}",
        result.success
    );

    let again = run_attack(net, x, cfg).map_err(|e| e.to_string())?;
    ensure!(again == result, "second run differs");

    if result.success && result.iterations == 0 {
        tally.vacuous += 1;
    } else if result.success {
        tally.successes += 1;
    } else {
        tally.failures += 1;
    }
    tally.attacks += 1;
    Ok(())
}

/// Runs `count` attacks; the first violated property is returned as an
/// error naming the case.
pub fn randomized_attack_suite(seed: u64, count: usize) -> Result<Tally, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for case in 0..count {
        let net = random_net(&mut rng);
        let x = random_image(&net, &mut rng);
        let cfg = random_config(&mut rng, x.len());
        check_attack(&net, &x, &cfg, &mut tally)
            .map_err(|e| format!("case {case} ({cfg:?}): {e}"))?;
    }
    Ok(tally)
}

/// Same seed, same sequence of results.
pub fn seeded_results(seed: u64, count: usize) -> Vec<defdistill::attack::AttackResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let net = random_net(&mut rng);
            let x = random_image(&net, &mut rng);
            let cfg = random_config(&mut rng, x.len());
            run_attack(&net, &x, &cfg).unwrap()
        })
        .collect()
}
