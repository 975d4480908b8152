//! Targeted L0 saliency attacks.
//!
//! Every mode runs the same greedy loop: differentiate the network output
//! with respect to the input, pick the most salient pixel(s) still in the
//! search domain, saturate them to 0 or 1, drop them from the domain, and
//! reclassify at T = 1. The loop stops on success, when the next change
//! would exceed the pixel budget, or when nothing salient remains.
//!
//! * `original-pair`: pairs scored by `−α·β` on the logits, gated on
//!   `α > 0` and `β < 0`.
//! * `original-pair-softmax`: the same pair search on `softmax(Z)`.
//! * `modified-single`: single pixels scored by
//!   `2 ∂F̂_t/∂x_p − Σ_j ∂F̂_j/∂x_p` with `F̂ = softmax(Z/T_a)`.
//! * `modified-single-product`: single pixels on `F̂`, scored by `−α·β`
//!   with the pair modes' gating.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::ImageBatch;
use crate::network::{Network, OutputSpace, NUM_CLASSES};
use crate::softmax::{softmax_unchecked, Temperature};
use crate::tensor::{argmax, Tensor};

pub const DEFAULT_MAX_PIXELS: usize = 112;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackMode {
    OriginalPair,
    OriginalPairSoftmax,
    ModifiedSingle,
    /// `modified-single` ranking pixels by `−α·β` under `α > 0, β < 0`.
    ModifiedSingleProduct,
}

impl AttackMode {
    pub const ALL: [AttackMode; 4] = [
        AttackMode::OriginalPair,
        AttackMode::OriginalPairSoftmax,
        AttackMode::ModifiedSingle,
        AttackMode::ModifiedSingleProduct,
    ];

    /// Pixels chosen per iteration.
    pub fn pixels_per_step(self) -> usize {
        match self {
            AttackMode::ModifiedSingle | AttackMode::ModifiedSingleProduct => 1,
            _ => 2,
        }
    }

    /// Output space and temperature the saliency Jacobian is taken in.
    fn jacobian_space(self, attack_temperature: Temperature) -> (OutputSpace, Temperature) {
        match self {
            AttackMode::OriginalPair => (OutputSpace::Logits, Temperature::ONE),
            AttackMode::OriginalPairSoftmax => (OutputSpace::Softmax, Temperature::ONE),
            AttackMode::ModifiedSingle | AttackMode::ModifiedSingleProduct => {
                (OutputSpace::Softmax, attack_temperature)
            }
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::OriginalPair => "original-pair",
            AttackMode::OriginalPairSoftmax => "original-pair-softmax",
            AttackMode::ModifiedSingle => "modified-single",
            AttackMode::ModifiedSingleProduct => "modified-single-product",
        })
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attack mode `{s}` (expected original-pair, original-pair-softmax, modified-single or modified-single-product)"
                ))
            })
    }
}

/// How a selected pixel's new value is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Saturation {
    /// 1 if the target objective's gradient is positive, else 0.
    #[default]
    GradientSign,
    /// Whichever endpoint gives the larger target objective, by forward pass.
    BestEndpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub target: usize,
    pub max_pixels: usize,
    /// Divisor applied to the logits to form `F̂`; only the single-pixel
    /// modes use it.
    pub attack_temperature: Temperature,
    pub saturation: Saturation,
}

impl AttackConfig {
    pub fn new(mode: AttackMode, target: usize, attack_temperature: Temperature) -> Self {
        AttackConfig {
            mode,
            target,
            max_pixels: DEFAULT_MAX_PIXELS,
            attack_temperature,
            saturation: Saturation::GradientSign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target >= NUM_CLASSES {
            return Err(Error::Config(format!(
                "target class {} is not in 0..{NUM_CLASSES}",
                self.target
            )));
        }
        if self.max_pixels == 0 {
            return Err(Error::Config("max_pixels must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pixels still eligible for modification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchDomain {
    eligible: Vec<bool>,
    len: usize,
}

impl SearchDomain {
    pub fn full(n: usize) -> Self {
        SearchDomain {
            eligible: vec![true; n],
            len: n,
        }
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut eligible = vec![false; n];
        for i in indices {
            eligible[i] = true;
        }
        let len = eligible.iter().filter(|&&e| e).count();
        SearchDomain { eligible, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.eligible.get(i).copied().unwrap_or(false)
    }

    pub fn remove(&mut self, i: usize) {
        if self.contains(i) {
            self.eligible[i] = false;
            self.len -= 1;
        }
    }

    /// Eligible indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.eligible
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| e.then_some(i))
            .collect()
    }
}

/// Target-direction gain `α` and other-class change `β` of a candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyScores {
    pub alpha: f64,
    pub beta: f64,
}

fn column_sums(jac: &Tensor) -> Vec<f64> {
    let n = jac.shape()[1];
    let mut sums = vec![0.0; n];
    for j in 0..jac.shape()[0] {
        for (s, v) in sums.iter_mut().zip(jac.row(j)) {
            *s += v;
        }
    }
    sums
}

/// `α` and `β` of the set `pixels`.
pub fn saliency(jac: &Tensor, target: usize, pixels: &[usize]) -> SaliencyScores {
    let alpha: f64 = pixels.iter().map(|&i| jac.get2(target, i)).sum();
    let total: f64 = pixels
        .iter()
        .map(|&i| (0..jac.shape()[0]).map(|j| jac.get2(j, i)).sum::<f64>())
        .sum();
    SaliencyScores {
        alpha,
        beta: total - alpha,
    }
}

/// The pair `{p, q}` (p < q) in `domain` maximizing `−α·β` subject to
/// `α > 0` and `β < 0`; ties go to the smallest `p`, then `q`.
pub fn select_pair(jac: &Tensor, target: usize, domain: &SearchDomain) -> Option<(usize, usize)> {
    let idx = domain.indices();
    let sums = column_sums(jac);
    let tgt = jac.row(target);
    let a: Vec<f64> = idx.iter().map(|&i| tgt[i]).collect();
    let c: Vec<f64> = idx.iter().map(|&i| sums[i]).collect();

    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..idx.len() {
        let (ai, ci) = (a[i], c[i]);
        for k in i + 1..idx.len() {
            let alpha = ai + a[k];
            if alpha <= 0.0 {
                continue;
            }
            let beta = (ci + c[k]) - alpha;
            if beta >= 0.0 {
                continue;
            }
            let score = -alpha * beta;
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, idx[i], idx[k]));
            }
        }
    }
    best.map(|(_, p, q)| (p, q))
}

/// Single-pixel score `2 ∂F̂_t/∂x_p − Σ_j ∂F̂_j/∂x_p`, i.e. `α − β`.
pub fn single_score(jac: &Tensor, target: usize, p: usize) -> f64 {
    let column: f64 = (0..jac.shape()[0]).map(|j| jac.get2(j, p)).sum();
    2.0 * jac.get2(target, p) - column
}

/// The pixel in `domain` with the largest positive single-pixel score;
/// smallest index on ties, `None` if no score is positive.
pub fn select_single(jac: &Tensor, target: usize, domain: &SearchDomain) -> Option<usize> {
    let sums = column_sums(jac);
    let tgt = jac.row(target);
    let mut best: Option<(f64, usize)> = None;
    for p in domain.indices() {
        let score = 2.0 * tgt[p] - sums[p];
        if score > 0.0 && best.is_none_or(|(b, _)| score > b) {
            best = Some((score, p));
        }
    }
    best.map(|(_, p)| p)
}

/// The pixel in `domain` maximizing `−α·β` with `α > 0` and `β < 0`;
/// smallest index on ties.
pub fn select_single_product(jac: &Tensor, target: usize, domain: &SearchDomain) -> Option<usize> {
    let sums = column_sums(jac);
    let tgt = jac.row(target);
    let mut best: Option<(f64, usize)> = None;
    for p in domain.indices() {
        let (alpha, beta) = (tgt[p], sums[p] - tgt[p]);
        if alpha <= 0.0 || beta >= 0.0 {
            continue;
        }
        let score = -alpha * beta;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, p));
        }
    }
    best.map(|(_, p)| p)
}

/// Set each of `pixels` to 1 where the target row of `jac` is positive and
/// to 0 otherwise.
pub fn saturate(x: &Tensor, pixels: &[usize], jac: &Tensor, target: usize) -> Tensor {
    let mut out = x.clone();
    for &p in pixels {
        out.data_mut()[p] = if jac.get2(target, p) > 0.0 { 1.0 } else { 0.0 };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub success: bool,
    pub adversarial: Tensor,
    pub pixels_changed: usize,
    pub iterations: usize,
    pub final_class: usize,
}

/// One selection made by the attack loop, for callers that audit it.
#[derive(Debug)]
pub struct AttackStep<'a> {
    pub iteration: usize,
    pub pixels: &'a [usize],
    /// Jacobian the selection was made from, in the mode's output space.
    pub jacobian: &'a Tensor,
    pub domain_len: usize,
}

pub fn run_attack(net: &Network, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack_observed(net, x, cfg, |_| {})
}

/// [`run_attack`] that reports every selection to `observe` before it is
/// applied.
pub fn run_attack_observed(
    net: &Network,
    x: &Tensor,
    cfg: &AttackConfig,
    mut observe: impl FnMut(&AttackStep<'_>),
) -> Result<AttackResult> {
    cfg.validate()?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput(
            "attack input must lie in [0, 1]".into(),
        ));
    }
    let (space, space_t) = cfg.mode.jacobian_space(cfg.attack_temperature);
    let t = cfg.target;
    let n = x.len();
    let mut current = x.clone();
    let mut domain = SearchDomain::full(n);
    let mut pixels_changed = 0;
    let mut iterations = 0;

    let final_class = loop {
        let fwd = net.forward(&current, Temperature::ONE)?;
        let class = argmax(&fwd.logits);
        if class == t || domain.is_empty() {
            break class;
        }
        let jac = net.jacobian_from_cache(&fwd.cache, space, space_t)?;
        let selected: Vec<usize> = match cfg.mode {
            AttackMode::ModifiedSingle => match select_single(&jac, t, &domain) {
                Some(p) => vec![p],
                None => break class,
            },
            AttackMode::ModifiedSingleProduct => match select_single_product(&jac, t, &domain) {
                Some(p) => vec![p],
                None => break class,
            },
            _ => match select_pair(&jac, t, &domain) {
                Some((p, q)) => vec![p, q],
                None => break class,
            },
        };
        observe(&AttackStep {
            iteration: iterations,
            pixels: &selected,
            jacobian: &jac,
            domain_len: domain.len(),
        });

        let next = match cfg.saturation {
            Saturation::GradientSign => saturate(&current, &selected, &jac, t),
            Saturation::BestEndpoint => {
                best_endpoints(net, &current, &selected, space, space_t, t)?
            }
        };
        let newly_changed = selected
            .iter()
            .filter(|&&p| next.data()[p] != x.data()[p])
            .count();
        if pixels_changed + newly_changed > cfg.max_pixels {
            break class;
        }
        current = next;
        pixels_changed += newly_changed;
        for p in selected {
            domain.remove(p);
        }
        iterations += 1;
    };

    Ok(AttackResult {
        success: final_class == t,
        adversarial: current,
        pixels_changed,
        iterations,
        final_class,
    })
}

fn objective(
    net: &Network,
    x: &Tensor,
    space: OutputSpace,
    t: Temperature,
    target: usize,
) -> Result<f64> {
    let z = net.logits(x)?;
    Ok(match space {
        OutputSpace::Logits => z[target],
        OutputSpace::Softmax => softmax_unchecked(&z, t)[target],
    })
}

fn best_endpoints(
    net: &Network,
    x: &Tensor,
    pixels: &[usize],
    space: OutputSpace,
    t: Temperature,
    target: usize,
) -> Result<Tensor> {
    let mut out = x.clone();
    for &p in pixels {
        out.data_mut()[p] = 1.0;
        let on = objective(net, &out, space, t, target)?;
        out.data_mut()[p] = 0.0;
        let off = objective(net, &out, space, t, target)?;
        out.data_mut()[p] = if on >= off { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Mean and population standard deviation of `Σ_j |Z_j|` over images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitStats {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

pub fn logit_stats(net: &Network, images: &ImageBatch) -> Result<LogitStats> {
    if images.count == 0 {
        return Err(Error::InvalidInput(
            "logit statistics of an empty image set".into(),
        ));
    }
    let norms = (0..images.count)
        .map(|i| {
            Ok(net
                .logits(&images.image(i))?
                .iter()
                .map(|z| z.abs())
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let count = norms.len();
    let mean = norms.iter().sum::<f64>() / count as f64;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    Ok(LogitStats {
        mean,
        stddev: var.sqrt(),
        count,
    })
}
