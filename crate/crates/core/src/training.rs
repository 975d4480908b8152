//! Supervised training and the three-step defensive distillation pipeline:
//! train a teacher at temperature T, label the training set with the
//! teacher's `softmax(Z/T)`, then train a fresh network on those soft labels
//! at the same T. The distilled network is evaluated at T = 1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{ImageBatch, LabelBatch};
use crate::network::{Architecture, Gradients, Network, NUM_CLASSES};
use crate::softmax::{cross_entropy, Temperature};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub temperature: Temperature,
    pub rng_seed: u64,
}

impl TrainConfig {
    /// 20 epochs, batch 128, learning rate 0.01, momentum 0.9.
    pub fn desk(temperature: Temperature, rng_seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            temperature,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Teacher probabilities for every training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    pub rows: Vec<[f64; NUM_CLASSES]>,
    pub generation_temperature: Temperature,
}

impl SoftLabelSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Training targets.
#[derive(Debug, Clone, Copy)]
pub enum Labels<'a> {
    Hard(&'a LabelBatch),
    Soft(&'a SoftLabelSet),
}

impl Labels<'_> {
    fn len(&self) -> usize {
        match self {
            Labels::Hard(l) => l.count(),
            Labels::Soft(s) => s.len(),
        }
    }

    fn row(&self, i: usize) -> [f64; NUM_CLASSES] {
        match self {
            Labels::Hard(l) => {
                let mut row = [0.0; NUM_CLASSES];
                row[l.labels[i] as usize] = 1.0;
                row
            }
            Labels::Soft(s) => s.rows[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy over each epoch.
    pub epoch_loss: Vec<f64>,
    /// Agreement with argmax of the training targets, after training.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Cross-entropy of `softmax(Z/T)` against `target` and its parameter
/// gradients.
pub fn loss_and_gradients(
    net: &Network,
    x: &Tensor,
    target: &[f64],
    t: Temperature,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(net.architecture());
    let loss = accumulate_example(net, x, target, t, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_example(
    net: &Network,
    x: &Tensor,
    target: &[f64],
    t: Temperature,
    grads: &mut Gradients,
) -> Result<f64> {
    let fwd = net.forward(x, t)?;
    let loss = cross_entropy(target, &fwd.probs);
    // d/dZ of -Σ y log softmax(Z/T) = (p - y) / T
    let grad: Vec<f64> = fwd
        .probs
        .iter()
        .zip(target)
        .map(|(p, y)| (p - y) / t.value())
        .collect();
    net.accumulate_gradients(&fwd.cache, &grad, grads)?;
    Ok(loss)
}

/// SGD with classical momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Gradients,
    learning_rate: f64,
    momentum: f64,
}

impl Sgd {
    pub fn new(arch: &Architecture, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            velocity: Gradients::zeros(arch),
            learning_rate,
            momentum,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, v), g) in net
            .params_mut()
            .iter_mut()
            .zip(self.velocity.layers.iter_mut())
            .zip(&grads.layers)
        {
            if let (Some(p), Some(v), Some(g)) = (p, v, g) {
                for (pair_p, pair_v, pair_g) in [
                    (p.weight.data_mut(), v.weight.data_mut(), g.weight.data()),
                    (p.bias.data_mut(), v.bias.data_mut(), g.bias.data()),
                ] {
                    for ((w, vel), grad) in pair_p.iter_mut().zip(pair_v.iter_mut()).zip(pair_g) {
                        *vel = mu * *vel + grad;
                        *w -= lr * *vel;
                    }
                }
            }
        }
    }
}

/// Train a fresh network of shape `arch` on `images` against `labels` with
/// cross-entropy at `cfg.temperature`.
pub fn train(
    arch: &Architecture,
    images: &ImageBatch,
    labels: Labels<'_>,
    cfg: &TrainConfig,
    test: Option<(&ImageBatch, &LabelBatch)>,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if labels.len() != images.count {
        return Err(Error::InvalidInput(format!(
            "{} label rows for {} images",
            labels.len(),
            images.count
        )));
    }
    if images.count == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if images.pixels_per_image() != arch.input_len() {
        return Err(Error::shape(
            &arch.input_shape,
            &[1, images.rows, images.cols],
        ));
    }

    let mut net = Network::new(arch.clone(), cfg.rng_seed)?;
    net.set_training_temperature(cfg.temperature);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    shuffle_rng.set_stream(1);
    let mut opt = Sgd::new(arch, cfg.learning_rate, cfg.momentum);
    let mut grads = Gradients::zeros(arch);
    let mut order: Vec<usize> = (0..images.count).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let x = images.image(i);
                total += accumulate_example(&net, &x, &labels.row(i), cfg.temperature, &mut grads)?;
            }
            if !total.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &grads);
            if !params_finite(&net) {
                return Err(Error::TrainingDiverged { epoch });
            }
        }
        let mean = total / images.count as f64;
        log_epoch(epoch, cfg.epochs, mean);
        epoch_loss.push(mean);
    }

    let train_accuracy = agreement(&net, images, |i| argmax(&labels.row(i)))?;
    let test_accuracy = test.map(|(x, y)| accuracy(&net, x, y)).transpose()?;
    Ok((
        net,
        TrainReport {
            epoch_loss,
            train_accuracy,
            test_accuracy,
        },
    ))
}

fn params_finite(net: &Network) -> bool {
    net.params()
        .iter()
        .flatten()
        .all(|p| p.weight.is_finite() && p.bias.is_finite())
}

fn log_epoch(epoch: usize, epochs: usize, loss: f64) {
    if std::env::var_os("DEFDISTILL_QUIET").is_none() {
        eprintln!("epoch {epoch}/{epochs}: loss {loss:.5}");
    }
}

/// Label the training set with the teacher's `softmax(Z/T)` at its own
/// training temperature.
pub fn gen_soft_labels(teacher: &Network, images: &ImageBatch) -> Result<SoftLabelSet> {
    if images.pixels_per_image() != teacher.input_len() {
        return Err(Error::shape(
            &teacher.architecture().input_shape,
            &[1, images.rows, images.cols],
        ));
    }
    let t = teacher.training_temperature();
    let rows = (0..images.count)
        .map(|i| {
            let probs = crate::softmax::softmax_t(&teacher.logits(&images.image(i))?, t)?;
            let mut row = [0.0; NUM_CLASSES];
            row.copy_from_slice(&probs);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftLabelSet {
        rows,
        generation_temperature: t,
    })
}

/// Train the distilled network on soft labels at their generation
/// temperature.
pub fn distill(
    arch: &Architecture,
    images: &ImageBatch,
    soft: &SoftLabelSet,
    cfg: &TrainConfig,
    test: Option<(&ImageBatch, &LabelBatch)>,
) -> Result<(Network, TrainReport)> {
    if cfg.temperature != soft.generation_temperature {
        return Err(Error::Config(format!(
            "distillation temperature {} differs from soft-label temperature {}",
            cfg.temperature, soft.generation_temperature
        )));
    }
    train(arch, images, Labels::Soft(soft), cfg, test)
}

/// Fraction of images whose predicted class equals the label.
pub fn accuracy(net: &Network, images: &ImageBatch, labels: &LabelBatch) -> Result<f64> {
    if images.count != labels.count() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.count,
            labels.count()
        )));
    }
    agreement(net, images, |i| labels.labels[i] as usize)
}

fn agreement(net: &Network, images: &ImageBatch, truth: impl Fn(usize) -> usize) -> Result<f64> {
    if images.count == 0 {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for i in 0..images.count {
        if net.classify(&images.image(i))? == truth(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.count as f64)
}
