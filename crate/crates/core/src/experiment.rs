//! Batch attack experiments, their CSV reports, and pixels-changed CDFs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::{run_attack, AttackConfig, AttackMode, Saturation, DEFAULT_MAX_PIXELS};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, ImageBatch, LabelBatch, MnistFiles};
use crate::network::{Network, NUM_CLASSES};
use crate::softmax::Temperature;

/// Which targets each sampled image is attacked towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// Every class other than the true one.
    All,
    /// One uniformly drawn wrong class.
    Random,
}

impl FromStr for TargetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all-9" => Ok(TargetPolicy::All),
            "random" | "random-1" => Ok(TargetPolicy::Random),
            other => Err(Error::Config(format!(
                "unknown target policy `{other}` (expected all or random)"
            ))),
        }
    }
}

/// Attack settings shared by every instance of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub mode: AttackMode,
    pub attack_temperature: Temperature,
    pub max_pixels: usize,
    pub saturation: Saturation,
    pub sample_size: usize,
    pub targets: TargetPolicy,
    pub rng_seed: u64,
}

impl AttackPlan {
    pub fn new(
        mode: AttackMode,
        attack_temperature: Temperature,
        sample_size: usize,
        rng_seed: u64,
    ) -> Self {
        AttackPlan {
            mode,
            attack_temperature,
            max_pixels: DEFAULT_MAX_PIXELS,
            saturation: Saturation::GradientSign,
            sample_size,
            targets: TargetPolicy::All,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub model: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub plan: AttackPlan,
}

impl ExperimentSpec {
    pub fn with_data_dir(
        model: impl Into<PathBuf>,
        data_dir: impl AsRef<Path>,
        plan: AttackPlan,
    ) -> Result<Self> {
        let files = MnistFiles::in_dir(data_dir)?;
        Ok(ExperimentSpec {
            model: model.into(),
            test_images: files.test_images,
            test_labels: files.test_labels,
            plan,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackRow {
    pub image_index: usize,
    pub true_class: usize,
    pub target: usize,
    pub success: bool,
    pub pixels_changed: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: AttackMode,
    pub attack_temperature: Temperature,
    pub max_pixels: usize,
    pub rows: Vec<AttackRow>,
    /// Successful rows over all rows.
    pub success_rate: f64,
    /// Mean pixels changed over successful rows only; `None` without any.
    pub mean_pixels: Option<f64>,
}

impl ExperimentReport {
    pub fn from_rows(
        mode: AttackMode,
        attack_temperature: Temperature,
        max_pixels: usize,
        mut rows: Vec<AttackRow>,
    ) -> Self {
        rows.sort_by_key(|r| (r.image_index, r.target));
        let (success_rate, mean_pixels) = aggregates(&rows);
        ExperimentReport {
            mode,
            attack_temperature,
            max_pixels,
            rows,
            success_rate,
            mean_pixels,
        }
    }

    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.success).count()
    }

    /// Mean pixels changed over successes as a fraction of `image_pixels`.
    pub fn mean_pixel_fraction(&self, image_pixels: usize) -> Option<f64> {
        self.mean_pixels.map(|m| m / image_pixels as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# mode={}", self.mode);
        let _ = writeln!(
            out,
            "# attack_temperature={}",
            self.attack_temperature.value()
        );
        let _ = writeln!(out, "# max_pixels={}", self.max_pixels);
        let _ = writeln!(out, "# rows={}", self.rows.len());
        let _ = writeln!(out, "# success_rate={}", self.success_rate);
        let _ = writeln!(
            out,
            "# mean_pixels_changed={}",
            self.mean_pixels
                .map_or("none".to_string(), |m| m.to_string())
        );
        let _ = writeln!(
            out,
            "# mean_pixels_changed averages successful attacks only"
        );
        out.push_str("image_index,true_class,target,success,pixels_changed,iterations\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_index,
                r.true_class,
                r.target,
                u8::from(r.success),
                r.pixels_changed,
                r.iterations
            );
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output and checks the stored
    /// aggregates against the rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let meta = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.strip_prefix("# "))
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Format(format!("report lacks `# {key}=`")))
        };
        let bad = |key: &str| Error::Format(format!("report has a malformed `{key}`"));
        let mode: AttackMode = meta("mode")?.parse().map_err(|_| bad("mode"))?;
        let attack_temperature = meta("attack_temperature")?
            .parse::<f64>()
            .map_err(|_| bad("attack_temperature"))
            .and_then(Temperature::new)?;
        let max_pixels = meta("max_pixels")?.parse().map_err(|_| bad("max_pixels"))?;
        let row_count: usize = meta("rows")?.parse().map_err(|_| bad("rows"))?;
        let success_rate: f64 = meta("success_rate")?
            .parse()
            .map_err(|_| bad("success_rate"))?;
        let mean_pixels = match meta("mean_pixels_changed")? {
            "none" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad("mean_pixels_changed"))?),
        };

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| -> Result<usize> {
                record
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad report row {:?}", record)))
            };
            let success = match field(3)? {
                0 => false,
                1 => true,
                _ => return Err(Error::Format(format!("bad success flag in {:?}", record))),
            };
            rows.push(AttackRow {
                image_index: field(0)?,
                true_class: field(1)?,
                target: field(2)?,
                success,
                pixels_changed: field(4)?,
                iterations: field(5)?,
            });
        }
        if rows.len() != row_count {
            return Err(Error::Format(format!(
                "report declares {row_count} rows but has {}",
                rows.len()
            )));
        }
        let report = ExperimentReport::from_rows(mode, attack_temperature, max_pixels, rows);
        if report.success_rate != success_rate || report.mean_pixels != mean_pixels {
            return Err(Error::Format(
                "stored aggregates disagree with the report rows".into(),
            ));
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn aggregates(rows: &[AttackRow]) -> (f64, Option<f64>) {
    let successes: Vec<&AttackRow> = rows.iter().filter(|r| r.success).collect();
    let rate = if rows.is_empty() {
        0.0
    } else {
        successes.len() as f64 / rows.len() as f64
    };
    let mean = (!successes.is_empty()).then(|| {
        successes.iter().map(|r| r.pixels_changed).sum::<usize>() as f64 / successes.len() as f64
    });
    (rate, mean)
}

/// Sampled `(image index, target)` pairs, ordered by image then target.
pub fn plan_instances(labels: &LabelBatch, plan: &AttackPlan) -> Result<Vec<(usize, usize)>> {
    if plan.sample_size == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    if plan.sample_size > labels.count() {
        return Err(Error::Config(format!(
            "cannot sample {} images from {}",
            plan.sample_size,
            labels.count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);
    let mut images = index::sample(&mut rng, labels.count(), plan.sample_size).into_vec();
    images.sort_unstable();
    let mut out = Vec::new();
    for i in images {
        let truth = labels.labels[i] as usize;
        match plan.targets {
            TargetPolicy::All => {
                out.extend((0..NUM_CLASSES).filter(|&t| t != truth).map(|t| (i, t)));
            }
            TargetPolicy::Random => {
                let r = rng.gen_range(0..NUM_CLASSES - 1);
                out.push((i, if r >= truth { r + 1 } else { r }));
            }
        }
    }
    Ok(out)
}

/// Attack every planned instance against `net`. Instances run in parallel;
/// rows come back ordered by `(image index, target)`.
pub fn run_experiment_on(
    net: &Network,
    images: &ImageBatch,
    labels: &LabelBatch,
    plan: &AttackPlan,
) -> Result<ExperimentReport> {
    if images.count != labels.count() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.count,
            labels.count()
        )));
    }
    let instances = plan_instances(labels, plan)?;
    let rows = instances
        .par_iter()
        .map(|&(i, target)| {
            let cfg = AttackConfig {
                mode: plan.mode,
                target,
                max_pixels: plan.max_pixels,
                attack_temperature: plan.attack_temperature,
                saturation: plan.saturation,
            };
            let r = run_attack(net, &images.image(i), &cfg)?;
            Ok(AttackRow {
                image_index: i,
                true_class: labels.labels[i] as usize,
                target,
                success: r.success,
                pixels_changed: r.pixels_changed,
                iterations: r.iterations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_rows(
        plan.mode,
        plan.attack_temperature,
        plan.max_pixels,
        rows,
    ))
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let net = load_checkpoint(&spec.model)?;
    let images = crate::io::load_idx_images(&spec.test_images)?;
    let labels = crate::io::load_idx_labels(&spec.test_labels)?;
    run_experiment_on(&net, &images, &labels, &spec.plan)
}

/// Cumulative success fraction by pixel budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfSeries {
    /// `(k, fraction of all rows that succeeded with at most k pixels changed)`
    /// for `k = 0..=max_pixels`.
    pub points: Vec<(usize, f64)>,
}

impl CdfSeries {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.points.get(k).map(|&(_, f)| f)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,fraction\n");
        for (k, f) in &self.points {
            let _ = writeln!(out, "{k},{f}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let points = reader
            .records()
            .map(|rec| {
                let rec = rec?;
                let k = rec.get(0).and_then(|v| v.parse().ok());
                let f = rec.get(1).and_then(|v| v.parse().ok());
                k.zip(f)
                    .ok_or_else(|| Error::Format(format!("bad CDF row {:?}", rec)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CdfSeries { points })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn emit_cdf(report: &ExperimentReport) -> Result<CdfSeries> {
    if report.rows.is_empty() {
        return Err(Error::InvalidInput("CDF of an empty report".into()));
    }
    let total = report.rows.len() as f64;
    let mut by_pixels = vec![0usize; report.max_pixels + 1];
    for r in report.rows.iter().filter(|r| r.success) {
        by_pixels[r.pixels_changed.min(report.max_pixels)] += 1;
    }
    let mut running = 0;
    let points = by_pixels
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            running += c;
            (k, running as f64 / total)
        })
        .collect();
    Ok(CdfSeries { points })
}
