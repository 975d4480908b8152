use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};

use defdistill::attack::{logit_stats, run_attack, AttackConfig, AttackMode, Saturation};
use defdistill::experiment::{
    emit_cdf, run_experiment, AttackPlan, ExperimentReport, ExperimentSpec, TargetPolicy,
};
use defdistill::io::{load_checkpoint, save_checkpoint, MnistFiles};
use defdistill::training::{accuracy, distill, gen_soft_labels, train, Labels, TrainConfig};
use defdistill::{Architecture, Error, Network, Temperature};

const DATA_ENV: &str = "DEFDISTILL_DATA";

#[derive(Parser, Debug)]
#[command(
    name = "defdistill",
    version,
    about = "Defensive distillation and L0 saliency attacks on MNIST"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on hard labels (the undistilled baseline or a teacher).
    Train(TrainArgs),
    /// Label the training set with a teacher and train a distilled network.
    Distill(DistillArgs),
    /// Test-set accuracy of a checkpoint.
    Eval(ModelArgs),
    /// Attack one test image and write the adversarial image as PGM.
    Attack(AttackArgs),
    /// Attack a sample of test images and write a CSV report.
    Experiment(ExperimentArgs),
    /// Mean and standard deviation of the logits' L1 norm over the test set.
    Stats(StatsArgs),
    /// Cumulative success by pixels changed, from a report.
    Cdf(CdfArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding the four MNIST IDX files (defaults to $DEFDISTILL_DATA, then data/mnist).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn files(&self) -> Result<MnistFiles, Error> {
        let dir = self
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"));
        MnistFiles::in_dir(dir)
    }
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long = "lr", default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
}

impl OptimArgs {
    fn config(&self, temperature: Temperature) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            temperature,
            rng_seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Architecture profile: cnn9 or mlp.
    #[arg(long, default_value = "cnn9")]
    arch: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistillArgs {
    /// Teacher checkpoint; its training temperature is used throughout.
    #[arg(long)]
    teacher: PathBuf,
    /// Architecture profile of the distilled network (defaults to the teacher's).
    #[arg(long)]
    arch: Option<String>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct AttackSettings {
    /// original-pair, original-pair-softmax, modified-single or
    /// modified-single-product.
    #[arg(long, default_value = "modified-single")]
    mode: String,
    /// Divisor applied to the logits by the single-pixel modes.
    #[arg(long, default_value_t = 1.0)]
    attack_temperature: f64,
    #[arg(long, default_value_t = 112)]
    max_pixels: usize,
    /// Pick each pixel's endpoint by forward pass instead of gradient sign.
    #[arg(long)]
    best_endpoint: bool,
}

impl AttackSettings {
    fn mode(&self) -> Result<AttackMode, Error> {
        self.mode.parse()
    }

    fn saturation(&self) -> Saturation {
        if self.best_endpoint {
            Saturation::BestEndpoint
        } else {
            Saturation::GradientSign
        }
    }
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Index into the test set.
    #[arg(long)]
    image: usize,
    #[arg(long)]
    target: usize,
    #[command(flatten)]
    attack: AttackSettings,
    /// Where to write the adversarial image (binary PGM).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    attack: AttackSettings,
    /// Number of test images to sample.
    #[arg(long, default_value_t = 100)]
    images: usize,
    /// Target policy: all (every wrong class) or random (one wrong class).
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Use only the first N test images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct CdfArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn temperature(v: f64) -> Result<Temperature, Error> {
    Temperature::new(v).map_err(|e| Error::Config(e.to_string()))
}

fn print_report(
    net: &Network,
    accuracy: Option<f64>,
    losses: &[f64],
    train_accuracy: f64,
    started: Instant,
) {
    println!("training_temperature={}", net.training_temperature());
    println!("train_seconds={:.1}", started.elapsed().as_secs_f64());
    println!("final_loss={}", losses.last().copied().unwrap_or(f64::NAN));
    println!("train_accuracy={train_accuracy}");
    if let Some(a) = accuracy {
        println!("test_accuracy={a}");
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let started = Instant::now();
    let arch = Architecture::profile(&args.arch)?;
    let files = args.data.files()?;
    let (mut x, mut y) = files.load_train()?;
    if let Some(n) = args.optim.train_limit {
        x.truncate(n);
        y.labels.truncate(n);
    }
    let (tx, ty) = files.load_test()?;
    let cfg = args.optim.config(temperature(args.temperature)?);
    let (net, report) = train(&arch, &x, Labels::Hard(&y), &cfg, Some((&tx, &ty)))?;
    save_checkpoint(&net, &args.out)?;
    print_report(
        &net,
        report.test_accuracy,
        &report.epoch_loss,
        report.train_accuracy,
        started,
    );
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<(), Error> {
    let started = Instant::now();
    let teacher = load_checkpoint(&args.teacher)?;
    let arch = match &args.arch {
        Some(name) => Architecture::profile(name)?,
        None => teacher.architecture().clone(),
    };
    let files = args.data.files()?;
    let (mut x, mut y) = files.load_train()?;
    if let Some(n) = args.optim.train_limit {
        x.truncate(n);
        y.labels.truncate(n);
    }
    let (tx, ty) = files.load_test()?;
    let soft = gen_soft_labels(&teacher, &x)?;
    let cfg = args.optim.config(soft.generation_temperature);
    let (net, report) = distill(&arch, &x, &soft, &cfg, Some((&tx, &ty)))?;
    save_checkpoint(&net, &args.out)?;
    print_report(
        &net,
        report.test_accuracy,
        &report.epoch_loss,
        report.train_accuracy,
        started,
    );
    Ok(())
}

fn cmd_eval(args: ModelArgs) -> Result<(), Error> {
    let net = load_checkpoint(&args.model)?;
    let (x, y) = args.data.files()?.load_test()?;
    println!("test_accuracy={}", accuracy(&net, &x, &y)?);
    Ok(())
}

fn write_pgm(path: &Path, pixels: &[f64], rows: usize, cols: usize) -> Result<(), Error> {
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(
        pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_attack(args: AttackArgs) -> Result<(), Error> {
    let net = load_checkpoint(&args.model.model)?;
    let (x, y) = args.model.data.files()?.load_test()?;
    if args.image >= x.count {
        return Err(Error::Config(format!(
            "image index {} out of range (test set has {})",
            args.image, x.count
        )));
    }
    let cfg = AttackConfig {
        mode: args.attack.mode()?,
        target: args.target,
        max_pixels: args.attack.max_pixels,
        attack_temperature: temperature(args.attack.attack_temperature)?,
        saturation: args.attack.saturation(),
    };
    let image = x.image(args.image);
    let original = net.classify(&image)?;
    let r = run_attack(&net, &image, &cfg)?;
    println!("true_class={}", y.labels[args.image]);
    println!("original_class={original}");
    println!("target={}", cfg.target);
    println!("success={}", r.success);
    println!("final_class={}", r.final_class);
    println!("pixels_changed={}", r.pixels_changed);
    println!("iterations={}", r.iterations);
    if let Some(out) = &args.out {
        write_pgm(out, r.adversarial.data(), x.rows, x.cols)?;
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), Error> {
    let files = args.model.data.files()?;
    let mut plan = AttackPlan::new(
        args.attack.mode()?,
        temperature(args.attack.attack_temperature)?,
        args.images,
        args.seed,
    );
    plan.max_pixels = args.attack.max_pixels;
    plan.saturation = args.attack.saturation();
    plan.targets = args.targets.parse::<TargetPolicy>()?;
    let spec = ExperimentSpec {
        model: args.model.model.clone(),
        test_images: files.test_images,
        test_labels: files.test_labels,
        plan,
    };
    let report = run_experiment(&spec)?;
    report.save(&args.out)?;
    print_aggregates(&report);
    Ok(())
}

fn print_aggregates(report: &ExperimentReport) {
    println!("mode={}", report.mode);
    println!("attack_temperature={}", report.attack_temperature);
    println!("instances={}", report.rows.len());
    println!("successes={}", report.successes());
    println!("success_rate={}", report.success_rate);
    match report.mean_pixels {
        Some(m) => println!("mean_pixels_changed={m}"),
        None => println!("mean_pixels_changed=none"),
    }
}

fn cmd_stats(args: StatsArgs) -> Result<(), Error> {
    let net = load_checkpoint(&args.model.model)?;
    let (mut x, _) = args.model.data.files()?.load_test()?;
    if let Some(n) = args.limit {
        x.truncate(n);
    }
    let s = logit_stats(&net, &x)?;
    println!("images={}", s.count);
    println!("logit_l1_mean={}", s.mean);
    println!("logit_l1_stddev={}", s.stddev);
    Ok(())
}

fn cmd_cdf(args: CdfArgs) -> Result<(), Error> {
    let report = ExperimentReport::load(&args.report)?;
    let cdf = emit_cdf(&report)?;
    cdf.save(&args.out)?;
    println!("points={}", cdf.points.len());
    println!("final_fraction={}", cdf.points.last().map_or(0.0, |p| p.1));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Cdf(a) => cmd_cdf(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_user_error() => {
            eprintln!("error: {e}\n");
            eprintln!("{}", Cli::command().render_usage());
            eprintln!("run `defdistill --help` for details");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
