use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use markpaint::corpus::write_synthetic_corpus;
use markpaint::imaging::{center_square, load_image, load_mask, random_rect_mask, save_image, save_mask, solid_target};
use markpaint::inpaint::{save_model, train_toy, TrainingConfig};
use markpaint::{
    markpaint, markpaint_eot, AdapterRegistry, AttackConfig, AttackResult, EoTConfig, FeatureExtractor, Image,
    InpainterModel, LossConfig, Reference, RngSeed, ToyInpainterConfig,
};
use markpaint_harness::config::{parse_color, ExperimentConfig};
use markpaint_harness::runs::{self, RunRecord};
use markpaint_harness::table::{fmt_f64, Table};
use markpaint_harness::{emit_plots, HarnessError, Result, StepSpec};

#[derive(Parser, Debug)]
#[command(name = "markpaint", version, about = "Markpainting attacks, evaluation grids and defenses")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for single-artifact commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model references, `adapter:argument` or a `.mpkt` checkpoint.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, global = true, value_delimiter = ',')]
    epsilon: Vec<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Step size: a number or `eps/N`.
    #[arg(long, global = true, value_parser = StepSpec::parse)]
    step: Option<StepSpec>,
    /// Weight of the MSE term in the attack loss [default: 4].
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference inpainter on a directory of images.
    TrainToy(TrainArgs),
    /// Markpaint one image for a fixed mask.
    Attack(AttackArgs),
    /// Mask-agnostic markpainting of one image.
    AttackEot(EotArgs),
    /// Compare inpaintings of an image and its adversarial version.
    Evaluate(EvaluateArgs),
    /// Attack grid over images, masks, targets, budgets and models.
    Grid,
    /// Cross-model transfer matrix.
    Transfer,
    /// Mask-agnostic attacks scored on held-out masks.
    EotEval,
    /// Input-transformation defenses against attacked images.
    Defend,
    /// Render summary CSVs as PNG plots.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// Write a random single-rectangle mask (white = known, black = hole).
    MakeMask {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        coverage: f64,
    },
    /// Write a target image from a colour or an image file.
    MakeTarget {
        /// Colour name or `#rrggbb`.
        #[arg(long, conflicts_with = "image")]
        color: Option<String>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Write a procedural image corpus.
    MakeCorpus {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    crop_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Model identifier stored in the checkpoint [default: file stem].
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Colour name, `#rrggbb` or image path.
    #[arg(long)]
    target: String,
    /// VGG16 safetensors weights for the loss.
    #[arg(long)]
    feature_weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EotArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 40)]
    n_masks: usize,
    #[arg(long, default_value_t = 0.01)]
    m_min: f64,
    #[arg(long, default_value_t = 0.1)]
    m_max: f64,
    #[arg(long)]
    feature_weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    adv: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long)]
    feature_weights: Option<PathBuf>,
}

/// Exit status for a finished run.
enum Outcome {
    Complete,
    Partial,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(jobs) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} workers: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let c = &cli.common;
    match &cli.command {
        Command::TrainToy(a) => train(c, a),
        Command::Attack(a) => attack(c, a),
        Command::AttackEot(a) => attack_eot(c, a),
        Command::Evaluate(a) => evaluate(c, a),
        Command::Grid => grid_command(c, runs::run_attack_grid),
        Command::Transfer => grid_command(c, runs::run_transfer_matrix),
        Command::EotEval => grid_command(c, runs::run_eot_experiment),
        Command::Defend => grid_command(c, runs::run_defense_sweep),
        Command::Plot { csv } => {
            for path in csv {
                let dir = c.out.clone().unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
                for f in emit_plots(path, &dir)? {
                    println!("{}", f.display());
                }
            }
            Ok(Outcome::Complete)
        }
        Command::MakeMask { size, coverage } => {
            let out = required_out(c)?;
            let mask = random_rect_mask(*size, *size, *coverage, RngSeed(c.seed.unwrap_or(0)))?;
            ensure_parent(&out)?;
            save_mask(&mask, &out)?;
            Ok(Outcome::Complete)
        }
        Command::MakeTarget { color, image, size } => {
            let out = required_out(c)?;
            let img = match (color, image) {
                (Some(spec), None) => load_target(spec, *size, *size)?,
                (None, Some(path)) => center_square(&load_image(path)?, *size)?,
                _ => return Err(HarnessError::Config {
                    path: "make-target".into(),
                    message: "exactly one of --color or --image is required".into(),
                }),
            };
            ensure_parent(&out)?;
            save_image(&img, &out)?;
            Ok(Outcome::Complete)
        }
        Command::MakeCorpus { count, size } => {
            let out = required_out(c)?;
            let files = write_synthetic_corpus(&out, *count, *size, RngSeed(c.seed.unwrap_or(0)))?;
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(Outcome::Complete)
        }
    }
}

fn required_out(c: &Common) -> Result<PathBuf> {
    c.out.clone().ok_or_else(|| HarnessError::Config {
        path: "--out".into(),
        message: "an output path is required".into(),
    })
}

fn grid_command<R>(c: &Common, runner: fn(&ExperimentConfig) -> Result<RunRecord<R>>) -> Result<Outcome> {
    let path = c.config.as_ref().ok_or_else(|| HarnessError::Config {
        path: "--config".into(),
        message: "this command needs an experiment configuration".into(),
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    if !c.models.is_empty() {
        cfg.models = c.models.clone();
    }
    if !c.epsilon.is_empty() {
        cfg.epsilons = c.epsilon.clone();
    }
    if let Some(n) = c.iterations {
        cfg.attack.iterations = n;
        cfg.eot.iterations = n;
    }
    if let Some(step) = c.step {
        cfg.attack.step = step;
        cfg.eot.step = step;
    }
    if let Some(alpha) = c.alpha {
        cfg.loss.alpha = alpha;
    }
    let record = runner(&cfg)?;
    for f in &record.files {
        println!("{}", f.display());
    }
    if record.is_partial() {
        eprintln!("{} combination(s) failed; see the failures CSV", record.failures.len());
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Complete)
}

fn train(c: &Common, a: &TrainArgs) -> Result<Outcome> {
    let out = required_out(c)?;
    let cfg = TrainingConfig {
        corpus: a.corpus.clone(),
        crop_size: a.crop_size,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        seed: RngSeed(c.seed.unwrap_or(0)),
        batch_size: a.batch_size,
        ..TrainingConfig::default()
    };
    let arch = ToyInpainterConfig {
        base_channels: a.base_channels,
        depth: a.depth,
    };
    let (mut model, report) = train_toy(&cfg, &arch)?;
    let id = a.id.clone().unwrap_or_else(|| {
        out.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "toy".into())
    });
    model.set_identifier(id);
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: loss {}", fmt_f64(*loss));
    }
    ensure_parent(&out)?;
    save_model(&model, &out)?;
    Ok(Outcome::Complete)
}

fn load_target(spec: &str, h: usize, w: usize) -> Result<Image> {
    Ok(match parse_color(spec) {
        Some(color) => solid_target(h, w, color)?,
        None => {
            let img = load_image(spec)?;
            if img.dims() == (h, w) || h != w {
                img
            } else {
                center_square(&img, h)?
            }
        }
    })
}

fn load_models(c: &Common) -> Result<Vec<Arc<dyn InpainterModel>>> {
    if c.models.is_empty() {
        return Err(HarnessError::Config {
            path: "--models".into(),
            message: "at least one model is required".into(),
        });
    }
    let registry = AdapterRegistry::with_builtins();
    Ok(c.models.iter().map(|m| registry.instantiate(m)).collect::<markpaint::Result<_>>()?)
}

fn loss_config(c: &Common, weights: Option<&Path>) -> Result<LossConfig> {
    let extractor = FeatureExtractor::from_weights(weights)?;
    Ok(LossConfig::new(c.alpha.unwrap_or(4.0), Arc::new(extractor))?)
}

fn single_epsilon(c: &Common) -> Result<f64> {
    match c.epsilon.as_slice() {
        [e] => Ok(*e),
        _ => Err(HarnessError::Config {
            path: "--epsilon".into(),
            message: "exactly one budget is required".into(),
        }),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn write_attack(out: &Path, result: &AttackResult, models: &[Arc<dyn InpainterModel>]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    save_image(&result.adversarial, out.join("adversarial.png"))?;
    let mut trace = Table::new(["iteration", "model", "loss"]);
    for (m, losses) in models.iter().zip(&result.loss_trace) {
        for (j, l) in losses.iter().enumerate() {
            trace.push(vec![j.to_string(), m.identifier().to_string(), fmt_f64(*l)]);
        }
    }
    trace.write(&out.join("trace.csv"))?;
    println!("linf {} after {} iterations", fmt_f64(result.linf), result.iterations);
    Ok(())
}

fn attack(c: &Common, a: &AttackArgs) -> Result<Outcome> {
    let out = required_out(c)?;
    let img = load_image(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let target = load_target(&a.target, img.height(), img.width())?;
    let models = load_models(c)?;
    let epsilon = single_epsilon(c)?;
    let cfg = AttackConfig {
        epsilon,
        step: c.step.unwrap_or(StepSpec::Fraction(50.0)).resolve(epsilon),
        iterations: c.iterations.unwrap_or(100),
        loss: loss_config(c, a.feature_weights.as_deref())?,
        seed: RngSeed(c.seed.unwrap_or(0)),
    };
    let result = markpaint(&img, &mask, &target, &models, &cfg)?;
    write_attack(&out, &result, &models)?;
    write_evaluation(&out.join("evaluation.csv"), &img, &result.adversarial, &mask, &target, &models, &cfg.loss)?;
    Ok(Outcome::Complete)
}

fn attack_eot(c: &Common, a: &EotArgs) -> Result<Outcome> {
    let out = required_out(c)?;
    let img = load_image(&a.image)?;
    let target = load_target(&a.target, img.height(), img.width())?;
    let models = load_models(c)?;
    let epsilon = single_epsilon(c)?;
    let cfg = EoTConfig {
        attack: AttackConfig {
            epsilon,
            step: c.step.unwrap_or(StepSpec::Fraction(30.0)).resolve(epsilon),
            iterations: c.iterations.unwrap_or(1500),
            loss: loss_config(c, a.feature_weights.as_deref())?,
            seed: RngSeed(c.seed.unwrap_or(0)),
        },
        n_masks: a.n_masks,
        m_min: a.m_min,
        m_max: a.m_max,
    };
    let result = markpaint_eot(&img, &target, &models, &cfg)?;
    write_attack(&out, &result, &models)?;
    Ok(Outcome::Complete)
}

fn write_evaluation(
    path: &Path,
    img: &Image,
    adv: &Image,
    mask: &markpaint::Mask,
    target: &Image,
    models: &[Arc<dyn InpainterModel>],
    loss: &LossConfig,
) -> Result<()> {
    let mut t = Table::new(["model", "reference", "loss", "l2", "psnr", "ssim"]);
    for m in models {
        let report = markpaint::evaluate(img, mask, target, m.as_ref(), adv, loss)?;
        for r in Reference::ALL {
            let row = report.row(r);
            t.push(vec![
                m.identifier().to_string(),
                r.as_str().to_string(),
                fmt_f64(row.loss),
                fmt_f64(row.l2),
                fmt_f64(row.psnr),
                fmt_f64(row.ssim),
            ]);
        }
    }
    t.write(path)?;
    Ok(())
}

fn evaluate(c: &Common, a: &EvaluateArgs) -> Result<Outcome> {
    let img = load_image(&a.image)?;
    let adv = load_image(&a.adv)?;
    let mask = load_mask(&a.mask)?;
    let target = load_target(&a.target, img.height(), img.width())?;
    let models = load_models(c)?;
    let loss = loss_config(c, a.feature_weights.as_deref())?;
    let path = c.out.clone().unwrap_or_else(|| PathBuf::from("evaluation.csv"));
    write_evaluation(&path, &img, &adv, &mask, &target, &models, &loss)?;
    println!("{}", path.display());
    Ok(Outcome::Complete)
}
