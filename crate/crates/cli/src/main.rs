//! `udclab`: synthesize under-display-camera face data, train the
//! degradation and restoration models, restore images, and verify the build.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use udclab_core::dgformer::DGFormerConfig;
use udclab_core::dmnet::DMNetConfig;
use udclab_core::gan::LossWeights;
use udclab_core::pipeline::{
    self, DatasetManifest, GeneratorSpec, KernelSpec, Profile, RESTORER_PERCEPTUAL_WEIGHT,
};
use udclab_core::selftest;

mod config;
use config::{DataSettings, FileConfig, GeneratorKind, KernelKind};

/// Working precision for every command.
type S = f32;

#[derive(Parser)]
#[command(
    name = "udclab",
    version,
    about = "Under-display-camera face data synthesis, model training, and restoration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a directory of clean PNG faces into training pairs.
    Synthesize(SynthesizeArgs),
    /// Adversarially train the degradation model on a manifest.
    TrainDmnet(TrainDmnetArgs),
    /// Train the dictionary-guided restorer on a manifest.
    TrainDgformer(TrainDgformerArgs),
    /// Map a directory of degraded images through a restorer checkpoint.
    Restore(RestoreArgs),
    /// Restore a manifest's pairs and write metric reports.
    Evaluate(EvaluateArgs),
    /// Run the built-in oracle-equivalence and invariant suites.
    Selftest,
}

/// Training scale presets.
#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    /// Smoke-run settings sized for a workstation.
    Desk,
    /// Full published settings.
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; command-line flags override file keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Image-level parallelism; 0 means one thread per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Training scale preset.
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Directory of clean PNG images.
    #[arg(long, value_name = "DIR")]
    clean_dir: PathBuf,
    /// Output directory for degraded images, landmarks, and the manifest.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Degradation source.
    #[arg(long, value_enum)]
    generator: Option<GeneratorKind>,
    /// Degradation-model checkpoint; required with --generator dmnet.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Transmission ratio in (0, 1] for the classical generator.
    #[arg(long)]
    alpha: Option<f64>,
    /// Classical blur kernel shape.
    #[arg(long, value_enum)]
    kernel: Option<KernelKind>,
    /// Odd kernel side for box and gaussian kernels.
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Gaussian kernel standard deviation in pixels.
    #[arg(long)]
    kernel_sigma: Option<f64>,
    /// Gaussian read-noise sigma; 0 disables noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainDmnetArgs {
    /// Dataset manifest produced by `synthesize`.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Total optimizer iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Save a checkpoint every N iterations; 0 saves only the final one.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from an earlier checkpoint of the same run.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Training-crop side in pixels.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Images per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr_init: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long)]
    lr_final: Option<f64>,
    /// Weight of the generator's perceptual term.
    #[arg(long)]
    perceptual_weight: Option<f64>,
    /// Weight of the generator's adversarial term.
    #[arg(long)]
    adversarial_weight: Option<f64>,
    /// Drop the channel-attention blocks.
    #[arg(long)]
    no_rcab: bool,
    /// Drop the spatial-attention blocks.
    #[arg(long)]
    no_rsab: bool,
    /// Drop cross-stage feature transfer.
    #[arg(long)]
    no_cssft: bool,
    /// Drop the fusion block between the stages.
    #[arg(long)]
    no_dfb: bool,
    /// Run only the second stage.
    #[arg(long)]
    single_stage: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainDgformerArgs {
    /// Dataset manifest produced by `synthesize`.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Total optimizer iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Save a checkpoint every N iterations; 0 saves only the final one.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from an earlier checkpoint of the same run.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Training-crop side in pixels.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Images per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr_init: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long)]
    lr_final: Option<f64>,
    /// Weight of the perceptual term.
    #[arg(long)]
    perceptual_weight: Option<f64>,
    /// Replace transformer blocks with plain residual convolutions.
    #[arg(long)]
    no_transformer: bool,
    /// Drop the shallow refinement stage.
    #[arg(long)]
    no_udcrm: bool,
    /// Drop the deep refinement stage.
    #[arg(long)]
    no_irm: bool,
    /// Drop the component dictionary.
    #[arg(long)]
    no_dtb: bool,
    /// Let guided attention attend to itself instead of the dictionary.
    #[arg(long)]
    dgma_self_attention: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct RestoreArgs {
    /// Restorer checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Directory of degraded PNG images, with optional
    /// `<stem>.landmarks.json` siblings.
    #[arg(long, value_name = "DIR")]
    input_dir: PathBuf,
    /// Directory for restored images.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Restorer checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset manifest to evaluate on.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Directory for report.json and report.csv.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Also write the restored images.
    #[arg(long)]
    save_restored: bool,
    #[command(flatten)]
    common: CommonArgs,
}

enum CliError {
    Usage(String),
    Run(udclab_core::Error),
}

impl From<udclab_core::Error> for CliError {
    fn from(e: udclab_core::Error) -> Self {
        CliError::Run(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synthesize(args) => synthesize(args),
        Command::TrainDmnet(args) => train_dmnet(args),
        Command::TrainDgformer(args) => train_dgformer(args),
        Command::Restore(args) => restore(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Selftest => run_selftest(),
    }
}

fn override_opt<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn synthesize(args: SynthesizeArgs) -> Result<(), CliError> {
    let file: FileConfig = config::load(args.common.config.as_deref())?;
    let mut data = DataSettings::default();
    data.apply_file(&file.data);
    override_opt(&mut data.generator, args.generator);
    if let Some(p) = args.checkpoint {
        data.checkpoint = Some(p);
    }
    override_opt(&mut data.alpha, args.alpha);
    override_opt(&mut data.kernel, args.kernel);
    override_opt(&mut data.kernel_size, args.kernel_size);
    override_opt(&mut data.kernel_sigma, args.kernel_sigma);
    override_opt(&mut data.noise_sigma, args.noise_sigma);
    override_opt(&mut data.seed, args.common.seed);
    override_opt(&mut data.workers, args.common.workers);

    let generator = match data.generator {
        GeneratorKind::Classical => GeneratorSpec::Classical {
            alpha: data.alpha,
            kernel: match data.kernel {
                KernelKind::Delta => KernelSpec::Delta,
                KernelKind::Box => KernelSpec::Box {
                    size: data.kernel_size,
                },
                KernelKind::Gaussian => KernelSpec::Gaussian {
                    size: data.kernel_size,
                    sigma: data.kernel_sigma,
                },
            },
            noise_sigma: data.noise_sigma,
        },
        GeneratorKind::Dmnet => GeneratorSpec::Dmnet {
            checkpoint: data.checkpoint.ok_or_else(|| {
                CliError::Usage("--generator dmnet needs --checkpoint".into())
            })?,
        },
    };

    let manifest = pipeline::synthesize_dataset::<S>(
        &args.clean_dir,
        &generator,
        &args.out_dir,
        data.seed,
        data.workers,
    )?;
    println!(
        "wrote {} pairs and {}",
        manifest.entries.len(),
        args.out_dir.join("manifest.json").display()
    );
    Ok(())
}

fn train_dmnet(args: TrainDmnetArgs) -> Result<(), CliError> {
    let file = config::load(args.common.config.as_deref())?;

    let mut model_cfg = DMNetConfig::default();
    file.dmnet.apply(&mut model_cfg);
    model_cfg.use_rcab &= !args.no_rcab;
    model_cfg.use_rsab &= !args.no_rsab;
    model_cfg.use_cssft &= !args.no_cssft;
    model_cfg.use_dfb &= !args.no_dfb;
    model_cfg.two_stage &= !args.single_stage;

    let mut train = pipeline::dmnet_train_defaults(args.common.profile.into());
    file.train.apply(&mut train);
    override_opt(&mut train.iterations, args.iterations);
    override_opt(&mut train.crop_size, args.crop_size);
    override_opt(&mut train.batch_size, args.batch_size);
    override_opt(&mut train.lr_init, args.lr_init);
    override_opt(&mut train.lr_final, args.lr_final);
    override_opt(&mut train.seed, args.common.seed);

    let mut weights = LossWeights::default();
    override_opt(&mut weights.perceptual, file.dmnet.perceptual_weight);
    override_opt(&mut weights.adversarial, file.dmnet.adversarial_weight);
    override_opt(&mut weights.perceptual, args.perceptual_weight);
    override_opt(&mut weights.adversarial, args.adversarial_weight);

    let every = args
        .checkpoint_every
        .or(file.train.checkpoint_every)
        .unwrap_or(0);

    let manifest = DatasetManifest::load(&args.manifest)?;
    let outcome = pipeline::train_dmnet::<S>(
        &manifest,
        &model_cfg,
        &train,
        weights,
        &args.out_dir,
        every,
        args.resume.as_deref(),
    )?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("training log: {}", outcome.log_path.display());
    Ok(())
}

fn train_dgformer(args: TrainDgformerArgs) -> Result<(), CliError> {
    let file = config::load(args.common.config.as_deref())?;

    let mut model_cfg = DGFormerConfig::default();
    file.dgformer.apply(&mut model_cfg);
    model_cfg.use_transformer &= !args.no_transformer;
    model_cfg.use_udcrm &= !args.no_udcrm;
    model_cfg.use_irm &= !args.no_irm;
    model_cfg.use_dtb &= !args.no_dtb;
    model_cfg.dgma_self_attention |= args.dgma_self_attention;

    let mut train = pipeline::dgformer_train_defaults(args.common.profile.into());
    file.train.apply(&mut train);
    override_opt(&mut train.iterations, args.iterations);
    override_opt(&mut train.crop_size, args.crop_size);
    override_opt(&mut train.batch_size, args.batch_size);
    override_opt(&mut train.lr_init, args.lr_init);
    override_opt(&mut train.lr_final, args.lr_final);
    override_opt(&mut train.seed, args.common.seed);

    let mu = args
        .perceptual_weight
        .or(file.dgformer.perceptual_weight)
        .unwrap_or(RESTORER_PERCEPTUAL_WEIGHT);
    let every = args
        .checkpoint_every
        .or(file.train.checkpoint_every)
        .unwrap_or(0);

    let manifest = DatasetManifest::load(&args.manifest)?;
    let outcome = pipeline::train_dgformer::<S>(
        &manifest,
        &model_cfg,
        &train,
        mu,
        &args.out_dir,
        every,
        args.resume.as_deref(),
    )?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("training log: {}", outcome.log_path.display());
    Ok(())
}

fn restore(args: RestoreArgs) -> Result<(), CliError> {
    let file = config::load(args.common.config.as_deref())?;
    let workers = args.common.workers.or(file.data.workers).unwrap_or(0);
    let n = pipeline::restore_directory::<S>(
        &args.checkpoint,
        &args.input_dir,
        &args.out_dir,
        workers,
    )?;
    println!("restored {n} images into {}", args.out_dir.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let file = config::load(args.common.config.as_deref())?;
    let workers = args.common.workers.or(file.data.workers).unwrap_or(0);
    let manifest = DatasetManifest::load(&args.manifest)?;
    let report = pipeline::evaluate::<S>(
        &args.checkpoint,
        &manifest,
        &args.out_dir,
        args.save_restored,
        workers,
    )?;
    println!(
        "mean over {} images: psnr {:.4} dB, ssim {:.6}, lmd {:.6}",
        report.rows.len(),
        report.mean.psnr,
        report.mean.ssim,
        report.mean.lmd
    );
    Ok(())
}

fn run_selftest() -> Result<(), CliError> {
    let reports = selftest::run_all();
    let mut failed = 0usize;
    for r in &reports {
        println!("{}: {}/{} passed", r.name, r.passed, r.total());
        for f in &r.failures {
            eprintln!("  FAIL {f}");
            failed += 1;
        }
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Run(udclab_core::Error::Contract(format!(
            "{failed} self-test checks failed"
        ))))
    }
}
