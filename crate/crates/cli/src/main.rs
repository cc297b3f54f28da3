use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dbdenoise::data::{add_awgn, make_dataset, read_pgm, write_pgm, DatasetSpec, GrayImage, NoiseSpec};
use dbdenoise::eval::{diff_image, evaluate};
use dbdenoise::fsutil::write_atomic;
use dbdenoise::metrics;
use dbdenoise::model::{checkpoint_digest, load_checkpoint, save_checkpoint};
use dbdenoise::training::{train_stage1, train_stage2, Stage};
use dbdenoise::{selftest, Error, ModelConfig, Network, Tensor, Variant};

mod config;

use config::{FileConfig, TrainRun};

const EXIT_USAGE: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_CHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "dbdenoise", version, about = "Dense-block residual denoising CNN")]
struct Cli {
    /// Worker threads for convolution (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Disable parallel execution paths.
    #[arg(long, global = true)]
    bit_exact: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trainable parameter count and per-layer breakdown.
    CountParams {
        /// v1, v2 or dncnn_ref.
        variant: String,
        /// Fail (exit 5) unless the total is within 1% of this value.
        #[arg(long)]
        expect: Option<usize>,
        /// Override the number of dense-block pairs.
        #[arg(long)]
        pairs: Option<usize>,
        /// Print only the total.
        #[arg(long)]
        quiet: bool,
    },
    /// Train stage 1 (all layers, MSE) or stage 2 (final layer, MS-SSIM + MSE).
    Train(Box<TrainArgs>),
    /// Denoise one PGM image.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Corrupt the input with AWGN of this sigma first and report PSNR.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the difference image (denoised minus input) here.
        #[arg(long)]
        emit_diff: Option<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        diff_gain: f64,
        /// Write the noisy image here (with --sigma).
        #[arg(long)]
        emit_noisy: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every PGM in a directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the table and delimited rows to this file as well.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the built-in verification battery.
    Selftest,
    /// Build a patch dataset and print its manifest hash.
    Manifest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        noise_seed: u64,
        #[arg(long, default_value_t = 2)]
        shuffle_seed: u64,
        #[arg(long, default_value_t = 40)]
        patch_size: usize,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        /// Write the full manifest here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training image directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation image directory (40x40 patches, stride 40).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Checkpoint to continue from; required for stage 2.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training log path (default: <out>.log).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// Two dense-block pairs.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Add all eight flips/rotations of every patch.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    max_patches: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Seed of the batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Stage 2: retrain every layer instead of the final convolution.
    #[arg(long)]
    retrain_all: bool,
}

enum Failure {
    Usage(String),
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Pgm { .. }
        | Error::CheckpointFormat(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointShape { .. }
        | Error::Dataset(_)
        | Error::Io { .. } => EXIT_FORMAT,
        Error::InvalidArgument(_) | Error::NoMatchingParameters(_) | Error::NothingToTrain => EXIT_USAGE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    if cli.bit_exact {
        dbdenoise::tensor::set_parallel(false);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::CountParams {
            variant,
            expect,
            pairs,
            quiet,
        } => count_params(&variant, expect, pairs, quiet),
        Command::Train(args) => train(*args),
        Command::Denoise {
            checkpoint,
            input,
            output,
            sigma,
            seed,
            emit_diff,
            diff_gain,
            emit_noisy,
        } => denoise(
            &checkpoint,
            &input,
            &output,
            sigma,
            seed,
            emit_diff.as_deref(),
            diff_gain,
            emit_noisy.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            data,
            sigma,
            seed,
            report,
        } => eval(&checkpoint, &data, sigma, seed, report.as_deref()),
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure::Check(format!(
                    "{failed} of {} selftest checks failed",
                    results.len()
                )));
            }
            println!("all {} checks passed", results.len());
            Ok(())
        }
        Command::Manifest {
            data,
            sigma,
            noise_seed,
            shuffle_seed,
            patch_size,
            stride,
            output,
        } => {
            let spec = DatasetSpec {
                patch_size,
                stride,
                shuffle_seed,
                ..DatasetSpec::new(NoiseSpec::new(sigma, noise_seed)?)
            };
            let set = make_dataset::<f32>(&data, &spec)?;
            println!("patches {}", set.len());
            println!("manifest_sha256 {}", set.manifest_hash());
            if let Some(path) = output {
                write_atomic(&path, set.manifest().as_bytes())?;
            }
            Ok(())
        }
    }
}

fn count_params(variant: &str, expect: Option<usize>, pairs: Option<usize>, quiet: bool) -> Result<(), Failure> {
    let variant = config::parse_variant(variant).map_err(Failure::Usage)?;
    let mut cfg = ModelConfig::for_variant(variant);
    if let Some(p) = pairs {
        cfg.pairs = p;
    }
    let net = Network::<f32>::build(cfg, 0)?;
    let count = net.count_parameters();
    if !quiet {
        println!(
            "# variant {variant} pairs {} growth {} base {}",
            cfg.pairs, cfg.growth_rate, cfg.base_channels
        );
        for (layer, n) in &count.breakdown {
            println!("{layer:<32} {n:>9}");
        }
        if variant != Variant::DncnnRef {
            let reference = Network::<f32>::build(ModelConfig::dncnn_ref(), 0)?
                .count_parameters()
                .total;
            println!(
                "reduction vs dncnn_ref ({reference}): {:.3}",
                1.0 - count.total as f64 / reference as f64
            );
        }
    }
    println!("total {}", count.total);
    if let Some(n) = expect {
        let deviation = (count.total as f64 - n as f64).abs() / n as f64;
        println!("expected {n}, deviation {:.4}%", deviation * 100.0);
        if deviation > 0.01 {
            return Err(Failure::Check(format!("{} is more than 1% away from {n}", count.total)));
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let stage = if args.stage == 1 { Stage::Stage1 } else { Stage::Stage2 };
    if stage == Stage::Stage2 && args.resume.is_none() {
        return Err(Failure::Usage("stage 2 requires --resume <stage-1 checkpoint>".into()));
    }
    let file = match &args.config {
        Some(path) => FileConfig::load(path).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    let mut run = TrainRun::resolve(stage, &file, &args).map_err(Failure::Usage)?;
    let mut net = match &args.resume {
        Some(path) => {
            let net = load_checkpoint::<f32>(path)?;
            run.model = *net.config();
            net
        }
        None => Network::<f32>::build(run.model, run.init_seed)?,
    };
    print!("{}", run.echo());
    if let Some(path) = &args.resume {
        println!("# resumed from {} (sha256 {})", path.display(), checkpoint_digest(&net));
    }
    let noise = NoiseSpec::new(run.sigma, run.noise_seed)?;
    let spec = DatasetSpec {
        patch_size: run.patch_size,
        stride: run.stride,
        augment: run.augment,
        shuffle_seed: run.shuffle_seed,
        max_patches: run.max_patches,
        ..DatasetSpec::new(noise)
    };
    let data = make_dataset::<f32>(&run.train_dir, &spec)?;
    println!(
        "# training patches {} manifest_sha256 {}",
        data.len(),
        data.manifest_hash()
    );
    let validation = match &run.val_dir {
        Some(dir) => {
            let vspec = DatasetSpec {
                stride: run.patch_size,
                augment: dbdenoise::data::Augment::None,
                max_patches: None,
                noise: noise.with_seed(run.noise_seed ^ 0x9e37_79b9_7f4a_7c15),
                ..spec
            };
            Some(make_dataset::<f32>(dir, &vspec)?)
        }
        None => None,
    };
    let result = match stage {
        Stage::Stage1 => train_stage1(&mut net, &data, validation.as_ref(), &run.train),
        Stage::Stage2 => train_stage2(&mut net, &data, validation.as_ref(), &run.train),
    };
    let log = result?;
    for e in &log.epochs {
        let mut line = format!("epoch {} mean_loss {:.6e} time {:.1}s", e.epoch, e.mean_loss, e.seconds);
        if let Some(v) = e.validation {
            line += &format!(
                " val_psnr {:.3} (noisy {:.3}) val_ssim {:.4} val_ms_ssim {:.4}",
                v.psnr, v.noisy_psnr, v.ssim, v.ms_ssim
            );
        }
        println!("{line}");
    }
    save_checkpoint(&net, &args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    write_atomic(&log_path, log.to_text().as_bytes())?;
    println!("checkpoint {} sha256 {}", args.out.display(), checkpoint_digest(&net));
    println!("log {}", log_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn denoise(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    sigma: Option<f64>,
    seed: u64,
    emit_diff: Option<&Path>,
    diff_gain: f64,
    emit_noisy: Option<&Path>,
) -> Result<(), Failure> {
    let net = load_checkpoint::<f32>(checkpoint)?;
    let image = read_pgm(input)?;
    println!(
        "# checkpoint {} sha256 {}",
        checkpoint.display(),
        checkpoint_digest(&net)
    );
    println!("# input {} ({}x{})", input.display(), image.width(), image.height());
    let clean: Tensor<f32> = image.to_tensor();
    let noisy = match sigma {
        Some(s) => {
            let noise = NoiseSpec::new(s, seed)?;
            println!("# sigma {s} seed {seed}");
            add_awgn(&clean, noise)?
        }
        None => clean.clone(),
    };
    let denoised = net.denoise(&noisy)?;
    let out_image = GrayImage::from_tensor(&denoised)?;
    if sigma.is_some() {
        let clip = |t: &Tensor<f32>| t.map(|v| v.clamp(0.0, 1.0));
        println!("noisy_psnr {:.4} dB (unclipped)", metrics::psnr(&clean, &noisy, 1.0)?);
        println!(
            "noisy_psnr_clipped {:.4} dB",
            metrics::psnr(&clean, &clip(&noisy), 1.0)?
        );
        println!("denoised_psnr {:.4} dB", metrics::psnr(&clean, &clip(&denoised), 1.0)?);
        let exported: Tensor<f32> = out_image.to_tensor();
        println!("denoised_psnr_8bit {:.4} dB", metrics::psnr(&clean, &exported, 1.0)?);
        if let Some(path) = emit_noisy {
            write_pgm(&GrayImage::from_tensor(&noisy)?, path)?;
        }
    }
    let diff = match emit_diff {
        Some(_) => Some(diff_image(&clean, &out_image.to_tensor::<f32>(), diff_gain)?),
        None => None,
    };
    write_pgm(&out_image, output)?;
    println!("wrote {}", output.display());
    if let (Some(path), Some(diff)) = (emit_diff, diff) {
        write_pgm(&diff, path)?;
        println!("wrote {} (gain {diff_gain})", path.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, sigma: f64, seed: u64, report_path: Option<&Path>) -> Result<(), Failure> {
    let net = load_checkpoint::<f32>(checkpoint)?;
    let mut report = evaluate(&net, data, NoiseSpec::new(sigma, seed)?)?;
    report.checkpoint_digest = Some(checkpoint_digest(&net));
    let text = format!("{}\n{}", report.to_table(), report.to_delimited());
    print!("{text}");
    if let Some(path) = report_path {
        write_atomic(path, text.as_bytes())?;
    }
    if report.rows.is_empty() {
        return Err(Failure::Lib(Error::Dataset(format!(
            "no image in {} could be evaluated",
            data.display()
        ))));
    }
    Ok(())
}
