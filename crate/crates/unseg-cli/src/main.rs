use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unseg_cli::commands::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_predict, cmd_synth, cmd_train, AblateArgs, EvalArgs,
    GradcheckArgs, PredictArgs, SynthArgs, TrainArgs,
};
use unseg_cli::{exit_code_for, Precision};

/// Crack-segmentation engine: synthetic data, U-Net training, evaluation,
/// prediction overlays, augmentation ablations, and gradient checking.
///
/// Set UNSEG_PRECISION=f64 to run the whole engine in 64-bit floats
/// (gradient checking always uses 64-bit internally).
#[derive(Parser)]
#[command(name = "unseg", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crack dataset (images, masks, splits).
    Synth(SynthCli),
    /// Train a U-Net and save the best checkpoints.
    Train(TrainCli),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalCli),
    /// Predict a crack mask and a red blend overlay for one image.
    Predict(PredictCli),
    /// Train one model per augmentation transform and compare.
    Ablate(AblateCli),
    /// Finite-difference every op and an end-to-end model (64-bit).
    Gradcheck(GradcheckCli),
}

#[derive(Args)]
struct SynthCli {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Total number of samples; split roughly 70/15/15.
    #[arg(long, default_value_t = 24)]
    n: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Background texture: noise, marble_veins, or plain.
    #[arg(long, default_value = "marble_veins")]
    texture: String,
    /// Cracks per image (inclusive range).
    #[arg(long, default_value_t = 1)]
    cracks_min: usize,
    #[arg(long, default_value_t = 3)]
    cracks_max: usize,
    /// Stroke width in pixels (inclusive range).
    #[arg(long, default_value_t = 1)]
    width_min: usize,
    #[arg(long, default_value_t = 2)]
    width_max: usize,
}

#[derive(Args)]
struct TrainCli {
    /// Dataset root (images/, masks/, splits/).
    #[arg(long)]
    data: PathBuf,
    /// Encoder preset: resnet50, resnet101, convnextv2-base, convnextv2-huge,
    /// resnet-mini, convnext-mini (plus *-micro gradcheck fixtures).
    #[arg(long)]
    preset: String,
    /// Square input size; defaults to the preset's native size.
    #[arg(long)]
    size: Option<usize>,
    /// Augmentation: none, full, or single:<transform>.
    #[arg(long, default_value = "none")]
    augment: String,
    /// Force the single transform to fire on every sample.
    #[arg(long, default_value_t = false)]
    force_p1: bool,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    /// Batch size; defaults to the preset's.
    #[arg(long)]
    bs: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Final learning rate; defaults to lr / 100.
    #[arg(long)]
    lr_min: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 2)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, report.csv, run.log.
    #[arg(long)]
    out: PathBuf,
    /// Report train-split Dice every N epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    eval_train_every: usize,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bs: Option<usize>,
    /// Optional directory for report.csv / run.log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Crack probability threshold (inclusive).
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Red tint strength of the overlay; 0 reproduces the resized input.
    #[arg(long, default_value_t = 0.5)]
    blend_alpha: f64,
}

#[derive(Args)]
struct AblateCli {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "resnet-mini")]
    preset: String,
    #[arg(long)]
    size: Option<usize>,
    /// 'all' or a comma-separated transform list.
    #[arg(long, default_value = "all")]
    transforms: String,
    /// Fire the single transform on every sample instead of at its branch
    /// probability.
    #[arg(long, default_value_t = false)]
    force_p1: bool,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long)]
    bs: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 12)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCli {
    /// End-to-end fixture preset (a 2-stage micro model).
    #[arg(long, default_value = "resnet-micro")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let precision = Precision::from_env();
    let outcome: Result<bool, unseg::error::Error> = match cli.command {
        Command::Synth(a) => cmd_synth(&SynthArgs {
            out: a.out,
            n: a.n,
            size: a.size,
            seed: a.seed,
            texture: a.texture,
            cracks: (a.cracks_min, a.cracks_max),
            width: (a.width_min, a.width_max),
        })
        .map(|()| true),
        Command::Train(a) => {
            let args = TrainArgs {
                data: a.data,
                preset: a.preset,
                size: a.size,
                augment: a.augment,
                force_p1: a.force_p1,
                epochs: a.epochs,
                batch_size: a.bs,
                lr: a.lr,
                lr_min: a.lr_min,
                patience: a.patience,
                seed: a.seed,
                out: a.out,
                eval_train_every: a.eval_train_every,
            };
            match precision {
                Precision::F32 => cmd_train::<f32>(&args),
                Precision::F64 => cmd_train::<f64>(&args),
            }
            .map(|()| true)
        }
        Command::Eval(a) => {
            let args = EvalArgs {
                data: a.data,
                split: a.split,
                checkpoint: a.checkpoint,
                batch_size: a.bs,
                out: a.out,
            };
            match precision {
                Precision::F32 => cmd_eval::<f32>(&args),
                Precision::F64 => cmd_eval::<f64>(&args),
            }
            .map(|()| true)
        }
        Command::Predict(a) => {
            let args = PredictArgs {
                checkpoint: a.checkpoint,
                image: a.image,
                out: a.out,
                threshold: a.threshold,
                blend_alpha: a.blend_alpha,
            };
            match precision {
                Precision::F32 => cmd_predict::<f32>(&args),
                Precision::F64 => cmd_predict::<f64>(&args),
            }
            .map(|()| true)
        }
        Command::Ablate(a) => {
            let args = AblateArgs {
                data: a.data,
                preset: a.preset,
                size: a.size,
                transforms: a.transforms,
                force_p1: a.force_p1,
                epochs: a.epochs,
                batch_size: a.bs,
                lr: a.lr,
                patience: a.patience,
                seed: a.seed,
                out: a.out,
            };
            match precision {
                Precision::F32 => cmd_ablate::<f32>(&args),
                Precision::F64 => cmd_ablate::<f64>(&args),
            }
        }
        Command::Gradcheck(a) => cmd_gradcheck(&GradcheckArgs {
            preset: a.preset,
            seed: a.seed,
        }),
    };

    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        // completed with verification failures (gradcheck, partial ablation)
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
