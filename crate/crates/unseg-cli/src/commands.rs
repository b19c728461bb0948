//! The six subcommands: synth, train, eval, predict, ablate, gradcheck.

use std::path::PathBuf;

use unseg::augment::{transform_names, AugmentMode, AugmentSpec, ImageBuf, MaskBuf};
use unseg::data::synth::{generate_synthetic, SynthSpec, TextureKind};
use unseg::data::{
    load_image_rgb, image_to_tensor_slab, resize_image_bilinear, DatasetManifest,
};
use unseg::elem::Element;
use unseg::encoders::{preset, preset_names, EncoderPreset};
use unseg::error::{Error, Result};
use unseg::gradcheck::{op_suite, unet_end_to_end_check, OpCheck, TOLERANCE};
use unseg::metrics::record_line;
use unseg::tensor::Tensor;
use unseg::train::{evaluate, fit, Checkpoint, TrainConfig};
use unseg::unet::{UNet, UNetConfig};

use crate::record::RunRecord;
use crate::report::{ablation_table, eval_table, AblationRow};

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub texture: String,
    pub cracks: (usize, usize),
    pub width: (usize, usize),
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.n < 3 {
        return Err(usage("--n must be at least 3 (one sample per split)"));
    }
    if args.size < 8 {
        return Err(usage("--size must be at least 8"));
    }
    let texture = TextureKind::parse(&args.texture)
        .ok_or_else(|| usage(format!("unknown texture '{}'", args.texture)))?;
    let mut spec = SynthSpec::with_total(args.n, args.size, args.seed);
    spec.texture = texture;
    spec.cracks_per_image = args.cracks;
    spec.crack_width = args.width;
    let manifest = generate_synthetic(&spec, &args.out)?;

    let mut record = RunRecord::new(
        "synth",
        vec![
            ("out".into(), args.out.display().to_string()),
            ("n".into(), args.n.to_string()),
            ("size".into(), args.size.to_string()),
            ("seed".into(), args.seed.to_string()),
            ("texture".into(), args.texture.clone()),
        ],
    );
    record.push_artifact(&args.out);
    record.write(&args.out)?;
    println!(
        "wrote {} train / {} valid / {} test samples at {}px under {}",
        manifest.train.len(),
        manifest.valid.len(),
        manifest.test.len(),
        args.size,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub preset: String,
    pub size: Option<usize>,
    pub augment: String,
    pub force_p1: bool,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub lr_min: Option<f64>,
    pub patience: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub eval_train_every: usize,
}

fn resolve_augment(arg: &str, force_p1: bool, seed: u64) -> Result<AugmentSpec> {
    AugmentSpec::parse(arg, force_p1, seed).ok_or_else(|| {
        usage(format!(
            "unknown augment '{arg}' (use none, full, or single:<{}>)",
            transform_names().join("|")
        ))
    })
}

fn resolve_preset(name: &str) -> Result<EncoderPreset> {
    preset(name).map_err(|_| {
        usage(format!(
            "unknown preset '{name}' (available: {})",
            preset_names().join(", ")
        ))
    })
}

fn augment_label(spec: &AugmentSpec) -> String {
    match &spec.mode {
        AugmentMode::None => "none".to_string(),
        AugmentMode::FullPipeline => "full".to_string(),
        AugmentMode::Single { name, force } => {
            if *force {
                format!("single:{name}!p1")
            } else {
                format!("single:{name}")
            }
        }
    }
}

pub fn cmd_train<E: Element>(args: &TrainArgs) -> Result<()> {
    let preset = resolve_preset(&args.preset)?;
    let size = args.size.unwrap_or(preset.default_input_size);
    let batch_size = args.batch_size.unwrap_or(preset.default_batch_size);
    let augment = resolve_augment(&args.augment, args.force_p1, args.seed)?;
    let manifest = DatasetManifest::load(&args.data)?;

    let config = UNetConfig::for_preset(preset, Some((size, size)));
    let mut model = UNet::<E>::new(config, args.seed)?;
    println!(
        "training {} at {size}px ({} parameters, batch {batch_size}, lr {} -> {})",
        args.preset,
        model.param_count(),
        args.lr,
        args.lr_min.unwrap_or(args.lr / 100.0),
    );

    let mut cfg = TrainConfig::new(args.epochs, batch_size, args.lr, args.seed);
    if let Some(lr_min) = args.lr_min {
        cfg.lr_min = lr_min;
    }
    cfg.patience = args.patience;
    cfg.augment = augment.clone();
    cfg.checkpoint_dir = Some(args.out.join("checkpoints"));
    cfg.eval_train_every = args.eval_train_every;

    let report = fit(&mut model, &manifest, &cfg)?;
    print!("{}", report.table());
    println!(
        "stopped after epoch {} ({}); best val loss {:.4} at epoch {}",
        report.stopped_epoch,
        if report.stopped_early {
            "early stopping"
        } else {
            "epoch budget"
        },
        report.best_val_loss.value,
        report.best_val_loss.epoch
    );
    // The per-epoch table carries wall-clock timings, so it lives beside the
    // deterministic report.csv rather than inside it.
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("epochs.txt"), report.table())?;

    let label = augment_label(&augment);
    let mut record = RunRecord::new(
        "train",
        vec![
            ("data".into(), args.data.display().to_string()),
            ("preset".into(), args.preset.clone()),
            ("size".into(), size.to_string()),
            ("augment".into(), label.clone()),
            ("epochs".into(), args.epochs.to_string()),
            ("bs".into(), batch_size.to_string()),
            ("lr".into(), format!("{}", args.lr)),
            ("lr_min".into(), format!("{}", cfg.lr_min)),
            ("patience".into(), args.patience.to_string()),
            ("seed".into(), args.seed.to_string()),
        ],
    );
    record.push_record(record_line(
        "valid",
        &args.preset,
        &label,
        report.final_val_loss,
        &report.final_micro,
    ));
    record.push_record(record_line(
        "valid",
        &args.preset,
        &label,
        report.final_val_loss,
        &report.final_per_image,
    ));
    for slot in [
        &report.best_val_loss,
        &report.best_dice,
        &report.best_jaccard,
    ] {
        if let Some(path) = &slot.path {
            record.push_artifact(path);
        }
    }
    record.write(&args.out)?;
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub data: PathBuf,
    pub split: String,
    pub checkpoint: PathBuf,
    pub batch_size: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval<E: Element>(args: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let snapshot = Checkpoint::load(&args.checkpoint)?;
    let mut model: UNet<E> = snapshot.build_model()?;
    let stems = manifest.split(&args.split)?;
    if stems.is_empty() {
        return Err(Error::EmptySplit(args.split.clone()));
    }
    let samples: Vec<_> = stems
        .iter()
        .map(|s| unseg::data::load_sample_native(&manifest, s))
        .collect::<Result<_>>()?;
    let batch_size = args
        .batch_size
        .unwrap_or(model.config.preset.default_batch_size);
    let outcome = evaluate(&mut model, &samples, batch_size)?;

    print!(
        "{}",
        eval_table(&args.split, outcome.loss, &outcome.micro, &outcome.per_image)
    );

    let mut record = RunRecord::new(
        "eval",
        vec![
            ("data".into(), args.data.display().to_string()),
            ("split".into(), args.split.clone()),
            ("checkpoint".into(), args.checkpoint.display().to_string()),
        ],
    );
    let model_name = snapshot.preset.clone();
    record.push_record(record_line(
        &args.split,
        &model_name,
        "none",
        outcome.loss,
        &outcome.micro,
    ));
    record.push_record(record_line(
        &args.split,
        &model_name,
        "none",
        outcome.loss,
        &outcome.per_image,
    ));
    if let Some(out) = &args.out {
        record.write(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- predict

#[derive(Clone, Debug)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub threshold: f64,
    pub blend_alpha: f64,
}

/// Tint crack pixels red over the (resized) input image.
fn blend_overlay(image: &ImageBuf, mask: &MaskBuf, alpha: f64) -> ImageBuf {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if mask.get(x, y) != 0 {
                let px = image.get(x, y);
                let blend = |v: u8, target: f64| -> u8 {
                    ((1.0 - alpha) * v as f64 + alpha * target).round().clamp(0.0, 255.0) as u8
                };
                out.put(x, y, [blend(px[0], 255.0), blend(px[1], 0.0), blend(px[2], 0.0)]);
            }
        }
    }
    out
}

pub fn cmd_predict<E: Element>(args: &PredictArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) || !(0.0..=1.0).contains(&args.blend_alpha) {
        return Err(usage("--threshold and --blend-alpha must lie in [0, 1]"));
    }
    let snapshot = Checkpoint::load(&args.checkpoint)?;
    let mut model: UNet<E> = snapshot.build_model()?;
    let (h, w) = model.config.input_size;

    let native = load_image_rgb(&args.image)?;
    let resized = resize_image_bilinear(&native, w, h);
    let mut slab = vec![E::ZERO; 3 * h * w];
    image_to_tensor_slab(&resized, &mut slab);
    let tensor = Tensor::new(vec![1, 3, h, w], slab)?;

    let mask = model.predict_mask(&tensor, args.threshold)?;
    let overlay = blend_overlay(&resized, &mask, args.blend_alpha);

    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".to_string());
    std::fs::create_dir_all(&args.out)?;
    let mask_path = args.out.join(format!("{stem}-mask-{h}-{w}.png"));
    let blend_path = args.out.join(format!("{stem}-blend-{h}-{w}.png"));
    unseg::data::save_mask_png(&mask_path, &mask)?;
    unseg::data::save_image_png(&blend_path, &overlay)?;

    let mut record = RunRecord::new(
        "predict",
        vec![
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("image".into(), args.image.display().to_string()),
            ("threshold".into(), format!("{}", args.threshold)),
            ("blend_alpha".into(), format!("{}", args.blend_alpha)),
        ],
    );
    record.push_artifact(&mask_path);
    record.push_artifact(&blend_path);
    record.write(&args.out)?;
    println!(
        "wrote {} and {} ({} crack pixels)",
        mask_path.display(),
        blend_path.display(),
        mask.data.iter().filter(|&&v| v != 0).count()
    );
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub data: PathBuf,
    pub preset: String,
    pub size: Option<usize>,
    pub transforms: String,
    pub force_p1: bool,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// One model per transform plus a no-augmentation baseline; emits validation
/// and test tables sorted by Dice. A failed run is recorded and skipped;
/// partial completion exits nonzero.
pub fn cmd_ablate<E: Element>(args: &AblateArgs) -> Result<bool> {
    let names: Vec<String> = if args.transforms == "all" {
        transform_names().iter().map(|s| s.to_string()).collect()
    } else {
        let list: Vec<String> = args
            .transforms
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if list.is_empty() {
            return Err(usage("--transforms needs 'all' or a comma-separated list"));
        }
        for name in &list {
            if !transform_names().contains(&name.as_str()) {
                return Err(usage(format!("unknown transform '{name}'")));
            }
        }
        list
    };
    let preset = resolve_preset(&args.preset)?;
    let size = args.size.unwrap_or(preset.default_input_size);
    let batch_size = args.batch_size.unwrap_or(preset.default_batch_size);
    let manifest = DatasetManifest::load(&args.data)?;

    let mut record = RunRecord::new(
        "ablate",
        vec![
            ("data".into(), args.data.display().to_string()),
            ("preset".into(), args.preset.clone()),
            ("size".into(), size.to_string()),
            ("transforms".into(), args.transforms.clone()),
            ("epochs".into(), args.epochs.to_string()),
            ("bs".into(), batch_size.to_string()),
            ("lr".into(), format!("{}", args.lr)),
            ("seed".into(), args.seed.to_string()),
        ],
    );

    let mut valid_rows: Vec<AblationRow> = Vec::new();
    let mut test_rows: Vec<AblationRow> = Vec::new();
    let mut failures: Vec<(String, Error)> = Vec::new();

    let mut arms: Vec<(String, AugmentSpec)> =
        vec![("none".to_string(), AugmentSpec::none())];
    arms.extend(names.iter().map(|n| {
        (
            format!("single:{n}"),
            AugmentSpec::single(n.clone(), args.force_p1, args.seed),
        )
    }));

    for (label, augment) in arms {
        match run_ablation_arm::<E>(
            &manifest, &preset, size, batch_size, args, &augment, &label,
        ) {
            Ok((valid_row, test_row, records)) => {
                valid_rows.push(valid_row);
                test_rows.push(test_row);
                for r in records {
                    record.push_record(r);
                }
            }
            Err(err) => {
                eprintln!("ablation arm '{label}' failed: {err}");
                failures.push((label, err));
            }
        }
    }

    print!("{}", ablation_table("validation metrics", &valid_rows));
    println!();
    print!("{}", ablation_table("test metrics", &test_rows));

    for (label, err) in &failures {
        record.push_record(format!("# failed arm {label}: {err}"));
    }
    record.write(&args.out)?;
    Ok(failures.is_empty())
}

#[allow(clippy::too_many_arguments)]
fn run_ablation_arm<E: Element>(
    manifest: &DatasetManifest,
    preset: &EncoderPreset,
    size: usize,
    batch_size: usize,
    args: &AblateArgs,
    augment: &AugmentSpec,
    label: &str,
) -> Result<(AblationRow, AblationRow, Vec<String>)> {
    let config = UNetConfig::for_preset(preset.clone(), Some((size, size)));
    let mut model = UNet::<E>::new(config, args.seed)?;
    let mut cfg = TrainConfig::new(args.epochs, batch_size, args.lr, args.seed);
    cfg.patience = args.patience;
    cfg.augment = augment.clone();
    cfg.checkpoint_dir = Some(args.out.join("checkpoints").join(label.replace(':', "-")));

    let report = fit(&mut model, &manifest, &cfg)?;
    println!(
        "[{label}] best val loss {:.4} at epoch {}",
        report.best_val_loss.value, report.best_val_loss.epoch
    );

    // `fit` leaves the best-by-val-loss weights in the model.
    let eval_split = |model: &mut UNet<E>, split: &str| -> Result<(f64, _, _)> {
        let samples: Vec<_> = manifest
            .split(split)?
            .iter()
            .map(|s| unseg::data::load_sample_native(manifest, s))
            .collect::<Result<_>>()?;
        let outcome = evaluate(model, &samples, batch_size)?;
        Ok((outcome.loss, outcome.micro, outcome.per_image))
    };
    let (val_loss, val_micro, val_per) = eval_split(&mut model, "valid")?;
    let (test_loss, test_micro, test_per) = eval_split(&mut model, "test")?;

    let records = vec![
        record_line("valid", &args.preset, label, val_loss, &val_micro),
        record_line("valid", &args.preset, label, val_loss, &val_per),
        record_line("test", &args.preset, label, test_loss, &test_micro),
        record_line("test", &args.preset, label, test_loss, &test_per),
    ];
    Ok((
        AblationRow {
            augmentation: label.to_string(),
            loss: val_loss,
            miou: val_micro.miou,
            dice: val_micro.dice,
            jaccard: val_micro.jaccard,
        },
        AblationRow {
            augmentation: label.to_string(),
            loss: test_loss,
            miou: test_micro.miou,
            dice: test_micro.dice,
            jaccard: test_micro.jaccard,
        },
        records,
    ))
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    pub preset: String,
    pub seed: u64,
}

/// Finite-difference the op set and an end-to-end model; prints one line per
/// check and returns whether everything stayed under tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    resolve_preset(&args.preset)?;
    let mut checks: Vec<OpCheck> = op_suite(args.seed);
    checks.push(unet_end_to_end_check(&args.preset, args.seed)?);

    let mut all_ok = true;
    println!("check                          | max rel err | status");
    println!("-------------------------------+-------------+-------");
    for c in &checks {
        let ok = c.passed();
        all_ok &= ok;
        println!(
            "{:<30} | {:11.3e} | {}",
            c.name,
            c.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, tolerance {TOLERANCE:.0e}: {}",
        checks.len(),
        if all_ok { "all passed" } else { "FAILURES" }
    );
    Ok(all_ok)
}
