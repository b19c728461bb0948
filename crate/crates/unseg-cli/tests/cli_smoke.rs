//! End-to-end binary tests: exit codes, file outputs, replayability.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unseg"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, n: usize, size: usize, seed: u64) {
    let out = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_code(&out, 0);
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn synth_twice_produces_identical_trees() {
    let a = tmp("synth-a");
    let b = tmp("synth-b");
    synth(&a, 16, 32, 7);
    synth(&b, 16, 32, 7);
    // run.log carries a wall-clock run id; everything else must match.
    let strip = |files: Vec<(String, Vec<u8>)>| {
        files
            .into_iter()
            .filter(|(name, _)| name != "run.log")
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(dir_bytes(&a)), strip(dir_bytes(&b)));
}

#[test]
fn synth_rejects_tiny_n_with_usage_exit() {
    let dir = tmp("synth-tiny");
    let out = run(&["synth", "--out", dir.to_str().unwrap(), "--n", "0"]);
    assert_code(&out, 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["synth", "--frobnicate"]);
    assert_code(&out, 2);
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let data = tmp("usage-preset");
    synth(&data, 8, 32, 0);
    let out_dir = tmp("usage-preset-out");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--preset",
        "resnet-9000",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let out_dir = tmp("io-missing-out");
    let out = run(&[
        "train",
        "--data",
        "/nonexistent-dataset",
        "--preset",
        "resnet-micro",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

#[test]
fn bad_checkpoint_magic_is_an_io_error() {
    let dir = tmp("io-magic");
    let ckpt = dir.join("bogus.ckpt");
    std::fs::write(&ckpt, b"XXXX this is not a checkpoint").unwrap();
    let data = tmp("io-magic-data");
    synth(&data, 8, 32, 0);
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

#[test]
fn train_eval_predict_round_trip() {
    let data = tmp("flow-data");
    synth(&data, 10, 32, 3);
    let out_dir = tmp("flow-out");

    // Two quick epochs on the micro fixture: checks wiring, not quality.
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--preset",
        "resnet-micro",
        "--size",
        "32",
        "--epochs",
        "2",
        "--bs",
        "4",
        "--seed",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for column in ["train loss", "val loss", "miou", "dice", "jaccard", "time/epoch"] {
        assert!(stdout.contains(column), "missing column {column}:\n{stdout}");
    }

    let ckpt = out_dir.join("checkpoints/best-val-loss.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("report.csv").exists());
    assert!(out_dir.join("run.log").exists());
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("split,model,augment,loss,miou,dice,jaccard,aggregation"));
    assert!(csv.contains(",micro"));
    assert!(csv.contains(",per_image_mean"));

    // eval prints both aggregations
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("micro"));
    assert!(stdout.contains("per_image_mean"));
    assert!(stdout.contains("test loss"));

    // predict writes mask + blend with the size-suffixed naming convention
    let image = data.join("images").join("synth-00000.png");
    let pred_dir = tmp("flow-pred");
    let out = run(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(pred_dir.join("synth-00000-mask-32-32.png").exists());
    assert!(pred_dir.join("synth-00000-blend-32-32.png").exists());
}

#[test]
fn predict_with_zero_alpha_reproduces_the_resized_input() {
    let data = tmp("alpha-data");
    synth(&data, 8, 32, 5);
    let out_dir = tmp("alpha-out");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--preset",
        "resnet-micro",
        "--size",
        "32",
        "--epochs",
        "1",
        "--bs",
        "4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let ckpt = out_dir.join("checkpoints/best-val-loss.ckpt");

    let image = data.join("images").join("synth-00001.png");
    let pred_dir = tmp("alpha-pred");
    let out = run(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
        "--blend-alpha",
        "0",
    ]);
    assert_code(&out, 0);

    // The input is already 32x32, so the blend at alpha 0 must be the input
    // pixels byte for byte.
    let blend = image::open(pred_dir.join("synth-00001-blend-32-32.png"))
        .unwrap()
        .to_rgb8();
    let original = image::open(&image).unwrap().to_rgb8();
    assert_eq!(blend.as_raw(), original.as_raw());
}

#[test]
fn ablate_emits_sorted_tables_and_row_counts() {
    let data = tmp("ablate-data");
    synth(&data, 10, 32, 11);
    let out_dir = tmp("ablate-out");
    let out = run(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--preset",
        "resnet-micro",
        "--size",
        "32",
        "--transforms",
        "transpose,blur",
        "--epochs",
        "1",
        "--bs",
        "4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);

    assert!(stdout.contains("validation metrics"));
    assert!(stdout.contains("test metrics"));
    // 2 transforms + the no-augmentation baseline = 3 rows per table
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| {
            l.starts_with("none") || l.starts_with("single:transpose") || l.starts_with("single:blur")
        })
        .collect();
    assert_eq!(rows.len(), 6, "{stdout}");

    // Dice column (4th) is non-increasing inside each table.
    let dice_cols: Vec<f64> = rows
        .iter()
        .map(|l| {
            l.split('|')
                .nth(3)
                .unwrap()
                .trim()
                .parse::<f64>()
                .unwrap()
        })
        .collect();
    assert!(dice_cols[0] >= dice_cols[1] && dice_cols[1] >= dice_cols[2]);
    assert!(dice_cols[3] >= dice_cols[4] && dice_cols[4] >= dice_cols[5]);
}

#[test]
fn gradcheck_reports_per_op_errors_and_passes() {
    let out = run(&["gradcheck", "--preset", "resnet-micro", "--seed", "0"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in ["conv2d(k3,p1)/w", "batchnorm/x", "grn/gamma", "bce_with_logits", "unet-end-to-end"] {
        assert!(stdout.contains(op), "missing {op} in:\n{stdout}");
    }
    assert!(stdout.contains("all passed"));
}

#[test]
fn help_documents_the_precision_toggle() {
    let out = run(&["--help"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("UNSEG_PRECISION"));
}
