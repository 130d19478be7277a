//! End-to-end tests of the `hrl` binary: every subcommand, the exit-code
//! contract, strict config parsing, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hrl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hrl"))
}

fn run(args: &[&str]) -> Output {
    hrl().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const GENERATOR: &str = r#"
[data.generator]
extents = [10, 10, 10]
roi_count = 4
noise_std = 0.03
subjects_per_class = [10, 10]
site_bias = 0.02

[[data.generator.class_effects]]

[[data.generator.class_effects]]
intensity_shift = 0.3
intensity_rois = [1, 2]
"#;

fn small_model_and_train() -> &'static str {
    r#"
[model]
hidden_size = 16
heads = 2
mlp_dim = 32
depth = 1
variant = "full"

[model.backbone]
base_channels = 2
blocks_per_stage = [1, 1, 1, 1]
in_channels = 1

[train]
lr = 1e-3
max_epochs = 2
early_stop_train_acc = 0.95
batch_size = 4
seed = 7
strategy = "two-stage"

[train.augment]
rotate_deg = 3.0
scale = 0.03
translate_vox = 1.0

[eval]
folds = 2
repeats = 1
task = "binary"
"#
}

fn generated_dataset(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, GENERATOR);
    let data_dir = dir.join("data");
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_ok(&out);
    data_dir.join("manifest.csv")
}

#[test]
fn generate_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), GENERATOR);
    for sub in ["a", "b"] {
        let out = run(&[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(sub).to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert_ok(&out);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("class 0: 10"), "{stdout}");
        assert!(stdout.contains("class 1: 10"), "{stdout}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 21); // header + 20 subjects

    // byte-identical outputs across reruns (run.log carries the timestamps)
    for file in ["manifest.csv", "atlas.atl", "features.csv", "volumes/s0000.vol", "resolved-config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn generate_imbalanced_group_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[data.generator]
extents = [8, 8, 8]
roi_count = 3
noise_std = 0.02
subjects_per_class = [172, 87, 35]

[[data.generator.class_effects]]

[[data.generator.class_effects]]
intensity_shift = 0.2
intensity_rois = [1]

[[data.generator.class_effects]]
intensity_shift = 0.2
intensity_rois = [2]
"#,
    );
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("class 0: 172"), "{stdout}");
    assert!(stdout.contains("class 1: 87"), "{stdout}");
    assert!(stdout.contains("class 2: 35"), "{stdout}");
}

#[test]
fn unknown_config_keys_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[train]\nlearning_rate = 0.1\n", // should be `lr`
    );
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\nmanifest = \"does/not/exist.csv\"\n",
    );
    let out = run(&[
        "crossval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generated_dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nmanifest = \"{}\"\n{}",
            manifest.display(),
            small_model_and_train()
        ),
    );
    let train_out = dir.path().join("train");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ckpt = train_out.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(train_out.join("resolved-config.toml").exists());
    assert!(train_out.join("train_curve.csv").exists());

    let eval_out = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    for file in ["metrics.csv", "confusion.csv", "predictions.csv"] {
        assert!(eval_out.join(file).exists(), "{file}");
    }
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().next().unwrap() == "run_id,fold,repeat,metric,value");
    assert!(metrics.contains("acc"));
}

#[test]
fn crossval_emits_full_report_and_ablation_flags_work() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generated_dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nmanifest = \"{}\"\n{}",
            manifest.display(),
            small_model_and_train()
        ),
    );
    for (name, variant, strategy) in [
        ("full", "full", "two-stage"),
        ("h", "h-only", "two-stage"),
        ("d", "d-only", "two-stage"),
        ("scratch", "full", "scratch"),
        ("joint", "full", "joint"),
    ] {
        let cv_out = dir.path().join(format!("cv_{name}"));
        let out = run(&[
            "crossval",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            cv_out.to_str().unwrap(),
            "--variant",
            variant,
            "--strategy",
            strategy,
        ]);
        assert_ok(&out);
        for file in ["metrics.csv", "summary.csv", "confusion_r0.csv", "predictions.csv"] {
            assert!(cv_out.join(file).exists(), "{name}: {file}");
        }
        assert!(cv_out.join("checkpoints/r0_f0.ckpt").exists());
        assert!(cv_out.join("checkpoints/r0_f1.ckpt").exists());
        let resolved = std::fs::read_to_string(cv_out.join("resolved-config.toml")).unwrap();
        assert!(resolved.contains(&format!("variant = \"{variant}\"")));
        assert!(resolved.contains(&format!("strategy = \"{strategy}\"")));
        if variant == "h-only" {
            assert!(!cv_out.join("penultimate.csv").exists());
        } else {
            assert!(cv_out.join("penultimate.csv").exists());
        }
        // summary has per-repeat and overall scopes
        let summary = std::fs::read_to_string(cv_out.join("summary.csv")).unwrap();
        assert!(summary.lines().any(|l| l.starts_with("r0,acc,")));
        assert!(summary.lines().any(|l| l.starts_with("all,acc,")));
        assert!(summary.contains('±'));
    }
}

#[test]
fn crossval_reports_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generated_dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nmanifest = \"{}\"\n{}",
            manifest.display(),
            small_model_and_train()
        ),
    );
    for sub in ["x", "y"] {
        let out = run(&[
            "crossval",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(sub).to_str().unwrap(),
            "--variant",
            "h-only",
        ]);
        assert_ok(&out);
    }
    for file in ["metrics.csv", "summary.csv", "predictions.csv", "confusion_r0.csv"] {
        let a = std::fs::read(dir.path().join("x").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("y").join(file)).unwrap();
        assert_eq!(a, b, "{file} not reproducible");
    }
}

#[test]
fn transfer_between_generated_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_gen = write_config(dir.path(), GENERATOR);
    for (sub, seed) in [("src", "3"), ("tgt", "4")] {
        let out = run(&[
            "generate",
            "--config",
            cfg_gen.to_str().unwrap(),
            "--out",
            dir.path().join(sub).to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_ok(&out);
    }
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nmanifest = \"{}\"\ntarget_manifest = \"{}\"\nlabel_map = [[0, 0], [1, 1]]\n{}",
            dir.path().join("src/manifest.csv").display(),
            dir.path().join("tgt/manifest.csv").display(),
            small_model_and_train()
        ),
    );
    let out = run(&[
        "transfer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("transfer").to_str().unwrap(),
        "--variant",
        "h-only",
    ]);
    assert_ok(&out);
    assert!(dir.path().join("transfer/metrics.csv").exists());
}

#[test]
fn extract_features_exports_named_slots() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generated_dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!("[data]\nmanifest = \"{}\"\n", manifest.display()),
    );
    let out_dir = dir.path().join("feats");
    let out = run(&[
        "extract-features",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("features.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("id,roi1.gm.mean"));
    assert!(header.contains("roi4.surface"));
    assert_eq!(csv.lines().count(), 21);
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
    let mut parts = text.split_ascii_whitespace();
    assert_eq!(parts.next().unwrap(), "P5");
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    let pixels = bytes[bytes.len() - w * h..].to_vec();
    (w, h, pixels)
}

#[test]
fn export_maps_matches_recomputed_forward() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generated_dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nmanifest = \"{}\"\n{}",
            manifest.display(),
            small_model_and_train()
        ),
    );
    let train_out = dir.path().join("train");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]));
    let ckpt = train_out.join("model.ckpt");
    let maps_out = dir.path().join("maps");
    let out = run(&[
        "export-maps",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--subject",
        "s0003",
        "--stage",
        "1",
        "--out",
        maps_out.to_str().unwrap(),
    ]);
    assert_ok(&out);

    // stage 1 of a base-2 backbone has 2 channels; axial+sagittal+coronal each
    let files: Vec<_> = std::fs::read_dir(&maps_out)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    assert_eq!(files.len(), 6, "{files:?}");

    // oracle: recompute the stage-1 activations in-process and re-quantize
    let dataset = hrl_core::io::read_dataset(&manifest).unwrap();
    let mut model = hrl_core::io::load_model::<f32>(&ckpt).unwrap();
    let subject = dataset.subjects.iter().find(|s| s.id == "s0003").unwrap();
    let normalized = hrl_core::preprocess::normalize_rescale(&subject.volume);
    let mut tape = hrl_core::tensor::Tape::<f32>::new();
    let e = normalized.extents;
    let vol = tape
        .leaf(
            normalized.voxels.iter().map(|&v| v).collect(),
            &[1, 1, e[0], e[1], e[2]],
            false,
        )
        .unwrap();
    let (_, trace) = model
        .backbone
        .forward_traced(&mut tape, vol, false, false)
        .unwrap();
    let maps = trace.stages[0];
    let shape = tape.shape(maps).to_vec();
    let per_channel = shape[2] * shape[3] * shape[4];
    for c in 0..shape[1] {
        let channel = &tape.data(maps)[c * per_channel..(c + 1) * per_channel];
        let min = channel.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = channel.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let (w, h, pixels) = read_pgm(&maps_out.join(format!("s0003_stage1_ch{c:03}_axial.pgm")));
        assert_eq!((w, h), (shape[4], shape[3]));
        let z = shape[2] / 2;
        for y in 0..h {
            for x in 0..w {
                let v = channel[(z * shape[3] + y) * shape[4] + x];
                let expect = if max == min {
                    128.0
                } else {
                    ((v - min) / (max - min) * 255.0).round()
                };
                let got = pixels[y * w + x] as f32;
                assert!(
                    (got - expect).abs() <= 1.0,
                    "ch{c} ({y},{x}): {got} vs {expect}"
                );
            }
        }
    }

    // unknown stage rejected with a validation exit
    let out = run(&[
        "export-maps",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--subject",
        "s0003",
        "--stage",
        "7",
        "--out",
        maps_out.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_command_contract() {
    let out = run(&["gradcheck"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut ops: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert!(ops.len() >= 20, "expected a full registry, got {ops:?}");
    let total = ops.len();
    ops.sort_unstable();
    ops.dedup();
    assert_eq!(ops.len(), total, "registry listed an op twice");
    assert!(stdout.lines().all(|l| !l.starts_with("FAIL")));

    // negative control: the corrupted fixture must fail and be named
    let out = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL corrupt-fixture"), "{stdout}");
}

#[test]
fn roi_mask_flag_flows_through_crossval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generated_dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            "[data]\nmanifest = \"{}\"\n{}",
            manifest.display(),
            small_model_and_train()
        ),
    );
    let cv_out = dir.path().join("cv_mask");
    let out = run(&[
        "crossval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        cv_out.to_str().unwrap(),
        "--variant",
        "d-only",
        "--mask-rois",
        "1,2,3",
    ]);
    assert_ok(&out);
    let resolved = std::fs::read_to_string(cv_out.join("resolved-config.toml")).unwrap();
    let squashed: String = resolved.split_whitespace().collect();
    assert!(squashed.contains("mask_rois=[1,2,3,]"), "{resolved}");

    // an ROI id outside the atlas is a validation error
    let out = run(&[
        "crossval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("cv_badmask").to_str().unwrap(),
        "--variant",
        "d-only",
        "--mask-rois",
        "99",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_cli_arguments_exit_one() {
    let out = run(&["crossval", "--config"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["export-maps"]);
    assert_eq!(out.status.code(), Some(1));
}
