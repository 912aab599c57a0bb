//! Drives the `distl` binary through a tiny experiment and its error paths.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
version = 1
task = "tiny"
variant = "distl"
seeds = [7]

[data]
manifest = "data/manifest.csv"
masks_dir = "data/masks"

[preprocess]
side = 16

[model]
input_side = 16
patch_side = 4
depth = 1
heads = 2
embed_dim = 8
num_classes = 2
proj_dim = 8
head_hidden = 8
bottleneck_dim = 4
mlp_ratio = 2

[partition]
labeled_frac = 0.25
folds = 2

[schedule]
t_max = 2

[initial]
epochs = 1
batch_size = 4

[distill]
epochs = 1
warmup_epochs = 0
batch_size = 4
local_crops = 1
correction_interval = 2
correction_steps = 1

[eval]
panel_images = 2
"#;

fn distl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DISTL_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth_tiny(dir: &Path) {
    let out = distl(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--train-per-class",
            "8",
            "--val-per-class",
            "3",
            "--external-per-class",
            "3",
            "--extra-per-class",
            "2",
            "--side",
            "16",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&distl(p, &["--config", "missing.toml", "run"])), 2);
    assert_eq!(code(&distl(p, &["run"])), 2);
    std::fs::write(p.join("typo.toml"), TINY.replace("[partition]", "[partition]\nlabelled_frac = 0.1")).unwrap();
    assert_eq!(code(&distl(p, &["--config", "typo.toml", "run"])), 2);
    // manifest does not exist yet
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    assert_eq!(code(&distl(p, &["--config", "tiny.toml", "run"])), 2);
}

#[test]
fn full_lifecycle_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth_tiny(p);
    let cfg = ["--config", "tiny.toml", "--out", "runs"];
    let with = |extra: &[&'static str]| -> Vec<&str> { cfg.iter().copied().chain(extra.iter().copied()).collect() };

    let eval = distl(p, &with(&["eval"]));
    assert_eq!(code(&eval), 2, "eval before any checkpoint: {}", String::from_utf8_lossy(&eval.stderr));

    assert_eq!(code(&distl(p, &with(&["partition"]))), 0);
    let run = distl(p, &with(&["run"]));
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let seed_dir = p.join("runs/seed_7");
    for g in 0..=2 {
        assert!(seed_dir.join(format!("checkpoints/gen_{g}.ckpt")).exists());
    }
    let ledger = std::fs::read_to_string(seed_dir.join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 3);

    let eval = distl(p, &with(&["eval"]));
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("median AUC"));
    for f in ["auc_vs_T.csv", "auc_vs_T.svg", "auc_vs_T.png", "attention_panel.svg", "delong.json"] {
        assert!(seed_dir.join("plots").join(f).exists(), "{f}");
    }
    assert!(p.join("runs/summary.json").exists());

    let loc = distl(p, &with(&["localize", "--limit", "3"]));
    assert_eq!(code(&loc), 0, "{}", String::from_utf8_lossy(&loc.stderr));
    assert!(seed_dir.join("localization.json").exists());
    assert_eq!(code(&distl(p, &with(&["localize", "--split", "nowhere"]))), 2);

    // a finished run is a no-op; a changed config is refused
    assert_eq!(code(&distl(p, &with(&["run"]))), 0);
    std::fs::write(p.join("tiny.toml"), TINY.replace("t_max = 2", "t_max = 1")).unwrap();
    assert_eq!(code(&distl(p, &with(&["run"]))), 2);

    // a deleted checkpoint is reported by eval as a runtime failure
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    std::fs::remove_file(seed_dir.join("checkpoints/gen_1.ckpt")).unwrap();
    assert_eq!(code(&distl(p, &with(&["eval"]))), 3);
}
