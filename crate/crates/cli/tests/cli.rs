use std::path::Path;
use std::process::{Command, Output};

fn boxalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxalign")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = boxalign(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_and_exit_codes() {
    assert!(ok(&["--help"]).contains("pretrain-box"));
    assert_eq!(boxalign(&[]).status.code(), Some(1));
    assert_eq!(boxalign(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(boxalign(&["gen-data", "--out=x", "--no.such.key=1"]).status.code(), Some(1));
    assert_eq!(boxalign(&["gen-data", "--out=x", "--box.ema_m=2"]).status.code(), Some(1));
    assert_eq!(boxalign(&["gen-proposals", "--data=/nonexistent/dir"]).status.code(), Some(2));
}

#[test]
fn config_file_errors_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nbox.lr\n").unwrap();
    let out = boxalign(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

fn csv_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<String> = text.lines().map(String::from).collect();
    assert_eq!(lines[0], "step,loss_total,loss_con,loss_reg,lr,pos_count,skipped_images");
    lines
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "# tiny end-to-end run\nseed = 5\nflavor = point\ndata.train_count = 8\ndata.eval_count = 4\n\
         image.epochs = 1\nbox.epochs = 2\nbox.checkpoint_every = 2\nfinetune.steps = 3\nfinetune.folds = 1\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", c, "--out", &d("data")]);
    assert!(dir.path().join("data/train/manifest.json").exists());
    ok(&["gen-proposals", "--config", c, "--data", &d("data/train")]);
    ok(&["pretrain-image", "--config", c, "--data", &d("data/train"), "--out", &d("image")]);
    assert_eq!(csv_rows(&dir.path().join("image/metrics.csv")).len(), 2);
    ok(&["pretrain-box", "--config", c, "--data", &d("data/train"), "--backbone", &d("image/backbone.bin"), "--out", &d("box")]);
    assert_eq!(csv_rows(&dir.path().join("box/metrics.csv")).len(), 5);
    assert!(dir.path().join("box/step_000002/weights.bin").exists());
    assert!(dir.path().join("box/final/state.json").exists());

    // Resuming from step 2 reproduces the final weights.
    ok(&["pretrain-box", "--config", c, "--data", &d("data/train"), "--resume", &d("box/step_000002"), "--out", &d("box2")]);
    let a = std::fs::read(dir.path().join("box/final/weights.bin")).unwrap();
    let b = std::fs::read(dir.path().join("box2/final/weights.bin")).unwrap();
    assert_eq!(a, b);

    ok(&["finetune", "--config", c, "--data", &d("data/train"), "--eval", &d("data/eval"), "--checkpoint", &d("box/final"), "--out", &d("ft")]);
    assert_eq!(csv_rows(&dir.path().join("ft/metrics_random.csv")).len(), 4);
    let purity = ok(&["eval", "--config", c, "--eval", &d("data/eval"), "--checkpoint", &d("box/final")]);
    assert!(purity.contains("knn_purity_k5"));
    let ap = ok(&["eval", "--config", c, "--eval", &d("data/eval"), "--weights", &d("ft/pretrained/weights.bin")]);
    assert!(ap.contains("ap50"));
    let report = ok(&["report", &d("ft"), "--out", &d("report.json")]);
    assert!(report.contains("mean"));
    assert!(dir.path().join("report.json").exists());
}

/// Every subcommand in order on the built-in defaults (a few minutes).
#[test]
fn default_config_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    ok(&["gen-data", "--out", &d("data")]);
    ok(&["gen-proposals", "--data", &d("data/train")]);
    ok(&["pretrain-image", "--data", &d("data/train"), "--out", &d("image")]);
    ok(&["pretrain-box", "--data", &d("data/train"), "--backbone", &d("image/backbone.bin"), "--out", &d("box")]);
    ok(&["finetune", "--data", &d("data/train"), "--eval", &d("data/eval"), "--checkpoint", &d("box/final"), "--out", &d("ft")]);
    let ap = ok(&["eval", "--eval", &d("data/eval"), "--weights", &d("ft/pretrained/weights.bin")]);
    assert!(ap.contains("ap50"), "{ap}");
    let purity = ok(&["eval", "--eval", &d("data/eval"), "--checkpoint", &d("box/final")]);
    assert!(purity.contains("knn_purity_k5"), "{purity}");
    assert!(ok(&["report", &d("ft")]).contains("AP50"));
}
