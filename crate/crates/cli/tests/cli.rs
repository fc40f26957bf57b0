use neat_cli::commands::AdaptSummary;
use neat_cli::manifest::RunManifest;
use neat_core::adaptation::{AdaptMode, LossFlags};
use neat_core::world::read_bundle;
use std::path::Path;
use std::process::{Command, Output};

fn neat(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neat"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

/// A small data directory and a briefly pretrained checkpoint.
fn small_run(dir: &Path) {
    ok(neat(&["gen-data", "--size", "96", "--seed", "3"], dir));
    ok(neat(
        &[
            "pretrain",
            "--steps",
            "5",
            "--batch-size",
            "32",
            "--seed",
            "3",
        ],
        dir,
    ));
}

/// `neat adapt` on the small run's checkpoint and Retrieval-Neg bundle.
fn adapt(root: &Path, out: &str, extra: &[&str]) -> Output {
    let ck = root.join("pretrained.ckpt");
    let bundle = root.join("data/retrieval_neg");
    let mut args = vec![
        "adapt",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    neat(&args, &root.join(out))
}

fn summary(dir: &Path) -> AdaptSummary {
    serde_json::from_str(&std::fs::read_to_string(dir.join("adapt.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(neat(&["gen-data", "--seed", "11"], &a));
    ok(neat(&["gen-data", "--seed", "11"], &b));
    let ma = RunManifest::load(a.join("gen-data.manifest.json")).unwrap();
    let mb = RunManifest::load(b.join("gen-data.manifest.json")).unwrap();
    assert_eq!(ma.outputs, mb.outputs);
    // Six split kinds plus the held-out affirmative bundle, two files each.
    assert_eq!(ma.outputs.len(), 14);
}

#[test]
fn split_and_size_flags() {
    let tmp = tempfile::tempdir().unwrap();
    ok(neat(
        &["gen-data", "--split", "retrieval_neg", "--size", "512"],
        tmp.path(),
    ));
    let bundle = read_bundle(tmp.path().join("data/retrieval_neg")).unwrap();
    assert_eq!(bundle.captions.len(), 512);
    assert_eq!(bundle.scenes.len(), 512);
    assert!(!tmp.path().join("data/mcq_neg.jsonl").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        neat(&["adapt", "--mode", "sometimes"], tmp.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        neat(&["gen-data", "--concepts", "3"], tmp.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(neat(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn missing_files_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = neat(
        &["eval", "--checkpoint", "/nonexistent/model.ckpt"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(!tmp.path().join("eval.manifest.json").exists());
}

#[test]
fn adapt_modes_flags_and_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_run(root);

    ok(adapt(
        root,
        "online",
        &["--mode", "online", "--batch-size", "32"],
    ));
    ok(adapt(
        root,
        "offline",
        &["--mode", "offline", "--batch-size", "32", "--epochs", "1"],
    ));
    let on = RunManifest::load(root.join("online/adapt.manifest.json")).unwrap();
    let off = RunManifest::load(root.join("offline/adapt.manifest.json")).unwrap();
    assert_ne!(on.without_timing(), off.without_timing());
    assert_eq!(summary(&root.join("online")).config.mode, AdaptMode::Online);
    assert!(root.join("online/predictions.csv").exists());
    assert!(root.join("offline/adapt_losses.csv").exists());

    ok(adapt(
        root,
        "ent",
        &["--disable", "sr,tri", "--epochs", "1"],
    ));
    assert_eq!(
        summary(&root.join("ent")).config.losses,
        LossFlags::ENT_ONLY
    );

    ok(adapt(root, "lr0", &["--lr", "0", "--epochs", "1"]));
    assert_eq!(
        std::fs::read(root.join("pretrained.ckpt")).unwrap(),
        std::fs::read(root.join("lr0/adapted.ckpt")).unwrap()
    );

    let blown = adapt(
        root,
        "nan",
        &["--lr", "1e200", "--batch-size", "16", "--epochs", "2"],
    );
    assert_eq!(
        blown.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&blown.stderr)
    );
    assert!(String::from_utf8_lossy(&blown.stderr).contains("batch "));
    assert!(!root.join("nan/adapt.manifest.json").exists());

    assert_eq!(
        adapt(root, "none", &["--disable", "ent,sr,tri"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_file_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_run(root);
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, r#"{"tau1": 0.05, "offline_epochs": 1}"#).unwrap();
    let args = ["--config", cfg.to_str().unwrap(), "--lambda", "2"];
    ok(adapt(root, "a", &args));
    let s = summary(&root.join("a"));
    assert_eq!(
        (
            s.config.tau1,
            s.config.offline_epochs,
            s.config.lambda,
            s.config.batch_size
        ),
        (0.05, 1, 2.0, 64)
    );

    std::fs::write(&cfg, r#"{"tau_one": 0.05}"#).unwrap();
    assert_eq!(adapt(root, "b", &args).status.code(), Some(2));
}

#[test]
fn eval_diagnose_and_transplant() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_run(root);
    let ck = root.join("pretrained.ckpt");
    let ck = ck.to_str().unwrap();
    let data = root.join("data");
    ok(neat(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            data.to_str().unwrap(),
            "--label",
            "frozen",
        ],
        &root.join("eval"),
    ));
    let report = neat_core::evaluation::EvaluationReport::from_json(
        &std::fs::read_to_string(root.join("eval/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.meta.label, "frozen");
    assert!(report.retrieval_neg.is_some() && report.mcq.is_some() && report.diagnostics.is_some());

    let cls = data.join("cls_neg");
    ok(neat(
        &[
            "diagnose",
            "--checkpoint",
            ck,
            "--bundle",
            cls.to_str().unwrap(),
        ],
        &root.join("diag"),
    ));
    for kind in ["normal", "nc", "rnc"] {
        let csv = std::fs::read_to_string(root.join(format!("diag/hist_{kind}.csv"))).unwrap();
        assert!(csv.starts_with("bin_low,bin_high,pos_count,neg_count"));
        assert_eq!(csv.lines().count(), 21);
    }

    ok(neat(
        &["transplant", "--ln-from", ck, "--into", ck],
        &root.join("self"),
    ));
    let a = neat_core::model::Checkpoint::load(root.join("pretrained.ckpt")).unwrap();
    let b = neat_core::model::Checkpoint::load(root.join("self/transplanted.ckpt")).unwrap();
    assert_eq!(a.encoder.params.values, b.encoder.params.values);

    let other = root.join("other");
    ok(neat(
        &[
            "gen-data",
            "--split",
            "pretrain_affirmative",
            "--size",
            "64",
            "--dim",
            "16",
        ],
        &other,
    ));
    ok(neat(
        &["pretrain", "--steps", "1", "--batch-size", "32"],
        &other,
    ));
    let mismatch = neat(
        &[
            "transplant",
            "--ln-from",
            ck,
            "--into",
            other.join("pretrained.ckpt").to_str().unwrap(),
        ],
        &root.join("bad"),
    );
    assert_eq!(mismatch.status.code(), Some(2));
}
