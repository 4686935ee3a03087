use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmodal::ingest::{load_manifest, EvalScheme};
use xmodal::synth::{write_toy_checkpoint, SinusoidTask};
use xmodal::weight_io::emit_fixture;

struct Fixture {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    checkpoint: PathBuf,
}

fn fixture(scheme: EvalScheme) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let task = SinusoidTask {
        n_windows: 30,
        window_samples: 100,
        n_subjects: 3,
        eval_scheme: scheme,
        ..Default::default()
    };
    let manifest = task.write(&dir.path().join("data")).unwrap();
    let checkpoint = dir.path().join("toy.xmc");
    write_toy_checkpoint(&checkpoint, 16, 2, 1).unwrap();
    Fixture {
        dir,
        manifest,
        checkpoint,
    }
}

fn xmodal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .current_dir(cwd)
        .env_remove("XMODAL_CACHE_DIR")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn extract_then_resume() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let out = f.dir.path().join("out");
    let cache = f.dir.path().join("emb.xmc");
    let args = [
        "extract",
        "--manifest",
        s(&f.manifest),
        "--checkpoint",
        s(&f.checkpoint),
        "--cache",
        s(&cache),
        "--out",
        s(&out),
    ];
    let first = xmodal(&args, f.dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(cache.exists());
    assert!(stderr(&first).contains("30 computed, 0 cached, 0 failed"));
    let again = xmodal(&args, f.dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert!(stderr(&again).contains("0 computed, 30 cached"), "{}", stderr(&again));
}

#[test]
fn short_window_gives_partial_cache_and_names_record() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let mut m = load_manifest(&f.manifest).unwrap();
    let base = f.manifest.parent().unwrap();
    std::fs::write(base.join("short.csv"), "x\n0.1\n0.2\n0.3\n").unwrap();
    let mut rec = m.records[0].clone();
    rec.data = "short.csv".into();
    rec.index = None;
    rec.shape = None;
    m.records.push(rec);
    std::fs::write(&f.manifest, m.to_json()).unwrap();

    let cache = f.dir.path().join("emb.xmc");
    let o = xmodal(
        &[
            "extract",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--cache",
            s(&cache),
            "--out",
            s(&f.dir.path().join("out")),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("record 30"), "{}", stderr(&o));
    assert!(cache.exists());
    let report = json(&f.dir.path().join("out/extract_report.json"));
    assert_eq!(report["computed"], 30);
    assert_eq!(report["failed"][0]["record"], 30);
}

#[test]
fn evaluate_two_layers_writes_two_csv_rows() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let out = f.dir.path().join("out");
    let o = xmodal(
        &[
            "evaluate",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--layers",
            "0,1",
            "--epochs",
            "5",
            "--hidden-dim",
            "16",
            "--out",
            s(&out),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0], "layer,mean,std");
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains(" ± "), "{stdout}");
    let report = json(&out.join("report.json"));
    assert_eq!(report["layers"]["0"]["folds"].as_array().unwrap().len(), 2);
}

#[test]
fn loso_on_three_subjects_has_three_folds() {
    let f = fixture(EvalScheme::Loso);
    let out = f.dir.path().join("out");
    let o = xmodal(
        &[
            "evaluate",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--layers",
            "2",
            "--probe",
            "linear",
            "--epochs",
            "3",
            "--out",
            s(&out),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&out.join("report.json"));
    assert_eq!(report["layers"]["2"]["folds"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"]["probe"], "linear");
}

#[test]
fn invalid_layer_is_a_validation_error() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let out = f.dir.path().join("out");
    let o = xmodal(
        &[
            "evaluate",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--layers",
            "7",
            "--out",
            s(&out),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("layer 7"));
    assert!(!out.join("report.json").exists());
}

#[test]
fn divergence_exits_with_three() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let o = xmodal(
        &[
            "evaluate",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--layers",
            "0",
            "--lr",
            "1e300",
            "--epochs",
            "5",
            "--out",
            s(&f.dir.path().join("out")),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn baseline_separates_tones() {
    let f = fixture(EvalScheme::Kfold { k: 3 });
    let out = f.dir.path().join("out");
    let o = xmodal(
        &["baseline", "--manifest", s(&f.manifest), "--n-trees", "20", "--out", s(&out)],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&out.join("baseline_report.json"));
    assert_eq!(report["macro_f1"]["mean"], 1.0);
    assert_eq!(report["config"]["forest"]["n_trees"], 20);
}

#[test]
fn zero_epoch_lora_is_identity() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let out = f.dir.path().join("out");
    let o = xmodal(
        &[
            "train-lora",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--epochs",
            "0",
            "--rank",
            "2",
            "--lora-layers",
            "all",
            "--out",
            s(&out),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&out.join("lora_report.json"));
    let run = &report["runs"][0];
    assert!(run["note"].as_str().unwrap().contains("frozen encoder"));
    assert_eq!(run["adapted_layers"], serde_json::json!([1, 2]));
    let bundle = xmodal::lora::AdapterBundle::<f64>::load(&out.join("lora_all.xmc")).unwrap();
    assert_eq!(bundle.trained.adapters.len(), 4);
    assert!(bundle.trained.adapters.iter().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn lora_one_layer_at_a_time() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let out = f.dir.path().join("out");
    let o = xmodal(
        &[
            "train-lora",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--epochs",
            "2",
            "--rank",
            "2",
            "--hidden-dim",
            "8",
            "--out",
            s(&out),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("lora_layer1.xmc").exists() && out.join("lora_layer2.xmc").exists());
    let report = json(&out.join("lora_report.json"));
    assert_eq!(report["runs"][1]["probe_layer"], 2);
    assert_eq!(report["runs"][1]["train_loss"].as_array().unwrap().len(), 2);
}

#[test]
fn viz_top_k() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let out = f.dir.path().join("out");
    let o = xmodal(
        &["viz", "--checkpoint", s(&f.checkpoint), "--top-k", "8", "--n-fft", "64", "--out", s(&out)],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("filters.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 33);
    let filters: BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(filters.len(), 8);
    assert!(std::fs::read_to_string(out.join("filters.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn viz_rejects_bad_fft_size() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let o = xmodal(&["viz", "--checkpoint", s(&f.checkpoint), "--n-fft", "100"], f.dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_checkpoint_with_fixture() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let (config, weights) = xmodal::weight_io::load_checkpoint(&f.checkpoint).unwrap();
    let x: Vec<f32> = (0..400).map(|i| (i as f32 * 0.05).sin()).collect();
    let fx = emit_fixture(&config, &weights, &x, &[0, 1, 2].into(), 1e-3, "self").unwrap();
    let path = f.dir.path().join("fixture.xmc");
    fx.save(&path).unwrap();
    let o = xmodal(
        &["verify-checkpoint", "--checkpoint", s(&f.checkpoint), "--fixture", s(&path)],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("parity ok"));

    let missing = xmodal(&["verify-checkpoint"], f.dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn rerun_from_embedded_config_is_bit_identical() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let first = f.dir.path().join("first");
    let o = xmodal(
        &[
            "sweep",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--epochs",
            "4",
            "--hidden-dim",
            "16",
            "--seed",
            "9",
            "--split-seed",
            "4",
            "--out",
            s(&first),
        ],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let second = f.dir.path().join("second");
    let report = first.join("report.json");
    let o = xmodal(
        &["sweep", "--config", s(&report), "--out", s(&second), "--jobs", "1"],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["report.json", "sweep.csv", "table.txt"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
    let echo = json(&report)["config"].clone();
    assert_eq!(echo["train"]["seed"], 9);
    assert_eq!(echo["split_seed"], 4);
}

#[test]
fn toml_config_with_flag_override() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let cfg = f.dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "manifest = {:?}\ncheckpoint = {:?}\nlayers = [1]\nprobe = \"linear\"\n[train]\nepochs = 2\n",
            s(&f.manifest),
            s(&f.checkpoint)
        ),
    )
    .unwrap();
    let out = f.dir.path().join("out");
    let o = xmodal(
        &["evaluate", "--config", s(&cfg), "--probe", "mlp", "--hidden-dim", "8", "--out", s(&out)],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = json(&out.join("report.json"))["config"].clone();
    assert_eq!(echo["probe"], "mlp");
    assert_eq!(echo["train"]["epochs"], 2);
    assert_eq!(echo["layers"], serde_json::json!([1]));
}

#[test]
fn cache_dir_env_sets_default_location() {
    let f = fixture(EvalScheme::Kfold { k: 2 });
    let cache_dir = f.dir.path().join("cachedir");
    let o = Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args([
            "extract",
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
            "--layers",
            "0",
            "--out",
            s(&f.dir.path().join("out")),
        ])
        .env("XMODAL_CACHE_DIR", &cache_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&cache_dir).unwrap().collect();
    assert_eq!(files.len(), 1);
}
