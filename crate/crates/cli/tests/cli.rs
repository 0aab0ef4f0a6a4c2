use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccsp_core::degrade::CorpusManifest;
use ccsp_core::metrics::MetricsReport;
use ccsp_core::training::synth::{write_clean_corpus, SynthConfig};
use ccsp_core::training::{CheckpointMeta, ExperimentConfig, Model, Strategy, LOG_FILE, META_FILE};

fn ccsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccsp"))
        .args(args)
        .env_remove("CCSP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ccsp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn clean_corpus(root: &Path, n: usize) -> PathBuf {
    let dir = root.join("clean");
    write_clean_corpus(&dir, n, 3, &SynthConfig::default()).unwrap();
    dir
}

fn tiny_config(root: &Path, strategy: Strategy, degraded: &Path, clean: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::new(strategy);
    cfg.epochs = 2;
    cfg.denoiser_epochs = 1;
    cfg.batch_size = 4;
    cfg.seed = Some(5);
    cfg.data.degraded = Some(degraded.to_path_buf());
    cfg.data.clean = Some(clean.to_path_buf());
    let path = root.join(format!("{strategy}.json"));
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

#[test]
fn augment_is_reproducible_and_honours_mix() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_corpus(tmp.path(), 6);
    let (a, b, fog) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("fog"));
    let mix = "fog=0.34,rain=0.33,blur=0.33";
    let stdout = ok(&["augment", "--in", s(&clean), "--out", s(&a), "--seed", "7", "--mix", mix]);
    assert!(stdout.contains("manifest.json"));
    assert!(stdout.contains("fog:") && stdout.contains("rain:") && stdout.contains("motion_blur:"));
    ok(&["augment", "--in", s(&clean), "--out", s(&b), "--seed", "7", "--mix", mix]);
    let read = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));

    ok(&["augment", "--in", s(&clean), "--out", s(&fog), "--seed", "7", "--mix", "fog=1.0"]);
    let m = CorpusManifest::load(&fog.join("manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 6);
    assert!(m.entries.iter().all(|e| e.spec.degradation.kind().name() == "fog"));
    m.verify(&fog).unwrap();
}

#[test]
fn augment_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = ccsp(&["augment", "--in", s(&missing), "--out", s(tmp.path()), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = ccsp(&["augment", "--in", s(tmp.path()), "--out", s(tmp.path()), "--seed", "1", "--mix", "fog=0.2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ccsp(&["augment", "--in", s(tmp.path()), "--out", s(tmp.path()), "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_render_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_corpus(tmp.path(), 4);
    let degraded = tmp.path().join("aug");
    ok(&["augment", "--in", s(&clean), "--out", s(&degraded), "--seed", "2"]);
    let config = tiny_config(tmp.path(), Strategy::Joint, &degraded, &clean);

    let (ck1, ck2) = (tmp.path().join("ck1"), tmp.path().join("ck2"));
    let out1 = ok(&["train", "--config", s(&config), "--out", s(&ck1)]);
    let out2 = ok(&["train", "--config", s(&config), "--out", s(&ck2)]);
    assert_eq!(out1.lines().last(), out2.lines().last(), "parameter hashes agree");
    assert_eq!(std::fs::read(ck1.join("model.bin")).unwrap(), std::fs::read(ck2.join("model.bin")).unwrap());
    let meta = CheckpointMeta::load(&ck1.join(META_FILE)).unwrap();
    assert_eq!(meta.epoch, 2);
    let log = std::fs::read_to_string(ck1.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "cls", "loc", "obj", "l1", "l2", "joint"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }

    let report_path = tmp.path().join("report.json");
    ok(&["eval", "--config", s(&config), "--checkpoint", s(&ck1), "--data", s(&degraded), "--out", s(&report_path)]);
    let text = std::fs::read_to_string(&report_path).unwrap();
    assert!(text.ends_with('\n'));
    let report = MetricsReport::from_json(&text).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["precision", "recall", "map50", "map75", "fps", "parameter_count"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(report.map75 <= report.map50);

    let rendered = tmp.path().join("rendered");
    let img = degraded.join("img_0000.png");
    ok(&["render", "--config", s(&config), "--checkpoint", s(&ck1), "--images", s(&img), "--out", s(&rendered)]);
    let (w, h) = image::image_dimensions(rendered.join("img_0000.png")).unwrap();
    assert_eq!((w, h), (64, 64 + ccsp_core::render::FOOTER_HEIGHT));

    let missing = ccsp(&["eval", "--config", s(&config), "--checkpoint", s(&tmp.path().join("none")), "--data", s(&degraded), "--out", s(&report_path)]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_image = tmp.path().join("broken.png");
    std::fs::write(&bad_image, b"not a png").unwrap();
    let out = ccsp(&["render", "--config", s(&config), "--checkpoint", s(&ck1), "--images", s(&bad_image), "--out", s(&rendered)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_lists_offending_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"strategy": "direct", "epochz": 3, "loss": {"lambda_nobj": 1}}"#).unwrap();
    let out = ccsp(&["train", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz") && err.contains("loss.lambda_nobj"), "{err}");
}

#[test]
fn bench_matches_in_process_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new(Strategy::Joint);
    let path = tmp.path().join("toy.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    let stdout = ok(&["bench", "--config", s(&path), "--images", "2"]);
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let model = Model::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(v["parameter_count"].as_u64().unwrap() as usize, model.parameter_count());
    assert!(v["fps"].as_f64().unwrap() > 0.0);
    assert_eq!(v["wall_clock"], true);
}
