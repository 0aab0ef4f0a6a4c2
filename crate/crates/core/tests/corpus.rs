use std::fs;
use std::path::Path;

use ccsp_core::degrade::{
    generate_corpus, sha256_hex, ConditionKind, ConditionMix, CorpusManifest, Degradation, ParamRanges, MANIFEST_FILE,
};
use ccsp_core::imageio::load_rgb;
use ccsp_core::training::synth::{write_clean_corpus, SynthConfig};
use ccsp_core::Tensor;

fn small() -> SynthConfig {
    SynthConfig { size: 32, ..SynthConfig::default() }
}

fn equal_mix() -> ConditionMix {
    ConditionMix::parse("fog=0.34,rain=0.33,blur=0.33").unwrap()
}

#[test]
fn same_seed_gives_identical_manifest_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_corpus(&clean, 12, 3, &small()).unwrap();
    let a = generate_corpus(&clean, &dir.path().join("a"), &equal_mix(), &ParamRanges::default(), 7).unwrap();
    let b = generate_corpus(&clean, &dir.path().join("b"), &equal_mix(), &ParamRanges::default(), 7).unwrap();
    assert_eq!(a, b);
    let read = |d: &str| fs::read(dir.path().join(d).join(MANIFEST_FILE)).unwrap();
    assert_eq!(sha256_hex(&read("a")), sha256_hex(&read("b")));
    a.verify(&dir.path().join("b")).unwrap();
    assert_eq!(CorpusManifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap(), a);

    let c = generate_corpus(&clean, &dir.path().join("c"), &equal_mix(), &ParamRanges::default(), 8).unwrap();
    assert_ne!(a.entries, c.entries);
}

#[test]
fn labels_are_copied_byte_for_byte_and_outputs_stay_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_corpus(&clean, 9, 1, &small()).unwrap();
    let out = dir.path().join("out");
    let m = generate_corpus(&clean, &out, &equal_mix(), &ParamRanges::default(), 2).unwrap();
    assert_eq!(m.entries.len(), 9);
    assert!(m.errors.is_empty());
    for e in &m.entries {
        assert_eq!(fs::read(clean.join(&e.label)).unwrap(), fs::read(out.join(&e.label)).unwrap());
        let before: Tensor<f64> = load_rgb(&clean.join(&e.image)).unwrap();
        let after: Tensor<f64> = load_rgb(&out.join(&e.image)).unwrap();
        assert_eq!(before.shape(), after.shape());
        assert!(after.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn degenerate_mix_assigns_one_condition() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_corpus(&clean, 10, 4, &small()).unwrap();
    let m = generate_corpus(&clean, &dir.path().join("out"), &ConditionMix::parse("fog=1.0").unwrap(), &ParamRanges::default(), 1)
        .unwrap();
    assert!(m.entries.iter().all(|e| matches!(e.spec.degradation, Degradation::Fog { .. })));
}

#[test]
fn equal_mix_over_300_images_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_corpus(&clean, 300, 11, &SynthConfig { size: 16, min_extent: 0.3, max_extent: 0.45, ..SynthConfig::default() })
        .unwrap();
    let m = generate_corpus(&clean, &dir.path().join("out"), &ConditionMix::default(), &ParamRanges::default(), 99).unwrap();
    let counts = m.counts();
    for kind in ConditionKind::ALL {
        let n = counts[&kind];
        assert!((80..=120).contains(&n), "{kind:?}: {n}");
    }
}

#[test]
fn seeds_follow_paths_not_enumeration_order() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    write_clean_corpus(&full, 6, 5, &small()).unwrap();
    // a second tree holding only some of the same files
    let partial = dir.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    for name in ["img_0003", "img_0005"] {
        for ext in ["png", "txt"] {
            fs::copy(full.join(format!("{name}.{ext}")), partial.join(format!("{name}.{ext}"))).unwrap();
        }
    }
    let a = generate_corpus(&full, &dir.path().join("a"), &equal_mix(), &ParamRanges::default(), 4).unwrap();
    let b = generate_corpus(&partial, &dir.path().join("b"), &equal_mix(), &ParamRanges::default(), 4).unwrap();
    for e in &b.entries {
        let twin = a.entries.iter().find(|x| x.image == e.image).unwrap();
        assert_eq!(twin, e);
    }
}

fn write_text(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn missing_labels_and_unreadable_images_are_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_corpus(&clean, 3, 6, &small()).unwrap();
    fs::remove_file(clean.join("img_0001.txt")).unwrap();
    write_text(&clean.join("broken.png"), "not a png");
    write_text(&clean.join("broken.txt"), "0 0.5 0.5 0.2 0.2\n");
    let m = generate_corpus(&clean, &dir.path().join("out"), &equal_mix(), &ParamRanges::default(), 1).unwrap();
    let kept: Vec<_> = m.entries.iter().map(|e| e.image.as_str()).collect();
    assert_eq!(kept, vec!["img_0000.png", "img_0002.png"]);
    let skipped: Vec<_> = m.errors.iter().map(|e| e.image.as_str()).collect();
    assert_eq!(skipped, vec!["broken.png", "img_0001.png"]);
    assert!(m.errors[1].error.contains("img_0001.txt"));
    assert!(!dir.path().join("out").join("img_0001.png").exists());
}

#[test]
fn bad_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(generate_corpus(&missing, &dir.path().join("out"), &equal_mix(), &ParamRanges::default(), 1).is_err());
    assert!(ConditionMix::parse("fog=0.5,rain=0.2").is_err());
    assert!(ConditionMix::parse("snow=1").is_err());
}
