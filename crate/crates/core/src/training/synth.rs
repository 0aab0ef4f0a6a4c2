//! Seeded toy corpus: 1–3 coloured triangles, circles and octagons on
//! textured backgrounds, with exact box labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{generate_corpus, ConditionMix, CorpusManifest, ParamRanges};
use crate::detector::{format_labels, iou, BBox, Label};
use crate::error::{Error, Result};
use crate::imageio::save_rgb;
use crate::tensor::Tensor;

pub const TRIANGLE: usize = 0;
pub const CIRCLE: usize = 1;
pub const OCTAGON: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent as a fraction of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 64, min_objects: 1, max_objects: 3, min_extent: 0.22, max_extent: 0.42 }
    }
}

fn polygon(cx: f64, cy: f64, radius: f64, sides: usize, phase_deg: f64) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|k| {
            let a = (phase_deg + 360.0 * k as f64 / sides as f64).to_radians();
            (cx + radius * a.cos(), cy - radius * a.sin())
        })
        .collect()
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

enum Shape {
    Poly(Vec<(f64, f64)>),
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Poly(p) => inside_convex(p, x, y),
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Poly(p) => p.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |b, &(x, y)| {
                (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y))
            }),
            Shape::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }
}

/// Pixel-space shape of `class_id` with its larger box side equal to `extent`.
fn make_shape(class_id: usize, cx: f64, cy: f64, extent: f64) -> Shape {
    match class_id {
        TRIANGLE => {
            // equilateral, apex up: width √3·R, height 1.5·R
            let r = extent / 3f64.sqrt();
            Shape::Poly(polygon(cx, cy + 0.25 * r, r, 3, 90.0))
        }
        CIRCLE => Shape::Disc { cx, cy, r: extent / 2.0 },
        _ => {
            let r = extent / (2.0 * 22.5f64.to_radians().cos());
            Shape::Poly(polygon(cx, cy, r, 8, 22.5))
        }
    }
}

fn base_colour<R: Rng>(class_id: usize, rng: &mut R) -> [f64; 3] {
    let base = match class_id {
        TRIANGLE => [0.85, 0.15, 0.12],
        CIRCLE => [0.12, 0.32, 0.85],
        _ => [0.95, 0.78, 0.12],
    };
    base.map(|v: f64| (v + rng.gen_range(-0.1..=0.1)).clamp(0.0, 1.0))
}

/// One scene and its labels.
pub fn render_scene<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (Tensor<f64>, Vec<Label<f64>>) {
    let n = cfg.size;
    let sz = n as f64;
    // smooth two-tone gradient with fine grain and faint stripes
    let c0: [f64; 3] = [rng.gen_range(0.25..0.6), rng.gen_range(0.25..0.6), rng.gen_range(0.25..0.6)];
    let c1: [f64; 3] = [rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)];
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let freq = rng.gen_range(0.2..0.6);
    let mut img = Tensor::zeros(&[3, n, n]);
    for y in 0..n {
        for x in 0..n {
            let u = ((x as f64 * dir.cos() + y as f64 * dir.sin()) / sz * 0.5 + 0.5).clamp(0.0, 1.0);
            let stripe = 0.04 * ((x as f64 + y as f64 * 0.5) * freq).sin();
            let grain = rng.gen_range(-0.05..0.05);
            for c in 0..3 {
                img[(c * n + y) * n + x] = (c0[c] * (1.0 - u) + c1[c] * u + stripe + grain).clamp(0.0, 1.0);
            }
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let mut labels: Vec<Label<f64>> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let class_id = rng.gen_range(0..3);
            let extent = rng.gen_range(cfg.min_extent..=cfg.max_extent) * sz;
            let margin = extent / 2.0 + 1.0;
            if 2.0 * margin >= sz {
                break;
            }
            let cx = rng.gen_range(margin..sz - margin);
            let cy = rng.gen_range(margin..sz - margin);
            let shape = make_shape(class_id, cx, cy, extent);
            let (x0, y0, x1, y1) = shape.bounds();
            let bbox = BBox::from_corners(x0 / sz, y0 / sz, x1 / sz, y1 / sz);
            if labels.iter().any(|l| iou(&l.bbox, &bbox) > 0.0) {
                continue;
            }
            let colour = base_colour(class_id, rng);
            for y in (y0.floor().max(0.0) as usize)..(y1.ceil().min(sz) as usize) {
                for x in (x0.floor().max(0.0) as usize)..(x1.ceil().min(sz) as usize) {
                    // 4×4 supersampled coverage
                    let mut hits = 0;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            hits += shape.contains(x as f64 + (sx as f64 + 0.5) / 4.0, y as f64 + (sy as f64 + 0.5) / 4.0) as u32;
                        }
                    }
                    let a = hits as f64 / 16.0;
                    for c in 0..3 {
                        let i = (c * n + y) * n + x;
                        img[i] = img[i] * (1.0 - a) + colour[c] * a;
                    }
                }
            }
            labels.push(Label { class_id, bbox });
            break;
        }
    }
    (img, labels)
}

/// Writes `count` scenes as `img_XXXX.png` + `.txt` into `dir`.
pub fn write_clean_corpus(dir: &Path, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let (img, labels) = render_scene(cfg, &mut rng);
        let name = format!("img_{i:04}.png");
        save_rgb(&dir.join(&name), &img)?;
        let label_path = dir.join(format!("img_{i:04}.txt"));
        fs::write(&label_path, format_labels(&labels)).map_err(|e| Error::io(&label_path, e))?;
        names.push(name);
    }
    Ok(names)
}

/// Default ranges rescaled as if the 64-px desk images were 160 px wide, so
/// blur and streaks stay visible at toy resolution.
pub fn desk_ranges() -> ParamRanges {
    ParamRanges { reference_width: 160, ..ParamRanges::default() }
}

/// Paths of a generated train/test corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskCorpus {
    pub train_clean: PathBuf,
    pub train_degraded: PathBuf,
    pub test_clean: PathBuf,
    pub test_degraded: PathBuf,
    pub train_manifest: CorpusManifest,
    pub test_manifest: CorpusManifest,
}

/// Clean scenes plus equal-mix degraded copies under `root/{clean,degraded}/{train,test}`.
pub fn build_desk_corpus(root: &Path, train: usize, test: usize, seed: u64) -> Result<DeskCorpus> {
    let cfg = SynthConfig::default();
    let mix = ConditionMix::default();
    let ranges = desk_ranges();
    let split = |name: &str, count: usize, split_seed: u64| -> Result<(PathBuf, PathBuf, CorpusManifest)> {
        let clean = root.join("clean").join(name);
        let degraded = root.join("degraded").join(name);
        write_clean_corpus(&clean, count, split_seed, &cfg)?;
        let manifest = generate_corpus(&clean, &degraded, &mix, &ranges, split_seed)?;
        Ok((clean, degraded, manifest))
    };
    let (train_clean, train_degraded, train_manifest) = split("train", train, seed)?;
    let (test_clean, test_degraded, test_manifest) = split("test", test, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    Ok(DeskCorpus { train_clean, train_degraded, test_clean, test_degraded, train_manifest, test_manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_labelled() {
        let cfg = SynthConfig::default();
        let a = render_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = render_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        for seed in 0..30 {
            let (img, labels) = render_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(img.shape(), &[3, 64, 64]);
            assert!((1..=3).contains(&labels.len()));
            for l in &labels {
                l.bbox.validate().unwrap();
                assert!(l.class_id < 3);
                let side = l.bbox.w.max(l.bbox.h);
                assert!((0.2..=0.45).contains(&side), "{side}");
            }
        }
    }

    #[test]
    fn shape_boxes_are_tight() {
        for class_id in 0..3 {
            let s = make_shape(class_id, 32.0, 32.0, 20.0);
            let (x0, y0, x1, y1) = s.bounds();
            assert!(((x1 - x0).max(y1 - y0) - 20.0).abs() < 1e-9);
            assert!(s.contains(32.0, 32.0 + 0.01));
        }
    }
}
