//! Synthetic extreme-condition imagery: scattering fog, rain streaks and
//! linear motion blur, plus corpus generation with a hashed manifest.
//!
//! Images are `(C, H, W)` tensors in `[0, 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::{load_rgb, save_rgb};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Fog,
    Rain,
    MotionBlur,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 3] = [ConditionKind::Fog, ConditionKind::Rain, ConditionKind::MotionBlur];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Fog => "fog",
            ConditionKind::Rain => "rain",
            ConditionKind::MotionBlur => "motion_blur",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainParams {
    pub streak_count: usize,
    /// Streak length in pixels.
    pub length: usize,
    /// Degrees counter-clockwise from the +x axis.
    pub angle: f64,
    pub brightness: f64,
}

/// One synthetic condition and its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Degradation {
    Fog { beta: f64, airlight: f64 },
    Rain(RainParams),
    MotionBlur { length: usize, angle: f64 },
}

impl Degradation {
    pub fn kind(&self) -> ConditionKind {
        match self {
            Degradation::Fog { .. } => ConditionKind::Fog,
            Degradation::Rain(_) => ConditionKind::Rain,
            Degradation::MotionBlur { .. } => ConditionKind::MotionBlur,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match self.degradation {
            Degradation::Fog { beta, airlight } => apply_fog(image, beta, airlight, self.seed),
            Degradation::Rain(p) => apply_rain(image, &p, self.seed),
            Degradation::MotionBlur { length, angle } => apply_motion_blur(image, length, angle),
        }
    }
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        ref s => Err(Error::input(format!("expected a (C, H, W) image, got {s:?}"))),
    }
}

/// Atmospheric scattering: `J·t + A·(1 − t)`.
pub fn scatter(radiance: f64, transmission: f64, airlight: f64) -> f64 {
    radiance * transmission + airlight * (1.0 - transmission)
}

/// Depth proxy: 1 at the top row falling linearly to 0.2 at the bottom, plus
/// smooth seeded noise of amplitude 0.1 (bilinear over a 4×4 lattice).
pub fn fog_depth(h: usize, w: usize, seed: u64) -> Vec<f64> {
    const LATTICE: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..LATTICE * LATTICE).map(|_| rng.gen_range(-0.1..=0.1)).collect();
    let at = |gy: usize, gx: usize| grid[gy.min(LATTICE - 1) * LATTICE + gx.min(LATTICE - 1)];
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = frac(y, h) * (LATTICE - 1) as f64;
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        for x in 0..w {
            let fx = frac(x, w) * (LATTICE - 1) as f64;
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            let noise = top * (1.0 - ty) + bottom * ty;
            d.push(1.0 - 0.8 * frac(y, h) + noise);
        }
    }
    d
}

pub fn apply_fog<T: Scalar>(image: &Tensor<T>, beta: f64, airlight: f64, seed: u64) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    if !(beta >= 0.0) {
        return Err(Error::input(format!("fog beta must be nonnegative, got {beta}")));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::input(format!("airlight must lie in [0,1], got {airlight}")));
    }
    if beta == 0.0 {
        return Ok(image.clone());
    }
    let depth = fog_depth(h, w, seed);
    let mut out = image.clone();
    for ch in 0..c {
        for (p, d) in depth.iter().enumerate() {
            let t = (-beta * d).exp();
            let i = ch * h * w + p;
            out[i] = T::lit(scatter(image[i].as_f64(), t, airlight).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Normalized one-pixel-wide line kernel as `(dy, dx, weight)` taps.
pub fn line_kernel(length: usize, angle_deg: f64) -> Vec<(isize, isize, f64)> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut taps: BTreeMap<(isize, isize), f64> = BTreeMap::new();
    let centre = (length as f64 - 1.0) / 2.0;
    for i in 0..length {
        let t = i as f64 - centre;
        let dx = (t * c).round() as isize;
        let dy = (-t * s).round() as isize;
        *taps.entry((dy, dx)).or_insert(0.0) += 1.0 / length as f64;
    }
    taps.into_iter().map(|((dy, dx), w)| (dy, dx, w)).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn filter_planes(planes: &[f64], planes_n: usize, h: usize, w: usize, taps: &[(isize, isize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; planes.len()];
    for pl in 0..planes_n {
        let src = &planes[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .map(|&(dy, dx, k)| k * src[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)])
                    .sum();
            }
        }
    }
    out
}

/// Correlates each channel with a [`line_kernel`], reflect-padded.
pub fn apply_motion_blur<T: Scalar>(image: &Tensor<T>, length: usize, angle_deg: f64) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    if length < 1 {
        return Err(Error::input("blur length must be at least 1"));
    }
    if length == 1 {
        return Ok(image.clone());
    }
    let taps = line_kernel(length, angle_deg);
    let planes: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let out = filter_planes(&planes, c, h, w, &taps);
    Tensor::from_vec(image.shape(), out.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect())
}

/// Adds seeded bright streaks (angle jittered by ±10°), softened by a
/// length-3 blur along the streak direction, then clips to `[0, 1]`.
/// The overlay is nonnegative, so no pixel gets darker.
pub fn apply_rain<T: Scalar>(image: &Tensor<T>, params: &RainParams, seed: u64) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    if !(0.0..=1.0).contains(&params.brightness) || !params.angle.is_finite() {
        return Err(Error::input(format!("invalid rain parameters {params:?}")));
    }
    if params.streak_count == 0 || params.length == 0 || params.brightness == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut overlay = vec![0.0f64; h * w];
    for _ in 0..params.streak_count {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        let angle = (params.angle + rng.gen_range(-10.0..=10.0)).to_radians();
        let (s, co) = angle.sin_cos();
        for i in 0..params.length {
            let x = (x0 + i as f64 * co).round();
            let y = (y0 - i as f64 * s).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                overlay[y as usize * w + x as usize] += params.brightness;
            }
        }
    }
    let overlay = filter_planes(&overlay, 1, h, w, &line_kernel(3, params.angle));
    let mut out = image.clone();
    for ch in 0..c {
        for (p, o) in overlay.iter().enumerate() {
            let i = ch * h * w + p;
            out[i] = T::lit((image[i].as_f64() + o).min(1.0)).max(image[i]);
        }
    }
    Ok(out)
}

/// Share of each condition in a generated corpus; sums to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionMix {
    pub fog: f64,
    pub rain: f64,
    pub motion_blur: f64,
}

impl Default for ConditionMix {
    fn default() -> Self {
        ConditionMix { fog: 1.0 / 3.0, rain: 1.0 / 3.0, motion_blur: 1.0 / 3.0 }
    }
}

impl ConditionMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.fog, self.rain, self.motion_blur];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("condition proportions must be nonnegative and sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Parses `fog=0.34,rain=0.33,blur=0.33`; omitted conditions get 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut mix = ConditionMix { fog: 0.0, rain: 0.0, motion_blur: 0.0 };
        for part in text.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::input(format!("mix entry {part:?} is not key=value")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::input(format!("bad proportion in {part:?}")))?;
            match k.trim() {
                "fog" | "haze" => mix.fog = v,
                "rain" => mix.rain = v,
                "blur" | "motion_blur" => mix.motion_blur = v,
                other => return Err(Error::input(format!("unknown condition {other:?}"))),
            }
        }
        mix.validate()?;
        Ok(mix)
    }

    fn pick(&self, u: f64) -> ConditionKind {
        let shares = [self.fog, self.rain, self.motion_blur];
        let mut acc = 0.0;
        for (kind, share) in ConditionKind::ALL.into_iter().zip(shares) {
            acc += share;
            if u < acc {
                return kind;
            }
        }
        // u landed past a sum that rounds just below 1
        let last = shares.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        ConditionKind::ALL[last]
    }
}

/// Sampling ranges, stated for images `reference_width` pixels wide; pixel
/// quantities scale linearly with the actual width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamRanges {
    pub reference_width: usize,
    pub fog_beta: [f64; 2],
    pub airlight: [f64; 2],
    pub blur_length: [usize; 2],
    pub blur_angle: [f64; 2],
    pub streak_count: [usize; 2],
    pub streak_length: [usize; 2],
    pub streak_angle: [f64; 2],
    pub streak_brightness: [f64; 2],
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            reference_width: 640,
            fog_beta: [0.5, 2.0],
            airlight: [0.7, 1.0],
            blur_length: [5, 15],
            blur_angle: [0.0, 180.0],
            streak_count: [100, 300],
            streak_length: [10, 30],
            streak_angle: [70.0, 110.0],
            streak_brightness: [0.15, 0.35],
        }
    }
}

impl ParamRanges {
    fn scale(&self, v: usize, width: usize) -> usize {
        ((v as f64 * width as f64 / self.reference_width.max(1) as f64).round() as usize).max(1)
    }

    fn int_in<R: Rng>(rng: &mut R, r: [usize; 2]) -> usize {
        rng.gen_range(r[0].min(r[1])..=r[0].max(r[1]))
    }

    fn real_in<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0].min(r[1])..=r[0].max(r[1]))
        }
    }

    /// Draws a degradation of `kind` for an image `width` pixels wide.
    pub fn sample<R: Rng>(&self, kind: ConditionKind, width: usize, rng: &mut R) -> Degradation {
        match kind {
            ConditionKind::Fog => Degradation::Fog {
                beta: Self::real_in(rng, self.fog_beta),
                airlight: Self::real_in(rng, self.airlight),
            },
            ConditionKind::Rain => {
                let count = Self::int_in(rng, self.streak_count);
                let length = Self::int_in(rng, self.streak_length);
                Degradation::Rain(RainParams {
                    streak_count: self.scale(count, width),
                    length: self.scale(length, width),
                    angle: Self::real_in(rng, self.streak_angle),
                    brightness: Self::real_in(rng, self.streak_brightness),
                })
            }
            ConditionKind::MotionBlur => {
                let length = Self::int_in(rng, self.blur_length);
                Degradation::MotionBlur {
                    length: self.scale(length, width),
                    angle: Self::real_in(rng, self.blur_angle),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
    #[serde(flatten)]
    pub spec: DegradationSpec,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub image: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub global_seed: u64,
    pub proportions: ConditionMix,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub errors: Vec<SkippedEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl CorpusManifest {
    pub fn counts(&self) -> BTreeMap<ConditionKind, usize> {
        let mut m: BTreeMap<ConditionKind, usize> = ConditionKind::ALL.iter().map(|&k| (k, 0)).collect();
        for e in &self.entries {
            *m.entry(e.spec.degradation.kind()).or_default() += 1;
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks every entry's hash against the file under `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let path = root.join(&e.image);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::input(format!("hash mismatch for {}", e.image)));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Seed of one image, independent of enumeration order.
pub fn image_seed(global_seed: u64, relative_path: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(relative_path.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// PNG files under `dir`, as sorted `/`-separated relative paths.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                let rel = path.strip_prefix(root).expect("walked path under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn label_path_for(image_rel: &str) -> String {
    match image_rel.rsplit_once('.') {
        Some((stem, _)) => format!("{stem}.txt"),
        None => format!("{image_rel}.txt"),
    }
}

/// Degrades every labelled PNG of `clean_dir` into `out_dir` and writes
/// `manifest.json` there. Images without labels, or unreadable ones, are
/// listed under `errors` and skipped.
pub fn generate_corpus(
    clean_dir: &Path,
    out_dir: &Path,
    proportions: &ConditionMix,
    ranges: &ParamRanges,
    global_seed: u64,
) -> Result<CorpusManifest> {
    proportions.validate()?;
    let images = list_images(clean_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for rel in images {
        let label_rel = label_path_for(&rel);
        let label_bytes = match fs::read(clean_dir.join(&label_rel)) {
            Ok(b) => b,
            Err(e) => {
                errors.push(SkippedEntry { image: rel, error: format!("missing label {label_rel}: {e}") });
                continue;
            }
        };
        let clean: Tensor<f64> = match load_rgb(&clean_dir.join(&rel)) {
            Ok(t) => t,
            Err(e) => {
                errors.push(SkippedEntry { image: rel, error: e.to_string() });
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(global_seed, &rel));
        let kind = proportions.pick(rng.gen::<f64>());
        let width = clean.shape()[2];
        let spec = DegradationSpec { degradation: ranges.sample(kind, width, &mut rng), seed: rng.next_u64() };
        let degraded = spec.apply(&clean)?;
        let out_image = out_dir.join(&rel);
        save_rgb(&out_image, &degraded)?;
        let out_label = out_dir.join(&label_rel);
        fs::write(&out_label, &label_bytes).map_err(|e| Error::io(&out_label, e))?;
        let bytes = fs::read(&out_image).map_err(|e| Error::io(&out_image, e))?;
        entries.push(ManifestEntry { image: rel, label: label_rel, spec, sha256: sha256_hex(&bytes) });
    }
    let manifest = CorpusManifest { global_seed, proportions: *proportions, entries, errors };
    let path: PathBuf = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
