//! Synthetic oriented-shapes dataset, band handling and tiling.
//!
//! Patches show discs, bars, L-shapes and rings on a textured background.
//! Bars and L-shapes share colour and height, as do discs and rings, so the
//! classes can only be told apart by shape. Every object gets an independent
//! uniform orientation.
//!
//! Layout on disk: `train/patch_00000.rtqt`, `val/...` (image RTQT followed by
//! a label RTQT holding class ids as floats, 255 = ignore) and a canonical
//! `manifest.json`. Images are stored raw; bands are z-scored at load time
//! with the training-split statistics recorded in the manifest.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json, decode_rtqt, encode_rtqt, raw_to_tensor4};
use crate::real::Real;
use crate::tensor::{concat_channels, dims_str, reflect_index, Tensor4};

/// Label id excluded from the loss and from the metrics.
pub const IGNORE: u8 = 255;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Bar,
    Lshape,
    Ring,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Bar => "bar",
            ShapeKind::Lshape => "lshape",
            ShapeKind::Ring => "ring",
        }
    }

    fn colour(self) -> [f64; 3] {
        match self {
            ShapeKind::Disc | ShapeKind::Ring => [0.75, 0.35, 0.3],
            ShapeKind::Bar | ShapeKind::Lshape => [0.3, 0.35, 0.75],
        }
    }

    fn height(self) -> f64 {
        match self {
            ShapeKind::Disc | ShapeKind::Ring => 1.0,
            ShapeKind::Bar | ShapeKind::Lshape => 0.6,
        }
    }

    fn palette(self) -> [u8; 3] {
        match self {
            ShapeKind::Disc => [220, 60, 60],
            ShapeKind::Bar => [60, 90, 220],
            ShapeKind::Lshape => [60, 200, 220],
            ShapeKind::Ring => [240, 160, 40],
        }
    }
}

fn default_seed() -> u64 {
    0
}
fn default_train() -> usize {
    200
}
fn default_val() -> usize {
    50
}
fn default_size() -> usize {
    64
}
fn default_objects_min() -> usize {
    2
}
fn default_objects_max() -> usize {
    5
}
fn default_jitter() -> f64 {
    0.15
}
fn default_noise() -> f64 {
    0.08
}
fn default_true() -> bool {
    true
}
fn default_shapes() -> Vec<ShapeKind> {
    vec![ShapeKind::Disc, ShapeKind::Bar, ShapeKind::Lshape, ShapeKind::Ring]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_train")]
    pub train_patches: usize,
    #[serde(default = "default_val")]
    pub val_patches: usize,
    /// Patch side in pixels; a multiple of 64.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_objects_min")]
    pub objects_min: usize,
    #[serde(default = "default_objects_max")]
    pub objects_max: usize,
    /// Relative scale drawn uniformly from `1 +- scale_jitter`.
    #[serde(default = "default_jitter")]
    pub scale_jitter: f64,
    /// Standard deviation of pixel noise; background texture is scaled with it.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Adds a fourth, height-like band.
    #[serde(default = "default_true")]
    pub height_band: bool,
    /// Foreground classes, ids 1.. in this order; 0 is background.
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeKind>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Nominal extents in pixels at scale 1.
const DISC_RADIUS: f64 = 6.0;
const BAR_LENGTH: f64 = 22.0;
const BAR_WIDTH: f64 = 6.0;
const ARM_LENGTH: f64 = 15.0;
const ARM_WIDTH: f64 = 6.0;
const STRIPE_PERIOD: f64 = 4.0;
const GROOVE_SIGMA: f64 = 0.8;
/// Relative darkening at the centre of a stripe or groove.
const TEXTURE_DEPTH: f64 = 0.5;
const RING_OUTER: f64 = 9.5;
const RING_INNER: f64 = 4.5;
const MIN_EXTENT: f64 = 4.0;
const PLACEMENT_TRIES: usize = 200;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(format!("data.synthetic.{path}"), msg));
        if self.size == 0 || !self.size.is_multiple_of(64) {
            return bad("size", format!("{} is not a positive multiple of 64", self.size));
        }
        if self.shapes.is_empty() {
            return bad("shapes", "need at least one foreground class".into());
        }
        let mut seen = self.shapes.clone();
        seen.sort_by_key(|s| *s as u8);
        seen.dedup();
        if seen.len() != self.shapes.len() {
            return bad("shapes", "duplicate shape".into());
        }
        if self.objects_min > self.objects_max {
            return bad(
                "objects_min",
                format!("{} exceeds objects_max {}", self.objects_min, self.objects_max),
            );
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return bad("scale_jitter", format!("{} outside [0, 1)", self.scale_jitter));
        }
        let smallest = [2.0 * DISC_RADIUS, BAR_WIDTH, ARM_WIDTH, RING_OUTER - RING_INNER]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if smallest * (1.0 - self.scale_jitter) < MIN_EXTENT {
            return bad(
                "scale_jitter",
                format!("{} shrinks shapes below {MIN_EXTENT} px", self.scale_jitter),
            );
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("{} is not a finite non-negative value", self.noise));
        }
        if self.train_patches == 0 {
            return bad("train_patches", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.shapes.len() + 1
    }

    pub fn in_channels(&self) -> usize {
        if self.height_band {
            4
        } else {
            3
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("background".to_string())
            .chain(self.shapes.iter().map(|s| s.name().to_string()))
            .collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        std::iter::once([128, 128, 128])
            .chain(self.shapes.iter().map(|s| s.palette()))
            .collect()
    }

    fn class_id(&self, kind: ShapeKind) -> u8 {
        1 + self.shapes.iter().position(|&s| s == kind).expect("shape in config") as u8
    }
}

/// One placed object; `angle` in degrees, counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
    pub scale: f64,
}

impl ObjectSpec {
    /// Whether the point `(x, y)` (pixel units, rows down) is inside.
    fn contains(&self, x: f64, y: f64) -> bool {
        self.shade(x, y).is_some()
    }

    /// Brightness factor of the surface texture at `(x, y)`, `None` outside.
    /// Bars carry stripes across their long axis, L-shapes a groove along
    /// each arm; both only make sense relative to the object's orientation.
    fn shade(&self, x: f64, y: f64) -> Option<f64> {
        let (s, c) = crate::real::sin_cos_deg(self.angle);
        let dx = (x - self.cx) / self.scale;
        let dy = (self.cy - y) / self.scale;
        // local frame: rotate back by the object angle
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        match self.kind {
            ShapeKind::Disc => (lx * lx + ly * ly <= DISC_RADIUS * DISC_RADIUS).then_some(1.0),
            ShapeKind::Ring => {
                let d2 = lx * lx + ly * ly;
                (RING_INNER * RING_INNER..=RING_OUTER * RING_OUTER)
                    .contains(&d2)
                    .then_some(1.0)
            }
            ShapeKind::Bar => (lx.abs() <= BAR_LENGTH / 2.0 && ly.abs() <= BAR_WIDTH / 2.0).then(|| {
                let phase = std::f64::consts::TAU * lx / STRIPE_PERIOD;
                1.0 - TEXTURE_DEPTH * 0.5 * (1.0 + phase.cos())
            }),
            ShapeKind::Lshape => {
                let (ax, ay) = (lx + ARM_LENGTH / 3.0, ly + ARM_LENGTH / 3.0);
                let arm = |p: f64, q: f64| (0.0..=ARM_LENGTH).contains(&p) && (0.0..=ARM_WIDTH).contains(&q);
                let groove =
                    |q: f64| 1.0 - TEXTURE_DEPTH * (-(q - ARM_WIDTH / 2.0).powi(2) / (2.0 * GROOVE_SIGMA * GROOVE_SIGMA)).exp();
                if arm(ax, ay) && arm(ay, ax) {
                    Some(groove(ax).min(groove(ay)))
                } else if arm(ax, ay) {
                    Some(groove(ay))
                } else if arm(ay, ax) {
                    Some(groove(ax))
                } else {
                    None
                }
            }
        }
    }

    fn radius(&self) -> f64 {
        let r = match self.kind {
            ShapeKind::Disc => DISC_RADIUS,
            ShapeKind::Ring => RING_OUTER,
            ShapeKind::Bar => (BAR_LENGTH * BAR_LENGTH + BAR_WIDTH * BAR_WIDTH).sqrt() / 2.0,
            ShapeKind::Lshape => (2.0f64).sqrt() * ARM_LENGTH,
        };
        r * self.scale
    }

    /// Pixel centres covered by the object.
    fn footprint(&self, size: usize) -> Vec<usize> {
        let r = self.radius().ceil() as i64 + 1;
        let mut out = Vec::new();
        let (ci, cj) = (self.cy.floor() as i64, self.cx.floor() as i64);
        for i in (ci - r).max(0)..(ci + r + 1).min(size as i64) {
            for j in (cj - r).max(0)..(cj + r + 1).min(size as i64) {
                if self.contains(j as f64 + 0.5, i as f64 + 0.5) {
                    out.push(i as usize * size + j as usize);
                }
            }
        }
        out
    }
}

/// Random generator for patch `index`: one ChaCha stream per patch.
fn patch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_object(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> ObjectSpec {
    let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let mut spec = ObjectSpec {
        kind,
        cx: 0.0,
        cy: 0.0,
        angle: rng.random_range(0.0..360.0),
        scale: 1.0 + rng.random_range(-1.0..=1.0) * cfg.scale_jitter,
    };
    sample_position(cfg, &mut spec, rng);
    spec
}

fn sample_position(cfg: &SyntheticConfig, spec: &mut ObjectSpec, rng: &mut ChaCha8Rng) {
    let margin = 4.0;
    let size = cfg.size as f64;
    spec.cx = rng.random_range(margin..size - margin);
    spec.cy = rng.random_range(margin..size - margin);
}

/// Places the objects of one patch. Kind, angle and scale are drawn once per
/// object so that they stay independent of the placement; only the position
/// is resampled while the object touches an earlier one; if no clean spot is found the least-overlapping candidate
/// is used, and more than 50% overlap is an error.
fn place_objects(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, index: usize) -> Result<Vec<ObjectSpec>> {
    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut occupied = vec![false; cfg.size * cfg.size];
    let mut placed = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, ObjectSpec, Vec<usize>)> = None;
        let mut cand = sample_object(cfg, rng);
        for _ in 0..PLACEMENT_TRIES {
            sample_position(cfg, &mut cand, rng);
            let fp = cand.footprint(cfg.size);
            if fp.is_empty() {
                continue;
            }
            let hit = fp.iter().filter(|&&k| occupied[k]).count();
            let frac = hit as f64 / fp.len() as f64;
            if best.as_ref().is_none_or(|b| frac < b.0) {
                best = Some((frac, cand, fp));
            }
            if hit == 0 {
                break;
            }
        }
        match best {
            Some((frac, spec, fp)) if frac <= 0.5 => {
                for k in fp {
                    occupied[k] = true;
                }
                placed.push(spec);
            }
            _ => {
                return Err(Error::config(
                    "data.synthetic.objects_max",
                    format!("patch {index}: cannot place {count} objects without more than 50% overlap"),
                ))
            }
        }
    }
    Ok(placed)
}

/// Objects of patch `index` as the generator would place them.
pub fn plan_patch(cfg: &SyntheticConfig, index: usize) -> Result<Vec<ObjectSpec>> {
    place_objects(cfg, &mut patch_rng(cfg.seed, index), index)
}

/// A raw (un-normalised) image `(1, bands, size, size)` and its labels.
pub fn render_patch(cfg: &SyntheticConfig, index: usize) -> Result<Patch<f32>> {
    let mut rng = patch_rng(cfg.seed, index);
    let objects = place_objects(cfg, &mut rng, index)?;
    let n = cfg.size;
    let bands = cfg.in_channels();
    let mut img = vec![0.0f64; bands * n * n];
    // low-frequency background texture: a few random plane waves per band
    let base = [0.4, 0.5, 0.35, 0.0];
    for b in 0..bands {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.02..0.08) * std::f64::consts::TAU;
                (
                    freq * theta.cos(),
                    freq * theta.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                let t: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * j as f64 + fy * i as f64 + ph).sin())
                    .sum();
                img[(b * n + i) * n + j] = base[b] + cfg.noise * t;
            }
        }
    }
    let mut labels = vec![0u8; n * n];
    const SUB: usize = 3;
    for obj in &objects {
        let colour = obj.kind.colour();
        let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
        let id = cfg.class_id(obj.kind);
        let r = obj.radius().ceil() as i64 + 1;
        let (ci, cj) = (obj.cy.floor() as i64, obj.cx.floor() as i64);
        for i in (ci - r).max(0)..(ci + r + 1).min(n as i64) {
            for j in (cj - r).max(0)..(cj + r + 1).min(n as i64) {
                let (i, j) = (i as usize, j as usize);
                let mut hits = 0;
                let mut shade = 0.0;
                for si in 0..SUB {
                    for sj in 0..SUB {
                        let y = i as f64 + (si as f64 + 0.5) / SUB as f64;
                        let x = j as f64 + (sj as f64 + 0.5) / SUB as f64;
                        if let Some(t) = obj.shade(x, y) {
                            hits += 1;
                            shade += t;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cover = hits as f64 / (SUB * SUB) as f64;
                let shade = shade / hits as f64;
                for b in 0..bands {
                    let target = if b < 3 {
                        (colour[b] + tint[b]) * shade
                    } else {
                        obj.kind.height()
                    };
                    let v = &mut img[(b * n + i) * n + j];
                    *v = (1.0 - cover) * *v + cover * target;
                }
                if obj.contains(j as f64 + 0.5, i as f64 + 0.5) {
                    labels[i * n + j] = id;
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v += cfg.noise * standard_normal(&mut rng);
    }
    Patch::new(
        Tensor4::from_vec([1, bands, n, n], img.into_iter().map(|v| v as f32).collect())?,
        labels,
    )
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// An image `(1, bands, h, w)` with one label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub image: Tensor4<T>,
    pub labels: Vec<u8>,
}

impl<T: Real> Patch<T> {
    pub fn new(image: Tensor4<T>, labels: Vec<u8>) -> Result<Self> {
        if image.n() != 1 || labels.len() != image.h() * image.w() {
            return Err(Error::shape(
                "Patch::new",
                format!("one image with {} labels", image.h() * image.w()),
                format!("{} with {} labels", dims_str(image.dims()), labels.len()),
            ));
        }
        Ok(Patch { image, labels })
    }

    pub fn h(&self) -> usize {
        self.image.h()
    }

    pub fn w(&self) -> usize {
        self.image.w()
    }

    /// Bitmask of the classes present (ignore excluded), class `k` -> bit `k`.
    pub fn presence(&self) -> u64 {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE && l < 64)
            .fold(0u64, |m, &l| m | (1 << l))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        encode_rtqt(&self.image.dims(), self.image.data(), &mut out)?;
        let labels: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        encode_rtqt(&[self.h(), self.w()], &labels, &mut out)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let image = raw_to_tensor4(&decode_rtqt(r)?)?;
        let raw = decode_rtqt(r)?;
        let labels = raw
            .to_vec::<f64>()
            .into_iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::format("RTQT", format!("label {v} is not a class id")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        if raw.dims() != [image.h(), image.w()] {
            return Err(Error::format(
                "RTQT",
                format!("label dims {:?} do not match image", raw.dims()),
            ));
        }
        Patch::new(image, labels)
    }
}

/// Channel concatenation with the height band last.
pub fn stack_height_band<T: Real>(optical: &Tensor4<T>, height: &Tensor4<T>) -> Result<Tensor4<T>> {
    if optical.n() != height.n() || optical.h() != height.h() || optical.w() != height.w() {
        return Err(Error::shape(
            "stack_height_band",
            dims_str(optical.dims()),
            dims_str(height.dims()),
        ));
    }
    concat_channels(&[optical, height])
}

/// Per-band mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-6;

impl BandStats {
    pub fn compute<T: Real>(images: &[&Tensor4<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("BandStats::compute", "no images"))?;
        let c = first.c();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for b in 0..c {
            let mut count = 0usize;
            let mut s = 0.0;
            for img in images {
                if img.c() != c {
                    return Err(Error::shape("BandStats::compute", format!("{c} bands"), dims_str(img.dims())));
                }
                for n in 0..img.n() {
                    s += img.plane(n, b).iter().map(|v| v.f64()).sum::<f64>();
                    count += img.h() * img.w();
                }
            }
            let mu = s / count as f64;
            let mut v = 0.0;
            for img in images {
                for n in 0..img.n() {
                    v += img.plane(n, b).iter().map(|x| (x.f64() - mu).powi(2)).sum::<f64>();
                }
            }
            mean[b] = mu;
            std[b] = (v / count as f64).sqrt();
        }
        Ok(BandStats { mean, std })
    }

    /// `(x - mean) / max(std, 1e-6)` per band.
    pub fn normalize<T: Real>(&self, x: &mut Tensor4<T>) -> Result<()> {
        if x.c() != self.mean.len() {
            return Err(Error::shape(
                "BandStats::normalize",
                format!("{} bands", self.mean.len()),
                dims_str(x.dims()),
            ));
        }
        for n in 0..x.n() {
            for b in 0..x.c() {
                let (mu, sd) = (self.mean[b], self.std[b].max(STD_FLOOR));
                for v in x.plane_mut(n, b) {
                    *v = T::of((v.f64() - mu) / sd);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: SyntheticConfig,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub in_channels: usize,
    pub band_stats: BandStats,
    /// Generator indices stored as `train/patch_%05d` in file order.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub class_pixels_train: Vec<u64>,
    pub class_pixels_val: Vec<u64>,
}

impl Manifest {
    /// Reads `manifest.json` from a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_file(&dir.join("manifest.json"))
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }
}

/// Stratified split: patches are ordered by class-presence bitmask and every
/// `N / val`-th one goes to validation, which gives exactly `val` patches
/// with each presence pattern represented proportionally.
pub fn stratified_split(presence: &[u64], val: usize) -> (Vec<usize>, Vec<usize>) {
    let n = presence.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (presence[i], i));
    let mut train = Vec::new();
    let mut val_idx = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        // number of validation picks among the first rank+1 items
        let before = rank * val / n.max(1);
        let after = (rank + 1) * val / n.max(1);
        if after > before {
            val_idx.push(i);
        } else {
            train.push(i);
        }
    }
    train.sort_unstable();
    val_idx.sort_unstable();
    (train, val_idx)
}

fn class_pixels(patches: &[&Patch<f32>], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for p in patches {
        for &l in &p.labels {
            if (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts
}

fn patch_path(dir: &Path, split: &str, k: usize) -> std::path::PathBuf {
    dir.join(split).join(format!("patch_{k:05}.rtqt"))
}

/// Generates the dataset into `dir` and returns its manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let total = cfg.train_patches + cfg.val_patches;
    let patches: Vec<Patch<f32>> = (0..total)
        .into_par_iter()
        .map(|i| render_patch(cfg, i))
        .collect::<Result<_>>()?;
    let presence: Vec<u64> = patches.iter().map(|p| p.presence()).collect();
    let (train, val) = stratified_split(&presence, cfg.val_patches);
    for split in ["train", "val"] {
        fs::create_dir_all(dir.join(split))?;
    }
    let jobs: Vec<(&str, usize, usize)> = train
        .iter()
        .enumerate()
        .map(|(k, &i)| ("train", k, i))
        .chain(val.iter().enumerate().map(|(k, &i)| ("val", k, i)))
        .collect();
    jobs.par_iter()
        .try_for_each(|&(split, k, i)| atomic_write(&patch_path(dir, split, k), &patches[i].encode()?))?;
    let train_refs: Vec<&Patch<f32>> = train.iter().map(|&i| &patches[i]).collect();
    let val_refs: Vec<&Patch<f32>> = val.iter().map(|&i| &patches[i]).collect();
    let images: Vec<&Tensor4<f32>> = train_refs.iter().map(|p| &p.image).collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        class_names: cfg.class_names(),
        palette: cfg.palette(),
        in_channels: cfg.in_channels(),
        band_stats: BandStats::compute(&images)?,
        class_pixels_train: class_pixels(&train_refs, cfg.classes()),
        class_pixels_val: class_pixels(&val_refs, cfg.classes()),
        train_indices: train,
        val_indices: val,
    };
    atomic_write(&dir.join("manifest.json"), canonical_json(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// A dataset split loaded into memory with normalised bands.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub manifest: Manifest,
    pub patches: Vec<Patch<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let count = match split {
            Split::Train => manifest.train_indices.len(),
            Split::Val => manifest.val_indices.len(),
        };
        let patches = (0..count)
            .map(|k| {
                let p = Patch::<f32>::decode(&fs::read(patch_path(dir, split.name(), k))?)?;
                let mut image: Tensor4<T> = p.image.cast();
                manifest.band_stats.normalize(&mut image)?;
                Patch::new(image, p.labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Cuts `image` (`(1, c, H, W)`) into `tile x tile` patches at `stride`.
/// Tiles reaching past the border are reflect-padded and their padded
/// pixels labelled [`IGNORE`].
pub fn tile_image<T: Real>(image: &Tensor4<T>, labels: &[u8], tile: usize, stride: usize) -> Result<Vec<Patch<T>>> {
    let (h, w) = (image.h(), image.w());
    if image.n() != 1 || labels.len() != h * w {
        return Err(Error::shape(
            "tile_image",
            "one image with one label per pixel",
            dims_str(image.dims()),
        ));
    }
    if tile == 0 || stride == 0 || tile > h || tile > w {
        return Err(Error::invalid(
            "tile_image",
            format!("tile {tile} / stride {stride} invalid for {h}x{w}"),
        ));
    }
    let starts = |len: usize| -> Vec<usize> { (0..(len - tile).div_ceil(stride) + 1).map(|k| k * stride).collect() };
    let mut out = Vec::new();
    for &i0 in &starts(h) {
        for &j0 in &starts(w) {
            let img = Tensor4::from_fn([1, image.c(), tile, tile], |[_, c, i, j]| {
                image.at(0, c, reflect_index((i0 + i) as i64, h), reflect_index((j0 + j) as i64, w))
            });
            let mut lab = Vec::with_capacity(tile * tile);
            for i in 0..tile {
                for j in 0..tile {
                    let (y, x) = (i0 + i, j0 + j);
                    lab.push(if y < h && x < w { labels[y * w + x] } else { IGNORE });
                }
            }
            out.push(Patch::new(img, lab)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn zero_objects_give_background() {
        let cfg = SyntheticConfig {
            objects_min: 0,
            objects_max: 0,
            ..Default::default()
        };
        let p = render_patch(&cfg, 3).unwrap();
        assert!(p.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn rendering_is_reproducible_and_varies_by_index() {
        let cfg = SyntheticConfig::default();
        assert_eq!(render_patch(&cfg, 7).unwrap(), render_patch(&cfg, 7).unwrap());
        assert_ne!(render_patch(&cfg, 7).unwrap(), render_patch(&cfg, 8).unwrap());
    }

    #[test]
    fn labels_follow_geometry() {
        let bar = ObjectSpec {
            kind: ShapeKind::Bar,
            cx: 32.0,
            cy: 32.0,
            angle: 90.0,
            scale: 1.0,
        };
        // vertical bar: long along rows
        assert!(bar.contains(32.0, 32.0 - 10.0));
        assert!(!bar.contains(32.0 + 10.0, 32.0));
    }

    #[test]
    fn bar_orientations_are_uniform() {
        let cfg = SyntheticConfig::default();
        let mut bins = [0u64; 12];
        let mut total = 0;
        let mut i = 0;
        while total < 10_000 {
            for o in plan_patch(&cfg, i).unwrap() {
                if o.kind == ShapeKind::Bar {
                    bins[(o.angle / 30.0) as usize % 12] += 1;
                    total += 1;
                }
            }
            i += 1;
        }
        let expected = total as f64 / 12.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(11.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn overcrowding_is_rejected() {
        let cfg = SyntheticConfig {
            objects_min: 60,
            objects_max: 60,
            ..Default::default()
        };
        assert!(matches!(render_patch(&cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn split_is_exact_and_disjoint() {
        let presence: Vec<u64> = (0..250u64).map(|i| 1 | ((i % 7) << 1)).collect();
        let (t, v) = stratified_split(&presence, 50);
        assert_eq!((t.len(), v.len()), (200, 50));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..250).collect::<Vec<_>>());
        for pattern in 0..7u64 {
            let key = 1 | (pattern << 1);
            let n = presence.iter().filter(|&&p| p == key).count();
            let nv = v.iter().filter(|&&i| presence[i] == key).count();
            assert!((nv as f64 - n as f64 * 0.2).abs() <= 1.0, "pattern {pattern}: {nv} of {n}");
        }
    }

    #[test]
    fn height_band_stacking_and_constant_band() {
        let optical = Tensor4::<f64>::filled([1, 3, 4, 4], 0.5);
        let height = Tensor4::<f64>::filled([1, 1, 4, 4], 2.0);
        let mut s = stack_height_band(&optical, &height).unwrap();
        assert_eq!(s.c(), 4);
        assert!(stack_height_band(&optical, &Tensor4::zeros([1, 1, 4, 5])).is_err());
        let stats = BandStats::compute(&[&s]).unwrap();
        stats.normalize(&mut s).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiling_counts_and_padding() {
        let img = Tensor4::<f32>::zeros([1, 1, 1024, 1024]);
        let lab = vec![1u8; 1024 * 1024];
        assert_eq!(tile_image(&img, &lab, 512, 512).unwrap().len(), 4);
        assert_eq!(tile_image(&img, &lab, 512, 256).unwrap().len(), 9);
        let small = Tensor4::<f32>::zeros([1, 1, 64, 64]);
        assert_eq!(tile_image(&small, &vec![0u8; 4096], 64, 64).unwrap().len(), 1);

        let img = Tensor4::<f32>::from_fn([1, 1, 5, 6], |[_, _, i, j]| (i * 6 + j) as f32);
        let tiles = tile_image(&img, &[2u8; 30], 4, 4).unwrap();
        assert_eq!(tiles.len(), 4);
        let last = &tiles[3];
        assert_eq!(last.labels[0], 2);
        assert_eq!(last.labels[2], IGNORE);
        assert_eq!(last.image.at(0, 0, 0, 2), img.at(0, 0, 4, 4));
    }

    #[test]
    fn patch_codec_round_trip() {
        let p = render_patch(&SyntheticConfig::default(), 1).unwrap();
        assert_eq!(Patch::decode(&p.encode().unwrap()).unwrap(), p);
    }
}
