//! Loss, optimiser, initialisation, augmentation and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Patch, IGNORE};
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::metrics::{ConfusionMatrix, Scores};
use crate::network::{fan_in, Model, Role};
use crate::real::{sin_cos_deg, Real};
use crate::tensor::{dims_str, quarter_turn_source, quarter_turns, rotate_image, rotation_source, Tensor4};

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient with respect to the logits. Pixels labelled `ignore` contribute
/// nothing.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor4<T>, labels: &[u8], ignore: Option<u8>) -> Result<(f64, Tensor4<T>)> {
    let [n, c, h, w] = logits.dims();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape("cross_entropy_loss", format!("{} labels", n * hw), labels.len()));
    }
    let count = labels.iter().filter(|&&l| Some(l) != ignore).count();
    if count == 0 {
        return Err(Error::invalid("cross_entropy_loss", "every pixel is ignored"));
    }
    let mut grad = Tensor4::zeros(logits.dims());
    let mut total = 0.0;
    let scale = 1.0 / count as f64;
    let mut probs = vec![0.0f64; c];
    for b in 0..n {
        for p in 0..hw {
            let l = labels[b * hw + p];
            if Some(l) == ignore {
                continue;
            }
            if l as usize >= c {
                return Err(Error::invalid("cross_entropy_loss", format!("label {l} outside 0..{c}")));
            }
            let base = b * c * hw + p;
            let max = (0..c)
                .map(|k| logits.data()[base + k * hw].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, q) in probs.iter_mut().enumerate() {
                *q = (logits.data()[base + k * hw].f64() - max).exp();
                z += *q;
            }
            total += z.ln() + max - logits.data()[base + l as usize * hw].f64();
            let g = grad.data_mut();
            for (k, q) in probs.iter().enumerate() {
                let onehot = if k == l as usize { 1.0 } else { 0.0 };
                g[base + k * hw] = T::of((q / z - onehot) * scale);
            }
        }
    }
    Ok((total * scale, grad))
}

/// One momentum step: `v <- momentum v - lr (g + wd p)`, `p <- p + v`.
/// Weight decay applies to [`Role::Weight`] tensors only; buffers are left
/// alone and masked filter cells are forced back to zero.
pub fn sgd_step<T: Real>(
    model: &mut Model<T>,
    grads: &[Vec<T>],
    velocity: &mut [Vec<T>],
    lr: f64,
    wd: f64,
    momentum: f64,
) -> Result<()> {
    let params = model.params_mut();
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} tensors", params.len()),
            format!("{} / {}", grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.len() != p.data.len() || v.len() != p.data.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} values in {}", p.data.len(), p.name),
                g.len(),
            ));
        }
        if !p.trainable() {
            continue;
        }
        let decay = if p.role == Role::Weight { wd } else { 0.0 };
        for ((x, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let nv = momentum * vi.f64() - lr * (gi.f64() + decay * x.f64());
            *vi = T::of(nv);
            *x = T::of(x.f64() + nv);
        }
        p.apply_mask();
        if p.mask.is_some() {
            if let Some(mask) = &p.mask {
                crate::rotkernel::apply_mask(v, mask);
            }
        }
    }
    Ok(())
}

/// `len` draws from `N(0, sqrt(2 / fan_in))`.
pub fn init_xavier_improved<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Result<Vec<T>> {
    if fan_in == 0 {
        return Err(Error::invalid("init_xavier_improved", "fan_in must be positive"));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Ok((0..len).map(|_| T::of(normal.sample(rng))).collect())
}

/// Draws all weights from `seed`; biases and shifts 0, scales 1, running
/// statistics at their start values, masked cells 0.
pub fn init_model<T: Real>(model: &mut Model<T>, seed: u64) {
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        if p.role != Role::Weight {
            continue;
        }
        let fi = fan_in(&cfg, &p.name, &p.dims);
        p.data = init_xavier_improved(p.data.len(), fi, &mut rng).expect("fan-in of a valid model is positive");
        p.apply_mask();
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    4
}

/// A run of epochs with a fixed learning rate and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub schedule: Vec<Segment>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl SgdConfig {
    /// The 11 / 6 / 5 epoch schedule used for the aerial benchmark, scaled by
    /// `factor` (0.5 gives the variant suggested for the plain CNN).
    pub fn preset(factor: f64, batch_size: usize) -> Self {
        let seg = |epochs, lr: f64, wd: f64| Segment {
            epochs,
            lr: lr * factor,
            weight_decay: wd * factor,
        };
        SgdConfig {
            momentum: 0.9,
            schedule: vec![seg(11, 2e-2, 4e-2), seg(6, 4e-3, 4e-3), seg(5, 8e-4, 8e-4)],
            batch_size,
        }
    }

    /// 15-epoch schedule for the synthetic benchmark: the same three-segment
    /// shape (8/4/3 epochs, each step a factor 5 down) with a lighter weight
    /// decay, since 64×64 patches give few updates per epoch.
    pub fn desk(batch_size: usize) -> Self {
        let seg = |epochs, f: f64| Segment {
            epochs,
            lr: 2e-2 * f,
            weight_decay: 4e-3 * f,
        };
        SgdConfig {
            momentum: 0.9,
            schedule: vec![seg(8, 1.0), seg(4, 0.2), seg(3, 0.04)],
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::config("sgd.schedule", "at least one segment is required"));
        }
        for (k, s) in self.schedule.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::config(
                    format!("sgd.schedule[{k}].lr"),
                    format!("{} is not positive", s.lr),
                ));
            }
            if !(s.weight_decay >= 0.0 && s.weight_decay.is_finite()) {
                return Err(Error::config(
                    format!("sgd.schedule[{k}].weight_decay"),
                    "must be non-negative",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("sgd.momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sgd.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.schedule.iter().map(|s| s.epochs).sum()
    }

    /// Learning rate and weight decay of (zero-based) `epoch`.
    pub fn at_epoch(&self, epoch: usize) -> (f64, f64) {
        let mut e = epoch;
        for s in &self.schedule {
            if e < s.epochs {
                return (s.lr, s.weight_decay);
            }
            e -= s.epochs;
        }
        let last = self.schedule.last().expect("validated");
        (last.lr, last.weight_decay)
    }
}

fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Uniform rotation in [0, 360).
    #[serde(default = "yes")]
    pub rotation: bool,
    #[serde(default = "half")]
    pub flip_horizontal: f64,
    #[serde(default = "half")]
    pub flip_vertical: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: true,
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotation: false,
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_horizontal", self.flip_horizontal),
            ("flip_vertical", self.flip_vertical),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{name}"), format!("{p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Rotates an `n x n` label map counter-clockwise by `angle` degrees with
/// nearest-neighbour sampling; pixels whose source is outside read `ignore`.
pub fn rotate_labels(labels: &[u8], n: usize, angle: f64, ignore: u8) -> Vec<u8> {
    if let Some(k) = quarter_turns(angle) {
        return (0..n * n)
            .map(|p| {
                let (si, sj) = quarter_turn_source(k, n, p / n, p % n);
                labels[si * n + sj]
            })
            .collect();
    }
    let (s, c) = sin_cos_deg(angle);
    (0..n * n)
        .map(|p| {
            let (r, cc) = rotation_source(n, n, s, c, p / n, p % n);
            let (r, cc) = (r.round(), cc.round());
            if r < 0.0 || cc < 0.0 || r > (n - 1) as f64 || cc > (n - 1) as f64 {
                ignore
            } else {
                labels[r as usize * n + cc as usize]
            }
        })
        .collect()
}

fn flip<T: Copy>(data: &mut [T], planes: usize, h: usize, w: usize, horizontal: bool) {
    for plane in data.chunks_mut(h * w).take(planes) {
        if horizontal {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        } else {
            for i in 0..h / 2 {
                for j in 0..w {
                    plane.swap(i * w + j, (h - 1 - i) * w + j);
                }
            }
        }
    }
}

/// Random rotation then random flips, applied identically to image and labels.
pub fn augment<T: Real, R: Rng + ?Sized>(patch: &Patch<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Patch<T>> {
    let (h, w) = (patch.h(), patch.w());
    let mut image = patch.image.clone();
    let mut labels = patch.labels.clone();
    if cfg.rotation {
        if h != w {
            return Err(Error::shape("augment", "square patch", dims_str(image.dims())));
        }
        let angle = rng.random_range(0.0..360.0);
        image = rotate_image(&image, angle);
        labels = rotate_labels(&labels, h, angle, IGNORE);
    }
    let c = image.c();
    for (p, horizontal) in [(cfg.flip_horizontal, true), (cfg.flip_vertical, false)] {
        if rng.random::<f64>() < p {
            flip(image.data_mut(), c, h, w, horizontal);
            flip(&mut labels, 1, h, w, horizontal);
        }
    }
    Patch::new(image, labels)
}

/// Independent generator for (seed, epoch, stream, index).
fn stream_rng(seed: u64, epoch: usize, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream((stream << 40) | index as u64);
    rng
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Per-pixel argmax over channels.
pub fn argmax_channels<T: Real>(x: &Tensor4<T>) -> Vec<u8> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if x.data()[(b * c + k) * hw + p] > x.data()[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

fn batch_of<T: Real>(patches: &[&Patch<T>]) -> Result<(Tensor4<T>, Vec<u8>)> {
    let images: Vec<&Tensor4<T>> = patches.iter().map(|p| &p.image).collect();
    let labels = patches.iter().flat_map(|p| p.labels.iter().copied()).collect();
    Ok((Tensor4::stack(&images)?, labels))
}

/// Inference-mode loss and confusion matrix over a dataset.
pub fn evaluate<T: Real>(model: &Model<T>, patches: &[Patch<T>], batch: usize) -> Result<(f64, ConfusionMatrix)> {
    let classes = model.config().classes;
    let mut cm = ConfusionMatrix::new(classes);
    let mut loss_sum = 0.0;
    let mut counted = 0usize;
    for chunk in patches.chunks(batch.max(1)) {
        let refs: Vec<&Patch<T>> = chunk.iter().collect();
        let (x, labels) = batch_of(&refs)?;
        let logits = model.infer(&x)?.logits;
        let n = labels.iter().filter(|&&l| l != IGNORE).count();
        if n > 0 {
            loss_sum += cross_entropy_loss(&logits, &labels, Some(IGNORE))?.0 * n as f64;
            counted += n;
        }
        cm.accumulate(&labels, &argmax_channels(&logits), Some(IGNORE))?;
    }
    Ok((if counted > 0 { loss_sum / counted as f64 } else { 0.0 }, cm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl EpochRecord {
    fn new(epoch: usize, split: &'static str, loss: f64, cm: &ConfusionMatrix) -> Result<Self> {
        let s = cm.scores()?;
        Ok(EpochRecord {
            epoch,
            split,
            loss,
            oa: s.oa,
            aa: s.aa,
            kappa: s.kappa,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, self.loss, self.oa, self.aa, self.kappa
        )
    }
}

pub const METRICS_HEADER: &str = "epoch,split,loss,oa,aa,kappa";

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Validation scores of the best epoch, if a validation set was given.
    pub best_val: Option<(usize, Scores)>,
}

/// Where and how often the loop writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Run directory receiving `metrics.csv`, `best.rtqc` and `last.rtqc`.
    pub dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Trains `model` in place. Every random choice (shuffle, augmentation,
/// dropout) is derived from `seed`, the epoch and the sample index, so runs
/// are reproducible regardless of thread count. On a non-finite loss the
/// parameters of the last finished epoch are restored and
/// [`Error::Diverged`] is returned.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    sgd: &SgdConfig,
    aug: &AugmentConfig,
    seed: u64,
    out: &TrainOutput,
) -> Result<TrainReport> {
    sgd.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_loop", "training set is empty"));
    }
    let csv = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            if !path.exists() {
                append_line(&path, METRICS_HEADER)?;
            }
            Some(path)
        }
        None => None,
    };
    let mut velocity: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, Scores)> = None;
    let n = train.len();
    let bs = sgd.batch_size;
    for epoch in 0..sgd.epochs() {
        let (lr, wd) = sgd.at_epoch(epoch);
        let snapshot = model.clone();
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut stream_rng(seed, epoch, STREAM_SHUFFLE, 0));
        let mut cm = ConfusionMatrix::new(model.config().classes);
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let patches: Vec<Patch<T>> = chunk
                .par_iter()
                .map(|&i| augment(&train.patches[i], aug, &mut stream_rng(seed, epoch, STREAM_AUGMENT, i)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Patch<T>> = patches.iter().collect();
            let (x, labels) = batch_of(&refs)?;
            let valid = labels.iter().filter(|&&l| l != IGNORE).count();
            if valid == 0 {
                continue;
            }
            let mut rng = stream_rng(seed, epoch, STREAM_DROPOUT, b);
            let (logits, cache) = model.forward_train(&x, &mut rng as &mut dyn RngCore)?;
            let (loss, grad) = cross_entropy_loss(&logits, &labels, Some(IGNORE))?;
            if !loss.is_finite() {
                *model = snapshot;
                return Err(Error::Diverged { epoch, batch: b });
            }
            let grads = model.backward(&cache, &grad)?;
            sgd_step(model, &grads, &mut velocity, lr, wd, sgd.momentum)?;
            loss_sum += loss * valid as f64;
            counted += valid;
            cm.accumulate(&labels, &argmax_channels(&logits), Some(IGNORE))?;
        }
        if model.params().iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            *model = snapshot;
            return Err(Error::Diverged {
                epoch,
                batch: n.div_ceil(bs),
            });
        }
        let mut records = vec![EpochRecord::new(epoch, "train", loss_sum / counted.max(1) as f64, &cm)?];
        let mut improved = false;
        if let Some(val) = val {
            let (vloss, vcm) = evaluate(model, &val.patches, bs)?;
            let scores = vcm.scores()?;
            improved = best.as_ref().is_none_or(|(_, b)| scores.oa > b.oa);
            records.push(EpochRecord::new(epoch, "val", vloss, &vcm)?);
            if improved {
                best = Some((epoch, scores));
            }
        }
        if out.verbose {
            for r in &records {
                eprintln!("{}", r.csv_row());
            }
        }
        if let Some(dir) = &out.dir {
            save_checkpoint(&dir.join("last.rtqc"), model)?;
            if improved || val.is_none() {
                save_checkpoint(&dir.join("best.rtqc"), model)?;
            }
        }
        if let Some(path) = &csv {
            for r in &records {
                append_line(path, &r.csv_row())?;
            }
        }
        log.extend(records);
    }
    Ok(TrainReport { log, best_val: best })
}

/// Fisher-Yates with an explicit generator, so the permutation only depends
/// on the generator's stream.
fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, Variant};

    #[test]
    fn loss_closed_forms() {
        let logits = Tensor4::<f64>::zeros([1, 6, 2, 2]);
        let (l, _) = cross_entropy_loss(&logits, &[0, 1, 2, 5], None).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        let sharp = Tensor4::<f64>::from_fn([1, 3, 1, 2], |[_, c, _, j]| if c == j { 1e3 } else { -1e3 });
        let (l, _) = cross_entropy_loss(&sharp, &[0, 1], None).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(cross_entropy_loss(&sharp, &[IGNORE, IGNORE], Some(IGNORE)).is_err());
        assert!(cross_entropy_loss(&sharp, &[3, 0], None).is_err());
    }

    #[test]
    fn loss_gradient_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor4::<f64>::from_fn([1, 3, 2, 2], |_| rng.random_range(-2.0..2.0));
        let labels = [0, 2, IGNORE, 1];
        let (_, grad) = cross_entropy_loss(&logits, &labels, Some(IGNORE)).unwrap();
        let eps = 1e-5;
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[k] += eps;
            let mut m = logits.clone();
            m.data_mut()[k] -= eps;
            let fd = (cross_entropy_loss(&p, &labels, Some(IGNORE)).unwrap().0
                - cross_entropy_loss(&m, &labels, Some(IGNORE)).unwrap().0)
                / (2.0 * eps);
            let g = grad.data()[k];
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8) < 1e-6, "{k}: {fd} vs {g}");
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            variant: Variant::Roteqnet,
            nf: 1,
            orientations: 4,
            classes: 3,
            in_channels: 2,
            filter_size: 5,
            layer_multipliers: vec![2, 2],
            mlp_widths: vec![4, 3],
            ..Default::default()
        }
    }

    #[test]
    fn sgd_closed_form_and_recurrence() {
        let mut model = Model::<f64>::init(&tiny(), 1).unwrap();
        let before = model.clone();
        let grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.5; p.data.len()]).collect();
        let mut vel: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let (lr, wd, mom) = (0.1, 0.01, 0.9);
        sgd_step(&mut model, &grads, &mut vel, lr, wd, mom).unwrap();
        sgd_step(&mut model, &grads, &mut vel, lr, wd, mom).unwrap();
        for (p, q) in model.params().iter().zip(before.params()) {
            for (k, (&x, &x0)) in p.data.iter().zip(&q.data).enumerate() {
                if !p.trainable() {
                    assert_eq!(x, x0);
                    continue;
                }
                if !p.is_free(k) {
                    assert_eq!(x, 0.0);
                    continue;
                }
                let d = if p.role == Role::Weight { wd } else { 0.0 };
                let v1 = -lr * (0.5 + d * x0);
                let x1 = x0 + v1;
                let v2 = mom * v1 - lr * (0.5 + d * x1);
                assert!((x - (x1 + v2)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut model = Model::<f64>::init(&tiny(), 1).unwrap();
        let mut vel: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        assert!(sgd_step(&mut model, &[], &mut vel, 0.1, 0.0, 0.9).is_err());
    }

    #[test]
    fn xavier_std_and_masked_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Vec<f64> = init_xavier_improved(100_000, 148, &mut rng).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let want = (2.0f64 / 148.0).sqrt();
        assert!((sd / want - 1.0).abs() < 0.05);
        assert!(init_xavier_improved::<f64, _>(3, 0, &mut rng).is_err());

        let cfg = ModelConfig::roteqnet(2, 8, 5, 4);
        let model = Model::<f32>::init(&cfg, 3).unwrap();
        let first = &model.params()[0];
        assert_eq!(fan_in(model.config(), &first.name, &first.dims), 148);
        for p in model.params() {
            for k in 0..p.data.len() {
                if !p.is_free(k) {
                    assert_eq!(p.data[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn augment_identity_and_quarter_turn() {
        let img = Tensor4::<f64>::from_fn([1, 2, 4, 4], |[_, c, i, j]| (c * 16 + i * 4 + j) as f64);
        let labels: Vec<u8> = (0..16).map(|k| (k % 3) as u8).collect();
        let p = Patch::new(img.clone(), labels.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&p, &AugmentConfig::none(), &mut rng).unwrap(), p);

        let rot = rotate_image(&img, 90.0);
        let rl = rotate_labels(&labels, 4, 90.0, IGNORE);
        for i in 0..4 {
            for j in 0..4 {
                let src = img.data().iter().position(|&v| v == rot.at(0, 0, i, j)).unwrap();
                assert_eq!(rl[i * 4 + j], labels[src]);
            }
        }
    }

    #[test]
    fn flips_preserve_label_histogram() {
        let img = Tensor4::<f64>::zeros([1, 1, 6, 6]);
        let labels: Vec<u8> = (0..36).map(|k| (k * 7 % 5) as u8).collect();
        let p = Patch::new(img, labels.clone()).unwrap();
        let cfg = AugmentConfig {
            rotation: false,
            flip_horizontal: 1.0,
            flip_vertical: 1.0,
        };
        let q = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let hist = |l: &[u8]| (0..5u8).map(|c| l.iter().filter(|&&x| x == c).count()).collect::<Vec<_>>();
        assert_eq!(hist(&q.labels), hist(&labels));
        assert_eq!(q.labels[0], labels[35]);
    }

    #[test]
    fn rotation_rejects_non_square() {
        let p = Patch::new(Tensor4::<f64>::zeros([1, 1, 4, 6]), vec![0; 24]).unwrap();
        assert!(augment(&p, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn oblique_label_rotation_marks_corners() {
        let labels = vec![1u8; 64];
        let r = rotate_labels(&labels, 8, 45.0, IGNORE);
        assert_eq!(r[0], IGNORE);
        assert_eq!(r[3 * 8 + 3], 1);
    }

    #[test]
    fn schedule_lookup() {
        let s = SgdConfig::preset(1.0, 4);
        assert_eq!(s.epochs(), 22);
        assert_eq!(s.at_epoch(0), (2e-2, 4e-2));
        assert_eq!(s.at_epoch(11), (4e-3, 4e-3));
        assert_eq!(s.at_epoch(21), (8e-4, 8e-4));
        let h = SgdConfig::preset(0.5, 2);
        assert_eq!(h.at_epoch(0), (1e-2, 2e-2));
    }
}
