//! Rotation-equivariance measurements.
//!
//! For an angle `a`, a model is compared on `x` and `rotate(x, a)`:
//! predicted label maps through the argmax agreement between
//! `predict(rotate(x))` and `rotate(predict(x))`, and block outputs through
//! the relative error between the fields of the rotated input and the
//! rotated fields (vectors turned in place). Each block is compared at its
//! own resolution. Only the central crop is scored, and pixels whose
//! rotation source falls outside the image are skipped.

use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::network::{Feature, Model};
use crate::orientpool::orientation_pool;
use crate::real::Real;
use crate::rotkernel::{rotconv_forward, CanonicalFilter, OrientationSet};
use crate::tensor::{rotate_image, Tensor4};
use crate::train::{argmax_channels, rotate_labels};
use crate::vecfield::rotate_vector_field;

/// Fraction of each side kept when scoring.
pub const INTERIOR: f64 = 0.8;

pub const REPORT_HEADER: &str = "angle,orientations,patches,agreement,field_error,block_errors";

#[derive(Debug, Clone, PartialEq)]
pub struct EquiRecord {
    pub angle: f64,
    pub orientations: usize,
    pub patches: usize,
    /// Mean per-pixel argmax agreement.
    pub agreement: f64,
    /// Mean of `block_errors`.
    pub field_error: f64,
    /// Per block, summed `|z(rot x) - rot z(x)|` over summed `|rot z(x)|`.
    pub block_errors: Vec<f64>,
}

impl EquiRecord {
    pub fn csv_row(&self) -> String {
        let blocks: Vec<String> = self.block_errors.iter().map(|e| format!("{e:.6e}")).collect();
        format!(
            "{},{},{},{:.6},{:.6e},{}",
            self.angle,
            self.orientations,
            self.patches,
            self.agreement,
            self.field_error,
            blocks.join(";")
        )
    }
}

/// `[lo, hi)` of the centred crop keeping `fraction` of `n`.
pub fn interior_range(n: usize, fraction: f64) -> (usize, usize) {
    let margin = ((n as f64 * (1.0 - fraction)) / 2.0).round() as usize;
    (margin.min(n / 2), n - margin.min(n / 2))
}

/// Interior mask that also drops pixels rotated in from outside the image.
fn scoring_mask(n: usize, angle: f64) -> Vec<bool> {
    let support = rotate_labels(&vec![0u8; n * n], n, angle, IGNORE);
    let (lo, hi) = interior_range(n, INTERIOR);
    (0..n * n)
        .map(|p| {
            let (i, j) = (p / n, p % n);
            (lo..hi).contains(&i) && (lo..hi).contains(&j) && support[p] != IGNORE
        })
        .collect()
}

#[derive(Default)]
struct Tally {
    agree: usize,
    scored: usize,
    err: Vec<f64>,
    norm: Vec<f64>,
}

/// `(sum |have - want|, sum |want|)` over the scored pixels of one block.
fn block_error<T: Real>(plain: &Feature<T>, turned: &Feature<T>, angle: f64) -> (f64, f64) {
    let n = plain.dims()[2];
    let mask = scoring_mask(n, angle);
    let (mut err, mut norm) = (0.0, 0.0);
    match (plain, turned) {
        (Feature::Field(a), Feature::Field(have)) => {
            let want = rotate_vector_field(a, angle);
            for c in 0..want.u.c() {
                let (wu, wv) = (want.u.plane(0, c), want.v.plane(0, c));
                let (hu, hv) = (have.u.plane(0, c), have.v.plane(0, c));
                for p in (0..n * n).filter(|&p| mask[p]) {
                    err += (hu[p].f64() - wu[p].f64()).hypot(hv[p].f64() - wv[p].f64());
                    norm += wu[p].f64().hypot(wv[p].f64());
                }
            }
        }
        (Feature::Scalar(a), Feature::Scalar(have)) => {
            let want = rotate_image(a, angle);
            for c in 0..want.c() {
                let (w, h) = (want.plane(0, c), have.plane(0, c));
                for p in (0..n * n).filter(|&p| mask[p]) {
                    err += (h[p].f64() - w[p].f64()).abs();
                    norm += w[p].f64().abs();
                }
            }
        }
        _ => unreachable!("same model"),
    }
    (err, norm)
}

fn measure_one<T: Real>(model: &Model<T>, x: &Tensor4<T>, angle: f64, mask: &[bool], t: &mut Tally) -> Result<()> {
    let n = x.h();
    let plain = model.infer(x)?;
    let turned = model.infer(&rotate_image(x, angle))?;
    let expected = rotate_labels(&argmax_channels(&plain.logits), n, angle, IGNORE);
    let got = argmax_channels(&turned.logits);
    for p in 0..n * n {
        if mask[p] && expected[p] != IGNORE {
            t.scored += 1;
            t.agree += (expected[p] == got[p]) as usize;
        }
    }
    let blocks = plain.block_outputs.len();
    t.err.resize(blocks, 0.0);
    t.norm.resize(blocks, 0.0);
    for (k, (a, b)) in plain.block_outputs.iter().zip(&turned.block_outputs).enumerate() {
        let (e, m) = block_error(a, b, angle);
        t.err[k] += e;
        t.norm[k] += m;
    }
    Ok(())
}

/// Measures `model` on square single-sample inputs at one angle.
pub fn measure<T: Real>(model: &Model<T>, inputs: &[&Tensor4<T>], angle: f64) -> Result<EquiRecord> {
    let Some(first) = inputs.first() else {
        return Err(Error::invalid("equicheck", "no inputs"));
    };
    let n = first.h();
    if inputs.iter().any(|x| x.n() != 1 || x.h() != n || x.w() != n) {
        return Err(Error::invalid("equicheck", "inputs must be single square images of one size"));
    }
    let mask = scoring_mask(n, angle);
    let mut total = Tally::default();
    for x in inputs {
        measure_one(model, x, angle, &mask, &mut total)?;
    }
    let block_errors: Vec<f64> = total
        .err
        .iter()
        .zip(&total.norm)
        .map(|(&e, &m)| if m > 0.0 { e / m } else { 0.0 })
        .collect();
    Ok(EquiRecord {
        angle,
        orientations: model.config().orientations,
        patches: inputs.len(),
        agreement: total.agree as f64 / total.scored.max(1) as f64,
        field_error: block_errors.iter().sum::<f64>() / block_errors.len().max(1) as f64,
        block_errors,
    })
}

/// Single rotating convolution followed by orientation pooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerEquivariance {
    /// Fraction of scored pixels with magnitude error below `tol`.
    pub agreement: f64,
    pub max_error: f64,
}

/// Compares the magnitude maps `|z|` of one rotconv + orientation pool layer
/// on `x` and `rotate(x, angle)`. `pad` keeps the output the input size.
pub fn layer_magnitude_check<T: Real>(
    x: &Tensor4<T>,
    filters: &[CanonicalFilter<T>],
    orient: &OrientationSet,
    angle: f64,
    tol: f64,
) -> Result<LayerEquivariance> {
    let n = x.h();
    if x.n() != 1 || x.w() != n {
        return Err(Error::invalid("layer_magnitude_check", "input must be one square image"));
    }
    let pad = filters.first().map_or(0, |f| f.size() / 2);
    let mag = |x: &Tensor4<T>| -> Result<Tensor4<T>> {
        let stack = rotconv_forward(x, filters, orient, pad)?;
        Ok(orientation_pool(&stack).1.magnitude())
    };
    let want = rotate_image(&mag(x)?, angle);
    let have = mag(&rotate_image(x, angle))?;
    let mask = scoring_mask(n, angle);
    let (mut ok, mut scored, mut worst) = (0usize, 0usize, 0.0f64);
    for c in 0..want.c() {
        for (p, (&w, &h)) in want.plane(0, c).iter().zip(have.plane(0, c)).enumerate() {
            if mask[p] {
                let e = (w.f64() - h.f64()).abs();
                scored += 1;
                ok += (e < tol) as usize;
                worst = worst.max(e);
            }
        }
    }
    Ok(LayerEquivariance {
        agreement: ok as f64 / scored.max(1) as f64,
        max_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, c: usize, n: usize) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn([1, c, n, n], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn interior_crop_keeps_eighty_percent() {
        assert_eq!(interior_range(64, 0.8), (6, 58));
        assert_eq!(interior_range(10, 1.0), (0, 10));
    }

    #[test]
    fn zero_angle_is_trivial() {
        let cfg = ModelConfig {
            layer_multipliers: vec![1, 1],
            ..ModelConfig::roteqnet(1, 4, 3, 2)
        }
        .resolved()
        .unwrap();
        let model = Model::<f64>::init(&cfg, 1).unwrap();
        let x = random_input(2, 2, 16);
        let r = measure(&model, &[&x], 0.0).unwrap();
        assert_eq!(r.agreement, 1.0);
        assert_eq!(r.field_error, 0.0);
    }

    #[test]
    fn quarter_turns_are_exact_for_one_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let filters: Vec<CanonicalFilter<f64>> = (0..3)
            .map(|_| CanonicalFilter::new(7, 2, (0..98).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.1).unwrap())
            .collect();
        let x = random_input(4, 2, 32);
        for r in [4, 8, 16] {
            let orient = OrientationSet::new(r).unwrap();
            for angle in [90.0, 180.0, 270.0] {
                let e = layer_magnitude_check(&x, &filters, &orient, angle, 1e-4).unwrap();
                assert_eq!(e.agreement, 1.0, "R={r} angle={angle}");
                assert!(e.max_error < 1e-9, "{}", e.max_error);
            }
        }
    }
}
