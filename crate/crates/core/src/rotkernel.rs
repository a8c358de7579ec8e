//! Rotating convolution on scalar inputs.
//!
//! A canonical filter is resampled at `R` orientations and convolved with the
//! input, giving an orientation stack per filter. Only canonical weights are
//! stored; the rotated bank is rebuilt on every pass.
//!
//! Conventions used throughout the crate:
//! * angles are in degrees, positive is counter-clockwise as seen on screen
//!   (rows grow downward, so the math uses an upward y axis);
//! * filter support is the disk of diameter `m`, cells outside it are always 0;
//! * rotation is inverse mapping with bilinear weights: each output cell
//!   samples the canonical filter at its back-rotated position.

use crate::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::real::{sin_cos_deg, Real};
use crate::tensor::{dims_str, quarter_turn_source, rotation_source, Tensor4};

/// Cells of an `m x m` grid whose centre lies within `m / 2` of the middle.
pub fn circular_mask(m: usize) -> Result<Vec<bool>> {
    if m.is_multiple_of(2) {
        return Err(Error::invalid("circular_mask", format!("filter size {m} must be odd")));
    }
    let c = (m as f64 - 1.0) / 2.0;
    let r2 = (m as f64 / 2.0).powi(2);
    Ok((0..m * m)
        .map(|p| {
            let (i, j) = ((p / m) as f64, (p % m) as f64);
            (i - c).powi(2) + (j - c).powi(2) <= r2
        })
        .collect())
}

/// Number of cells inside the circular support.
pub fn support_size(m: usize) -> Result<usize> {
    Ok(circular_mask(m)?.into_iter().filter(|&b| b).count())
}

/// The sampling angles `360 r / R`, `r = 0..R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrientationSet {
    count: usize,
}

impl OrientationSet {
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("OrientationSet", "need at least one orientation"));
        }
        Ok(OrientationSet { count })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn angle(&self, r: usize) -> f64 {
        360.0 * r as f64 / self.count as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.count).map(|r| self.angle(r)).collect()
    }
}

/// Sparse bilinear resampling operator that rotates one `m x m` plane.
/// The angle is split into quarter turns (exact index permutation) and a
/// remainder below 90 degrees, so plans for `a` and `a + 90` differ by an
/// exact permutation.
#[derive(Debug, Clone)]
pub struct RotationPlan {
    m: usize,
    /// `(output cell, input cell, weight)`
    taps: Vec<(usize, usize, f64)>,
}

impl RotationPlan {
    pub fn new(m: usize, angle: f64) -> Result<Self> {
        let mask = circular_mask(m)?;
        let a = angle.rem_euclid(360.0);
        let quarters = (a / 90.0).floor() as usize % 4;
        let rest = a - 90.0 * quarters as f64;
        let (s, c) = sin_cos_deg(rest);
        let mut taps = Vec::new();
        for out in 0..m * m {
            if !mask[out] {
                continue;
            }
            let (i1, j1) = quarter_turn_source(quarters, m, out / m, out % m);
            if rest == 0.0 {
                taps.push((out, i1 * m + j1, 1.0));
                continue;
            }
            let (r, cc) = rotation_source(m, m, s, c, i1, j1);
            let (r0, c0) = (r.floor(), cc.floor());
            let (fr, fc) = (r - r0, cc - c0);
            for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
                    let (ri, ci) = (r0 as i64 + dr, c0 as i64 + dc);
                    let wt = wr * wc;
                    if wt == 0.0 || ri < 0 || ci < 0 || ri >= m as i64 || ci >= m as i64 {
                        continue;
                    }
                    let inp = ri as usize * m + ci as usize;
                    if mask[inp] {
                        taps.push((out, inp, wt));
                    }
                }
            }
        }
        Ok(RotationPlan { m, taps })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    /// Writes the rotated plane into `dst` (cells outside the disk become 0).
    pub fn apply<T: Real>(&self, src: &[T], dst: &mut [T]) {
        dst[..self.m * self.m].fill(T::zero());
        for &(o, i, w) in &self.taps {
            dst[o] += T::of(w) * src[i];
        }
    }

    /// Adds the transpose of the resampling applied to `grad` into `dst`.
    pub fn apply_adjoint_add<T: Real>(&self, grad: &[T], dst: &mut [T]) {
        for &(o, i, w) in &self.taps {
            dst[i] += T::of(w) * grad[o];
        }
    }
}

/// A learnable filter on the circular support plus a bias shared by all of
/// its rotated copies.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalFilter<T> {
    size: usize,
    depth: usize,
    /// `(depth, size, size)`
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Real> CanonicalFilter<T> {
    pub fn zeros(size: usize, depth: usize) -> Result<Self> {
        circular_mask(size)?;
        Ok(CanonicalFilter {
            size,
            depth,
            weights: vec![T::zero(); depth * size * size],
            bias: T::zero(),
        })
    }

    /// Builds a filter, zeroing any weight outside the support.
    pub fn new(size: usize, depth: usize, mut weights: Vec<T>, bias: T) -> Result<Self> {
        let mask = circular_mask(size)?;
        if weights.len() != depth * size * size {
            return Err(Error::shape(
                "CanonicalFilter::new",
                format!("{depth}x{size}x{size} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        apply_mask(&mut weights, &mask);
        Ok(CanonicalFilter {
            size,
            depth,
            weights,
            bias,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

pub(crate) fn apply_mask<T: Real>(weights: &mut [T], mask: &[bool]) {
    for chunk in weights.chunks_mut(mask.len()) {
        for (w, &keep) in chunk.iter_mut().zip(mask) {
            if !keep {
                *w = T::zero();
            }
        }
    }
}

/// Canonical weights resampled at `angle` degrees, `(depth, m, m)`.
pub fn rotate_filter<T: Real>(w: &CanonicalFilter<T>, angle: f64) -> Result<Vec<T>> {
    let plan = RotationPlan::new(w.size, angle)?;
    Ok(rotate_with_plan(&plan, &w.weights))
}

fn rotate_with_plan<T: Real>(plan: &RotationPlan, weights: &[T]) -> Vec<T> {
    let mm = plan.size() * plan.size();
    let mut out = vec![T::zero(); weights.len()];
    for (src, dst) in weights.chunks(mm).zip(out.chunks_mut(mm)) {
        plan.apply(src, dst);
    }
    out
}

/// Activations of every filter at every orientation: `(n, filters, R, h, w)`
/// stored as a tensor with `filters * R` channels, orientation fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RotStack<T> {
    filters: usize,
    orientations: usize,
    data: Tensor4<T>,
}

impl<T: Real> RotStack<T> {
    pub fn new(filters: usize, orientations: usize, data: Tensor4<T>) -> Result<Self> {
        if data.c() != filters * orientations {
            return Err(Error::shape(
                "RotStack::new",
                format!("{} channels", filters * orientations),
                dims_str(data.dims()),
            ));
        }
        Ok(RotStack {
            filters,
            orientations,
            data,
        })
    }

    pub fn zeros(n: usize, filters: usize, orientations: usize, h: usize, w: usize) -> Self {
        RotStack {
            filters,
            orientations,
            data: Tensor4::zeros([n, filters * orientations, h, w]),
        }
    }

    pub fn filters(&self) -> usize {
        self.filters
    }
    pub fn orientations(&self) -> usize {
        self.orientations
    }
    pub fn n(&self) -> usize {
        self.data.n()
    }
    pub fn h(&self) -> usize {
        self.data.h()
    }
    pub fn w(&self) -> usize {
        self.data.w()
    }
    pub fn tensor(&self) -> &Tensor4<T> {
        &self.data
    }
    pub fn tensor_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.data
    }
    pub fn into_tensor(self) -> Tensor4<T> {
        self.data
    }

    pub fn get(&self, n: usize, f: usize, r: usize, i: usize, j: usize) -> T {
        self.data.at(n, f * self.orientations + r, i, j)
    }

    pub fn slice(&self, n: usize, f: usize, r: usize) -> &[T] {
        self.data.plane(n, f * self.orientations + r)
    }

    /// Shape `(n, filters, R, h, w)`.
    pub fn shape(&self) -> [usize; 5] {
        [self.n(), self.filters, self.orientations, self.h(), self.w()]
    }
}

pub(crate) fn check_filters<T: Real>(op: &'static str, filters: &[CanonicalFilter<T>], channels: usize) -> Result<usize> {
    let first = filters.first().ok_or_else(|| Error::invalid(op, "empty filter list"))?;
    for f in filters {
        if f.depth != channels || f.size != first.size {
            return Err(Error::shape(
                op,
                format!("{}x{channels}x{}x{} filters", filters.len(), first.size, first.size),
                format!("a {}x{}x{} filter", f.depth, f.size, f.size),
            ));
        }
    }
    Ok(first.size)
}

/// Rotated bank `(filters * R, depth, m, m)` and the per-slice bias.
fn rotated_bank<T: Real>(filters: &[CanonicalFilter<T>], plans: &[RotationPlan]) -> (Vec<T>, Vec<T>) {
    let mut bank = Vec::new();
    let mut bias = Vec::new();
    for f in filters {
        for plan in plans {
            bank.extend(rotate_with_plan(plan, &f.weights));
            bias.push(f.bias);
        }
    }
    (bank, bias)
}

pub(crate) fn plans_for(m: usize, orient: &OrientationSet) -> Result<Vec<RotationPlan>> {
    orient.angles().into_iter().map(|a| RotationPlan::new(m, a)).collect()
}

/// `y[r] = x * rotate(w, alpha_r) + b` for every filter and orientation.
pub fn rotconv_forward<T: Real>(
    x: &Tensor4<T>,
    filters: &[CanonicalFilter<T>],
    orient: &OrientationSet,
    pad: usize,
) -> Result<RotStack<T>> {
    let m = check_filters("rotconv_forward", filters, x.c())?;
    let plans = plans_for(m, orient)?;
    let (bank, bias) = rotated_bank(filters, &plans);
    let out = conv2d(x, &bank, &bias, filters.len() * orient.count(), m, pad)?;
    RotStack::new(filters.len(), orient.count(), out)
}

#[derive(Debug, Clone)]
pub struct RotConvGrads<T> {
    pub grad_x: Option<Tensor4<T>>,
    /// One `(depth, m, m)` gradient per canonical filter, zero off the disk.
    pub grad_w: Vec<Vec<T>>,
    pub grad_b: Vec<T>,
}

/// Backward pass of [`rotconv_forward`]. Each rotated-filter gradient is
/// mapped back onto the canonical grid with the transpose of its resampling
/// operator and the results are summed over orientations; at quarter turns
/// this transpose is exactly the rotation by the opposite angle.
pub fn rotconv_backward<T: Real>(
    x: &Tensor4<T>,
    filters: &[CanonicalFilter<T>],
    orient: &OrientationSet,
    pad: usize,
    grad_y: &RotStack<T>,
    need_grad_x: bool,
) -> Result<RotConvGrads<T>> {
    let m = check_filters("rotconv_backward", filters, x.c())?;
    if grad_y.filters() != filters.len() || grad_y.orientations() != orient.count() || grad_y.n() != x.n() {
        return Err(Error::shape(
            "rotconv_backward",
            format!("{} filters x {} orientations", filters.len(), orient.count()),
            format!("{:?}", grad_y.shape()),
        ));
    }
    let plans = plans_for(m, orient)?;
    let (bank, _) = rotated_bank(filters, &plans);
    let r_count = orient.count();
    let g = conv2d_backward(x, &bank, filters.len() * r_count, m, pad, grad_y.tensor(), need_grad_x)?;
    let per_filter = x.c() * m * m;
    let mm = m * m;
    let mut grad_w = Vec::with_capacity(filters.len());
    let mut grad_b = Vec::with_capacity(filters.len());
    for f in 0..filters.len() {
        let mut acc = vec![T::zero(); per_filter];
        let mut gb = T::zero();
        for (r, plan) in plans.iter().enumerate() {
            let slot = f * r_count + r;
            let gw = &g.grad_w[slot * per_filter..(slot + 1) * per_filter];
            for (src, dst) in gw.chunks(mm).zip(acc.chunks_mut(mm)) {
                plan.apply_adjoint_add(src, dst);
            }
            gb += g.grad_b[slot];
        }
        grad_w.push(acc);
        grad_b.push(gb);
    }
    Ok(RotConvGrads {
        grad_x: g.grad_x,
        grad_w,
        grad_b,
    })
}
