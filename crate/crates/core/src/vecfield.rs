//! Layers that consume vector-field feature maps.
//!
//! A vector field holds one `(u, v)` pair per location and filter, `u` along
//! the columns and `v` pointing up the image. Convolution of two fields is
//! the sum of the component-wise convolutions. When a vector filter is
//! rotated, both its support and each of its 2-vectors are rotated; without
//! the in-place part deeper layers would not be equivariant.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::real::{sin_cos_deg, Real};
use crate::rotkernel::{apply_mask, circular_mask, plans_for, OrientationSet, RotStack, RotationPlan};
use crate::tensor::{
    dims_str, maxpool2x2_backward, rotate_image, upsample_bilinear, upsample_bilinear_backward, PoolIndices, Tensor4,
};

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T> {
    pub u: Tensor4<T>,
    pub v: Tensor4<T>,
}

impl<T: Real> VectorField<T> {
    pub fn new(u: Tensor4<T>, v: Tensor4<T>) -> Result<Self> {
        if u.dims() != v.dims() {
            return Err(Error::shape("VectorField::new", dims_str(u.dims()), dims_str(v.dims())));
        }
        Ok(VectorField { u, v })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        VectorField {
            u: Tensor4::zeros(dims),
            v: Tensor4::zeros(dims),
        }
    }

    /// `(n, filters, h, w)`
    pub fn dims(&self) -> [usize; 4] {
        self.u.dims()
    }

    pub fn magnitude(&self) -> Tensor4<T> {
        let data = self
            .u
            .data()
            .iter()
            .zip(self.v.data())
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect();
        Tensor4::from_vec(self.dims(), data).expect("components share dims")
    }

    /// Gradient of [`VectorField::magnitude`]; zero vectors pass no gradient.
    pub fn magnitude_backward(&self, grad: &Tensor4<T>) -> Result<VectorField<T>> {
        if grad.dims() != self.dims() {
            return Err(Error::shape(
                "magnitude_backward",
                dims_str(self.dims()),
                dims_str(grad.dims()),
            ));
        }
        let mut out = VectorField::zeros(self.dims());
        for k in 0..grad.len() {
            let (a, b) = (self.u.data()[k], self.v.data()[k]);
            let r = (a * a + b * b).sqrt();
            if r > T::zero() {
                let g = grad.data()[k] / r;
                out.u.data_mut()[k] = g * a;
                out.v.data_mut()[k] = g * b;
            }
        }
        Ok(out)
    }

    /// `[u; v]` stacked on the channel axis: `(n, 2 * filters, h, w)`.
    pub fn stacked(&self) -> Tensor4<T> {
        crate::tensor::concat_channels(&[&self.u, &self.v]).expect("components share dims")
    }

    pub fn from_stacked(x: &Tensor4<T>) -> Result<Self> {
        if !x.c().is_multiple_of(2) {
            return Err(Error::shape(
                "VectorField::from_stacked",
                "an even channel count",
                dims_str(x.dims()),
            ));
        }
        let mut parts = crate::tensor::split_channels(x, &[x.c() / 2, x.c() / 2])?;
        let v = parts.pop().expect("two parts");
        let u = parts.pop().expect("two parts");
        Ok(VectorField { u, v })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.u.max_abs_diff(&other.u).max(self.v.max_abs_diff(&other.v))
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField {
            u: self.u.cast(),
            v: self.v.cast(),
        }
    }
}

/// Rotates a field as a geometric object: locations move with
/// [`rotate_image`] and every vector is turned by the same angle.
pub fn rotate_vector_field<T: Real>(z: &VectorField<T>, angle: f64) -> VectorField<T> {
    let ru = rotate_image(&z.u, angle);
    let rv = rotate_image(&z.v, angle);
    let (s, c) = sin_cos_deg(angle);
    let (s, c) = (T::of(s), T::of(c));
    let u = Tensor4::from_vec(
        ru.dims(),
        ru.data().iter().zip(rv.data()).map(|(&a, &b)| c * a - s * b).collect(),
    )
    .expect("same dims");
    let v = Tensor4::from_vec(
        ru.dims(),
        ru.data().iter().zip(rv.data()).map(|(&a, &b)| s * a + c * b).collect(),
    )
    .expect("same dims");
    VectorField { u, v }
}

/// A filter acting on a vector-field input: one `(u, v)` weight pair per
/// input field and location, and a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFilter<T> {
    size: usize,
    depth: usize,
    /// `(depth, size, size)`
    pub wu: Vec<T>,
    pub wv: Vec<T>,
    pub bias: T,
}

impl<T: Real> VectorFilter<T> {
    pub fn new(size: usize, depth: usize, mut wu: Vec<T>, mut wv: Vec<T>, bias: T) -> Result<Self> {
        let mask = circular_mask(size)?;
        let want = depth * size * size;
        if wu.len() != want || wv.len() != want {
            return Err(Error::shape(
                "VectorFilter::new",
                format!("{depth}x{size}x{size} weights per component"),
                format!("{} and {}", wu.len(), wv.len()),
            ));
        }
        apply_mask(&mut wu, &mask);
        apply_mask(&mut wv, &mask);
        Ok(VectorFilter {
            size,
            depth,
            wu,
            wv,
            bias,
        })
    }

    pub fn zeros(size: usize, depth: usize) -> Result<Self> {
        let n = depth * size * size;
        Self::new(size, depth, vec![T::zero(); n], vec![T::zero(); n], T::zero())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

fn check_vector_filters<T: Real>(op: &'static str, filters: &[VectorFilter<T>], fields: usize) -> Result<usize> {
    let first = filters.first().ok_or_else(|| Error::invalid(op, "empty filter list"))?;
    for f in filters {
        if f.depth != fields || f.size != first.size {
            return Err(Error::shape(
                op,
                format!("{}x{fields}x{}x{} vector filters", filters.len(), first.size, first.size),
                format!("a {}x{}x{} vector filter", f.depth, f.size, f.size),
            ));
        }
    }
    Ok(first.size)
}

/// `(z_u * w_u) + (z_v * w_v) + b` for each filter.
pub fn vecconv<T: Real>(z: &VectorField<T>, filters: &[VectorFilter<T>], pad: usize) -> Result<Tensor4<T>> {
    let m = check_vector_filters("vecconv", filters, z.u.c())?;
    let wu: Vec<T> = filters.iter().flat_map(|f| f.wu.iter().copied()).collect();
    let wv: Vec<T> = filters.iter().flat_map(|f| f.wv.iter().copied()).collect();
    let bias: Vec<T> = filters.iter().map(|f| f.bias).collect();
    let zero = vec![T::zero(); filters.len()];
    let mut out = conv2d(&z.u, &wu, &bias, filters.len(), m, pad)?;
    let from_v = conv2d(&z.v, &wv, &zero, filters.len(), m, pad)?;
    for (a, b) in out.data_mut().iter_mut().zip(from_v.data()) {
        *a += *b;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct VecConvGrads<T> {
    pub grad_z: Option<VectorField<T>>,
    pub grad_wu: Vec<Vec<T>>,
    pub grad_wv: Vec<Vec<T>>,
    pub grad_b: Vec<T>,
}

pub fn vecconv_backward<T: Real>(
    z: &VectorField<T>,
    filters: &[VectorFilter<T>],
    pad: usize,
    grad_y: &Tensor4<T>,
    need_grad_z: bool,
) -> Result<VecConvGrads<T>> {
    let m = check_vector_filters("vecconv_backward", filters, z.u.c())?;
    let wu: Vec<T> = filters.iter().flat_map(|f| f.wu.iter().copied()).collect();
    let wv: Vec<T> = filters.iter().flat_map(|f| f.wv.iter().copied()).collect();
    let gu = conv2d_backward(&z.u, &wu, filters.len(), m, pad, grad_y, need_grad_z)?;
    let gv = conv2d_backward(&z.v, &wv, filters.len(), m, pad, grad_y, need_grad_z)?;
    let per = z.u.c() * m * m;
    let mask = circular_mask(m)?;
    let split = |g: &[T]| -> Vec<Vec<T>> {
        g.chunks(per)
            .map(|c| {
                let mut c = c.to_vec();
                apply_mask(&mut c, &mask);
                c
            })
            .collect()
    };
    let grad_z = match (gu.grad_x, gv.grad_x) {
        (Some(u), Some(v)) => Some(VectorField { u, v }),
        _ => None,
    };
    Ok(VecConvGrads {
        grad_z,
        grad_wu: split(&gu.grad_w),
        grad_wv: split(&gv.grad_w),
        grad_b: gu.grad_b,
    })
}

/// Spatially resampled components, then each weight vector turned in place.
fn rotate_components<T: Real>(plan: &RotationPlan, angle: f64, wu: &[T], wv: &[T]) -> (Vec<T>, Vec<T>) {
    let mm = plan.size() * plan.size();
    let (s, c) = sin_cos_deg(angle);
    let (s, c) = (T::of(s), T::of(c));
    let mut ou = vec![T::zero(); wu.len()];
    let mut ov = vec![T::zero(); wv.len()];
    let mut ru = vec![T::zero(); mm];
    let mut rv = vec![T::zero(); mm];
    for ((su, sv), (du, dv)) in wu.chunks(mm).zip(wv.chunks(mm)).zip(ou.chunks_mut(mm).zip(ov.chunks_mut(mm))) {
        plan.apply(su, &mut ru);
        plan.apply(sv, &mut rv);
        for k in 0..mm {
            du[k] = c * ru[k] - s * rv[k];
            dv[k] = s * ru[k] + c * rv[k];
        }
    }
    (ou, ov)
}

pub fn rotate_vector_filter<T: Real>(w: &VectorFilter<T>, angle: f64) -> Result<VectorFilter<T>> {
    let plan = RotationPlan::new(w.size, angle)?;
    let (wu, wv) = rotate_components(&plan, angle, &w.wu, &w.wv);
    Ok(VectorFilter {
        size: w.size,
        depth: w.depth,
        wu,
        wv,
        bias: w.bias,
    })
}

/// Bank `(filters * R, 2 * depth, m, m)` acting on the stacked `[u; v]` input.
fn vector_bank<T: Real>(filters: &[VectorFilter<T>], orient: &OrientationSet, plans: &[RotationPlan]) -> (Vec<T>, Vec<T>) {
    let mut bank = Vec::new();
    let mut bias = Vec::new();
    for f in filters {
        for (r, plan) in plans.iter().enumerate() {
            let (wu, wv) = rotate_components(plan, orient.angle(r), &f.wu, &f.wv);
            bank.extend(wu);
            bank.extend(wv);
            bias.push(f.bias);
        }
    }
    (bank, bias)
}

/// Rotating convolution on a vector-field input. Follow with
/// [`crate::orientpool::orientation_pool`].
pub fn vec_rotconv<T: Real>(
    z: &VectorField<T>,
    filters: &[VectorFilter<T>],
    orient: &OrientationSet,
    pad: usize,
) -> Result<RotStack<T>> {
    let m = check_vector_filters("vec_rotconv", filters, z.u.c())?;
    let plans = plans_for(m, orient)?;
    let (bank, bias) = vector_bank(filters, orient, &plans);
    let out = conv2d(&z.stacked(), &bank, &bias, filters.len() * orient.count(), m, pad)?;
    RotStack::new(filters.len(), orient.count(), out)
}

#[derive(Debug, Clone)]
pub struct VecRotConvGrads<T> {
    pub grad_z: Option<VectorField<T>>,
    pub grad_wu: Vec<Vec<T>>,
    pub grad_wv: Vec<Vec<T>>,
    pub grad_b: Vec<T>,
}

/// Backward of [`vec_rotconv`]: each rotated-filter gradient is turned back
/// in place and pulled through the transpose of the spatial resampling.
pub fn vec_rotconv_backward<T: Real>(
    z: &VectorField<T>,
    filters: &[VectorFilter<T>],
    orient: &OrientationSet,
    pad: usize,
    grad_y: &RotStack<T>,
    need_grad_z: bool,
) -> Result<VecRotConvGrads<T>> {
    let m = check_vector_filters("vec_rotconv_backward", filters, z.u.c())?;
    if grad_y.filters() != filters.len() || grad_y.orientations() != orient.count() || grad_y.n() != z.u.n() {
        return Err(Error::shape(
            "vec_rotconv_backward",
            format!("{} filters x {} orientations", filters.len(), orient.count()),
            format!("{:?}", grad_y.shape()),
        ));
    }
    let plans = plans_for(m, orient)?;
    let (bank, _) = vector_bank(filters, orient, &plans);
    let r_count = orient.count();
    let stacked = z.stacked();
    let g = conv2d_backward(&stacked, &bank, filters.len() * r_count, m, pad, grad_y.tensor(), need_grad_z)?;
    let d = z.u.c();
    let mm = m * m;
    let per_comp = d * mm;
    let mut grad_wu = Vec::with_capacity(filters.len());
    let mut grad_wv = Vec::with_capacity(filters.len());
    let mut grad_b = Vec::with_capacity(filters.len());
    let mut tu = vec![T::zero(); mm];
    let mut tv = vec![T::zero(); mm];
    for f in 0..filters.len() {
        let mut acc_u = vec![T::zero(); per_comp];
        let mut acc_v = vec![T::zero(); per_comp];
        let mut gb = T::zero();
        for (r, plan) in plans.iter().enumerate() {
            let slot = f * r_count + r;
            let gw = &g.grad_w[slot * 2 * per_comp..(slot + 1) * 2 * per_comp];
            let (gu, gv) = gw.split_at(per_comp);
            let (s, c) = sin_cos_deg(orient.angle(r));
            let (s, c) = (T::of(s), T::of(c));
            for ch in 0..d {
                let (cu, cv) = (&gu[ch * mm..(ch + 1) * mm], &gv[ch * mm..(ch + 1) * mm]);
                for k in 0..mm {
                    tu[k] = c * cu[k] + s * cv[k];
                    tv[k] = c * cv[k] - s * cu[k];
                }
                plan.apply_adjoint_add(&tu, &mut acc_u[ch * mm..(ch + 1) * mm]);
                plan.apply_adjoint_add(&tv, &mut acc_v[ch * mm..(ch + 1) * mm]);
            }
            gb += g.grad_b[slot];
        }
        grad_wu.push(acc_u);
        grad_wv.push(acc_v);
        grad_b.push(gb);
    }
    let grad_z = match g.grad_x {
        Some(gx) => Some(VectorField::from_stacked(&gx)?),
        None => None,
    };
    Ok(VecRotConvGrads {
        grad_z,
        grad_wu,
        grad_wv,
        grad_b,
    })
}

/// 2x2 spatial pooling that keeps the whole vector with the largest
/// magnitude in each window; ties keep the first in row-major order.
pub fn vec_maxpool2x2<T: Real>(z: &VectorField<T>) -> Result<(VectorField<T>, PoolIndices)> {
    let [n, c, h, w] = z.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("vec_maxpool2x2", format!("spatial dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = VectorField::zeros([n, c, oh, ow]);
    let mut source = Vec::with_capacity(n * c * oh * ow);
    let (ud, vd) = (z.u.data(), z.v.data());
    let mag2 = |k: usize| ud[k] * ud[k] + vd[k] * vd[k];
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = z.u.offset(b, ch, 2 * i, 2 * j);
                    let mut best_m = mag2(best);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = z.u.offset(b, ch, 2 * i + di, 2 * j + dj);
                        let m = mag2(cand);
                        if m > best_m {
                            best = cand;
                            best_m = m;
                        }
                    }
                    out.u.data_mut()[o] = ud[best];
                    out.v.data_mut()[o] = vd[best];
                    source.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_dims: z.dims(),
            source,
        },
    ))
}

pub fn vec_maxpool2x2_backward<T: Real>(grad: &VectorField<T>, idx: &PoolIndices) -> Result<VectorField<T>> {
    Ok(VectorField {
        u: maxpool2x2_backward(&grad.u, idx)?,
        v: maxpool2x2_backward(&grad.v, idx)?,
    })
}

pub fn vec_upsample_bilinear<T: Real>(z: &VectorField<T>, factor: usize) -> Result<VectorField<T>> {
    Ok(VectorField {
        u: upsample_bilinear(&z.u, factor)?,
        v: upsample_bilinear(&z.v, factor)?,
    })
}

pub fn vec_upsample_bilinear_backward<T: Real>(grad: &VectorField<T>, factor: usize) -> Result<VectorField<T>> {
    Ok(VectorField {
        u: upsample_bilinear_backward(&grad.u, factor)?,
        v: upsample_bilinear_backward(&grad.v, factor)?,
    })
}

/// Batch normalisation for vector fields: each filter's vectors are scaled by
/// `gamma / (std(|z|) + eps)`, the standard deviation taken over batch and
/// space. There is no centring, so directions and `|z| >= 0` survive.
#[derive(Debug, Clone, PartialEq)]
pub struct VecBatchNorm<T> {
    pub gamma: Vec<T>,
    pub running_std: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct VecBatchNormCache<T> {
    input: VectorField<T>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl<T: Real> VecBatchNorm<T> {
    pub fn new(filters: usize) -> Self {
        VecBatchNorm {
            gamma: vec![T::one(); filters],
            running_std: vec![T::one(); filters],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn check(&self, z: &VectorField<T>) -> Result<()> {
        if z.u.c() != self.gamma.len() {
            return Err(Error::shape(
                "vec_batchnorm",
                format!("{} filters", self.gamma.len()),
                dims_str(z.dims()),
            ));
        }
        if z.u.n() == 0 {
            return Err(Error::invalid("vec_batchnorm", "empty batch"));
        }
        Ok(())
    }

    fn scaled(z: &VectorField<T>, scale: &[f64]) -> VectorField<T> {
        let [n, c, h, w] = z.dims();
        let hw = h * w;
        let mut out = z.clone();
        for b in 0..n {
            for (f, &s) in scale.iter().enumerate().take(c) {
                let s = T::of(s);
                let o = (b * c + f) * hw;
                for k in o..o + hw {
                    out.u.data_mut()[k] *= s;
                    out.v.data_mut()[k] *= s;
                }
            }
        }
        out
    }

    /// Normalises with batch statistics and updates the running estimate.
    pub fn forward_train(&mut self, z: &VectorField<T>) -> Result<(VectorField<T>, VecBatchNormCache<T>)> {
        self.check(z)?;
        let [n, c, h, w] = z.dims();
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(Error::invalid(
                "vec_batchnorm",
                "training statistics need at least two values per filter",
            ));
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let mag = z.magnitude();
        for f in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += mag.plane(b, f).iter().map(|x| x.f64()).sum::<f64>();
            }
            let mu = s / count as f64;
            let mut var = 0.0;
            for b in 0..n {
                var += mag.plane(b, f).iter().map(|x| (x.f64() - mu).powi(2)).sum::<f64>();
            }
            mean[f] = mu;
            std[f] = (var / count as f64).sqrt();
        }
        let scale: Vec<f64> = (0..c).map(|f| self.gamma[f].f64() / (std[f] + self.eps)).collect();
        for f in 0..c {
            let r = self.running_std[f].f64();
            self.running_std[f] = T::of((1.0 - self.momentum) * r + self.momentum * std[f]);
        }
        Ok((
            Self::scaled(z, &scale),
            VecBatchNormCache {
                input: z.clone(),
                mean,
                std,
            },
        ))
    }

    pub fn forward_eval(&self, z: &VectorField<T>) -> Result<VectorField<T>> {
        self.check(z)?;
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_std)
            .map(|(g, r)| g.f64() / (r.f64() + self.eps))
            .collect();
        Ok(Self::scaled(z, &scale))
    }

    /// Returns `(grad_z, grad_gamma)`.
    pub fn backward(&self, cache: &VecBatchNormCache<T>, grad: &VectorField<T>) -> Result<(VectorField<T>, Vec<T>)> {
        let z = &cache.input;
        if grad.dims() != z.dims() {
            return Err(Error::shape(
                "vec_batchnorm backward",
                dims_str(z.dims()),
                dims_str(grad.dims()),
            ));
        }
        let [n, c, h, w] = z.dims();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut gz = VectorField::zeros(z.dims());
        let mut ggamma = Vec::with_capacity(c);
        for f in 0..c {
            let d = cache.std[f] + self.eps;
            let gamma = self.gamma[f].f64();
            let mut dot = 0.0;
            for b in 0..n {
                let o = (b * c + f) * hw;
                for k in o..o + hw {
                    dot += grad.u.data()[k].f64() * z.u.data()[k].f64() + grad.v.data()[k].f64() * z.v.data()[k].f64();
                }
            }
            ggamma.push(T::of(dot / d));
            let scale = gamma / d;
            let dsigma = -gamma * dot / (d * d);
            let sigma = cache.std[f];
            for b in 0..n {
                let o = (b * c + f) * hw;
                for k in o..o + hw {
                    let (zu, zv) = (z.u.data()[k].f64(), z.v.data()[k].f64());
                    let rho = (zu * zu + zv * zv).sqrt();
                    let mut au = scale * grad.u.data()[k].f64();
                    let mut av = scale * grad.v.data()[k].f64();
                    if sigma > 0.0 && rho > 0.0 {
                        let t = dsigma * (rho - cache.mean[f]) / (count * sigma) / rho;
                        au += t * zu;
                        av += t * zv;
                    }
                    gz.u.data_mut()[k] = T::of(au);
                    gz.v.data_mut()[k] = T::of(av);
                }
            }
        }
        Ok((gz, ggamma))
    }
}

/// Whole-vector dropout: both components of a location are kept or dropped
/// together; kept vectors are scaled by `1 / (1 - p)`. Returns the per
/// location multiplier for the backward pass.
pub fn vec_dropout<T: Real, R: Rng + ?Sized>(z: &VectorField<T>, p: f64, rng: &mut R) -> Result<(VectorField<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("vec_dropout", format!("drop probability {p} outside [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..z.u.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Ok((apply_multiplier(z, &mask), mask))
}

pub fn apply_multiplier<T: Real>(z: &VectorField<T>, mask: &[T]) -> VectorField<T> {
    let mut out = z.clone();
    for (k, &m) in mask.iter().enumerate() {
        out.u.data_mut()[k] *= m;
        out.v.data_mut()[k] *= m;
    }
    out
}
