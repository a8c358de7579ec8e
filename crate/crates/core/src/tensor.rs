//! Dense rank-4 tensors and the reference implementations of the scalar
//! building blocks. The routines here favour obviously-correct loops; they
//! serve as oracles for the fast paths and as the baseline CNN pieces.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{sin_cos_deg, Real};

/// `(n, c, h, w)` tensor stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

pub(crate) fn dims_str(d: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3])
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::shape(
                "Tensor4::from_vec",
                format!("{want} elements for {}", dims_str(dims)),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for i in 0..dims[2] {
                    for j in 0..dims[3] {
                        data.push(f([n, c, i, j]));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.offset(n, c, i, j)]
    }

    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: T) {
        let o = self.offset(n, c, i, j);
        self.data[o] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    /// Copy of the samples `range` as a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Self {
        let s = self.sample_len();
        Tensor4 {
            dims: [count, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start * s..(start + count) * s].to_vec(),
        }
    }

    pub fn stack(samples: &[&Tensor4<T>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("Tensor4::stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for t in samples {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape("Tensor4::stack", dims_str(first.dims), dims_str(t.dims)));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            dims: [n, c, h, w],
            data,
        })
    }
}

impl<T> Tensor4<T> {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }
    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + i) * self.dims[3] + j
    }
}

/// Flat input offset of the winning element for every pooled cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_dims: [usize; 4],
    pub source: Vec<usize>,
}

/// Naive direct convolution (cross-correlation) with zero padding.
/// `weights` is `(filters, channels, m, m)`, `bias` has one entry per filter.
pub fn conv2d_ref<T: Real>(x: &Tensor4<T>, weights: &Tensor4<T>, bias: &[T], pad: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    let [f, d, m, m2] = weights.dims();
    if d != c || m != m2 || bias.len() != f {
        return Err(Error::shape(
            "conv2d_ref",
            format!("filters ?x{c}xmxm with one bias each for input {}", dims_str(x.dims())),
            format!("filters {} with {} biases", dims_str(weights.dims()), bias.len()),
        ));
    }
    if m % 2 == 0 {
        return Err(Error::invalid("conv2d_ref", format!("filter size {m} must be odd")));
    }
    if h + 2 * pad < m || w + 2 * pad < m {
        return Err(Error::invalid("conv2d_ref", "filter larger than padded input"));
    }
    let oh = h + 2 * pad - m + 1;
    let ow = w + 2 * pad - m + 1;
    let mut out = Tensor4::zeros([n, f, oh, ow]);
    for b in 0..n {
        for k in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[k];
                    for ch in 0..c {
                        for p in 0..m {
                            let yi = i + p;
                            if yi < pad || yi >= h + pad {
                                continue;
                            }
                            for q in 0..m {
                                let xj = j + q;
                                if xj < pad || xj >= w + pad {
                                    continue;
                                }
                                acc += weights.at(k, ch, p, q) * x.at(b, ch, yi - pad, xj - pad);
                            }
                        }
                    }
                    out.set(b, k, i, j, acc);
                }
            }
        }
    }
    Ok(out)
}

fn require_even(op: &'static str, x: [usize; 4]) -> Result<()> {
    if !x[2].is_multiple_of(2) || !x[3].is_multiple_of(2) {
        return Err(Error::invalid(op, format!("spatial dims {}x{} must be even", x[2], x[3])));
    }
    Ok(())
}

/// 2x2 max pooling with stride 2. Ties keep the first element in row-major
/// window order.
pub fn maxpool2x2<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    require_even("maxpool2x2", x.dims())?;
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut source = vec![0usize; n * c * oh * ow];
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = x.offset(b, ch, 2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = x.offset(b, ch, 2 * i + di, 2 * j + dj);
                        if x.data[cand] > x.data[best] {
                            best = cand;
                        }
                    }
                    out.data[o] = x.data[best];
                    source[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_dims: x.dims(),
            source,
        },
    ))
}

pub fn maxpool2x2_backward<T: Real>(grad_out: &Tensor4<T>, idx: &PoolIndices) -> Result<Tensor4<T>> {
    if grad_out.len() != idx.source.len() {
        return Err(Error::shape(
            "maxpool2x2_backward",
            format!("{} pooled cells", idx.source.len()),
            dims_str(grad_out.dims()),
        ));
    }
    let mut g = Tensor4::zeros(idx.input_dims);
    for (&src, &go) in idx.source.iter().zip(grad_out.data()) {
        g.data[src] += go;
    }
    Ok(g)
}

/// Interpolation taps of one output coordinate along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

/// Half-pixel-centre sampling positions, clamped at the borders.
fn upsample_taps(len: usize, factor: usize) -> Vec<Tap> {
    (0..len * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            let frac = s - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel-centre convention.
pub fn upsample_bilinear<T: Real>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor < 1 {
        return Err(Error::invalid("upsample_bilinear", "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let rows = upsample_taps(h, factor);
    let cols = upsample_taps(w, factor);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    out.data
        .par_chunks_mut(oh * ow)
        .zip(x.data.par_chunks(h * w))
        .for_each(|(dst, src)| {
            let mut tmp = vec![T::zero(); h * ow];
            for i in 0..h {
                for (j, t) in cols.iter().enumerate() {
                    tmp[i * ow + j] = src[i * w + t.lo] * T::of(t.w_lo) + src[i * w + t.hi] * T::of(t.w_hi);
                }
            }
            for (i, t) in rows.iter().enumerate() {
                let (wl, wh) = (T::of(t.w_lo), T::of(t.w_hi));
                for j in 0..ow {
                    dst[i * ow + j] = tmp[t.lo * ow + j] * wl + tmp[t.hi * ow + j] * wh;
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: maps an output gradient back to the
/// low-resolution grid.
pub fn upsample_bilinear_backward<T: Real>(grad: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor < 1 {
        return Err(Error::invalid("upsample_bilinear_backward", "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(grad.clone());
    }
    let [n, c, oh, ow] = grad.dims();
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape(
            "upsample_bilinear_backward",
            format!("spatial dims divisible by {factor}"),
            dims_str(grad.dims()),
        ));
    }
    let (h, w) = (oh / factor, ow / factor);
    let rows = upsample_taps(h, factor);
    let cols = upsample_taps(w, factor);
    let mut out = Tensor4::zeros([n, c, h, w]);
    out.data
        .par_chunks_mut(h * w)
        .zip(grad.data.par_chunks(oh * ow))
        .for_each(|(dst, src)| {
            let mut tmp = vec![T::zero(); h * ow];
            for (i, t) in rows.iter().enumerate() {
                let (wl, wh) = (T::of(t.w_lo), T::of(t.w_hi));
                for j in 0..ow {
                    let g = src[i * ow + j];
                    tmp[t.lo * ow + j] += g * wl;
                    tmp[t.hi * ow + j] += g * wh;
                }
            }
            for i in 0..h {
                for (j, t) in cols.iter().enumerate() {
                    let g = tmp[i * ow + j];
                    dst[i * w + t.lo] += g * T::of(t.w_lo);
                    dst[i * w + t.hi] += g * T::of(t.w_hi);
                }
            }
        });
    Ok(out)
}

/// Quarter turns (counter-clockwise) if `angle` is a multiple of 90 degrees.
pub(crate) fn quarter_turns(angle: f64) -> Option<usize> {
    let a = angle.rem_euclid(360.0);
    let q = a / 90.0;
    if q.fract() == 0.0 {
        Some(q as usize % 4)
    } else {
        None
    }
}

/// Source `(row, col)` read by output `(i, j)` when an `n x n` grid is turned
/// counter-clockwise by `k` quarter turns.
#[inline]
pub(crate) fn quarter_turn_source(k: usize, n: usize, i: usize, j: usize) -> (usize, usize) {
    match k % 4 {
        0 => (i, j),
        1 => (j, n - 1 - i),
        2 => (n - 1 - i, n - 1 - j),
        _ => (n - 1 - j, i),
    }
}

/// Back-rotated source coordinate `(row, col)` sampled by output `(i, j)` when
/// an `h x w` grid is rotated counter-clockwise by the angle with the given
/// sine and cosine about its centre. Rows point down, so the visual
/// counter-clockwise sense uses an upward y axis.
#[inline]
pub(crate) fn rotation_source(h: usize, w: usize, sin: f64, cos: f64, i: usize, j: usize) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let x = j as f64 - cx;
    let y = cy - i as f64;
    let xs = cos * x + sin * y;
    let ys = -sin * x + cos * y;
    (cy - ys, cx + xs)
}

/// Bilinear sample of a zero-extended plane.
#[inline]
pub(crate) fn bilinear_zero<T: Real>(plane: &[T], h: usize, w: usize, r: f64, c: f64) -> T {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let mut acc = 0.0;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        let rr = r0 as i64 + dr;
        if rr < 0 || rr >= h as i64 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let cc = c0 as i64 + dc;
            if cc < 0 || cc >= w as i64 {
                continue;
            }
            acc += wr * wc * plane[rr as usize * w + cc as usize].f64();
        }
    }
    T::of(acc)
}

/// Rotates every plane counter-clockwise by `angle` degrees about its centre
/// with bilinear resampling. Samples falling outside the image read as zero.
/// Square inputs at multiples of 90 degrees are permuted exactly.
pub fn rotate_image<T: Real>(x: &Tensor4<T>, angle: f64) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros(x.dims());
    if let (Some(k), true) = (quarter_turns(angle), h == w) {
        for b in 0..n {
            for ch in 0..c {
                let src = x.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for i in 0..h {
                    for j in 0..w {
                        let (si, sj) = quarter_turn_source(k, h, i, j);
                        dst[i * w + j] = src[si * w + sj];
                    }
                }
            }
        }
        return out;
    }
    let (s, co) = sin_cos_deg(angle);
    let coords: Vec<(f64, f64)> = (0..h * w).map(|p| rotation_source(h, w, s, co, p / w, p % w)).collect();
    out.data
        .par_chunks_mut(h * w)
        .zip(x.data.par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (d, &(r, cc)) in dst.iter_mut().zip(&coords) {
                *d = bilinear_zero(src, h, w, r, cc);
            }
        });
    out
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`] given the forward input.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4 { dims: x.dims(), data }
}

/// Per-pixel softmax across channels, max-subtracted.
pub fn softmax_channels<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros(x.dims());
    for b in 0..n {
        let src = x.sample(b);
        let dst = &mut out.data[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(src[ch * hw + p]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[ch * hw + p] - mx).exp();
                dst[ch * hw + p] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[ch * hw + p] /= sum;
            }
        }
    }
    out
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        if p.n() != n || p.h() != h || p.w() != w {
            return Err(Error::shape("concat_channels", dims_str(first.dims()), dims_str(p.dims())));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(b));
        }
    }
    Ok(Tensor4 {
        dims: [n, c, h, w],
        data,
    })
}

/// Splits a channel-concatenated tensor back into parts of the given widths.
pub fn split_channels<T: Real>(x: &Tensor4<T>, widths: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let total: usize = widths.iter().sum();
    if total != x.c() {
        return Err(Error::shape(
            "split_channels",
            format!("{total} channels"),
            dims_str(x.dims()),
        ));
    }
    let [n, _, h, w] = x.dims();
    let hw = h * w;
    let mut parts: Vec<Tensor4<T>> = widths.iter().map(|&c| Tensor4::zeros([n, c, h, w])).collect();
    for b in 0..n {
        let src = x.sample(b);
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.data[b * c * hw..(b + 1) * c * hw].copy_from_slice(&src[off..off + c * hw]);
            off += c * hw;
        }
    }
    Ok(parts)
}

fn reflect(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as i64 {
        r = period - r;
    }
    r as usize
}

/// Reflect-pads the bottom and right borders up to `(h, w)`.
pub fn reflect_pad<T: Real>(x: &Tensor4<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
    if h < x.h() || w < x.w() {
        return Err(Error::invalid("reflect_pad", "target smaller than input"));
    }
    let [n, c, ih, iw] = x.dims();
    Ok(Tensor4::from_fn([n, c, h, w], |[b, ch, i, j]| {
        x.at(b, ch, reflect(i as i64, ih), reflect(j as i64, iw))
    }))
}

/// Top-left `(h, w)` crop.
pub fn crop<T: Real>(x: &Tensor4<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
    if h > x.h() || w > x.w() {
        return Err(Error::invalid("crop", "crop larger than input"));
    }
    let [n, c, _, _] = x.dims();
    Ok(Tensor4::from_fn([n, c, h, w], |[b, ch, i, j]| x.at(b, ch, i, j)))
}

pub(crate) fn reflect_index(i: i64, len: usize) -> usize {
    reflect(i, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Window-by-window dot product written independently of `conv2d_ref`.
    fn sliding_dot(x: &Tensor4<f64>, w: &Tensor4<f64>, b: f64) -> Vec<f64> {
        let (h, wd, m) = (x.h() as i64, x.w() as i64, w.h() as i64);
        let half = m / 2;
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..wd {
                let mut s = b;
                for p in -half..=half {
                    for q in -half..=half {
                        let (yi, xj) = (i + p, j + q);
                        if (0..h).contains(&yi) && (0..wd).contains(&xj) {
                            s += w.at(0, 0, (p + half) as usize, (q + half) as usize) * x.at(0, 0, yi as usize, xj as usize);
                        }
                    }
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn conv_of_zero_input_is_bias() {
        let x = Tensor4::<f64>::zeros([1, 2, 5, 5]);
        let w = rand_tensor([1, 2, 3, 3], 1);
        let y = conv2d_ref(&x, &w, &[0.5], 1).unwrap();
        assert_eq!(y.dims(), [1, 1, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_one_by_one_scales() {
        let x = rand_tensor([1, 1, 4, 4], 2);
        let w = Tensor4::filled([1, 1, 1, 1], 2.0);
        let y = conv2d_ref(&x, &w, &[0.0], 0).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let x = rand_tensor([1, 1, 5, 5], 3);
        let w = rand_tensor([1, 1, 3, 3], 4);
        let y = conv2d_ref(&x, &w, &[0.25], 1).unwrap();
        for (a, b) in y.data().iter().zip(sliding_dot(&x, &w, 0.25)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor4::<f64>::zeros([1, 3, 5, 5]);
        let w = Tensor4::<f64>::zeros([2, 2, 3, 3]);
        let err = conv2d_ref(&x, &w, &[0.0, 0.0], 1).unwrap_err().to_string();
        assert!(err.contains("1x3x5x5") && err.contains("2x2x3x3"), "{err}");
    }

    #[test]
    fn conv_is_translation_equivariant_on_interior() {
        let x = rand_tensor([1, 1, 12, 12], 5);
        let w = rand_tensor([1, 1, 3, 3], 6);
        let (dy, dx) = (2usize, 1usize);
        let shifted = Tensor4::from_fn([1, 1, 12, 12], |[_, _, i, j]| {
            if i >= dy && j >= dx {
                x.at(0, 0, i - dy, j - dx)
            } else {
                0.0
            }
        });
        let y = conv2d_ref(&x, &w, &[0.1], 1).unwrap();
        let ys = conv2d_ref(&shifted, &w, &[0.1], 1).unwrap();
        for i in 1..9 {
            for j in 1..9 {
                assert_abs_diff_eq!(ys.at(0, 0, i + dy, j + dx), y.at(0, 0, i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_window_and_ties() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 2.0, 0.5]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(idx.source, vec![1]);

        let c = Tensor4::filled([1, 1, 4, 4], 7.0f64);
        let (y, idx) = maxpool2x2(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(idx.source, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_matches_exhaustive_oracle() {
        let x = rand_tensor([1, 1, 4, 4], 7);
        let (y, idx) = maxpool2x2(&x).unwrap();
        for oi in 0..2 {
            for oj in 0..2 {
                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(a, b)| (2 * oi + a, 2 * oj + b));
                let best = cells.iter().copied().fold(cells[0], |acc, c| {
                    if x.at(0, 0, c.0, c.1) > x.at(0, 0, acc.0, acc.1) {
                        c
                    } else {
                        acc
                    }
                });
                assert_eq!(y.at(0, 0, oi, oj), x.at(0, 0, best.0, best.1));
                assert_eq!(idx.source[oi * 2 + oj], best.0 * 4 + best.1);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool2x2(&Tensor4::<f32>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let x = rand_tensor([1, 2, 3, 3], 8);
        assert_eq!(upsample_bilinear(&x, 1).unwrap(), x);
        let c = Tensor4::filled([1, 1, 3, 5], 0.7f64);
        let y = upsample_bilinear(&c, 4).unwrap();
        assert_eq!(y.dims(), [1, 1, 12, 20]);
        for v in y.data() {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }
        assert!(upsample_bilinear(&c, 0).is_err());
    }

    #[test]
    fn upsample_two_by_two_closed_form() {
        // Columns 0 and 1 hold 0 and 1; with half-pixel centres the four
        // output columns sample source x = -0.25, 0.25, 0.75, 1.25, clamped.
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        let want_row = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(y.at(0, 0, i, j), want_row[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = rand_tensor([2, 2, 3, 4], 9);
        let g = rand_tensor([2, 2, 12, 16], 10);
        let y = upsample_bilinear(&x, 4).unwrap();
        let gx = upsample_bilinear_backward(&g, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn upsample_commutes_with_quarter_turns() {
        let x = rand_tensor([1, 1, 4, 4], 11);
        let a = rotate_image(&upsample_bilinear(&x, 2).unwrap(), 90.0);
        let b = upsample_bilinear(&rotate_image(&x, 90.0), 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn rotate_identity_and_quarter_turn() {
        let x = rand_tensor([1, 2, 5, 5], 12);
        assert_eq!(rotate_image(&x, 0.0), x);
        let m = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // [a,b;c,d] -> [b,d;a,c]
        assert_eq!(rotate_image(&m, 90.0).data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate_image(&m, -270.0).data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn general_path_agrees_with_permutation_at_quarter_turns() {
        let x = rand_tensor([1, 1, 6, 6], 13);
        let (s, c) = sin_cos_deg(90.0);
        let exact = rotate_image(&x, 90.0);
        for i in 0..6 {
            for j in 0..6 {
                let (r, cc) = rotation_source(6, 6, s, c, i, j);
                let v = bilinear_zero(x.plane(0, 0), 6, 6, r, cc);
                assert_abs_diff_eq!(v, exact.at(0, 0, i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rotate_round_trip_on_smooth_field() {
        // Sum of a few low-frequency sinusoids: band-limited, so bilinear
        // resampling error stays small.
        let n = 48;
        let x = Tensor4::from_fn([1, 1, n, n], |[_, _, i, j]| {
            let (y, x) = (i as f64 / n as f64, j as f64 / n as f64);
            (2.0 * std::f64::consts::PI * (1.3 * x + 0.4 * y)).sin() * 0.5
                + (2.0 * std::f64::consts::PI * (0.7 * y - 0.9 * x)).cos() * 0.3
        });
        let back = rotate_image(&rotate_image(&x, 37.0), -37.0);
        let c = (n as f64 - 1.0) / 2.0;
        let (mut err, mut cnt) = (0.0, 0);
        for i in 0..n {
            for j in 0..n {
                let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                if d < 0.4 * n as f64 {
                    err += (back.at(0, 0, i, j) - x.at(0, 0, i, j)).abs();
                    cnt += 1;
                }
            }
        }
        assert!(err / (cnt as f64) < 0.02, "round trip error {}", err / cnt as f64);
    }

    #[test]
    fn relu_and_softmax_closed_forms() {
        let x = Tensor4::from_vec([1, 2, 1, 1], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let s = softmax_channels(&Tensor4::from_vec([1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
        let u = softmax_channels(&Tensor4::filled([1, 6, 2, 2], 3.0f64));
        assert!(u.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
        let big = softmax_channels(&Tensor4::from_vec([1, 2, 1, 1], vec![1000.0f32, 1000.0]).unwrap());
        assert!(big.all_finite());
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x = rand_tensor([1, 2, 5, 3], 14);
        let p = reflect_pad(&x, 8, 8).unwrap();
        assert_eq!(p.at(0, 1, 5, 0), x.at(0, 1, 3, 0));
        assert_eq!(crop(&p, 5, 3).unwrap(), x);
    }

    proptest! {
        #[test]
        fn four_quarter_turns_are_identity(n in 1usize..9, seed in 0u64..1000) {
            let x = rand_tensor([1, 2, n, n], seed);
            let mut y = x.clone();
            for _ in 0..4 {
                y = rotate_image(&y, 90.0);
            }
            prop_assert_eq!(y, x);
        }

        #[test]
        fn maxpool_backward_conserves_gradient(seed in 0u64..1000) {
            let x = rand_tensor([2, 3, 4, 6], seed);
            let (_, idx) = maxpool2x2(&x).unwrap();
            let g = rand_tensor([2, 3, 2, 3], seed + 1);
            let gx = maxpool2x2_backward(&g, &idx).unwrap();
            let s_in: f64 = g.data().iter().sum();
            let s_out: f64 = gx.data().iter().sum();
            prop_assert!((s_in - s_out).abs() < 1e-12);
            prop_assert_eq!(gx.data().iter().filter(|v| **v != 0.0).count(), g.data().iter().filter(|v| **v != 0.0).count());
        }
    }
}
