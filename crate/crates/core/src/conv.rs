//! im2col + GEMM convolution used on the hot paths. Checked against
//! [`crate::tensor::conv2d_ref`].
//!
//! Work is split per sample; per-sample weight gradients are reduced in batch
//! order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{dims_str, Tensor4};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    m: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(op: &'static str, x: [usize; 4], m: usize, pad: usize) -> Result<Self> {
        let [_, c, h, w] = x;
        if m.is_multiple_of(2) {
            return Err(Error::invalid(op, format!("filter size {m} must be odd")));
        }
        if h + 2 * pad < m || w + 2 * pad < m {
            return Err(Error::invalid(op, "filter larger than padded input"));
        }
        Ok(Geometry {
            c,
            h,
            w,
            m,
            pad,
            oh: h + 2 * pad - m + 1,
            ow: w + 2 * pad - m + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.m * self.m
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn trivial(&self) -> bool {
        self.m == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let ncols = g.cols();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for p in 0..g.m {
            for q in 0..g.m {
                let row = &mut col[((ch * g.m + p) * g.m + q) * ncols..][..ncols];
                for i in 0..g.oh {
                    let dst = &mut row[i * g.ow..(i + 1) * g.ow];
                    let yi = i as isize + p as isize - g.pad as isize;
                    if yi < 0 || yi >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[yi as usize * g.w..(yi as usize + 1) * g.w];
                    // valid output columns j satisfy 0 <= j + q - pad < w
                    let j0 = g.pad.saturating_sub(q);
                    let j1 = (g.w + g.pad).saturating_sub(q).min(g.ow);
                    dst[..j0.min(g.ow)].fill(T::zero());
                    if j1 > j0 {
                        let s0 = j0 + q - g.pad;
                        dst[j0..j1].copy_from_slice(&src[s0..s0 + (j1 - j0)]);
                    }
                    if j1 < g.ow {
                        dst[j1.max(j0)..].fill(T::zero());
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, x: &mut [T]) {
    let ncols = g.cols();
    for ch in 0..g.c {
        let plane = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for p in 0..g.m {
            for q in 0..g.m {
                let row = &col[((ch * g.m + p) * g.m + q) * ncols..][..ncols];
                for i in 0..g.oh {
                    let yi = i as isize + p as isize - g.pad as isize;
                    if yi < 0 || yi >= g.h as isize {
                        continue;
                    }
                    let j0 = g.pad.saturating_sub(q);
                    let j1 = (g.w + g.pad).saturating_sub(q).min(g.ow);
                    if j1 <= j0 {
                        continue;
                    }
                    let s0 = j0 + q - g.pad;
                    let dst = &mut plane[yi as usize * g.w + s0..][..j1 - j0];
                    for (d, &v) in dst.iter_mut().zip(&row[i * g.ow + j0..i * g.ow + j1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn check_bank<T>(op: &'static str, x: [usize; 4], weights: &[T], filters: usize, m: usize, bias: usize) -> Result<()> {
    let want = filters * x[1] * m * m;
    if weights.len() != want || bias != filters {
        return Err(Error::shape(
            op,
            format!(
                "{filters}x{}x{m}x{m} weights and {filters} biases for input {}",
                x[1],
                dims_str(x)
            ),
            format!("{} weights and {bias} biases", weights.len()),
        ));
    }
    Ok(())
}

/// Same-style convolution of `x` with `filters` kernels of size `m`.
/// `weights` is laid out `(filters, channels, m, m)`.
pub fn conv2d<T: Real>(x: &Tensor4<T>, weights: &[T], bias: &[T], filters: usize, m: usize, pad: usize) -> Result<Tensor4<T>> {
    let g = Geometry::new("conv2d", x.dims(), m, pad)?;
    check_bank("conv2d", x.dims(), weights, filters, m, bias.len())?;
    let mut out = Tensor4::zeros([x.n(), filters, g.oh, g.ow]);
    let ncols = g.cols();
    out.data_mut()
        .par_chunks_mut(filters * ncols)
        .enumerate()
        .for_each(|(b, dst)| {
            for (f, row) in dst.chunks_mut(ncols).enumerate() {
                row.fill(bias[f]);
            }
            let sample = x.sample(b);
            if g.trivial() {
                T::gemm(false, false, filters, g.k(), ncols, T::one(), weights, sample, T::one(), dst);
            } else {
                let mut col = vec![T::zero(); g.k() * ncols];
                im2col(sample, &g, &mut col);
                T::gemm(false, false, filters, g.k(), ncols, T::one(), weights, &col, T::one(), dst);
            }
        });
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_x: Option<Tensor4<T>>,
    /// `(filters, channels, m, m)`, summed over the batch.
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    weights: &[T],
    filters: usize,
    m: usize,
    pad: usize,
    grad_y: &Tensor4<T>,
    need_grad_x: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new("conv2d_backward", x.dims(), m, pad)?;
    check_bank("conv2d_backward", x.dims(), weights, filters, m, filters)?;
    let want = [x.n(), filters, g.oh, g.ow];
    if grad_y.dims() != want {
        return Err(Error::shape("conv2d_backward", dims_str(want), dims_str(grad_y.dims())));
    }
    let (k, ncols) = (g.k(), g.cols());
    let mut grad_x = need_grad_x.then(|| Tensor4::zeros(x.dims()));
    let sample_len = x.sample_len();

    let per_sample = |b: usize, gx: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let gy = grad_y.sample(b);
        let sample = x.sample(b);
        let mut gw = vec![T::zero(); filters * k];
        let gb: Vec<T> = gy.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
        if g.trivial() {
            T::gemm(false, true, filters, ncols, k, T::one(), gy, sample, T::zero(), &mut gw);
            if let Some(gx) = gx {
                T::gemm(true, false, k, filters, ncols, T::one(), weights, gy, T::zero(), gx);
            }
        } else {
            let mut col = vec![T::zero(); k * ncols];
            im2col(sample, &g, &mut col);
            T::gemm(false, true, filters, ncols, k, T::one(), gy, &col, T::zero(), &mut gw);
            if let Some(gx) = gx {
                T::gemm(true, false, k, filters, ncols, T::one(), weights, gy, T::zero(), &mut col);
                col2im(&col, &g, gx);
            }
        }
        (gw, gb)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = match grad_x.as_mut() {
        Some(gx) => gx
            .data_mut()
            .par_chunks_mut(sample_len)
            .enumerate()
            .map(|(b, chunk)| per_sample(b, Some(chunk)))
            .collect(),
        None => (0..x.n()).into_par_iter().map(|b| per_sample(b, None)).collect(),
    };

    let mut grad_w = vec![T::zero(); filters * k];
    let mut grad_b = vec![T::zero(); filters];
    for (gw, gb) in partials {
        for (a, v) in grad_w.iter_mut().zip(gw) {
            *a += v;
        }
        for (a, v) in grad_b.iter_mut().zip(gb) {
            *a += v;
        }
    }
    Ok(ConvGrads { grad_x, grad_w, grad_b })
}
