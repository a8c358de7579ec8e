//! Central finite-difference checks of every backward pass, in 64-bit.
//!
//! Each probe reduces a layer to the scalar `sum(r * f(theta))` for a fixed
//! random projection `r`, so the analytic gradient is the layer's backward
//! pass fed with `r`. Coordinates whose perturbation by `10 eps` changes a
//! discrete decision (max winner, rectifier sign) are excluded: the function
//! is not differentiable there in the sense finite differences measure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{HeadFeatures, Model, ModelConfig, Variant};
use crate::orientpool::{orientation_pool, orientation_pool_backward};
use crate::rotkernel::{circular_mask, rotconv_backward, rotconv_forward, CanonicalFilter, OrientationSet, RotStack};
use crate::tensor::{conv2d_ref, Tensor4};
use crate::train::cross_entropy_loss;
use crate::vecfield::{
    vec_maxpool2x2, vec_maxpool2x2_backward, vec_rotconv, vec_rotconv_backward, vecconv, vecconv_backward, VecBatchNorm,
    VectorField, VectorFilter,
};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not divide by noise.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv2dRef,
    Rotconv,
    OrientationPool,
    RotconvPool,
    Vecconv,
    VecRotconv,
    VecMaxpool,
    VecBatchnorm,
    Loss,
    MicroNet,
    MicroNetCartesian,
    BaselineNet,
}

impl Layer {
    pub const ALL: [Layer; 12] = [
        Layer::Conv2dRef,
        Layer::Rotconv,
        Layer::OrientationPool,
        Layer::RotconvPool,
        Layer::Vecconv,
        Layer::VecRotconv,
        Layer::VecMaxpool,
        Layer::VecBatchnorm,
        Layer::Loss,
        Layer::MicroNet,
        Layer::MicroNetCartesian,
        Layer::BaselineNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv2dRef => "conv2d_ref",
            Layer::Rotconv => "rotconv",
            Layer::OrientationPool => "orientation_pool",
            Layer::RotconvPool => "rotconv_pool",
            Layer::Vecconv => "vecconv",
            Layer::VecRotconv => "vec_rotconv",
            Layer::VecMaxpool => "vec_maxpool",
            Layer::VecBatchnorm => "vec_batchnorm",
            Layer::Loss => "loss",
            Layer::MicroNet => "micro_net",
            Layer::MicroNetCartesian => "micro_net_cartesian",
            Layer::BaselineNet => "baseline_net",
        }
    }

    /// `all` or a single layer name.
    pub fn parse_suite(s: &str) -> Result<Vec<Layer>> {
        if s == "all" {
            return Ok(Layer::ALL.to_vec());
        }
        Layer::ALL.iter().find(|l| l.name() == s).map(|&l| vec![l]).ok_or_else(|| {
            let names: Vec<&str> = Layer::ALL.iter().map(|l| l.name()).collect();
            Error::invalid(
                "gradcheck",
                format!("unknown layer {s}; expected all or one of {}", names.join(", ")),
            )
        })
    }
}

type EvalFn = Box<dyn Fn(&[f64]) -> Result<(f64, Vec<u64>)> + Sync>;

/// A differentiable scalar function with its analytic gradient at `theta`.
pub struct Probe {
    pub theta: Vec<f64>,
    pub analytic: Vec<f64>,
    eval: EvalFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub layer: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked > 0
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient with central differences coordinate by
/// coordinate. Differences at `eps` and `eps / 2` are combined by one
/// Richardson step; plain central differences at 1e-4 carry an `eps^2`
/// truncation error of order 1e-5 where vector magnitudes are small.
pub fn check_probe(probe: &Probe, eps: f64) -> Result<(f64, usize, usize)> {
    let (_, base_sig) = (probe.eval)(&probe.theta)?;
    let outcomes = (0..probe.theta.len())
        .into_par_iter()
        .map(|k| -> Result<Option<f64>> {
            let at = |delta: f64| {
                let mut t = probe.theta.clone();
                t[k] += delta;
                (probe.eval)(&t)
            };
            for d in [10.0 * eps, -10.0 * eps] {
                if at(d)?.1 != base_sig {
                    return Ok(None);
                }
            }
            let mut diffs = [0.0; 2];
            for (d, h) in diffs.iter_mut().zip([eps, eps / 2.0]) {
                let (plus, sp) = at(h)?;
                let (minus, sm) = at(-h)?;
                if sp != base_sig || sm != base_sig {
                    return Ok(None);
                }
                *d = (plus - minus) / (2.0 * h);
            }
            // Richardson step: cancels the eps^2 truncation term
            let fd = (4.0 * diffs[1] - diffs[0]) / 3.0;
            Ok(Some(rel_error(probe.analytic[k], fd)))
        })
        .collect::<Result<Vec<_>>>()?;
    let checked: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let worst = checked.iter().copied().fold(0.0, f64::max);
    Ok((worst, checked.len(), outcomes.len() - checked.len()))
}

pub fn grad_check(layer: Layer, seed: u64, eps: f64) -> Result<CheckResult> {
    let probe = build_probe(layer, seed)?;
    let (max_rel_error, checked, excluded) = check_probe(&probe, eps)?;
    Ok(CheckResult {
        layer: layer.name(),
        seed,
        max_rel_error,
        checked,
        excluded,
    })
}

/// Runs every layer for every seed.
pub fn run_suite(layers: &[Layer], seeds: &[u64], eps: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &layer in layers {
        for &seed in seeds {
            out.push(grad_check(layer, seed, eps)?);
        }
    }
    Ok(out)
}

pub fn build_probe(layer: Layer, seed: u64) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (layer as u64) << 32);
    match layer {
        Layer::Conv2dRef => probe_conv2d(&mut rng),
        Layer::Rotconv => probe_rotconv(&mut rng, seed, false),
        Layer::RotconvPool => probe_rotconv(&mut rng, seed, true),
        Layer::OrientationPool => probe_orientation_pool(&mut rng, seed),
        Layer::Vecconv => probe_vecconv(&mut rng, None),
        Layer::VecRotconv => probe_vecconv(&mut rng, Some(orientations_for(seed))),
        Layer::VecMaxpool => probe_vec_maxpool(&mut rng),
        Layer::VecBatchnorm => probe_vec_batchnorm(&mut rng),
        Layer::Loss => probe_loss(&mut rng),
        Layer::MicroNet => probe_net(&mut rng, Variant::Roteqnet, HeadFeatures::Magnitude, seed),
        Layer::MicroNetCartesian => probe_net(&mut rng, Variant::Roteqnet, HeadFeatures::Cartesian, seed),
        Layer::BaselineNet => probe_net(&mut rng, Variant::Baseline, HeadFeatures::Magnitude, seed),
    }
}

/// Cycles through orientation counts with and without quarter-turn symmetry.
fn orientations_for(seed: u64) -> usize {
    [8, 3, 4, 6, 5][seed as usize % 5]
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_vec(dims, random_vec(rng, dims.iter().product())).expect("length matches")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sequential reader over a parameter vector.
struct Cursor<'a> {
    data: &'a [f64],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [f64]) -> Self {
        Cursor { data, at: 0 }
    }

    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        s
    }

    fn tensor(&mut self, dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_vec(dims, self.take(dims.iter().product()).to_vec()).expect("length matches")
    }

    /// A masked `(depth, m, m)` filter from its free entries.
    fn masked(&mut self, mask: &[bool], depth: usize) -> Vec<f64> {
        let free = mask.iter().filter(|&&b| b).count();
        let vals = self.take(free * depth);
        expand(vals, mask, depth)
    }
}

fn expand(free: &[f64], mask: &[bool], depth: usize) -> Vec<f64> {
    let mut it = free.iter();
    (0..depth * mask.len())
        .map(|k| {
            if mask[k % mask.len()] {
                *it.next().expect("enough free values")
            } else {
                0.0
            }
        })
        .collect()
}

fn compress<'a>(full: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    full.iter().enumerate().filter(|(k, _)| mask[k % mask.len()]).map(|(_, &v)| v)
}

fn probe_conv2d(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let (xd, wd, pad) = ([2, 3, 6, 6], [4, 3, 3, 3], 1);
    let x = random_tensor(rng, xd);
    let w = random_tensor(rng, wd);
    let b = random_vec(rng, 4);
    let r = random_tensor(rng, [2, 4, 6, 6]);
    let g = crate::conv::conv2d_backward(&x, w.data(), 4, 3, pad, &r, true)?;
    let theta = [x.data(), w.data(), &b].concat();
    let analytic = [g.grad_x.expect("requested").data(), &g.grad_w, &g.grad_b].concat();
    let eval: EvalFn = Box::new(move |t| {
        let mut c = Cursor::new(t);
        let (x, w) = (c.tensor(xd), c.tensor(wd));
        let y = conv2d_ref(&x, &w, c.take(4), pad)?;
        Ok((dot(y.data(), r.data()), Vec::new()))
    });
    Ok(Probe { theta, analytic, eval })
}

fn canonical_bank(c: &mut Cursor, mask: &[bool], m: usize, depth: usize, filters: usize) -> Result<Vec<CanonicalFilter<f64>>> {
    let weights: Vec<Vec<f64>> = (0..filters).map(|_| c.masked(mask, depth)).collect();
    let bias = c.take(filters);
    weights
        .into_iter()
        .zip(bias)
        .map(|(w, &b)| CanonicalFilter::new(m, depth, w, b))
        .collect()
}

fn probe_rotconv(rng: &mut ChaCha8Rng, seed: u64, with_pool: bool) -> Result<Probe> {
    let (m, depth, filters) = (5, 2, 2);
    let r_count = orientations_for(seed);
    let xd = [2, depth, 8, 8];
    let mask = circular_mask(m)?;
    let free = mask.iter().filter(|&&b| b).count();
    let theta: Vec<f64> = random_vec(rng, xd.iter().product::<usize>() + filters * (free * depth + 1));
    let orient = OrientationSet::new(r_count)?;
    let ydims = [2, filters * r_count, 8, 8];
    let pdims = [2, filters, 8, 8];
    let (ru, rv) = (random_tensor(rng, pdims), random_tensor(rng, pdims));
    let ry = random_tensor(rng, ydims);
    let unpack = {
        let mask = mask.clone();
        move |t: &[f64]| -> Result<(Tensor4<f64>, Vec<CanonicalFilter<f64>>)> {
            let mut c = Cursor::new(t);
            let x = c.tensor(xd);
            Ok((x, canonical_bank(&mut c, &mask, m, depth, filters)?))
        }
    };
    let (x, bank) = unpack(&theta)?;
    let stack = rotconv_forward(&x, &bank, &orient, m / 2)?;
    let grad_y = if with_pool {
        let (polar, _) = orientation_pool(&stack);
        orientation_pool_backward(&VectorField::new(ru.clone(), rv.clone())?, &polar, false)?
    } else {
        RotStack::new(filters, r_count, ry.clone())?
    };
    let g = rotconv_backward(&x, &bank, &orient, m / 2, &grad_y, true)?;
    let mut analytic = g.grad_x.expect("requested").into_data();
    for gw in &g.grad_w {
        analytic.extend(compress(gw, &mask));
    }
    // biases come after all weights in the parameter vector
    let weights_end = analytic.len();
    analytic.extend(&g.grad_b);
    debug_assert_eq!(weights_end + filters, theta.len());
    let eval: EvalFn = Box::new(move |t| {
        let (x, bank) = unpack(t)?;
        let stack = rotconv_forward(&x, &bank, &orient, m / 2)?;
        if with_pool {
            let (polar, z) = orientation_pool(&stack);
            let mut sig: Vec<u64> = polar.argmax.iter().map(|&a| a as u64).collect();
            sig.extend(polar.rho.data().iter().map(|&v| (v > 0.0) as u64));
            Ok((dot(z.u.data(), ru.data()) + dot(z.v.data(), rv.data()), sig))
        } else {
            Ok((dot(stack.tensor().data(), ry.data()), Vec::new()))
        }
    });
    Ok(Probe { theta, analytic, eval })
}

fn probe_orientation_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<Probe> {
    let r_count = orientations_for(seed);
    let (filters, h) = (2, 5);
    let ydims = [2, filters * r_count, h, h];
    let pdims = [2, filters, h, h];
    let y = random_tensor(rng, ydims);
    let (ru, rv) = (random_tensor(rng, pdims), random_tensor(rng, pdims));
    let stack = RotStack::new(filters, r_count, y.clone())?;
    let (polar, _) = orientation_pool(&stack);
    let g = orientation_pool_backward(&VectorField::new(ru.clone(), rv.clone())?, &polar, false)?;
    let eval: EvalFn = Box::new(move |t| {
        let stack = RotStack::new(filters, r_count, Tensor4::from_vec(ydims, t.to_vec())?)?;
        let (polar, z) = orientation_pool(&stack);
        let mut sig: Vec<u64> = polar.argmax.iter().map(|&a| a as u64).collect();
        sig.extend(polar.rho.data().iter().map(|&v| (v > 0.0) as u64));
        Ok((dot(z.u.data(), ru.data()) + dot(z.v.data(), rv.data()), sig))
    });
    Ok(Probe {
        theta: y.into_data(),
        analytic: g.into_tensor().into_data(),
        eval,
    })
}

fn probe_vecconv(rng: &mut ChaCha8Rng, orientations: Option<usize>) -> Result<Probe> {
    let (m, depth, filters) = (5, 2, 2);
    let zd = [2, depth, 7, 7];
    let mask = circular_mask(m)?;
    let free = mask.iter().filter(|&&b| b).count();
    let n_z = 2 * zd.iter().product::<usize>();
    let theta = random_vec(rng, n_z + filters * (2 * free * depth + 1));
    let unpack = {
        let mask = mask.clone();
        move |t: &[f64]| -> Result<(VectorField<f64>, Vec<VectorFilter<f64>>)> {
            let mut c = Cursor::new(t);
            let z = VectorField::new(c.tensor(zd), c.tensor(zd))?;
            let ws: Vec<(Vec<f64>, Vec<f64>)> = (0..filters)
                .map(|_| (c.masked(&mask, depth), c.masked(&mask, depth)))
                .collect();
            let bias = c.take(filters);
            let bank = ws
                .into_iter()
                .zip(bias)
                .map(|((wu, wv), &b)| VectorFilter::new(m, depth, wu, wv, b))
                .collect::<Result<Vec<_>>>()?;
            Ok((z, bank))
        }
    };
    let (z, bank) = unpack(&theta)?;
    let pad = m / 2;
    let (analytic, eval): (Vec<f64>, EvalFn) = match orientations {
        None => {
            let r = random_tensor(rng, [2, filters, 7, 7]);
            let g = vecconv_backward(&z, &bank, pad, &r, true)?;
            let gz = g.grad_z.expect("requested");
            let mut a = [gz.u.data(), gz.v.data()].concat();
            for (wu, wv) in g.grad_wu.iter().zip(&g.grad_wv) {
                a.extend(compress(wu, &mask));
                a.extend(compress(wv, &mask));
            }
            a.extend(&g.grad_b);
            let eval: EvalFn = Box::new(move |t| {
                let (z, bank) = unpack(t)?;
                Ok((dot(vecconv(&z, &bank, pad)?.data(), r.data()), Vec::new()))
            });
            (a, eval)
        }
        Some(r_count) => {
            let orient = OrientationSet::new(r_count)?;
            let r = random_tensor(rng, [2, filters * r_count, 7, 7]);
            let gy = RotStack::new(filters, r_count, r.clone())?;
            let g = vec_rotconv_backward(&z, &bank, &orient, pad, &gy, true)?;
            let gz = g.grad_z.expect("requested");
            let mut a = [gz.u.data(), gz.v.data()].concat();
            for (wu, wv) in g.grad_wu.iter().zip(&g.grad_wv) {
                a.extend(compress(wu, &mask));
                a.extend(compress(wv, &mask));
            }
            a.extend(&g.grad_b);
            let eval: EvalFn = Box::new(move |t| {
                let (z, bank) = unpack(t)?;
                Ok((
                    dot(vec_rotconv(&z, &bank, &orient, pad)?.tensor().data(), r.data()),
                    Vec::new(),
                ))
            });
            (a, eval)
        }
    };
    Ok(Probe { theta, analytic, eval })
}

fn probe_vec_maxpool(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let zd = [2, 3, 6, 6];
    let theta = random_vec(rng, 2 * zd.iter().product::<usize>());
    let pd = [2, 3, 3, 3];
    let (ru, rv) = (random_tensor(rng, pd), random_tensor(rng, pd));
    let unpack = move |t: &[f64]| -> Result<VectorField<f64>> {
        let mut c = Cursor::new(t);
        VectorField::new(c.tensor(zd), c.tensor(zd))
    };
    let (_, idx) = vec_maxpool2x2(&unpack(&theta)?)?;
    let g = vec_maxpool2x2_backward(&VectorField::new(ru.clone(), rv.clone())?, &idx)?;
    let analytic = [g.u.data(), g.v.data()].concat();
    let eval: EvalFn = Box::new(move |t| {
        let (p, idx) = vec_maxpool2x2(&unpack(t)?)?;
        let sig = idx.source.iter().map(|&k| k as u64).collect();
        Ok((dot(p.u.data(), ru.data()) + dot(p.v.data(), rv.data()), sig))
    });
    Ok(Probe { theta, analytic, eval })
}

fn probe_vec_batchnorm(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let zd = [3, 2, 4, 4];
    let n_z = 2 * zd.iter().product::<usize>();
    let mut theta = random_vec(rng, n_z);
    theta.extend((0..2).map(|_| rng.random_range(0.5..1.5)));
    let (ru, rv) = (random_tensor(rng, zd), random_tensor(rng, zd));
    let unpack = move |t: &[f64]| -> Result<(VectorField<f64>, VecBatchNorm<f64>)> {
        let mut c = Cursor::new(t);
        let z = VectorField::new(c.tensor(zd), c.tensor(zd))?;
        let mut bn = VecBatchNorm::new(2);
        bn.gamma = c.take(2).to_vec();
        Ok((z, bn))
    };
    let (z, mut bn) = unpack(&theta)?;
    let (_, cache) = bn.forward_train(&z)?;
    let (gz, gg) = bn.backward(&cache, &VectorField::new(ru.clone(), rv.clone())?)?;
    let analytic = [gz.u.data(), gz.v.data(), &gg].concat();
    let eval: EvalFn = Box::new(move |t| {
        let (z, mut bn) = unpack(t)?;
        let (o, _) = bn.forward_train(&z)?;
        Ok((dot(o.u.data(), ru.data()) + dot(o.v.data(), rv.data()), Vec::new()))
    });
    Ok(Probe { theta, analytic, eval })
}

fn probe_loss(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let dims = [2, 4, 3, 3];
    let logits = random_tensor(rng, dims);
    let labels: Vec<u8> = (0..18)
        .map(|k| {
            if k % 7 == 3 {
                crate::data::IGNORE
            } else {
                rng.random_range(0..4)
            }
        })
        .collect();
    let (_, g) = cross_entropy_loss(&logits, &labels, Some(crate::data::IGNORE))?;
    let eval: EvalFn = Box::new(move |t| {
        let x = Tensor4::from_vec(dims, t.to_vec())?;
        Ok((cross_entropy_loss(&x, &labels, Some(crate::data::IGNORE))?.0, Vec::new()))
    });
    Ok(Probe {
        theta: logits.into_data(),
        analytic: g.into_data(),
        eval,
    })
}

/// Two-block network small enough to difference every free parameter.
pub fn micro_config(variant: Variant, head: HeadFeatures, orientations: usize) -> ModelConfig {
    ModelConfig {
        variant,
        nf: 1,
        orientations,
        classes: 3,
        in_channels: 2,
        filter_size: 5,
        layer_multipliers: vec![2, 2],
        mlp_widths: vec![5, 3],
        head_features: head,
        ..Default::default()
    }
}

fn probe_net(rng: &mut ChaCha8Rng, variant: Variant, head: HeadFeatures, seed: u64) -> Result<Probe> {
    let cfg = micro_config(variant, head, orientations_for(seed));
    let model = Model::<f64>::init(&cfg, seed)?;
    let x = random_tensor(rng, [2, 2, 8, 8]);
    let labels: Vec<u8> = (0..128).map(|_| rng.random_range(0..3)).collect();
    let free: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable())
        .flat_map(|(i, p)| (0..p.data.len()).filter(move |&k| p.is_free(k)).map(move |k| (i, k)))
        .collect();
    let theta: Vec<f64> = free.iter().map(|&(i, k)| model.params()[i].data[k]).collect();
    let run =
        move |t: &[f64], model: &Model<f64>| -> Result<(f64, Model<f64>, crate::network::ForwardCache<f64>, Tensor4<f64>)> {
            let mut m = model.clone();
            for (&(i, k), &v) in free.iter().zip(t) {
                m.params_mut()[i].data[k] = v;
            }
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            let (logits, cache) = m.forward_train(&x, &mut dummy)?;
            let (loss, grad) = cross_entropy_loss(&logits, &labels, None)?;
            Ok((loss, m, cache, grad))
        };
    let (_, m, cache, grad) = run(&theta, &model)?;
    let grads = m.backward(&cache, &grad)?;
    let analytic: Vec<f64> = model
        .params()
        .iter()
        .zip(&grads)
        .filter(|(p, _)| p.trainable())
        .flat_map(|(p, g)| g.iter().enumerate().filter(|(k, _)| p.is_free(*k)).map(|(_, &v)| v))
        .collect();
    let eval: EvalFn = Box::new(move |t| {
        let (loss, _, cache, _) = run(t, &model)?;
        Ok((loss, cache.signature()))
    });
    Ok(Probe { theta, analytic, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_ref_is_tight() {
        let r = grad_check(Layer::Conv2dRef, 0, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(Layer::parse_suite("all").unwrap().len(), Layer::ALL.len());
        assert_eq!(Layer::parse_suite("vec_batchnorm").unwrap(), vec![Layer::VecBatchnorm]);
        assert!(Layer::parse_suite("nope").is_err());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut p = build_probe(Layer::Loss, 1).unwrap();
        p.analytic[0] += 1e-3;
        let (err, _, _) = check_probe(&p, DEFAULT_EPS).unwrap();
        assert!(err > TOLERANCE);
    }
}
