//! Orientation pooling: keep the strongest response over the orientation
//! axis together with the angle that produced it, and emit it as a 2-vector.

use crate::error::{Error, Result};
use crate::real::{sin_cos_deg, Real};
use crate::rotkernel::RotStack;
use crate::tensor::{dims_str, Tensor4};
use crate::vecfield::VectorField;

/// Per-location maximum `rho` over orientations and the winning index.
/// `theta = 360 / R * argmax` degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarField<T> {
    pub rho: Tensor4<T>,
    pub argmax: Vec<u32>,
    orientations: usize,
}

impl<T: Real> PolarField<T> {
    pub fn orientations(&self) -> usize {
        self.orientations
    }

    /// Angle in degrees at flat location `idx` of `rho`.
    pub fn theta(&self, idx: usize) -> f64 {
        360.0 / self.orientations as f64 * self.argmax[idx] as f64
    }

    pub fn theta_map(&self) -> Tensor4<f64> {
        Tensor4::from_vec(self.rho.dims(), (0..self.argmax.len()).map(|k| self.theta(k)).collect())
            .expect("argmax has one entry per location")
    }
}

/// `(sin, cos)` of each orientation angle, exact at quarter turns.
pub fn orientation_table(r: usize) -> Vec<(f64, f64)> {
    (0..r).map(|k| sin_cos_deg(360.0 * k as f64 / r as f64)).collect()
}

/// Max/argmax over orientations (ties resolve to the smallest index), then
/// `u = relu(rho) cos(theta)`, `v = relu(rho) sin(theta)`.
pub fn orientation_pool<T: Real>(y: &RotStack<T>) -> (PolarField<T>, VectorField<T>) {
    let [n, f_count, r_count, h, w] = y.shape();
    let hw = h * w;
    let table: Vec<(T, T)> = orientation_table(r_count)
        .into_iter()
        .map(|(s, c)| (T::of(s), T::of(c)))
        .collect();
    let dims = [n, f_count, h, w];
    let mut rho = Tensor4::zeros(dims);
    let mut u = Tensor4::zeros(dims);
    let mut v = Tensor4::zeros(dims);
    let mut argmax = vec![0u32; n * f_count * hw];
    let data = y.tensor().data();
    for b in 0..n {
        for f in 0..f_count {
            let base = (b * f_count + f) * r_count * hw;
            let out = (b * f_count + f) * hw;
            for p in 0..hw {
                let mut best = data[base + p];
                let mut arg = 0usize;
                for r in 1..r_count {
                    let val = data[base + r * hw + p];
                    if val > best {
                        best = val;
                        arg = r;
                    }
                }
                rho.data_mut()[out + p] = best;
                argmax[out + p] = arg as u32;
                let mag = best.max(T::zero());
                let (s, c) = table[arg];
                u.data_mut()[out + p] = mag * c;
                v.data_mut()[out + p] = mag * s;
            }
        }
    }
    (
        PolarField {
            rho,
            argmax,
            orientations: r_count,
        },
        VectorField { u, v },
    )
}

/// Routes the incoming vector gradient to the winning orientation slice.
///
/// The routed value is the chain-rule projection `g_u cos(theta) + g_v sin(theta)`
/// (zero where `rho <= 0`). With `literal_magnitude` the Euclidean norm of
/// `(g_u, g_v)` is routed instead; the two agree when the gradient points
/// along the activation direction, but the norm discards the sign.
pub fn orientation_pool_backward<T: Real>(
    grad: &VectorField<T>,
    saved: &PolarField<T>,
    literal_magnitude: bool,
) -> Result<RotStack<T>> {
    let dims = saved.rho.dims();
    if grad.u.dims() != dims || grad.v.dims() != dims {
        return Err(Error::shape(
            "orientation_pool_backward",
            dims_str(dims),
            format!("{} / {}", dims_str(grad.u.dims()), dims_str(grad.v.dims())),
        ));
    }
    let [n, f_count, h, w] = dims;
    let r_count = saved.orientations;
    let hw = h * w;
    let table: Vec<(T, T)> = orientation_table(r_count)
        .into_iter()
        .map(|(s, c)| (T::of(s), T::of(c)))
        .collect();
    let mut out = RotStack::zeros(n, f_count, r_count, h, w);
    let dst = out.tensor_mut().data_mut();
    for b in 0..n {
        for f in 0..f_count {
            let base = (b * f_count + f) * r_count * hw;
            let loc = (b * f_count + f) * hw;
            for p in 0..hw {
                let k = loc + p;
                if saved.rho.data()[k] <= T::zero() {
                    continue;
                }
                let arg = saved.argmax[k] as usize;
                let (gu, gv) = (grad.u.data()[k], grad.v.data()[k]);
                let routed = if literal_magnitude {
                    (gu * gu + gv * gv).sqrt()
                } else {
                    let (s, c) = table[arg];
                    gu * c + gv * s
                };
                dst[base + arg * hw + p] = routed;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack_at(values: &[f64]) -> RotStack<f64> {
        let r = values.len();
        RotStack::new(1, r, Tensor4::from_vec([1, r, 1, 1], values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn three_orientations_direct_evaluation() {
        let (polar, field) = orientation_pool(&stack_at(&[-1.0, 2.0, 0.5]));
        assert_eq!(polar.rho.data(), &[2.0]);
        assert_eq!(polar.argmax, vec![1]);
        assert_eq!(polar.theta(0), 120.0);
        assert!((field.u.data()[0] + 1.0).abs() < 1e-12);
        assert!((field.v.data()[0] - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn negative_maximum_gives_zero_vector() {
        let (polar, field) = orientation_pool(&stack_at(&[-3.0, -1.0, -2.0, -5.0]));
        assert_eq!(polar.rho.data(), &[-1.0]);
        assert_eq!((field.u.data()[0], field.v.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn ties_pick_first_orientation() {
        let (polar, field) = orientation_pool(&stack_at(&[5.0, 5.0]));
        assert_eq!(polar.argmax, vec![0]);
        assert_eq!(polar.theta(0), 0.0);
        assert_eq!((field.u.data()[0], field.v.data()[0]), (5.0, 0.0));
    }

    #[test]
    fn aligned_gradient_routes_its_magnitude() {
        let y = stack_at(&[0.1, 0.3, 2.0, 0.2, -1.0, 0.0]);
        let (polar, _) = orientation_pool(&y);
        let (s, c) = sin_cos_deg(polar.theta(0));
        let g = VectorField {
            u: Tensor4::from_vec([1, 1, 1, 1], vec![c]).unwrap(),
            v: Tensor4::from_vec([1, 1, 1, 1], vec![s]).unwrap(),
        };
        for literal in [false, true] {
            let back = orientation_pool_backward(&g, &polar, literal).unwrap();
            let d = back.tensor().data();
            assert!((d[2] - 1.0).abs() < 1e-12);
            assert_eq!(d.iter().filter(|&&x| x != 0.0).count(), 1);
        }
    }

    #[test]
    fn gate_blocks_gradient_where_rho_not_positive() {
        let (polar, _) = orientation_pool(&stack_at(&[-1.0, -0.5]));
        let g = VectorField {
            u: Tensor4::filled([1, 1, 1, 1], 3.0),
            v: Tensor4::filled([1, 1, 1, 1], 4.0),
        };
        let back = orientation_pool_backward(&g, &polar, false).unwrap();
        assert!(back.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_dims() {
        let (polar, _) = orientation_pool(&stack_at(&[1.0, 2.0]));
        let g = VectorField {
            u: Tensor4::zeros([1, 2, 1, 1]),
            v: Tensor4::zeros([1, 2, 1, 1]),
        };
        assert!(orientation_pool_backward(&g, &polar, false).is_err());
    }

    fn stack_from(n: usize, f: usize, r: usize, h: usize, w: usize, vals: &[f64]) -> RotStack<f64> {
        RotStack::new(f, r, Tensor4::from_vec([n, f * r, h, w], vals.to_vec()).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn circular_shift_relabels_angle(
            r in 1usize..9,
            k in 0usize..9,
            vals in proptest::collection::vec(-4i32..5, 72),
        ) {
            let (h, w) = (3, 3);
            let data: Vec<f64> = vals.iter().take(r * h * w).map(|&v| v as f64).collect();
            let base = stack_from(1, 1, r, h, w, &data);
            let k = k % r;
            let mut shifted = vec![0.0; data.len()];
            for s in 0..r {
                let dst = (s + k) % r;
                shifted[dst * 9..(dst + 1) * 9].copy_from_slice(&data[s * 9..(s + 1) * 9]);
            }
            let (p0, _) = orientation_pool(&base);
            let (p1, _) = orientation_pool(&stack_from(1, 1, r, h, w, &shifted));
            prop_assert_eq!(&p0.rho, &p1.rho);
            for loc in 0..9 {
                // with ties the winner may move, but only to an equal value
                let moved = (p0.argmax[loc] as usize + k) % r;
                let v_moved = shifted[moved * 9 + loc];
                prop_assert_eq!(v_moved, p1.rho.data()[loc]);
                let unique = (0..r).filter(|&s| data[s * 9 + loc] == p0.rho.data()[loc]).count() == 1;
                if unique {
                    prop_assert_eq!(p1.argmax[loc] as usize, moved);
                    let dtheta = (p1.theta(loc) - p0.theta(loc) - 360.0 * k as f64 / r as f64).rem_euclid(360.0);
                    prop_assert!(dtheta.abs() < 1e-9 || (360.0 - dtheta).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn backward_has_one_slice_per_location(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..2 * 5 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = stack_from(1, 2, 5, 4, 4, &vals);
            let (polar, _) = orientation_pool(&y);
            let g = VectorField {
                u: Tensor4::from_fn([1, 2, 4, 4], |_| rng.random_range(0.5..1.0)),
                v: Tensor4::from_fn([1, 2, 4, 4], |_| rng.random_range(0.5..1.0)),
            };
            let back = orientation_pool_backward(&g, &polar, true).unwrap();
            for f in 0..2 {
                for p in 0..16 {
                    let nz: Vec<usize> = (0..5).filter(|&r| back.slice(0, f, r)[p] != 0.0).collect();
                    let loc = f * 16 + p;
                    if polar.rho.data()[loc] > 0.0 {
                        prop_assert_eq!(nz, vec![polar.argmax[loc] as usize]);
                    } else {
                        prop_assert!(nz.is_empty());
                    }
                }
            }
        }
    }
}
