//! Single-thread forward-pass timing against the number of orientations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, Variant};
use crate::tensor::Tensor4;

pub const REPORT_HEADER: &str = "model,orientations,parameters,tile,repeats,median_s,min_s,max_s";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub model: &'static str,
    pub orientations: usize,
    pub parameters: usize,
    pub tile: usize,
    pub repeats: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.model, self.orientations, self.parameters, self.tile, self.repeats, self.median_s, self.min_s, self.max_s
        )
    }

    /// `(max - min) / median`.
    pub fn spread(&self) -> f64 {
        (self.max_s - self.min_s) / self.median_s
    }
}

/// Baseline width whose trainable parameter count is closest to `cfg`'s.
pub fn matched_baseline(cfg: &ModelConfig) -> Result<ModelConfig> {
    let target = Model::<f32>::zeros(cfg)?.parameter_count() as i64;
    let mut best: Option<(i64, ModelConfig)> = None;
    for nf in 1..=8 * cfg.nf.max(1) {
        let b = ModelConfig {
            variant: Variant::Baseline,
            nf,
            mlp_widths: Vec::new(),
            ..cfg.clone()
        }
        .resolved()?;
        let gap = (Model::<f32>::zeros(&b)?.parameter_count() as i64 - target).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, b));
        }
    }
    Ok(best.expect("at least one width").1)
}

fn time_forward(model: &Model<f32>, x: &Tensor4<f32>, repeats: usize) -> Result<(f64, f64, f64)> {
    model.infer(x)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.infer(x)?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    Ok((median, times[0], times[repeats - 1]))
}

/// Times one forward pass of a `tile x tile` input for every `R` in
/// `orientations` and for the parameter-matched baseline, on a dedicated
/// single-thread pool. Weights are random; timing does not depend on them.
pub fn bench_forward(
    cfg: &ModelConfig,
    orientations: &[usize],
    repeats: usize,
    tile: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if repeats == 0 {
        return Err(Error::invalid("bench", "repeats must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid("bench", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::from_fn([1, cfg.in_channels, tile, tile], |_| rng.random_range(-1.0f32..1.0));
    let rot = ModelConfig {
        variant: Variant::Roteqnet,
        ..cfg.clone()
    }
    .resolved()?;
    let mut out = Vec::new();
    pool.install(|| -> Result<()> {
        let mut model = Model::<f32>::init(&rot, seed)?;
        for &r in orientations {
            model.set_orientations(r)?;
            let (median_s, min_s, max_s) = time_forward(&model, &x, repeats)?;
            out.push(BenchRecord {
                model: "roteqnet",
                orientations: r,
                parameters: model.parameter_count(),
                tile,
                repeats,
                median_s,
                min_s,
                max_s,
            });
        }
        let base = Model::<f32>::init(&matched_baseline(&rot)?, seed)?;
        let (median_s, min_s, max_s) = time_forward(&base, &x, repeats)?;
        out.push(BenchRecord {
            model: "baseline",
            orientations: 1,
            parameters: base.parameter_count(),
            tile,
            repeats,
            median_s,
            min_s,
            max_s,
        });
        Ok(())
    })?;
    Ok(out)
}
