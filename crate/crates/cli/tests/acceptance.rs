//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Takes a few minutes on one core: it generates
//! the default dataset and trains three models.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roteq::data::{Dataset, Split};
use roteq::equicheck::{layer_magnitude_check, measure};
use roteq::gradcheck::Layer;
use roteq::io::{decode_checkpoint, decode_rtqt, encode_checkpoint, encode_rtqt};
use roteq::network::{Model, ModelConfig};
use roteq::orientpool::orientation_pool;
use roteq::real::Dtype;
use roteq::rotkernel::{rotconv_forward, CanonicalFilter, OrientationSet, RotStack};
use roteq::tensor::{conv2d_ref, Tensor4};
use roteq::vecfield::{vec_rotconv, vecconv, VectorField, VectorFilter};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Work {
    dir: PathBuf,
}

impl Work {
    fn path(&self, name: &str) -> String {
        self.dir.join(name).to_string_lossy().into_owned()
    }

    /// Runs the binary; `Err` carries the tail of stderr.
    fn roteq(&self, args: &[&str]) -> Result<Duration, String> {
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_roteq"))
            .args(args)
            .env_remove("ROTEQ_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(start.elapsed())
        } else {
            let err = String::from_utf8_lossy(&out.stderr);
            Err(format!(
                "`roteq {}` exited {:?}: {}",
                args.join(" "),
                out.status.code(),
                err.trim()
            ))
        }
    }
}

fn read_csv(path: &str) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect())
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn filters(rng: &mut ChaCha8Rng, count: usize, m: usize, depth: usize) -> Vec<CanonicalFilter<f64>> {
    (0..count)
        .map(|_| {
            let w = (0..depth * m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            CanonicalFilter::new(m, depth, w, rng.random_range(-0.5..0.5)).unwrap()
        })
        .collect()
}

fn vector_filters(rng: &mut ChaCha8Rng, count: usize, m: usize, depth: usize) -> Vec<VectorFilter<f64>> {
    (0..count)
        .map(|_| {
            let mut w = || (0..depth * m * m).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (wu, wv) = (w(), w());
            VectorFilter::new(m, depth, wu, wv, rng.random_range(-0.5..0.5)).unwrap()
        })
        .collect()
}

fn gradients(w: &Work) -> Outcome {
    let report = w.path("gradcheck.csv");
    let took = w.roteq(&["gradcheck", "--suite", "all", "--seeds", "5", "--report", &report])?;
    let rows = read_csv(&report)?;
    let mut worst = 0.0f64;
    for layer in Layer::ALL {
        let mine: Vec<_> = rows.iter().filter(|r| r[0] == layer.name()).collect();
        if mine.len() < 5 || mine.iter().any(|r| r[5] != "true") {
            return Err(format!("{} failed or ran on fewer than 5 seeds", layer.name()));
        }
        worst = mine.iter().map(|r| num(&r[2])).fold(worst, f64::max);
    }
    ensure(
        worst < 1e-5 && took < Duration::from_secs(300),
        format!(
            "{} layers x 5 seeds, worst relative error {worst:.2e}, {:.1}s",
            Layer::ALL.len(),
            took.as_secs_f64()
        ),
    )
}

/// `(orientations, angle) -> (agreement, field_error)` from an equicheck report.
fn equicheck(w: &Work, ckpt: &str, data: &str, angles: &str, name: &str) -> Result<HashMap<(usize, i64), (f64, f64)>, String> {
    let report = w.path(name);
    w.roteq(&[
        "equicheck",
        "--checkpoint",
        ckpt,
        "--data",
        data,
        "--angles",
        angles,
        "--R-list",
        "4,8,16",
        "--patches",
        "20",
        "--report",
        &report,
    ])?;
    Ok(read_csv(&report)?
        .iter()
        .map(|r| ((num(&r[1]) as usize, num(&r[0]) as i64), (num(&r[3]), num(&r[4]))))
        .collect())
}

fn quarter_turns(w: &Work, ckpt: &str, data: &str) -> Outcome {
    let trained = equicheck(w, ckpt, data, "90,180,270", "equi90.csv")?;
    let trained_min = trained.values().map(|v| v.0).fold(1.0, f64::min);

    let val = Dataset::<f32>::load(Path::new(data), Split::Val).map_err(|e| e.to_string())?;
    let inputs: Vec<&Tensor4<f32>> = val.patches.iter().take(20).map(|p| &p.image).collect();
    let mut random_min = 1.0f64;
    for r in [4, 8, 16] {
        let model = Model::<f32>::init(&ModelConfig::roteqnet(2, r, 5, 4), 7).map_err(|e| e.to_string())?;
        for angle in [90.0, 180.0, 270.0] {
            random_min = random_min.min(measure(&model, &inputs, angle).map_err(|e| e.to_string())?.agreement);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, [1, 4, 64, 64]);
    let bank = filters(&mut rng, 4, 7, 4);
    let (mut layer_agree, mut layer_err) = (1.0f64, 0.0f64);
    for r in [4, 8, 16] {
        let orient = OrientationSet::new(r).unwrap();
        for angle in [90.0, 180.0, 270.0] {
            let e = layer_magnitude_check(&x, &bank, &orient, angle, 1e-4).map_err(|e| e.to_string())?;
            layer_agree = layer_agree.min(e.agreement);
            layer_err = layer_err.max(e.max_error);
        }
    }
    ensure(
        trained.len() == 9 && trained_min >= 0.995 && random_min >= 0.995 && layer_agree >= 0.999 && layer_err < 1e-4,
        format!(
            "min agreement trained {trained_min:.4}, random {random_min:.4}; single layer {layer_agree:.4}, max error {layer_err:.1e}"
        ),
    )
}

fn off_grid(w: &Work, ckpt: &str, data: &str) -> Outcome {
    let m = equicheck(w, ckpt, data, "45", "equi45.csv")?;
    let get = |r| m.get(&(r, 45)).copied().ok_or(format!("no 45 degree row for R={r}"));
    let (a4, a8, a16) = (get(4)?, get(8)?, get(16)?);
    ensure(
        a16.0 >= a4.0 && a4.1 > a8.1 && a8.1 > a16.1,
        format!(
            "agreement R=4/8/16 {:.4}/{:.4}/{:.4}, field error {:.4}/{:.4}/{:.4}",
            a4.0, a8.0, a16.0, a4.1, a8.1, a16.1
        ),
    )
}

fn single_orientation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let one = OrientationSet::new(1).unwrap();
    let (mut scalar, mut vector) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (c, f, m) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            [3, 5, 7][rng.random_range(0..3)],
        );
        let (h, wd) = (rng.random_range(m..m + 9), rng.random_range(m..m + 9));
        let x = uniform(&mut rng, [1, c, h, wd]);
        let bank = filters(&mut rng, f, m, c);
        let weights = Tensor4::from_vec([f, c, m, m], bank.iter().flat_map(|k| k.weights.clone()).collect()).unwrap();
        let bias: Vec<f64> = bank.iter().map(|k| k.bias).collect();
        let got = rotconv_forward(&x, &bank, &one, m / 2).unwrap();
        scalar = scalar.max(got.tensor().max_abs_diff(&conv2d_ref(&x, &weights, &bias, m / 2).unwrap()));

        let z = VectorField::new(uniform(&mut rng, [1, c, h, wd]), uniform(&mut rng, [1, c, h, wd])).unwrap();
        let vbank = vector_filters(&mut rng, f, m, c);
        let got = vec_rotconv(&z, &vbank, &one, m / 2).unwrap();
        vector = vector.max(got.tensor().max_abs_diff(&vecconv(&z, &vbank, m / 2).unwrap()));
    }
    ensure(
        scalar < 1e-6 && vector < 1e-6,
        format!("50 instances, max error rotconv {scalar:.1e}, vec_rotconv {vector:.1e}"),
    )
}

fn pool_and_stacking() -> Outcome {
    for r in [1usize, 2, 3, 8] {
        let patterns = 3usize.pow(r as u32);
        let fixtures = patterns.div_ceil(9);
        let mut data = vec![0.0; fixtures * r * 9];
        for p in 0..patterns {
            let mut code = p;
            for o in 0..r {
                data[((p / 9) * r + o) * 9 + p % 9] = (code % 3) as f64 - 1.0;
                code /= 3;
            }
        }
        let stack = RotStack::new(1, r, Tensor4::from_vec([fixtures, r, 3, 3], data.clone()).unwrap()).unwrap();
        let (polar, field) = orientation_pool(&stack);
        for loc in 0..fixtures * 9 {
            let (fix, cell) = (loc / 9, loc % 9);
            let vals: Vec<f64> = (0..r).map(|o| data[(fix * r + o) * 9 + cell]).collect();
            let best = (1..r).fold(0, |b, o| if vals[o] > vals[b] { o } else { b });
            let theta = 2.0 * std::f64::consts::PI * best as f64 / r as f64;
            let mag = vals[best].max(0.0);
            let exact = polar.rho.data()[loc] == vals[best] && polar.argmax[loc] as usize == best;
            let close = (field.u.data()[loc] - mag * theta.cos()).abs() < 1e-12
                && (field.v.data()[loc] - mag * theta.sin()).abs() < 1e-12;
            if !(exact && close) {
                return Err(format!("orientation pool differs from the oracle at R={r}, location {loc}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (d, f) = (rng.random_range(1..4), rng.random_range(1..4));
        let z = VectorField::new(uniform(&mut rng, [2, d, 9, 8]), uniform(&mut rng, [2, d, 9, 8])).unwrap();
        let bank = vector_filters(&mut rng, f, 5, d);
        let w: Vec<f64> = bank.iter().flat_map(|k| k.wu.iter().chain(&k.wv).copied()).collect();
        let weights = Tensor4::from_vec([f, 2 * d, 5, 5], w).unwrap();
        let bias: Vec<f64> = bank.iter().map(|k| k.bias).collect();
        let want = conv2d_ref(&z.stacked(), &weights, &bias, 2).unwrap();
        worst = worst.max(vecconv(&z, &bank, 2).unwrap().max_abs_diff(&want));
    }
    ensure(
        worst < 1e-6,
        format!("pool exact for R in 1,2,3,8; vecconv vs stacking max error {worst:.1e}"),
    )
}

fn learning(w: &Work, data: &str) -> Outcome {
    let eval = |run: &str| -> Result<HashMap<String, f64>, String> {
        let report = w.path(&format!("{run}_eval.csv"));
        w.roteq(&[
            "eval",
            "--checkpoint",
            &w.path(&format!("{run}/last.rtqc")),
            "--data",
            data,
            "--report",
            &report,
        ])?;
        Ok(read_csv(&report)?.into_iter().map(|r| (r[0].clone(), num(&r[1]))).collect())
    };
    let (rot, base) = (eval("roteqnet")?, eval("baseline")?);
    let epochs = read_csv(&w.path("roteqnet/metrics.csv"))?.len() / 2;
    let (oa, bar, base_bar) = (rot["oa"], rot["f1_bar"], base["f1_bar"]);
    ensure(
        epochs <= 15 && oa >= 0.95 && bar >= 0.85 && bar - base_bar >= 0.05,
        format!("{epochs} epochs, roteqnet OA {oa:.4}, bar F1 {bar:.4}; baseline bar F1 {base_bar:.4}"),
    )
}

fn model_size() -> Outcome {
    let count = |cfg: &ModelConfig| {
        Model::<f32>::zeros(cfg)
            .map(|m| m.parameter_count())
            .map_err(|e| e.to_string())
    };
    let rot = count(&ModelConfig::roteqnet(3, 8, 6, 4))?;
    let base = count(&ModelConfig::baseline(12, 6, 4))?;
    let ratio = base as f64 / rot as f64;
    ensure(
        (5.0..=20.0).contains(&ratio),
        format!("baseline Nf=12 {base} / roteqnet Nf=3 {rot} = {ratio:.2}"),
    )
}

fn timing(w: &Work) -> Outcome {
    let report = w.path("bench.csv");
    w.roteq(&["bench", "--R-list", "8,16,32,64,128", "--repeats", "21", "--report", &report])?;
    let times: Vec<f64> = read_csv(&report)?
        .iter()
        .filter(|r| r[0] == "roteqnet")
        .map(|r| num(&r[5]))
        .collect();
    let monotone = times.len() == 5 && times.windows(2).all(|p| p[1] > p[0]);
    let ratio = times.last().unwrap_or(&f64::NAN) / times.first().unwrap_or(&f64::NAN);
    let shown: Vec<String> = times.iter().map(|t| format!("{:.1}", t * 1e3)).collect();
    ensure(
        monotone && ratio < 16.0,
        format!("median ms R=8..128 [{}], ratio {ratio:.2}", shown.join(", ")),
    )
}

fn determinism(w: &Work) -> Outcome {
    for file in ["metrics.csv", "best.rtqc", "last.rtqc"] {
        let a = fs::read(w.path(&format!("roteqnet/{file}"))).map_err(|e| e.to_string())?;
        let b = fs::read(w.path(&format!("repeat/{file}"))).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{file} differs between identical runs"));
        }
    }
    Ok("metrics.csv, best.rtqc and last.rtqc identical across two runs".into())
}

fn serialization(w: &Work) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..50 {
        let dims: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..6)).collect();
        let n: usize = dims.iter().product();
        let narrow: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
        let wide: Vec<f64> = (0..n)
            .map(|_| f64::from_bits(rng.random::<u64>() & 0x7fef_ffff_ffff_ffff))
            .collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        encode_rtqt(&dims, &narrow, &mut a).map_err(|e| e.to_string())?;
        encode_rtqt(&dims, &wide, &mut b).map_err(|e| e.to_string())?;
        let back_a: Vec<f32> = decode_rtqt(&mut &a[..]).map_err(|e| e.to_string())?.to_vec();
        let back_b: Vec<f64> = decode_rtqt(&mut &b[..]).map_err(|e| e.to_string())?.to_vec();
        let same_a = back_a.iter().zip(&narrow).all(|(p, q)| p.to_bits() == q.to_bits());
        let same_b = back_b.iter().zip(&wide).all(|(p, q)| p.to_bits() == q.to_bits());
        if !(same_a && same_b) {
            return Err(format!("RTQT round trip changed a {dims:?} tensor"));
        }
    }
    let bytes = fs::read(w.path("roteqnet/last.rtqc")).map_err(|e| e.to_string())?;
    let (native, stored) = decode_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
    if stored != Dtype::F32 || encode_checkpoint(&native).map_err(|e| e.to_string())? != bytes {
        return Err("RTQC round trip is not bit-exact".into());
    }
    let (wide, _) = decode_checkpoint::<f64>(&bytes).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&wide.cast::<f32>()).map_err(|e| e.to_string())?;
    ensure(
        again == bytes,
        "RTQT f32/f64 and RTQC bit-exact; f32 checkpoint read as f64 and cast back reproduces the file".into(),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let w = Work {
        dir: tmp.path().to_path_buf(),
    };
    let data = w.path("data");
    let baseline_cfg = w.path("baseline.json");
    fs::write(
        &baseline_cfg,
        r#"{"model": {"variant": "baseline", "nf": 2}, "augment": {"rotation": false}}"#,
    )
    .unwrap();

    // shared artefacts: the default dataset, the default roteqnet twice and
    // the matched baseline without rotation augmentation
    let setup = (|| -> Result<(), String> {
        w.roteq(&["gen-data", "--out", &data])?;
        w.roteq(&["-q", "train", "--data", &data, "--out", &w.path("roteqnet")])?;
        w.roteq(&["-q", "train", "--data", &data, "--out", &w.path("repeat")])?;
        w.roteq(&[
            "-q",
            "train",
            "--config",
            &baseline_cfg,
            "--data",
            &data,
            "--out",
            &w.path("baseline"),
        ])?;
        Ok(())
    })();
    let ckpt = w.path("roteqnet/last.rtqc");
    let needs_setup = |f: &dyn Fn() -> Outcome| match &setup {
        Ok(()) => f(),
        Err(e) => Err(format!("setup failed: {e}")),
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradients(&w)),
        (
            "exact quarter-turn equivariance",
            needs_setup(&|| quarter_turns(&w, &ckpt, &data)),
        ),
        ("45 degree trend in R", needs_setup(&|| off_grid(&w, &ckpt, &data))),
        ("single-orientation equivalence", single_orientation()),
        ("pooling and stacking oracles", pool_and_stacking()),
        ("desk-scale learning", needs_setup(&|| learning(&w, &data))),
        ("model size ratio", model_size()),
        ("timing trend", timing(&w)),
        ("determinism", needs_setup(&|| determinism(&w))),
        ("serialization", needs_setup(&|| serialization(&w))),
    ];
    let mut failed = 0;
    for (k, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("criterion {:>2} {tag} {name}: {detail}", k + 1);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
