use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use roteq::bench::{self, bench_forward};
use roteq::config::{Precision, RunConfig};
use roteq::data::{generate_synthetic, Dataset, Manifest, Split};
use roteq::equicheck::{self, measure};
use roteq::gradcheck::{run_suite, Layer};
use roteq::io::{atomic_write, decode_checkpoint, decode_rtqt, raw_to_tensor4, read_png_image, write_label_png};
use roteq::network::{Model, Variant};
use roteq::real::Dtype;
use roteq::tensor::{concat_channels, Tensor4};
use roteq::train::{argmax_channels, evaluate, train_loop, TrainOutput};
use roteq::{Error, Real};

use crate::{Cli, Command};

type Result<T> = anyhow::Result<T>;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let quiet = cli.quiet;
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            init_threads(cli.threads, &cfg)?;
            gen_data(&cfg, &out)
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            init_threads(cli.threads, &cfg)?;
            train(&cfg, data, &out, quiet)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
            precision,
        } => {
            init_threads(cli.threads, &RunConfig::default())?;
            let split = Split::parse(&split).expect("checked by clap");
            with_checkpoint(&checkpoint, precision.as_deref(), Eval { data, split, report })
        }
        Command::Predict {
            checkpoint,
            input,
            height,
            manifest,
            out,
            precision,
        } => {
            init_threads(cli.threads, &RunConfig::default())?;
            let manifest = manifest.unwrap_or_else(|| sibling(&checkpoint, "manifest.json"));
            with_checkpoint(
                &checkpoint,
                precision.as_deref(),
                Predict {
                    input,
                    height,
                    manifest,
                    out,
                },
            )
        }
        Command::Equicheck {
            checkpoint,
            data,
            angles,
            r_list,
            patches,
            report,
            precision,
        } => {
            init_threads(cli.threads, &RunConfig::default())?;
            with_checkpoint(
                &checkpoint,
                precision.as_deref(),
                Equi {
                    data,
                    angles,
                    r_list,
                    patches,
                    report,
                },
            )
        }
        Command::Bench {
            config,
            r_list,
            repeats,
            tile,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            run_bench(&cfg, &r_list, repeats, tile, report.as_deref())
        }
        Command::Gradcheck {
            suite,
            seeds,
            eps,
            report,
        } => {
            init_threads(cli.threads, &RunConfig::default())?;
            gradcheck(&suite, seeds, eps, report.as_deref())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn config_error(path: &str, msg: impl Into<String>) -> anyhow::Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
    .into()
}

/// `--threads`, then `ROTEQ_THREADS`, then `run.threads`, then all cores.
fn init_threads(flag: Option<usize>, cfg: &RunConfig) -> Result<()> {
    let env = match std::env::var("ROTEQ_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| config_error("ROTEQ_THREADS", format!("{v:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    if flag == Some(0) {
        return Err(config_error("--threads", "must be at least 1"));
    }
    if let Some(n) = flag.or(env).or(cfg.run.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("setting up the thread pool")?;
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let m = generate_synthetic(&cfg.data.synthetic, out).with_context(|| format!("generating into {}", out.display()))?;
    println!(
        "wrote {} train / {} val patches of {}x{} to {}",
        m.train_indices.len(),
        m.val_indices.len(),
        m.config.size,
        m.config.size,
        out.display()
    );
    for (k, name) in m.class_names.iter().enumerate() {
        println!(
            "{name:<12} train px {:>9}  val px {:>9}",
            m.class_pixels_train[k], m.class_pixels_val[k]
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn check_manifest(manifest: &Manifest, classes: usize, in_channels: usize) -> Result<()> {
    if manifest.class_names.len() != classes {
        return Err(config_error(
            "model.classes",
            format!("{classes} but the dataset has {} classes", manifest.class_names.len()),
        ));
    }
    if manifest.in_channels != in_channels {
        return Err(config_error(
            "model.in_channels",
            format!("{in_channels} but the dataset has {} bands", manifest.in_channels),
        ));
    }
    Ok(())
}

/// The process command line, shell-quoted.
fn command_line() -> String {
    std::env::args()
        .map(|a| {
            if !a.is_empty() && a.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=,:@+".contains(c)) {
                a
            } else {
                format!("'{}'", a.replace('\'', r"'\''"))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn train(cfg: &RunConfig, data: Option<PathBuf>, out: &Path, quiet: bool) -> Result<ExitCode> {
    let Some(data) = data.or_else(|| cfg.data.dir.clone()) else {
        return Err(config_error("data.dir", "no dataset given (use --data or data.dir)"));
    };
    let manifest = Manifest::load(&data).with_context(|| format!("reading dataset {}", data.display()))?;
    check_manifest(&manifest, cfg.model.classes, cfg.model.in_channels)?;
    if out.join("metrics.csv").exists() {
        bail!("{} already holds a run (metrics.csv exists)", out.display());
    }
    fs::create_dir_all(out)?;
    atomic_write(&out.join("config.json"), cfg.to_canonical_json()?.as_bytes())?;
    atomic_write(&out.join("command.txt"), format!("{}\n", command_line()).as_bytes())?;
    fs::copy(data.join("manifest.json"), out.join("manifest.json"))?;
    match cfg.run.precision {
        Precision::F32 => train_as::<f32>(cfg, &data, out, quiet),
        Precision::F64 => train_as::<f64>(cfg, &data, out, quiet),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, data: &Path, out: &Path, quiet: bool) -> Result<ExitCode> {
    let train_set = Dataset::<T>::load(data, Split::Train)?;
    let val_set = Dataset::<T>::load(data, Split::Val)?;
    let mut model = Model::<T>::init(&cfg.model, cfg.run.seed)?;
    if !quiet {
        eprintln!(
            "{:?} nf={} R={} parameters={} train={} val={}",
            cfg.model.variant,
            cfg.model.nf,
            cfg.model.orientations,
            model.parameter_count(),
            train_set.len(),
            val_set.len()
        );
    }
    let val = (!val_set.is_empty()).then_some(&val_set);
    let report = train_loop(
        &mut model,
        &train_set,
        val,
        &cfg.sgd,
        &cfg.augment,
        cfg.run.seed,
        &TrainOutput {
            dir: Some(out.to_path_buf()),
            verbose: !quiet,
        },
    )?;
    match report.best_val {
        Some((epoch, scores)) => {
            println!("best validation epoch {epoch}");
            print!("{}", scores.to_table(&train_set.manifest.class_names));
        }
        None => println!("trained {} epochs", cfg.sgd.epochs()),
    }
    Ok(ExitCode::SUCCESS)
}

/// A command run on a checkpoint at the requested (or stored) precision.
trait OnModel {
    fn run<T: Real>(self, model: Model<T>) -> Result<ExitCode>;
}

fn with_checkpoint(path: &Path, precision: Option<&str>, job: impl OnModel) -> Result<ExitCode> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (model, stored) = decode_checkpoint::<f64>(&bytes).with_context(|| format!("loading {}", path.display()))?;
    let dtype = match precision {
        Some("f64") => Dtype::F64,
        Some(_) => Dtype::F32,
        None => stored,
    };
    match dtype {
        Dtype::F32 => job.run(model.cast::<f32>()),
        Dtype::F64 => job.run(model),
    }
}

struct Eval {
    data: PathBuf,
    split: Split,
    report: Option<PathBuf>,
}

impl OnModel for Eval {
    fn run<T: Real>(self, model: Model<T>) -> Result<ExitCode> {
        let set = Dataset::<T>::load(&self.data, self.split)?;
        check_manifest(&set.manifest, model.config().classes, model.config().in_channels)?;
        let (loss, cm) = evaluate(&model, &set.patches, 4)?;
        let scores = cm.scores()?;
        println!("{} split, {} patches, loss {loss:.6}", self.split.name(), set.len());
        print!("{}", scores.to_table(&set.manifest.class_names));
        if let Some(path) = &self.report {
            atomic_write(path, scores.to_csv(&set.manifest.class_names).as_bytes())?;
        }
        Ok(ExitCode::SUCCESS)
    }
}

struct Predict {
    input: PathBuf,
    height: Option<PathBuf>,
    manifest: PathBuf,
    out: PathBuf,
}

fn read_image<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return Ok(read_png_image(path)?);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let raw = decode_rtqt(&mut &bytes[..])?;
    Ok(raw_to_tensor4(&raw)?)
}

impl OnModel for Predict {
    fn run<T: Real>(self, model: Model<T>) -> Result<ExitCode> {
        let manifest = Manifest::load_file(&self.manifest).with_context(|| format!("reading {}", self.manifest.display()))?;
        check_manifest(&manifest, model.config().classes, model.config().in_channels)?;
        let mut x = read_image::<T>(&self.input)?;
        if let Some(h) = &self.height {
            let band = read_image::<T>(h)?;
            let first = Tensor4::from_fn([1, 1, band.h(), band.w()], |[_, _, i, j]| band.at(0, 0, i, j));
            x = concat_channels(&[&x, &first])?;
        }
        if x.n() != 1 || x.c() != model.config().in_channels {
            bail!(
                "input has {} bands but the model expects {}{}",
                x.c(),
                model.config().in_channels,
                if self.height.is_none() {
                    " (pass --height for the height band)"
                } else {
                    ""
                }
            );
        }
        manifest.band_stats.normalize(&mut x)?;
        let probs = model.forward_any_size(&x)?;
        let labels = argmax_channels(&probs);
        write_label_png(&self.out, &labels, x.w(), x.h(), &manifest.palette)?;
        let mut counts = vec![0usize; manifest.class_names.len()];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        for (name, n) in manifest.class_names.iter().zip(counts) {
            println!("{name:<12} {:>6.2}%", 100.0 * n as f64 / labels.len() as f64);
        }
        Ok(ExitCode::SUCCESS)
    }
}

struct Equi {
    data: PathBuf,
    angles: Vec<f64>,
    r_list: Vec<usize>,
    patches: usize,
    report: Option<PathBuf>,
}

impl OnModel for Equi {
    fn run<T: Real>(self, mut model: Model<T>) -> Result<ExitCode> {
        let set = Dataset::<T>::load(&self.data, Split::Val)?;
        check_manifest(&set.manifest, model.config().classes, model.config().in_channels)?;
        let inputs: Vec<&Tensor4<T>> = set.patches.iter().take(self.patches).map(|p| &p.image).collect();
        if inputs.is_empty() {
            bail!("the validation split is empty");
        }
        let r_list = if self.r_list.is_empty() {
            vec![model.config().orientations]
        } else if model.config().variant == Variant::Baseline {
            bail!("--R-list needs a roteqnet checkpoint");
        } else {
            self.r_list
        };
        let mut csv = format!("{}\n", equicheck::REPORT_HEADER);
        println!("{:>7} {:>4} {:>10} {:>12}", "angle", "R", "agreement", "field_error");
        for r in r_list {
            if model.config().variant == Variant::Roteqnet {
                model.set_orientations(r)?;
            }
            for &a in &self.angles {
                let rec = measure(&model, &inputs, a)?;
                println!(
                    "{:>7} {:>4} {:>10.6} {:>12.4e}",
                    rec.angle, rec.orientations, rec.agreement, rec.field_error
                );
                csv.push_str(&rec.csv_row());
                csv.push('\n');
            }
        }
        if let Some(path) = &self.report {
            atomic_write(path, csv.as_bytes())?;
        }
        Ok(ExitCode::SUCCESS)
    }
}

fn run_bench(cfg: &RunConfig, r_list: &[usize], repeats: usize, tile: Option<usize>, report: Option<&Path>) -> Result<ExitCode> {
    let tile = tile.unwrap_or(cfg.data.tile);
    let k = cfg.model.spatial_multiple();
    if tile == 0 || !tile.is_multiple_of(k) {
        return Err(config_error("--tile", format!("{tile} is not a positive multiple of {k}")));
    }
    let records = bench_forward(&cfg.model, r_list, repeats, tile, cfg.run.seed)?;
    let mut csv = format!("{}\n", bench::REPORT_HEADER);
    println!(
        "{:<9} {:>4} {:>10} {:>11} {:>8}",
        "model", "R", "params", "median_s", "spread"
    );
    for r in &records {
        println!(
            "{:<9} {:>4} {:>10} {:>11.5} {:>7.1}%",
            r.model,
            r.orientations,
            r.parameters,
            r.median_s,
            100.0 * r.spread()
        );
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(path) = report {
        atomic_write(path, csv.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(suite: &str, seeds: u64, eps: f64, report: Option<&Path>) -> Result<ExitCode> {
    let layers = Layer::parse_suite(suite)?;
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let results = run_suite(&layers, &seeds, eps)?;
    let mut csv = String::from("layer,seed,max_rel_error,checked,excluded,passed\n");
    let mut failed = 0;
    for r in &results {
        csv.push_str(&format!(
            "{},{},{:.3e},{},{},{}\n",
            r.layer,
            r.seed,
            r.max_rel_error,
            r.checked,
            r.excluded,
            r.passed()
        ));
        failed += !r.passed() as usize;
    }
    for layer in &layers {
        let rows: Vec<_> = results.iter().filter(|r| r.layer == layer.name()).collect();
        let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let ok = rows.iter().all(|r| r.passed());
        println!(
            "{:<20} worst rel error {worst:.3e} over {} seeds  {}",
            layer.name(),
            rows.len(),
            if ok { "ok" } else { "FAILED" }
        );
    }
    if let Some(path) = report {
        atomic_write(path, csv.as_bytes())?;
    }
    if failed > 0 {
        eprintln!("{failed} gradient checks failed");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
