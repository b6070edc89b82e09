//! `nnreg`: generate synthetic pairs, train, register, evaluate, check
//! gradients and benchmark.
//!
//! Exit status is 0 on success, 2 for usage and configuration mistakes and 1
//! for failures while running.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nnreg::checkpoint::{load_checkpoint, save_checkpoint};
use nnreg::data::config::{RunConfig, Settings};
use nnreg::data::io::{read_cloud, read_transform, write_cloud, write_transform, format_transform};
use nnreg::data::suite::{median, pair_set, run_bench, training_pairs};
use nnreg::data::{builtin_shapes, make_pair, BenchmarkRecord, PairSpec};
use nnreg::features::{Backend, ExtractorConfig};
use nnreg::matching::write_matrix_text;
use nnreg::solver::{register_with, MatchingSummary};
use nnreg::training::gradcheck::{grad_check, micro_instance, GradCheckConfig};
use nnreg::training::Trainer;
use nnreg::{compute_metrics, Error, Model, PointCloud, Result};

#[derive(Parser)]
#[command(name = "nnreg", version, about = "Unsupervised rigid point-cloud registration")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic source/reference pairs and their ground truth.
    Generate(GenerateArgs),
    /// Train the feature and inlier networks; writes a checkpoint and a log.
    Train(TrainArgs),
    /// Register a source cloud onto a reference cloud.
    Register(RegisterArgs),
    /// Compare an estimated transform with the ground truth.
    Eval(EvalArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Register a seeded set of held-out pairs and write benchmark records.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Xyz,
    Ply,
}

#[derive(Args)]
struct GenerateArgs {
    /// Builtin shape; defaults to cycling through the configured shapes.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "xyz")]
    format: Format,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training log (tab separated); defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, conflicts_with = "handcrafted")]
    checkpoint: Option<PathBuf>,
    /// Use the handcrafted descriptor and an untrained inlier network.
    #[arg(long)]
    handcrafted: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Where to write the 4x4 transform; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration report as JSON; stderr when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Dump the last iteration's matching map F as text.
    #[arg(long)]
    dump_f: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Write the metrics as JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
    /// Seed of the micro instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Crop to this fraction instead of the configured one.
    #[arg(long)]
    keep_fraction: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("nnreg: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nnreg: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(path) => Settings::parse(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { line, message } => {
                Error::Config(format!("{}:{line}: {message}", path.display()))
            }
            other => other,
        })?,
        None => Settings::default(),
    };
    for o in &cli.overrides {
        s.set_override(o)?;
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::from_settings(&settings(&cli)?)?;
    match cli.command {
        Command::Generate(a) => generate(&rc, a),
        Command::Train(a) => train(&rc, a),
        Command::Register(a) => register_cmd(&rc, a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(&rc, a),
        Command::Bench(a) => bench(&rc, a),
    }
}

fn load_model(rc: &RunConfig, args: &ModelArgs) -> Result<Model> {
    match (&args.checkpoint, args.handcrafted) {
        (Some(path), _) => at_path(path, load_checkpoint(path)),
        (None, true) => {
            let ex = ExtractorConfig {
                backend: Backend::Handcrafted,
                ..rc.extractor.clone()
            };
            Model::init(&ex, rc.inlier_mode, rc.train.pipeline.k, rc.consistency_dim, rc.inlier_seed)
        }
        (None, false) => Err(Error::Usage("pass --checkpoint FILE or --handcrafted".into())),
    }
}

/// Names the file in I/O errors, which otherwise only carry the OS message.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Writes to stdout, reporting a closed pipe as an error instead of panicking.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn generate(rc: &RunConfig, a: GenerateArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    let ext = match a.format {
        Format::Xyz => "xyz",
        Format::Ply => "ply",
    };
    for i in 0..a.count {
        let name = a.shape.clone().unwrap_or_else(|| rc.shapes[i % rc.shapes.len()].clone());
        let shape = builtin_shapes(&name, rc.shape_points, a.seed + i as u64)?;
        let spec = PairSpec {
            seed: a.seed * 1000 + i as u64,
            ..rc.pair
        };
        let pair = make_pair(&shape, &spec)?;
        let stem = a.out_dir.join(format!("pair_{i:03}"));
        write_cloud(&stem.with_extension(format!("p.{ext}")), &pair.p)?;
        write_cloud(&stem.with_extension(format!("q.{ext}")), &pair.q)?;
        write_transform(&stem.with_extension("gt.txt"), &pair.t_gt)?;
        emit(&format!(
            "pair_{i:03} shape={name} points={} overlap={:.4}\n",
            pair.p.len(),
            pair.overlap
        ))?;
    }
    Ok(())
}

fn train(rc: &RunConfig, a: TrainArgs) -> Result<()> {
    let model = match &a.init {
        Some(p) => at_path(p, load_checkpoint(p))?,
        None => rc.init_model()?,
    };
    let pairs: Vec<(PointCloud, PointCloud)> =
        training_pairs(rc)?.into_iter().map(|p| (p.p, p.q)).collect();
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    let log = fs::File::create(&log_path)?;
    let mut trainer = Trainer::new(model, rc.train.clone())?;
    let every = (rc.train.steps / 20).max(1);
    let reports = trainer.fit(&pairs, std::io::BufWriter::new(log), |r| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!("step {:>6}  loss {:.6e}  |g| {:.3e}", r.step, r.loss.total, r.grad_norm);
        }
    })?;
    save_checkpoint(&a.out, &trainer.model)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        emit(&format!(
            "trained {} steps: loss {:.6e} -> {:.6e}; checkpoint {}; log {}\n",
            reports.len(),
            first.loss.total,
            last.loss.total,
            a.out.display(),
            log_path.display()
        ))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IterationJson {
    iteration: usize,
    transform: [[f64; 4]; 4],
    residual: f64,
    inliers: usize,
    matching: MatchingSummary,
}

fn rows(m: &nnreg::RigidTransform) -> [[f64; 4]; 4] {
    let h = m.to_homogeneous();
    std::array::from_fn(|r| std::array::from_fn(|c| h[(r, c)]))
}

fn register_cmd(rc: &RunConfig, a: RegisterArgs) -> Result<()> {
    let model = load_model(rc, &a.model)?;
    let p = at_path(&a.source, read_cloud(&a.source))?;
    let q = at_path(&a.reference, read_cloud(&a.reference))?;
    let mut last_f = None;
    let want_f = a.dump_f.is_some();
    let result = register_with(&p, &q, &model, &rc.train.pipeline, |l, trace| {
        if want_f && l == rc.train.pipeline.iterations {
            last_f = Some(trace.map.f.clone());
        }
    })?;
    match &a.out {
        Some(path) => write_transform(path, &result.final_transform)?,
        None => emit(&format_transform(&result.final_transform))?,
    }
    let report: Vec<IterationJson> = result
        .per_iteration
        .iter()
        .enumerate()
        .map(|(i, it)| IterationJson {
            iteration: i + 1,
            transform: rows(&it.transform),
            residual: it.residual,
            inliers: it.inliers.len(),
            matching: it.summary,
        })
        .collect();
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?;
    match &a.report {
        Some(path) => fs::write(path, json + "\n")?,
        None => eprintln!("{json}"),
    }
    if let (Some(path), Some(f)) = (&a.dump_f, last_f) {
        write_matrix_text(&f, std::io::BufWriter::new(fs::File::create(path)?))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let est = at_path(&a.estimate, read_transform(&a.estimate))?;
    let gt = at_path(&a.truth, read_transform(&a.truth))?;
    let m = compute_metrics(&est, &gt);
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Contract(e.to_string()))?;
    emit(&format!("{json}\n"))?;
    if let Some(path) = &a.out {
        fs::write(path, json + "\n")?;
    }
    Ok(())
}

/// Runs the check on the standard micro instance. Loss weights, ablation
/// switches and the fault switch come from the configuration.
fn gradcheck(rc: &RunConfig, a: GradcheckArgs) -> Result<()> {
    let (p, q, model, train) = micro_instance(a.seed, rc.inlier_mode, &rc.train)?;
    let check = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&p, &q, &model, &train, &check)?;
    if a.json {
        emit(&format!("{}\n", report.to_json()))?;
    } else {
        emit(&report.to_table())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed for {} parameters",
            report.failures().count()
        )))
    }
}

fn bench(rc: &RunConfig, a: BenchArgs) -> Result<()> {
    let model = load_model(rc, &a.model)?;
    let keep = a.keep_fraction.unwrap_or(rc.pair.keep_fraction);
    let pairs = pair_set(rc, rc.eval_pairs, rc.eval_seed, keep)?;
    let outcomes = run_bench(&model, rc, &pairs);
    create_dir(&a.out_dir)?;
    let mut records = format!("{}\n", BenchmarkRecord::HEADER);
    let mut transforms = String::new();
    let mut timings = String::from("pair_id\twall_time_s\n");
    let mut errors = String::new();
    for o in &outcomes {
        records.push_str(&o.record.to_line());
        records.push('\n');
        transforms.push_str(&format!("# pair {}\n{}", o.record.pair_id, format_transform(&o.transform)));
        timings.push_str(&format!("{}\t{:.6}\n", o.record.pair_id, o.record.wall_time_s));
        if let Some(e) = &o.error {
            errors.push_str(&format!("{}\t{e}\n", o.record.pair_id));
        }
    }
    fs::write(a.out_dir.join("records.tsv"), records)?;
    fs::write(a.out_dir.join("transforms.txt"), transforms)?;
    fs::write(a.out_dir.join("timings.tsv"), timings)?;
    fs::write(a.out_dir.join("errors.tsv"), errors)?;
    let rot: Vec<f64> = outcomes.iter().map(|o| o.record.metrics.mie_rot).collect();
    let tr: Vec<f64> = outcomes.iter().map(|o| o.record.metrics.mie_trans).collect();
    emit(&format!(
        "{} pairs: median mie_rot {:.4} deg, median mie_trans {:.5}, failures {}\n",
        outcomes.len(),
        median(&rot),
        median(&tr),
        outcomes.iter().filter(|o| o.error.is_some()).count()
    ))?;
    Ok(())
}
