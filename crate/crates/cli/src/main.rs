use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use magn::checkpoint::Checkpoint;
use magn::degradation::{DegradeKind, DegradeSpec};
use magn::gradcheck::{gradcheck, GradCheckConfig};
use magn::imageio::{list_pngs, load_png, save_png, LoadedImage};
use magn::metrics::{psnr, ssim, QualityReport};
use magn::model::{self, parameter_count, ModelConfig, Precision};
use magn::trainer::{self, parse_config, TrainConfig, Trainer};
use magn::{MagnError, Real};

#[derive(Parser)]
#[command(name = "magn", version, about = "Attention-guided graph network for image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add Gaussian noise or Bayer mosaicking to every PNG in a directory.
    Degrade(DegradeArgs),
    /// Train a network on a directory of clean PNGs.
    Train(TrainArgs),
    /// Restore every PNG in a directory with a trained checkpoint.
    Restore(RestoreArgs),
    /// Compare restored images against clean references.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Show a configuration or checkpoint summary.
    Info(InfoArgs),
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "gaussian")]
    kind: DegradeKind,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// key=value file with model and training settings (desk defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its stored settings are used.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Override the number of steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Largest tile side; the pixel graph grows with its square.
    #[arg(long, default_value_t = 64)]
    tile: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// key=value model settings applied on top of the micro configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 15)]
    size: usize,
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// A failed command and the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<MagnError> for Failure {
    fn from(e: MagnError) -> Self {
        let code = match e {
            MagnError::Config(_) => 1,
            MagnError::NonFinite { .. } | MagnError::NonFiniteGradient { .. } => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CmdResult = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::data(format!("{what} directory {} does not exist", path.display())))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn degrade(args: DegradeArgs) -> CmdResult {
    let spec = DegradeSpec {
        kind: args.kind,
        sigma: args.sigma,
        seed: args.seed,
    };
    spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
    require_dir(&args.input, "input")?;
    let files = list_pngs(&args.input)?;
    if files.is_empty() {
        return Err(Failure::data(format!("no PNG images in {}", args.input.display())));
    }
    std::fs::create_dir_all(&args.out).map_err(MagnError::from)?;
    // seeds follow the sorted file order, so reruns reproduce every output
    let results: Vec<(String, Result<String, MagnError>)> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let name = file_name(path);
            let run = || {
                let img = load_png::<f32>(path)?;
                let out = spec.for_item(i as u64).apply(&img.pixels)?;
                save_png(&args.out.join(&name), &out, img.depth)?;
                let s = img.pixels.shape();
                Ok(format!("{}x{}x{}", s[0], s[1], s[2]))
            };
            let r = run();
            (name, r)
        })
        .collect();
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(dims) => println!("{name}: {} {dims}", spec.kind),
            Err(e) => {
                failed += 1;
                println!("{name}: FAILED {e}");
            }
        }
    }
    if failed == results.len() {
        return Err(Failure::data(format!("all {failed} images failed")));
    }
    Ok(())
}

fn run_training<T: Real>(mut t: Trainer<T>, data: &Path, out: &Path) -> CmdResult {
    info!(
        "model: {} parameters, {} precision; batch {}, lr {}",
        t.params.count(),
        t.model.precision,
        t.train.batch_size,
        t.train.lr
    );
    let summary = trainer::train(&mut t, data, out)?;
    if let Some(last) = summary.losses.last() {
        println!("final step {} loss {last:.6e}", summary.final_step);
    }
    for p in &summary.checkpoints {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn train(args: TrainArgs) -> CmdResult {
    require_dir(&args.data, "data")?;
    let (model, mut train, resumed) = match (&args.resume, &args.config) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            let mut kv = ck.train.clone();
            let train = TrainConfig::from_kv(&mut kv)?;
            (ck.model.clone(), train, Some(ck))
        }
        (None, Some(path)) => {
            let (m, t) = parse_config(&read_text(path)?)?;
            (m, t, None)
        }
        (None, None) => (ModelConfig::desk(), TrainConfig::desk(), None),
    };
    if let Some(s) = args.steps {
        train.steps = Some(s);
    }
    macro_rules! go {
        ($t:ty) => {{
            let mut t = match &resumed {
                Some(ck) => Trainer::<$t>::from_checkpoint(ck)?,
                None => Trainer::<$t>::new(model.clone(), train.clone())?,
            };
            t.train = train.clone();
            t.train.validate(&t.model)?;
            run_training(t, &args.data, &args.out)
        }};
    }
    match model.precision {
        Precision::F32 => go!(f32),
        Precision::F64 => go!(f64),
    }
}

fn restore_dir<T: Real>(ck: &Checkpoint, args: &RestoreArgs) -> CmdResult {
    let params = ck.params.cast::<T>();
    let files = list_pngs(&args.input)?;
    if files.is_empty() {
        return Err(Failure::data(format!("no PNG images in {}", args.input.display())));
    }
    std::fs::create_dir_all(&args.out).map_err(MagnError::from)?;
    for path in files {
        let name = file_name(&path);
        let LoadedImage { pixels, depth } = load_png::<T>(&path)?;
        let c = pixels.shape()[2];
        if c != ck.model.in_channels {
            return Err(Failure::data(format!(
                "{name}: {c} channels, checkpoint expects {}",
                ck.model.in_channels
            )));
        }
        let start = Instant::now();
        let out = model::restore_image(&pixels, &params, &ck.model, (args.tile, args.tile))
            .map_err(|e| Failure { message: format!("{name}: {e}"), ..Failure::from(e) })?;
        save_png(&args.out.join(&name), &out, depth)?;
        println!("{name}: {:.3}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn restore(args: RestoreArgs) -> CmdResult {
    if !args.ckpt.is_file() {
        return Err(Failure::data(format!("checkpoint {} not found", args.ckpt.display())));
    }
    require_dir(&args.input, "input")?;
    let ck = Checkpoint::load(&args.ckpt)?;
    if args.tile < ck.model.window {
        return Err(Failure::usage(format!(
            "tile {} is smaller than the patch window {}",
            args.tile, ck.model.window
        )));
    }
    match ck.model.precision {
        Precision::F32 => restore_dir::<f32>(&ck, &args),
        Precision::F64 => restore_dir::<f64>(&ck, &args),
    }
}

fn eval(args: EvalArgs) -> CmdResult {
    require_dir(&args.clean, "clean")?;
    require_dir(&args.test, "test")?;
    let by_name = |dir: &Path| -> Result<BTreeMap<String, PathBuf>, Failure> {
        Ok(list_pngs(dir)?.into_iter().map(|p| (file_name(&p), p)).collect())
    };
    let clean = by_name(&args.clean)?;
    let test = by_name(&args.test)?;
    let mut report = QualityReport::default();
    for (name, cpath) in &clean {
        let Some(tpath) = test.get(name) else {
            println!("skipped {name}: no counterpart in {}", args.test.display());
            continue;
        };
        let pair = (|| {
            let a = load_png::<f64>(cpath)?.pixels;
            let b = load_png::<f64>(tpath)?.pixels;
            Ok::<_, MagnError>((psnr(&a, &b, 1.0)?, ssim(&a, &b, 1.0)?))
        })();
        match pair {
            Ok((p, s)) => report.push(name.clone(), p, s),
            Err(e) => println!("skipped {name}: {e}"),
        }
    }
    for name in test.keys().filter(|n| !clean.contains_key(*n)) {
        println!("skipped {name}: no counterpart in {}", args.clean.display());
    }
    if report.entries.is_empty() {
        return Err(Failure::data("no image pairs to compare"));
    }
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        magn::imageio::write_atomic(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> CmdResult {
    let model = match &args.config {
        Some(path) => {
            let text = read_text(path)?;
            let mut kv = ModelConfig::micro().to_kv();
            for (k, v) in magn::kv::KvMap::parse(&text)?.iter() {
                kv.insert(k, v);
            }
            let m = ModelConfig::from_kv(&mut kv)?;
            kv.finish()?;
            m
        }
        None => ModelConfig::micro(),
    };
    let cfg = GradCheckConfig {
        model,
        size: args.size,
        seed: args.seed,
        corrupt_gradient: args.corrupt,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let report = gradcheck(&cfg)?;
    print!("{}", report.table());
    println!(
        "max relative error {:.3e} (tolerance {:.0e}) in {:.1}s",
        report.max_error(),
        report.tolerance,
        start.elapsed().as_secs_f64()
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::numerical("gradient check failed"))
    }
}

fn info_cmd(args: InfoArgs) -> CmdResult {
    let (model, train, step) = match (&args.ckpt, &args.config) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            (ck.model, Some(ck.train.to_text()), Some(ck.step))
        }
        (None, Some(path)) => {
            let (m, t) = parse_config(&read_text(path)?)?;
            (m, Some(t.to_kv().to_text()), None)
        }
        (None, None) => (ModelConfig::default(), None, None),
    };
    println!("parameters: {}", parameter_count(&model));
    if let Some(s) = step {
        println!("step: {s}");
    }
    println!("[model]");
    print!("{}", model.to_kv().to_text());
    if let Some(t) = train {
        println!("[train]");
        print!("{t}");
    }
    Ok(())
}

fn init_threads() -> CmdResult {
    if let Ok(v) = std::env::var("MAGN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("MAGN_THREADS must be a positive integer, got `{v}`")))?;
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train(a),
        Command::Restore(a) => restore(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Info(a) => info_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
