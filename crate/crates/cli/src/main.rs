use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spi_core::classical::Method;
use spi_core::encoding::DEFAULT_MODULATION_DEPTH;
use spi_core::field::normalize;
use spi_core::io::{metrics_csv, read_pgm_path, write_atomic, write_pgm_path};
use spi_core::metrics::{count_resolved_slits, line_profile, Axis, DEFAULT_DIP_THRESHOLD};
use spi_core::pipeline::{assess, benchmark_csv, object_mask, run_benchmark, run_reconstruct, run_simulate, BenchmarkConfig, ReconOptions};
use spi_core::scene::{parse_length, ObjectSpec, SceneSpec, DEFAULT_WAVELENGTH};
use spi_core::{Error, IntensityImage, Measurement, Ordering, PatternSet};

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "spi", version, about = "Single-pixel imaging with angular-spectrum propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a scene, propagate it and record differential measurements.
    Simulate(SimulateArgs),
    /// Reconstruct an image from a measurement CSV and a pattern file.
    Reconstruct(ReconstructArgs),
    /// Run a grid of simulations and reconstructions and write a summary table.
    Benchmark(BenchmarkArgs),
    /// Score an existing image.
    Metrics(MetricsArgs),
    /// Generate a Walsh-Hadamard pattern file.
    Patterns(PatternsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Natural,
    Sequency,
}

impl From<OrderingArg> for Ordering {
    fn from(o: OrderingArg) -> Self {
        match o {
            OrderingArg::Natural => Ordering::Natural,
            OrderingArg::Sequency => Ordering::Sequency,
        }
    }
}

fn length(v: &str) -> Result<f64, String> {
    parse_length(v)
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Pattern file; generated from --cr when absent.
    #[arg(long)]
    patterns: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    cr: f64,
    #[arg(long, value_enum, default_value = "sequency")]
    ordering: OrderingArg,
    /// Overrides the scene's noise level.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Overrides the scene's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Measurement CSV written by `simulate`.
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Takes wavelength and modulation depth from this scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_parser = length)]
    wavelength: Option<f64>,
    #[arg(long)]
    modulation_depth: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_parser = length, default_value = "0")]
    backprop_distance: f64,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reference image for SSIM.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Object image whose open pixels form the SNR signal region.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0])]
    cr: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "hspi,untrained")]
    method: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    noise_sigma: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = spi_core::prior::DEFAULT_ITERATIONS)]
    iterations: usize,
    /// Defaults to the scene distance.
    #[arg(long, value_parser = length)]
    backprop_distance: Option<f64>,
    /// Overrides the scene's network seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "sequency")]
    ordering: OrderingArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Also count resolved slits on the column profile.
    #[arg(long)]
    slits: bool,
    /// Writes metrics.csv here instead of printing.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PatternsArgs {
    /// Pattern side length (power of two).
    #[arg(long)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    cr: f64,
    #[arg(long, value_enum, default_value = "sequency")]
    ordering: OrderingArg,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Range(_) => EXIT_USAGE,
        Error::Format { .. }
        | Error::Io(_)
        | Error::Dimension(_)
        | Error::Consistency(_)
        | Error::Construction(_)
        | Error::InvalidField(_)
        | Error::InsufficientData(_) => EXIT_INPUT,
        Error::Numerical { .. }
        | Error::Aborted { .. }
        | Error::Singularity(_)
        | Error::StepSize(_)
        | Error::Degenerate(_) => EXIT_NUMERICAL,
    }
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("SPI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("SPI_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))
}

/// Parses a scene file; relative bitmap paths are taken from the scene's directory.
fn load_scene(path: &Path) -> Result<SceneSpec, Error> {
    let mut spec = SceneSpec::parse(&fs::read_to_string(path)?)?;
    if let ObjectSpec::Bitmap(p) = &spec.object {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            spec.object = ObjectSpec::Bitmap(base.join(p));
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn load_patterns(path: &Path, depth: f64) -> Result<PatternSet, Error> {
    PatternSet::read_from(fs::File::open(path)?, depth)
}

fn pattern_bytes(set: &PatternSet) -> Result<Vec<u8>, Error> {
    let mut buf = Vec::new();
    set.write_to(&mut buf)?;
    Ok(buf)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Outcome {
    let mut scene = load_scene(&args.scene)?;
    if let Some(s) = args.noise_sigma {
        scene.noise_sigma = s;
    }
    if let Some(s) = args.seed {
        scene.noise_seed = s;
    }
    scene.validate()?;
    let set = match &args.patterns {
        Some(p) => load_patterns(p, scene.modulation_depth)?,
        None => {
            let count = PatternSet::count_for_ratio(scene.grid, args.cr)?;
            PatternSet::walsh_hadamard(scene.grid, count, args.ordering.into())?
        }
    };
    let sim = run_simulate(&scene, &set)?;
    create_dir(&args.out_dir)?;
    let out = &args.out_dir;
    write_pgm_path(&out.join("object.pgm"), &sim.object)?;
    let diffracted = normalize(&sim.diffracted)?;
    write_pgm_path(&out.join("diffracted.pgm"), &diffracted)?;
    let mut csv = Vec::new();
    sim.measurement.write_csv(&mut csv)?;
    write_atomic(&out.join("measurement.csv"), &csv)?;
    write_atomic(&out.join("patterns.spip"), &pattern_bytes(&set)?)?;
    write_atomic(&out.join("scene.cfg"), scene.to_config().as_bytes())?;
    if sim.report.gain_capped {
        eprintln!("note: evanescent gain hit the clamp cap");
    }
    println!(
        "simulated {}x{} scene, {} readings -> {}",
        scene.grid,
        scene.grid,
        sim.measurement.len(),
        out.display()
    );
    Ok(())
}

/// Max-normalized copy for the `[0, 1]` PGM range; an all-zero image stays zero.
fn for_display(image: &IntensityImage) -> Result<IntensityImage, Error> {
    if image.max() > 0.0 {
        normalize(image)
    } else {
        Ok(image.clone())
    }
}

fn read_measurement(path: &Path) -> Result<Measurement, Error> {
    Measurement::read_csv(std::io::BufReader::new(fs::File::open(path)?))
}

fn reconstruct(args: ReconstructArgs) -> Outcome {
    let scene = args.scene.as_deref().map(load_scene).transpose()?;
    let depth = args
        .modulation_depth
        .or(scene.as_ref().map(|s| s.modulation_depth))
        .unwrap_or(DEFAULT_MODULATION_DEPTH);
    let wavelength = args.wavelength.or(scene.as_ref().map(|s| s.wavelength)).unwrap_or(DEFAULT_WAVELENGTH);
    let meas = read_measurement(&args.measurement)?;
    let set = load_patterns(&args.patterns, depth)?;
    let defaults = ReconOptions::new(args.method);
    let opts = ReconOptions {
        iterations: args.iterations.unwrap_or(defaults.iterations),
        backprop_distance: args.backprop_distance,
        wavelength,
        tv_weight: args.tv_weight,
        seed: args.seed,
        ..defaults
    };
    let (result, net) = run_reconstruct(&meas, &set, &opts)?;

    let n = result.image.width();
    let reference = args.reference.as_deref().map(|p| read_pgm_path(p, meas.pitch)).transpose()?;
    let mask = match args.mask.as_deref() {
        Some(p) => Some(object_mask(&read_pgm_path(p, meas.pitch)?, n)?),
        None => None,
    };
    let quality = assess(&result.image, reference.as_ref(), mask.as_ref())?;

    create_dir(&args.out_dir)?;
    let out = &args.out_dir;
    write_pgm_path(&out.join("reconstruction.pgm"), &for_display(&result.image)?)?;
    if let Some(net) = &net {
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf)?;
        write_atomic(&out.join("checkpoint.bin"), &buf)?;
    }
    let meta = [
        ("method", result.method.name().to_string()),
        ("iterations", result.iterations_used.to_string()),
        ("backprop_distance", format!("{:e}", opts.backprop_distance)),
        ("seed", opts.seed.to_string()),
    ];
    let mut rows = quality_rows(&result.image, reference.is_some(), quality);
    for (i, loss) in result.residual_history.iter().enumerate() {
        rows.push((format!("loss_{i}"), *loss));
    }
    write_atomic(&out.join("metrics.csv"), metrics_csv(&meta, &rows).as_bytes())?;
    println!("{} reconstruction -> {}", result.method.name(), out.display());
    Ok(())
}

fn quality_rows(image: &IntensityImage, has_reference: bool, q: spi_core::pipeline::Quality) -> Vec<(String, f64)> {
    let mut rows = Vec::new();
    match (has_reference, q.ssim) {
        (true, Some(s)) => rows.push(("ssim".to_string(), s)),
        // all-zero reconstruction: SSIM undefined
        (true, None) => rows.push(("ssim_degenerate".to_string(), 1.0)),
        _ => {}
    }
    if let Some(snr) = q.snr {
        rows.push(("snr".to_string(), snr.value));
        rows.push(("snr_infinite".to_string(), f64::from(u8::from(snr.infinite))));
    }
    if let Ok(profile) = line_profile(image, Axis::Cols) {
        rows.push(("resolved_slits".to_string(), count_resolved_slits(&profile, DEFAULT_DIP_THRESHOLD) as f64));
    }
    rows
}

fn benchmark(args: BenchmarkArgs) -> Outcome {
    let mut scene = load_scene(&args.scene)?;
    if let Some(s) = args.seed {
        scene.init_seed = s;
    }
    let mut cfg = BenchmarkConfig::new(scene);
    cfg.compression_ratios = args.cr;
    cfg.methods = args.method;
    cfg.noise_levels = args.noise_sigma;
    cfg.repeats = args.repeats;
    cfg.iterations = args.iterations;
    cfg.backprop_distance = args.backprop_distance;
    cfg.ordering = args.ordering.into();
    let rows = run_benchmark(&cfg)?;
    create_dir(&args.out_dir)?;
    let path = args.out_dir.join("benchmark.csv");
    write_atomic(&path, benchmark_csv(&cfg, &rows).as_bytes())?;
    println!("{} benchmark cells -> {}", rows.len(), path.display());
    Ok(())
}

fn metrics(args: MetricsArgs) -> Outcome {
    let image = read_pgm_path(&args.image, 1.0)?;
    let n = image.width();
    let reference = args.reference.as_deref().map(|p| read_pgm_path(p, image.pitch())).transpose()?;
    let mask = match args.mask.as_deref() {
        Some(p) => Some(object_mask(&read_pgm_path(p, image.pitch())?, n)?),
        None => None,
    };
    let q = assess(&image, reference.as_ref(), mask.as_ref())?;
    let mut rows = quality_rows(&image, reference.is_some(), q);
    if !args.slits {
        rows.retain(|(k, _)| k != "resolved_slits");
    }
    let table = metrics_csv(&[("image", args.image.display().to_string())], &rows);
    match &args.out_dir {
        Some(dir) => {
            create_dir(dir)?;
            write_atomic(&dir.join("metrics.csv"), table.as_bytes())?;
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn patterns(args: PatternsArgs) -> Outcome {
    let count = PatternSet::count_for_ratio(args.grid, args.cr)?;
    let set = PatternSet::walsh_hadamard(args.grid, count, args.ordering.into())?;
    create_dir(&args.out_dir)?;
    let path = args.out_dir.join("patterns.spip");
    write_atomic(&path, &pattern_bytes(&set)?)?;
    println!("{} patterns ({}) -> {}", set.count(), set.id(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Metrics(a) => metrics(a),
        Command::Patterns(a) => patterns(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
