//! End-to-end runs: scene -> measurement, measurement -> image, and
//! benchmark grids over compression ratio, method and noise level.

use rayon::prelude::*;

use crate::classical::{cstv_reconstruct, default_tv_weight, dgi_reconstruct, hspi_reconstruct, Method, ReconResult, DEFAULT_CSTV_ITERS};
use crate::encoding::{BinaryGrid, Ordering, PatternSet};
use crate::error::{Error, Result};
use crate::field::{field_from_real_amplitude, intensity, normalize, IntensityImage};
use crate::measurement::{measure, Measurement};
use crate::metrics::{snr, ssim, Snr, SsimParams};
use crate::prior::{fit_untrained, GeneratorNet, UntrainedOptions, DEFAULT_ITERATIONS, DEFAULT_TV_WEIGHT};
use crate::propagation::{propagate_with_report, PropagationReport, PropagationSpec};
use crate::scene::{build_scene, SceneSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub object: IntensityImage,
    pub diffracted: IntensityImage,
    pub measurement: Measurement,
    pub report: PropagationReport,
}

/// Object -> zero-phase field -> propagate by the scene distance ->
/// intensity -> noisy differential measurement. The pattern set takes the
/// scene's modulation depth.
pub fn run_simulate(spec: &SceneSpec, set: &PatternSet) -> Result<Simulation> {
    let set = set.clone().with_modulation_depth(spec.modulation_depth)?;
    let object = build_scene(spec)?;
    let field = field_from_real_amplitude(&object)?;
    let (propagated, report) = propagate_with_report(&field, PropagationSpec::new(spec.wavelength, spec.distance))?;
    let diffracted = intensity(&propagated);
    let measurement = measure(&diffracted, &set, spec.noise_sigma, spec.noise_seed)?;
    Ok(Simulation {
        object,
        diffracted,
        measurement,
        report,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconOptions {
    pub method: Method,
    pub iterations: usize,
    /// Distance assumed by the untrained prior's physics model; 0 disables
    /// propagation.
    pub backprop_distance: f64,
    pub wavelength: f64,
    /// `None` picks the method's default.
    pub tv_weight: Option<f64>,
    pub seed: u64,
}

impl ReconOptions {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            iterations: match method {
                Method::CsTv => DEFAULT_CSTV_ITERS,
                _ => DEFAULT_ITERATIONS,
            },
            backprop_distance: 0.0,
            wavelength: crate::scene::DEFAULT_WAVELENGTH,
            tv_weight: None,
            seed: 0,
        }
    }
}

/// Dispatches to the chosen reconstructor. The fitted network is returned
/// for the untrained method.
pub fn run_reconstruct(meas: &Measurement, set: &PatternSet, opts: &ReconOptions) -> Result<(ReconResult, Option<GeneratorNet>)> {
    match opts.method {
        Method::Hspi => Ok((hspi_reconstruct(meas, set)?, None)),
        Method::Dgi => Ok((dgi_reconstruct(meas, set)?, None)),
        Method::CsTv => {
            let tv = opts.tv_weight.unwrap_or_else(|| default_tv_weight(meas));
            Ok((cstv_reconstruct(meas, set, tv, opts.iterations)?, None))
        }
        Method::Untrained => {
            let prop = PropagationSpec::new(opts.wavelength, opts.backprop_distance);
            let uopts = UntrainedOptions {
                iterations: opts.iterations,
                seed: opts.seed,
                tv_weight: opts.tv_weight.unwrap_or(DEFAULT_TV_WEIGHT),
            };
            let (r, net) = fit_untrained(meas, set, prop, uopts)?;
            Ok((r, Some(net)))
        }
    }
}

/// Block-averages an image down to `n x n` (identity when already `n`).
pub fn downsample(image: &IntensityImage, n: usize) -> Result<IntensityImage> {
    let (w, h) = (image.width(), image.height());
    if n == 0 || w % n != 0 || h % n != 0 || w / n != h / n {
        return Err(Error::Dimension(format!("cannot block-average {w}x{h} onto {n}x{n}")));
    }
    let f = w / n;
    if f == 1 {
        return Ok(image.clone());
    }
    let mut out = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * n + x / f] += image.values()[y * w + x];
        }
    }
    let inv = 1.0 / (f * f) as f64;
    IntensityImage::new(n, n, image.pitch() * f as f64, out.into_iter().map(|v| v * inv).collect())
}

/// `1` where the (downsampled) object is at least half open.
pub fn object_mask(object: &IntensityImage, n: usize) -> Result<BinaryGrid> {
    let d = downsample(object, n)?;
    BinaryGrid::new(n, n, d.values().iter().map(|&v| u8::from(v >= 0.5)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    /// `None` when the reconstruction is all zero (degenerate case).
    pub ssim: Option<f64>,
    pub snr: Option<Snr>,
}

/// SSIM of the max-normalized image against the max-normalized reference,
/// and region SNR against an object mask.
pub fn assess(image: &IntensityImage, reference: Option<&IntensityImage>, mask: Option<&BinaryGrid>) -> Result<Quality> {
    let ssim_value = match reference {
        Some(reference) => {
            let reference = normalize(&downsample(reference, image.width())?)?;
            match normalize(image) {
                Ok(img) => Some(ssim(&img, &reference, &SsimParams::default())?),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };
    let snr_value = match mask {
        Some(mask) => Some(snr(image, mask)?),
        None => None,
    };
    Ok(Quality {
        ssim: ssim_value,
        snr: snr_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub scene: SceneSpec,
    pub compression_ratios: Vec<f64>,
    pub methods: Vec<Method>,
    pub noise_levels: Vec<f64>,
    pub repeats: usize,
    pub iterations: usize,
    /// Defaults to the scene distance.
    pub backprop_distance: Option<f64>,
    pub ordering: Ordering,
}

impl BenchmarkConfig {
    pub fn new(scene: SceneSpec) -> Self {
        Self {
            scene,
            compression_ratios: vec![0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0],
            methods: vec![Method::Hspi, Method::Untrained],
            noise_levels: vec![0.0],
            repeats: 1,
            iterations: DEFAULT_ITERATIONS,
            backprop_distance: None,
            ordering: Ordering::Sequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub compression_ratio: f64,
    pub method: Method,
    pub noise_sigma: f64,
    pub repeats: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub snr_mean: f64,
    pub snr_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One benchmark cell. Repeat `r` shifts both the noise seed and the network
/// seed by `r`. SSIM is taken against the fully sampled HSPI image of the same
/// (noisy) scene; SNR against the object mask. A degenerate SSIM counts as 0.
pub fn run_cell(cfg: &BenchmarkConfig, cr: f64, method: Method, noise: f64, repeat: usize) -> Result<(f64, f64)> {
    let n = cfg.scene.grid;
    let mut scene = cfg.scene.clone();
    scene.noise_sigma = noise;
    scene.noise_seed = cfg.scene.noise_seed.wrapping_add(repeat as u64);
    let full = PatternSet::walsh_hadamard(n, n * n, cfg.ordering)?;
    let reference_sim = run_simulate(&scene, &full)?;
    let full_set = full.with_modulation_depth(scene.modulation_depth)?;
    let reference = hspi_reconstruct(&reference_sim.measurement, &full_set)?.image;

    let count = PatternSet::count_for_ratio(n, cr)?;
    let set = PatternSet::walsh_hadamard(n, count, cfg.ordering)?.with_modulation_depth(scene.modulation_depth)?;
    let sim = run_simulate(&scene, &set)?;
    let opts = ReconOptions {
        iterations: if method == Method::Untrained { cfg.iterations } else { ReconOptions::new(method).iterations },
        backprop_distance: cfg.backprop_distance.unwrap_or(scene.distance),
        wavelength: scene.wavelength,
        seed: scene.init_seed.wrapping_add(repeat as u64),
        ..ReconOptions::new(method)
    };
    let (result, _) = run_reconstruct(&sim.measurement, &set, &opts)?;
    let mask = object_mask(&sim.object, n)?;
    let q = assess(&result.image, Some(&reference), Some(&mask))?;
    Ok((q.ssim.unwrap_or(0.0), q.snr.map_or(0.0, |s| s.value)))
}

/// Grid of runs with per-cell mean and (population) standard deviation.
/// Cells run in parallel; the result order and values do not depend on the
/// thread count.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    if cfg.repeats == 0 {
        return Err(Error::Parameter("repeats must be >= 1".into()));
    }
    if let Some(&bad) = cfg.compression_ratios.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
        return Err(Error::Parameter(format!("compression ratio {bad} outside (0, 1]")));
    }
    cfg.scene.validate()?;
    let mut cells = Vec::new();
    for &noise in &cfg.noise_levels {
        for &method in &cfg.methods {
            for &cr in &cfg.compression_ratios {
                cells.push((cr, method, noise));
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.repeats).map(move |r| (c, r))).collect();
    let outcomes: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (cr, method, noise) = cells[c];
            run_cell(cfg, cr, method, noise, r)
        })
        .collect::<Result<_>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(cr, method, noise))| {
            let chunk = &outcomes[c * cfg.repeats..(c + 1) * cfg.repeats];
            let ssims: Vec<f64> = chunk.iter().map(|o| o.0).collect();
            let snrs: Vec<f64> = chunk.iter().map(|o| o.1).collect();
            let (ssim_mean, ssim_std) = mean_std(&ssims);
            let (snr_mean, snr_std) = mean_std(&snrs);
            BenchmarkRow {
                compression_ratio: cr,
                method,
                noise_sigma: noise,
                repeats: cfg.repeats,
                ssim_mean,
                ssim_std,
                snr_mean,
                snr_std,
            }
        })
        .collect())
}

pub fn benchmark_csv(cfg: &BenchmarkConfig, rows: &[BenchmarkRow]) -> String {
    let mut s = String::new();
    for line in cfg.scene.to_config().lines() {
        s.push_str(&format!("# {}\n", line.replace(" = ", "=")));
    }
    s.push_str(&format!("# iterations={} ordering={}\n", cfg.iterations, cfg.ordering.name()));
    s.push_str("compression_ratio,method,noise_sigma,repeats,ssim_mean,ssim_std,snr_mean,snr_std\n");
    for r in rows {
        s.push_str(&format!(
            "{:e},{},{:e},{},{:e},{:e},{:e},{:e}\n",
            r.compression_ratio,
            r.method.name(),
            r.noise_sigma,
            r.repeats,
            r.ssim_mean,
            r.ssim_std,
            r.snr_mean,
            r.snr_std
        ));
    }
    s
}
