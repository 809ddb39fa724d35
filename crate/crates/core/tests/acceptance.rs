//! End-to-end acceptance checks. Each test prints one `acceptance N: PASS|FAIL`
//! line; runtime limits count towards the verdict. Tests hold a shared lock so
//! the timings are not distorted by each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spi_core::classical::{dgi_reconstruct, hspi_reconstruct, Method};
use spi_core::encoding::{drude_permittivity, DrudeParams};
use spi_core::field::{field_from_real_amplitude, intensity};
use spi_core::io::write_pgm;
use spi_core::measurement::measure;
use spi_core::metrics::{count_resolved_slits, dip_contrast, line_profile, Axis, DEFAULT_DIP_THRESHOLD};
use spi_core::pipeline::{
    assess, benchmark_csv, run_benchmark, run_cell, run_reconstruct, run_simulate, BenchmarkConfig,
    ReconOptions,
};
use spi_core::prior::{
    backprop_refocus_sweep, fit_untrained, generate_with_mode, generator_input, loss_and_gradient,
    BnMode, GeneratorNet, UntrainedOptions, DEFAULT_ITERATIONS, DEFAULT_TV_WEIGHT,
};
use spi_core::propagation::{propagate, transfer_gradient};
use spi_core::scene::{slit_columns, SceneSpec, DEFAULT_FOV, DEFAULT_WAVELENGTH};
use spi_core::{ComplexField, IntensityImage, Ordering, PatternSet, PropagationSpec};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let in_time = elapsed <= limit;
    let ok = pass && in_time;
    // straight to the stream: libtest would swallow println! output of passing tests
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {id}: {} ({detail}; {:.1} s of {:.0} s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    assert!(pass, "criterion {id} not met: {detail}");
    assert!(in_time, "criterion {id} over time: {elapsed:?} > {limit:?}");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn max_rel_field(a: &ComplexField, b: &ComplexField) -> f64 {
    let scale = a.values().iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).norm()).fold(0.0f64, f64::max) / scale
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_01_exact_inversion() {
    let _g = serial();
    let t = Instant::now();
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<f64> = (0..n * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let object = IntensityImage::new(n, n, DEFAULT_FOV / n as f64, values.clone()).unwrap();
    let set = PatternSet::walsh_hadamard(n, n * n, Ordering::Sequency).unwrap().with_modulation_depth(1.0).unwrap();
    let meas = measure(&object, &set, 0.0, 0).unwrap();
    let r = hspi_reconstruct(&meas, &set).unwrap();
    let err = r.raw.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    verdict("1", err < 1e-9, t.elapsed(), secs(1), format!("max abs error {err:.2e}"));
}

/// Sum of plane waves whose grid frequencies lie well inside the propagating
/// disc, evaluated pixel by pixel.
fn band_limited_field(n: usize, pitch: f64, wavelength: f64, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kmax = 0.8 * n as f64 * pitch / wavelength;
    let mut waves = Vec::new();
    while waves.len() < 40 {
        let kx = rng.random_range(-(kmax as i64)..=kmax as i64);
        let ky = rng.random_range(-(kmax as i64)..=kmax as i64);
        if ((kx * kx + ky * ky) as f64).sqrt() <= kmax {
            let a = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            waves.push((kx as f64, ky as f64, a));
        }
    }
    let mut values = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let mut v = Complex64::new(0.0, 0.0);
            for &(kx, ky, a) in &waves {
                let phase = 2.0 * std::f64::consts::PI * (kx * x as f64 + ky * y as f64) / n as f64;
                v += a * Complex64::from_polar(1.0, phase);
            }
            values.push(v);
        }
    }
    ComplexField::new(n, n, pitch, values).unwrap()
}

#[test]
fn criterion_02_asp_operator_suite() {
    let _g = serial();
    let t = Instant::now();
    let n = 64;
    let pitch = DEFAULT_FOV / n as f64;
    let spec = |d: f64| PropagationSpec::new(DEFAULT_WAVELENGTH, d);
    let (mut energy, mut semigroup, mut adjoint, mut identity) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..4 {
        let u = band_limited_field(n, pitch, DEFAULT_WAVELENGTH, seed);
        let v = band_limited_field(n, pitch, DEFAULT_WAVELENGTH, seed + 100);
        for &(d1, d2) in &[(0.5e-3, 1.5e-3), (2e-3, 4e-3), (1e-3, 0.25e-3)] {
            let p1 = propagate(&u, spec(d1)).unwrap();
            energy = energy.max(rel(p1.power(), u.power()));
            let p12 = propagate(&p1, spec(d2)).unwrap();
            let direct = propagate(&u, spec(d1 + d2)).unwrap();
            semigroup = semigroup.max(max_rel_field(&direct, &p12));
            let lhs = propagate(&u, spec(d1)).unwrap().inner(&v).unwrap();
            let rhs = u.inner(&transfer_gradient(&v, spec(d1)).unwrap()).unwrap();
            adjoint = adjoint.max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()));
        }
        let same = propagate(&u, spec(0.0)).unwrap();
        identity = identity.max(u.values().iter().zip(same.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
    }
    let pass = energy < 1e-10 && semigroup < 1e-10 && adjoint < 1e-10 && identity < 1e-12;
    verdict(
        "2",
        pass,
        t.elapsed(),
        secs(5),
        format!("energy {energy:.1e}, semigroup {semigroup:.1e}, adjoint {adjoint:.1e}, identity {identity:.1e}"),
    );
}

#[test]
fn criterion_03_gradient_check() {
    let _g = serial();
    let t = Instant::now();
    let n = 16;
    let scene = SceneSpec::star(n, 0.5e-3);
    let set = PatternSet::walsh_hadamard(n, n * n / 2, Ordering::Sequency).unwrap();
    let sim = run_simulate(&scene, &set).unwrap();
    let set = set.with_modulation_depth(scene.modulation_depth).unwrap();
    let prop = PropagationSpec::new(scene.wavelength, scene.distance);
    let input = generator_input(&sim.measurement, &set).unwrap();
    let net = GeneratorNet::with_default_plan(7);
    let loss = |n: &GeneratorNet| loss_and_gradient(n, &input, &sim.measurement, &set, prop, DEFAULT_TV_WEIGHT).unwrap();
    let (_, grad) = loss(&net);
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let signs = net.activation_signs(input.values(), n, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    while checked < 50 {
        let k = rng.random_range(0..net.num_params());
        let mut up = net.clone();
        up.params_mut()[k] += h;
        let mut down = net.clone();
        down.params_mut()[k] -= h;
        // LeakyReLU kink inside the stencil: draw another parameter
        if up.activation_signs(input.values(), n, n).unwrap() != signs || down.activation_signs(input.values(), n, n).unwrap() != signs {
            skipped += 1;
            continue;
        }
        let fd = (loss(&up).0 - loss(&down).0) / (2.0 * h);
        let denom = grad[k].abs().max(fd.abs()).max(1e-3 * scale);
        worst = worst.max((grad[k] - fd).abs() / denom);
        checked += 1;
    }
    verdict(
        "3",
        worst < 1e-4,
        t.elapsed(),
        secs(30),
        format!("max relative error {worst:.2e} over {checked} parameters, {skipped} redrawn at kinks"),
    );
}

#[test]
fn criterion_04_dgi_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let n = 16;
    let npix = n * n;
    let pitch = DEFAULT_FOV / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let object = IntensityImage::new(n, n, pitch, (0..npix).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let field = field_from_real_amplitude(&object).unwrap();
    let diffracted = intensity(&propagate(&field, PropagationSpec::new(DEFAULT_WAVELENGTH, 0.5e-3)).unwrap());
    let set = PatternSet::walsh_hadamard(n, npix, Ordering::Sequency).unwrap();
    let meas = measure(&diffracted, &set, 0.0, 0).unwrap();
    let dgi = dgi_reconstruct(&meas, &set).unwrap();

    // direct summation over patterns and pixels
    let sign = |row: usize, col: usize| if (row & col).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
    let m = set.count() as f64;
    let rows = set.selection();
    let s: Vec<f64> = rows.iter().map(|&r| (0..npix).map(|p| sign(r, p)).sum()).collect();
    let mean_i = meas.readings.iter().sum::<f64>() / m;
    let mean_s = s.iter().sum::<f64>() / m;
    let i_prime: Vec<f64> = meas
        .readings
        .iter()
        .zip(&s)
        .map(|(&i, &si)| if si.abs() < 1e-9 * npix as f64 { i } else { i - mean_i / mean_s * si })
        .collect();
    let mean_ip = i_prime.iter().sum::<f64>() / m;
    let oracle: Vec<f64> = (0..npix)
        .map(|p| {
            let mean_p = rows.iter().map(|&r| sign(r, p)).sum::<f64>() / m;
            rows.iter().zip(&i_prime).map(|(&r, &ip)| (sign(r, p) - mean_p) * (ip - mean_ip)).sum::<f64>() / m
        })
        .collect();
    let scale = oracle.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let agreement = dgi.raw.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max) / scale;
    let r = pearson(&oracle, diffracted.values());
    let r_impl = pearson(&dgi.raw, diffracted.values());
    verdict(
        "4",
        r >= 0.999 && r_impl >= 0.999 && agreement < 1e-9,
        t.elapsed(),
        secs(5),
        format!("pearson oracle {r:.6}, implementation {r_impl:.6}, oracle mismatch {agreement:.1e}"),
    );
}

#[test]
fn criterion_05_subdiffraction_refocus() {
    let _g = serial();
    let t = Instant::now();
    let n = 128;
    let d = 0.5e-3;
    let scene = SceneSpec::three_slit_lambda7(n, d);
    let set = PatternSet::walsh_hadamard(n, PatternSet::count_for_ratio(n, 0.0625).unwrap(), Ordering::Sequency).unwrap();
    let sim = run_simulate(&scene, &set).unwrap();
    let set = set.with_modulation_depth(scene.modulation_depth).unwrap();
    let slits = slit_columns(&scene).unwrap();
    let base = PropagationSpec::new(scene.wavelength, 0.0);
    let sweep = [0.1e-3, 0.3e-3, 0.5e-3, 1.0e-3];
    let mut distances = vec![0.0];
    distances.extend_from_slice(&sweep);
    let results = backprop_refocus_sweep(&sim.measurement, &set, base, &distances, DEFAULT_ITERATIONS, scene.init_seed).unwrap();
    let mut counts = Vec::new();
    let mut sharpness = Vec::new();
    for r in &results {
        let profile = line_profile(&r.image, Axis::Cols).unwrap();
        counts.push(count_resolved_slits(&profile, DEFAULT_DIP_THRESHOLD));
        sharpness.push(dip_contrast(&profile, &slits));
    }
    let peak = (1..distances.len()).max_by(|&a, &b| sharpness[a].total_cmp(&sharpness[b])).unwrap();
    let focused = distances.iter().position(|&x| x == d).unwrap();
    let pass = counts[focused] == 3 && counts[0] < 3 && peak == focused;
    let table: Vec<String> = distances
        .iter()
        .zip(counts.iter().zip(&sharpness))
        .map(|(x, (c, s))| format!("{:.1} mm: {c} slits, contrast {s:.3}", x * 1e3))
        .collect();
    verdict("5", pass, t.elapsed(), secs(600), table.join("; "));
}

const STAR_RATIOS: [f64; 6] = [0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5];

#[test]
fn criterion_06_compression_trend() {
    let _g = serial();
    let t = Instant::now();
    let mut cfg = BenchmarkConfig::new(SceneSpec::star(64, 0.0));
    cfg.compression_ratios = STAR_RATIOS.to_vec();
    cfg.methods = vec![Method::Untrained];
    let rows = run_benchmark(&cfg).unwrap();
    let ssim: Vec<f64> = rows.iter().map(|r| r.ssim_mean).collect();
    let violations: Vec<f64> = ssim.windows(2).map(|w| w[0] - w[1]).filter(|&drop| drop > 0.0).collect();
    let monotone = violations.iter().all(|&drop| drop <= 0.02);
    let (hspi, _) = run_cell(&cfg, 0.03125, Method::Hspi, 0.0, 0).unwrap();
    let margin = ssim[1] - hspi;
    verdict(
        "6",
        monotone && margin >= 0.1,
        t.elapsed(),
        secs(1200),
        format!(
            "untrained ssim {:?}, hspi at 3.125% {hspi:.3}, margin {margin:.3}, worst drop {:.3}",
            ssim.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            violations.iter().copied().fold(0.0, f64::max)
        ),
    );
}

#[test]
fn criterion_07_snr_ordering() {
    let _g = serial();
    let t = Instant::now();
    let cfg = BenchmarkConfig::new(SceneSpec::star(64, 0.0));
    let cr = 0.03125;
    let hspi_snr = |sigma: f64| run_cell(&cfg, cr, Method::Hspi, sigma, 0).unwrap().1;
    // noise scales a fixed set of draws, so the HSPI SNR falls continuously with sigma
    let (mut lo, mut hi) = (0.0, 1.0);
    while hspi_snr(hi) > 5.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut sigma = hi;
    for _ in 0..60 {
        sigma = 0.5 * (lo + hi);
        let s = hspi_snr(sigma);
        if (s - 5.0).abs() < 1e-3 {
            break;
        }
        if s > 5.0 {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    let hspi = hspi_snr(sigma);
    let (_, untrained) = run_cell(&cfg, cr, Method::Untrained, sigma, 0).unwrap();
    let ratio = untrained / hspi;
    verdict(
        "7",
        (hspi - 5.0).abs() < 0.05 && ratio >= 1.5,
        t.elapsed(),
        secs(600),
        format!("sigma {sigma:.3}, hspi snr {hspi:.3}, untrained snr {untrained:.3}, ratio {ratio:.2}"),
    );
}

#[test]
fn criterion_08_far_field_refocus() {
    let _g = serial();
    let t = Instant::now();
    let n = 64;
    let mut all = true;
    let mut notes = Vec::new();
    for d in [2e-3, 4e-3, 6e-3] {
        let scene = SceneSpec::star(n, d);
        let set = PatternSet::walsh_hadamard(n, n * n / 2, Ordering::Sequency).unwrap();
        let sim = run_simulate(&scene, &set).unwrap();
        let set = set.with_modulation_depth(scene.modulation_depth).unwrap();
        let ssim_at = |bd: f64| {
            let opts = ReconOptions {
                backprop_distance: bd,
                wavelength: scene.wavelength,
                seed: scene.init_seed,
                ..ReconOptions::new(Method::Untrained)
            };
            let (r, _) = run_reconstruct(&sim.measurement, &set, &opts).unwrap();
            assess(&r.image, Some(&sim.object), None).unwrap().ssim.unwrap_or(0.0)
        };
        let (with, without) = (ssim_at(d), ssim_at(0.0));
        all &= with > without;
        notes.push(format!("{:.0} mm: {with:.3} vs {without:.3}", d * 1e3));
    }
    verdict("8", all, t.elapsed(), secs(900), format!("ssim with/without propagation {}", notes.join(", ")));
}

/// Every artefact a pipeline run writes, as bytes.
fn pipeline_artifacts() -> Vec<Vec<u8>> {
    let n = 16;
    let mut scene = SceneSpec::star(n, 1e-3);
    scene.noise_sigma = 0.5;
    scene.noise_seed = 9;
    scene.init_seed = 2;
    let set = PatternSet::walsh_hadamard(n, 64, Ordering::Sequency).unwrap();
    let sim = run_simulate(&scene, &set).unwrap();
    let set = set.with_modulation_depth(scene.modulation_depth).unwrap();
    let mut out = Vec::new();

    let mut pgm = Vec::new();
    write_pgm(&mut pgm, &spi_core::field::normalize(&sim.diffracted).unwrap()).unwrap();
    out.push(pgm);
    let mut csv = Vec::new();
    sim.measurement.write_csv(&mut csv).unwrap();
    out.push(csv);

    let (r, net) = fit_untrained(
        &sim.measurement,
        &set,
        PropagationSpec::new(scene.wavelength, scene.distance),
        UntrainedOptions { iterations: 25, seed: scene.init_seed, ..Default::default() },
    )
    .unwrap();
    let mut pgm = Vec::new();
    write_pgm(&mut pgm, &r.image).unwrap();
    out.push(pgm);
    let mut ckpt = Vec::new();
    net.write_checkpoint(&mut ckpt).unwrap();
    out.push(ckpt);

    let mut cfg = BenchmarkConfig::new(scene);
    cfg.compression_ratios = vec![0.25, 1.0];
    cfg.methods = vec![Method::Hspi, Method::Dgi, Method::CsTv, Method::Untrained];
    cfg.iterations = 10;
    cfg.repeats = 2;
    let rows = run_benchmark(&cfg).unwrap();
    out.push(benchmark_csv(&cfg, &rows).into_bytes());
    out
}

#[test]
fn criterion_09_determinism_and_formats() {
    let _g = serial();
    let t = Instant::now();
    let first = pipeline_artifacts();
    let second = pipeline_artifacts();
    let identical = first == second;

    let mut masks_ok = true;
    for ordering in [Ordering::Natural, Ordering::Sequency] {
        let set = PatternSet::walsh_hadamard(16, 200, ordering).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = PatternSet::read_from(&buf[..], set.modulation_depth()).unwrap();
        masks_ok &= back.count() == set.count()
            && back.ordering() == set.ordering()
            && (0..set.count()).all(|i| back.mask(i).unwrap() == set.mask(i).unwrap());
    }
    verdict(
        "9",
        identical && masks_ok,
        t.elapsed(),
        secs(120),
        format!("{} artefacts identical: {identical}, pattern round trip exact: {masks_ok}", first.len()),
    );
}

#[test]
fn criterion_10_drude_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let p = DrudeParams {
            eps_inf: rng.random_range(1.0..15.0),
            omega_p: 10f64.powf(rng.random_range(12.0..15.0)),
            tau_d: 10f64.powf(rng.random_range(-15.0..-12.0)),
            omega: 2.0 * std::f64::consts::PI * 10f64.powf(rng.random_range(11.0..13.0)),
        };
        // real arithmetic: wp^2 / (w^2 + i w/tau) = wp^2 (a - i b) / (a^2 + b^2)
        let a = p.omega * p.omega;
        let b = p.omega / p.tau_d;
        let k = p.omega_p * p.omega_p / (a * a + b * b);
        let expected = Complex64::new(p.eps_inf - k * a, k * b);
        let got = drude_permittivity(p).unwrap();
        worst = worst.max((got - expected).norm() / expected.norm());
    }
    let eps_inf = 11.7;
    let dark = drude_permittivity(DrudeParams { eps_inf, omega_p: 0.0, tau_d: 1e-13, omega: 6.28e12 }).unwrap();
    let exact = dark == Complex64::new(eps_inf, 0.0);
    verdict(
        "10",
        worst < 1e-12 && exact,
        t.elapsed(),
        secs(5),
        format!("max relative error {worst:.1e}, omega_p = 0 exact: {exact}"),
    );
}

/// Frozen running statistics should reproduce the batch-statistics output
/// once fitting has converged.
#[test]
fn inference_mode_matches_training_mode() {
    let _g = serial();
    let t = Instant::now();
    let n = 32;
    let pitch = DEFAULT_FOV / n as f64;
    let bars: Vec<f64> = (0..n * n)
        .map(|i| {
            let x = i % n;
            if (n / 4..n / 4 + n / 8).contains(&x) || (n / 2..n / 2 + n / 8).contains(&x) { 1.0 } else { 0.0 }
        })
        .collect();
    let object = IntensityImage::new(n, n, pitch, bars).unwrap();
    let set = PatternSet::walsh_hadamard(n, n * n, Ordering::Sequency).unwrap();
    let meas = measure(&object, &set, 0.0, 1).unwrap();
    let prop = PropagationSpec::new(DEFAULT_WAVELENGTH, 0.0);
    let (r, net) = fit_untrained(&meas, &set, prop, UntrainedOptions { seed: 3, ..Default::default() }).unwrap();
    let running = generate_with_mode(&net, &generator_input(&meas, &set).unwrap(), BnMode::Running).unwrap();
    let diff = r.image.values().iter().zip(running.values()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    verdict(
        "extra (BN inference mode)",
        diff < 1e-3,
        t.elapsed(),
        secs(60),
        format!("max |batch - running| {diff:.2e} after {DEFAULT_ITERATIONS} iterations"),
    );
}
