//! Non-learning reconstructors: inverse-Hadamard SPI, differential ghost
//! imaging and TV-regularized compressed sensing.
//!
//! All three work on the pattern grid (`n x n`).

use crate::encoding::{fwht, PatternSet};
use crate::error::{Error, Result};
use crate::field::{rescale_unit, IntensityImage};
use crate::measurement::{pattern_total_intensity, Measurement, SensingOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Hspi,
    Dgi,
    CsTv,
    Untrained,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Hspi => "hspi",
            Method::Dgi => "dgi",
            Method::CsTv => "cstv",
            Method::Untrained => "untrained",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hspi" => Ok(Method::Hspi),
            "dgi" => Ok(Method::Dgi),
            "cstv" | "cs-tv" => Ok(Method::CsTv),
            "untrained" => Ok(Method::Untrained),
            other => Err(Error::Parameter(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconResult {
    /// Nonnegative image (negative estimates clamped, DGI rescaled to `[0, 1]`).
    pub image: IntensityImage,
    /// The estimate before clamping or rescaling.
    pub raw: Vec<f64>,
    pub method: Method,
    pub iterations_used: usize,
    /// Objective value per iteration (empty for direct methods).
    pub residual_history: Vec<f64>,
}

fn image_on_pattern_grid(set: &PatternSet, pitch: f64, values: Vec<f64>) -> Result<IntensityImage> {
    let n = set.order();
    IntensityImage::from_clamped(n, n, pitch, values)
}

/// Partial inverse Hadamard transform, `O(p) = (1/N) sum_i I_i P_i(p)`;
/// unmeasured coefficients are taken as zero.
pub fn hspi_reconstruct(meas: &Measurement, set: &PatternSet) -> Result<ReconResult> {
    meas.check_against(set)?;
    let n_total = set.pixels();
    let mut coeffs = vec![0.0; n_total];
    for (&row, &v) in set.selection().iter().zip(&meas.readings) {
        coeffs[row] = v;
    }
    fwht(&mut coeffs);
    let inv = 1.0 / n_total as f64;
    coeffs.iter_mut().for_each(|v| *v *= inv);
    Ok(ReconResult {
        image: image_on_pattern_grid(set, meas.pitch, coeffs.clone())?,
        raw: coeffs,
        method: Method::Hspi,
        iterations_used: 0,
        residual_history: Vec::new(),
    })
}

/// Normalized differential signal `I'_i = I_i - (<I>/<S>) S_i`, skipping the
/// correction for balanced rows (`|S_i| < 1e-9 N`).
fn normalized_differential(meas: &Measurement, set: &PatternSet) -> Result<Vec<f64>> {
    let m = set.count() as f64;
    let s: Vec<f64> = (0..set.count())
        .map(|i| pattern_total_intensity(set, i))
        .collect::<Result<_>>()?;
    let mean_i = meas.readings.iter().sum::<f64>() / m;
    let mean_s = s.iter().sum::<f64>() / m;
    let tol = 1e-9 * set.pixels() as f64;
    Ok(meas
        .readings
        .iter()
        .zip(&s)
        .map(|(&i, &si)| if si.abs() < tol { i } else { i - mean_i / mean_s * si })
        .collect())
}

/// Second-order correlation estimate
/// `O(p) = <(P_i(p) - <P(p)>) (I'_i - <I'>)>` over the pattern ensemble.
pub fn dgi_reconstruct(meas: &Measurement, set: &PatternSet) -> Result<ReconResult> {
    meas.check_against(set)?;
    if set.count() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation imaging needs at least 2 patterns, got {}",
            set.count()
        )));
    }
    let m = set.count() as f64;
    let i_prime = normalized_differential(meas, set)?;
    let mean = i_prime.iter().sum::<f64>() / m;
    // <(P - <P>)(I' - <I'>)> = <P (I' - <I'>)> since the centered signal sums to zero
    let mut coeffs = vec![0.0; set.pixels()];
    for (&row, &v) in set.selection().iter().zip(&i_prime) {
        coeffs[row] = (v - mean) / m;
    }
    fwht(&mut coeffs);
    Ok(ReconResult {
        image: image_on_pattern_grid(set, meas.pitch, rescale_unit(&coeffs))?,
        raw: coeffs,
        method: Method::Dgi,
        iterations_used: 0,
        residual_history: Vec::new(),
    })
}

/// Anisotropic total variation of a row-major `w x h` image.
pub fn total_variation(values: &[f64], w: usize, h: usize) -> f64 {
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = values[y * w + x];
            if x + 1 < w {
                tv += (values[y * w + x + 1] - v).abs();
            }
            if y + 1 < h {
                tv += (values[(y + 1) * w + x] - v).abs();
            }
        }
    }
    tv
}

/// Finite-difference operator `D x = (x - x_down, x - x_right)`.
pub(crate) fn diff(x: &[f64], w: usize, h: usize, p: &mut [f64], q: &mut [f64]) {
    for y in 0..h {
        for c in 0..w {
            let i = y * w + c;
            p[i] = if y + 1 < h { x[i] - x[i + w] } else { 0.0 };
            q[i] = if c + 1 < w { x[i] - x[i + 1] } else { 0.0 };
        }
    }
}

/// Transpose of [`diff`].
pub(crate) fn diff_adjoint(p: &[f64], q: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        for c in 0..w {
            let i = y * w + c;
            let mut v = 0.0;
            if y + 1 < h {
                v += p[i];
            }
            if y > 0 {
                v -= p[i - w];
            }
            if c + 1 < w {
                v += q[i];
            }
            if c > 0 {
                v -= q[i - 1];
            }
            out[i] = v;
        }
    }
}

const TV_PROX_ITERS: usize = 10;

/// `argmin_{x >= 0} 0.5 ||x - z||^2 + weight * TV(x)` by the accelerated
/// dual projected-gradient method, a fixed number of inner iterations.
fn tv_prox_nonneg(z: &[f64], w: usize, h: usize, weight: f64) -> Vec<f64> {
    let project = |v: f64| v.max(0.0);
    if weight <= 0.0 {
        return z.iter().map(|&v| project(v)).collect();
    }
    let n = w * h;
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    let (mut r, mut s) = (vec![0.0; n], vec![0.0; n]);
    let (mut dp, mut dq) = (vec![0.0; n], vec![0.0; n]);
    let mut lt = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut t = 1.0f64;
    // ||D||^2 <= 8 in 2D
    let step = 1.0 / (8.0 * weight);
    for _ in 0..TV_PROX_ITERS {
        diff_adjoint(&r, &s, w, h, &mut lt);
        for i in 0..n {
            x[i] = project(z[i] - weight * lt[i]);
        }
        diff(&x, w, h, &mut dp, &mut dq);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        for i in 0..n {
            let np = (r[i] + step * dp[i]).clamp(-1.0, 1.0);
            let nq = (s[i] + step * dq[i]).clamp(-1.0, 1.0);
            r[i] = np + momentum * (np - p[i]);
            s[i] = nq + momentum * (nq - q[i]);
            p[i] = np;
            q[i] = nq;
        }
        t = t_next;
    }
    diff_adjoint(&p, &q, w, h, &mut lt);
    (0..n).map(|i| project(z[i] - weight * lt[i])).collect()
}

/// Largest eigenvalue of `A^T A` by power iteration.
pub fn estimate_lipschitz(op: &SensingOperator<'_>, iterations: usize) -> f64 {
    let n = op.set().pixels();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return op.lipschitz();
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let av = op.adjoint(&op.forward(&v));
        lambda = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        v = av;
    }
    lambda
}

/// Default regularization weight, `1e-3 * max |I|`.
pub fn default_tv_weight(meas: &Measurement) -> f64 {
    1e-3 * meas.readings.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

pub const DEFAULT_CSTV_ITERS: usize = 200;

/// `argmin_{O >= 0} 0.5 ||I - A O||^2 + tv_weight * TV(O)` by monotone FISTA.
pub fn cstv_reconstruct(meas: &Measurement, set: &PatternSet, tv_weight: f64, max_iters: usize) -> Result<ReconResult> {
    meas.check_against(set)?;
    if !(tv_weight >= 0.0 && tv_weight.is_finite()) {
        return Err(Error::Parameter(format!("tv weight must be >= 0, got {tv_weight}")));
    }
    if max_iters == 0 {
        return Err(Error::Parameter("max_iters must be >= 1".into()));
    }
    let n = set.order();
    let op = SensingOperator::new(set);
    let lipschitz = estimate_lipschitz(&op, 20);
    let objective = |x: &[f64]| -> f64 {
        let ax = op.forward(x);
        let data: f64 = ax.iter().zip(&meas.readings).map(|(a, b)| (a - b).powi(2)).sum();
        0.5 * data + tv_weight * total_variation(x, n, n)
    };

    let mut x = vec![0.0; n * n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let initial = objective(&x);
    let mut current = initial;
    let mut history = Vec::with_capacity(max_iters);
    for _ in 0..max_iters {
        let residual: Vec<f64> = op.forward(&y).iter().zip(&meas.readings).map(|(a, b)| a - b).collect();
        let grad = op.adjoint(&residual);
        let z_in: Vec<f64> = y.iter().zip(&grad).map(|(v, g)| v - g / lipschitz).collect();
        let z = tv_prox_nonneg(&z_in, n, n, tv_weight / lipschitz);
        let fz = objective(&z);
        if !fz.is_finite() || fz > 1e3 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::StepSize(format!("objective {fz} diverged from {initial}")));
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let x_prev = x.clone();
        if fz <= current {
            x = z.clone();
            current = fz;
        }
        for i in 0..y.len() {
            y[i] = x[i] + (t / t_next) * (z[i] - x[i]) + ((t - 1.0) / t_next) * (x[i] - x_prev[i]);
        }
        t = t_next;
        history.push(current);
    }
    Ok(ReconResult {
        image: image_on_pattern_grid(set, meas.pitch, x.clone())?,
        raw: x,
        method: Method::CsTv,
        iterations_used: max_iters,
        residual_history: history,
    })
}
