//! Image-quality metrics: SSIM, region SNR, line profiles and slit
//! resolvability.

use crate::error::{Error, Result};
use crate::encoding::BinaryGrid;
use crate::field::IntensityImage;

#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-mode separable filtering of a row-major `w x h` image.
fn filter_valid(values: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * values[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained windows.
pub fn ssim(a: &IntensityImage, b: &IntensityImage, params: &SsimParams) -> Result<f64> {
    a.same_grid(b)?;
    let (w, h) = (a.width(), a.height());
    if w < params.window || h < params.window {
        return Err(Error::Dimension(format!(
            "{w}x{h} image is smaller than the {}-pixel SSIM window",
            params.window
        )));
    }
    let taps = params.taps();
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let (av, bv) = (a.values(), b.values());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(av, w, h, &taps);
    let mu_b = filter_valid(bv, w, h, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &taps);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr {
    /// `mu(signal) / sigma(background)`; `f64::INFINITY` when flagged.
    pub value: f64,
    /// The background region has zero spread.
    pub infinite: bool,
}

/// Mean over `signal_mask == 1` divided by the standard deviation over the rest.
pub fn snr(image: &IntensityImage, signal_mask: &BinaryGrid) -> Result<Snr> {
    if signal_mask.width != image.width() || signal_mask.height != image.height() {
        return Err(Error::Dimension("signal mask does not match image grid".into()));
    }
    let (mut signal, mut noise) = (Vec::new(), Vec::new());
    for (&v, &m) in image.values().iter().zip(&signal_mask.values) {
        if m == 1 {
            signal.push(v);
        } else {
            noise.push(v);
        }
    }
    if signal.is_empty() {
        return Err(Error::Parameter("signal region is empty".into()));
    }
    if noise.len() < 2 {
        return Err(Error::Parameter("background region needs at least two pixels".into()));
    }
    let mu = signal.iter().sum::<f64>() / signal.len() as f64;
    let nm = noise.iter().sum::<f64>() / noise.len() as f64;
    let sigma = (noise.iter().map(|v| (v - nm).powi(2)).sum::<f64>() / noise.len() as f64).sqrt();
    if sigma == 0.0 {
        return Ok(Snr {
            value: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(Snr {
        value: mu / sigma,
        infinite: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// One value per row.
    Rows,
    /// One value per column.
    Cols,
}

/// Per-column (or per-row) mean, normalized to a maximum of one.
pub fn line_profile(image: &IntensityImage, axis: Axis) -> Result<Vec<f64>> {
    line_profile_rows(image, axis, 0..image.height().max(image.width()))
}

/// [`line_profile`] restricted to a band of rows (for `Cols`) or columns
/// (for `Rows`).
pub fn line_profile_rows(image: &IntensityImage, axis: Axis, band: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let (w, h) = (image.width(), image.height());
    let v = image.values();
    let profile: Vec<f64> = match axis {
        Axis::Cols => {
            let rows: Vec<usize> = band.filter(|&y| y < h).collect();
            (0..w).map(|x| rows.iter().map(|&y| v[y * w + x]).sum::<f64>() / rows.len().max(1) as f64).collect()
        }
        Axis::Rows => {
            let cols: Vec<usize> = band.filter(|&x| x < w).collect();
            (0..h).map(|y| cols.iter().map(|&x| v[y * w + x]).sum::<f64>() / cols.len().max(1) as f64).collect()
        }
    };
    let max = profile.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Degenerate("profile of an all-zero image".into()));
    }
    Ok(profile.into_iter().map(|p| p / max).collect())
}

/// Topographic prominence of each local maximum (plateaus count once).
fn peak_prominences(profile: &[f64]) -> Vec<f64> {
    let n = profile.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        // extent of the plateau starting at i
        let mut j = i;
        while j + 1 < n && profile[j + 1] == profile[i] {
            j += 1;
        }
        let h = profile[i];
        let left_lower = i == 0 || profile[i - 1] < h;
        let right_lower = j + 1 == n || profile[j + 1] < h;
        if left_lower && right_lower {
            let mut left_min = h;
            let mut k = i;
            while k > 0 && profile[k - 1] <= h {
                k -= 1;
                left_min = left_min.min(profile[k]);
            }
            let mut right_min = h;
            let mut k = j;
            while k + 1 < n && profile[k + 1] <= h {
                k += 1;
                right_min = right_min.min(profile[k]);
            }
            out.push(h - left_min.max(right_min));
        }
        i = j + 1;
    }
    out
}

/// Number of maxima that stand out from their surroundings by at least
/// `dip_threshold` (relative to the profile maximum).
pub fn count_resolved_slits(profile: &[f64], dip_threshold: f64) -> usize {
    let max = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if profile.is_empty() || !(max > 0.0) {
        return 0;
    }
    let normalized: Vec<f64> = profile.iter().map(|p| p / max).collect();
    let prominences = peak_prominences(&normalized);
    // the global maximum always counts, even on a flat profile
    let above = prominences.iter().filter(|&&p| p >= dip_threshold).count();
    above.max(1)
}

pub const DEFAULT_DIP_THRESHOLD: f64 = 0.2;

/// Mean Michelson contrast of the dips between adjacent slits, with each
/// slit given as a half-open index range on the profile.
pub fn dip_contrast(profile: &[f64], slits: &[std::ops::Range<usize>]) -> f64 {
    let peak = |r: &std::ops::Range<usize>| profile[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pairs: Vec<f64> = slits
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let gap = if a.end < b.start { a.end..b.start } else { a.end.saturating_sub(1)..a.end };
            let valley = profile[gap].iter().copied().fold(f64::INFINITY, f64::min);
            let p = peak(a).min(peak(b));
            if p + valley > 0.0 {
                (p - valley) / (p + valley)
            } else {
                0.0
            }
        })
        .collect();
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().sum::<f64>() / pairs.len() as f64
}
