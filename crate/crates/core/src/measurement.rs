//! Single-pixel forward model: encode a diffracted intensity image with
//! differential Hadamard patterns and integrate it on a bucket detector.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoding::{fwht, replication_factor, PatternSet};
use crate::error::{Error, Result};
use crate::field::{field_from_real_amplitude, intensity, IntensityImage};
use crate::propagation::{PropagationSpec, Propagator};

/// Detector readout vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub readings: Vec<f64>,
    pub pattern_ref: String,
    /// Standard deviation of the additive noise on each half-measurement.
    pub noise_sigma: f64,
    pub seed: u64,
    pub differential: bool,
    /// Side length of one pattern cell in meters.
    pub pitch: f64,
}

impl Measurement {
    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub(crate) fn check_against(&self, set: &PatternSet) -> Result<()> {
        if self.readings.len() != set.count() {
            return Err(Error::Consistency(format!(
                "{} readings for a set of {} patterns",
                self.readings.len(),
                set.count()
            )));
        }
        Ok(())
    }

    /// CSV with a leading `#` metadata line and an `index,reading` header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# noise_sigma={:e} seed={} pattern={} differential={} pitch={:e}",
            self.noise_sigma, self.seed, self.pattern_ref, self.differential, self.pitch
        )?;
        writeln!(w, "index,reading")?;
        for (i, r) in self.readings.iter().enumerate() {
            // shortest representation that round-trips exactly
            writeln!(w, "{i},{r:e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut meas = Measurement {
            readings: Vec::new(),
            pattern_ref: String::new(),
            noise_sigma: 0.0,
            seed: 0,
            differential: true,
            pitch: 1.0,
        };
        let mut offset = 0usize;
        let mut seen_header = false;
        for line in r.lines() {
            let line = line?;
            let start = offset;
            offset += line.len() + 1;
            let trimmed = line.trim_end_matches('\r');
            if let Some(meta) = trimmed.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    let bad = || Error::format(start, format!("bad metadata value '{kv}'"));
                    match k {
                        "noise_sigma" => meas.noise_sigma = v.parse().map_err(|_| bad())?,
                        "seed" => meas.seed = v.parse().map_err(|_| bad())?,
                        "pattern" => meas.pattern_ref = v.to_string(),
                        "differential" => meas.differential = v.parse().map_err(|_| bad())?,
                        "pitch" => {
                            meas.pitch = v.parse().map_err(|_| bad())?;
                            if !(meas.pitch > 0.0 && meas.pitch.is_finite()) {
                                return Err(bad());
                            }
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            if !seen_header {
                if trimmed != "index,reading" {
                    return Err(Error::format(start, "expected header 'index,reading'"));
                }
                seen_header = true;
                continue;
            }
            let (idx, val) = trimmed
                .split_once(',')
                .ok_or_else(|| Error::format(start, "expected two comma-separated fields"))?;
            let idx: usize = idx.parse().map_err(|_| Error::format(start, format!("bad index '{idx}'")))?;
            if idx != meas.readings.len() {
                return Err(Error::format(start, format!("index {idx} out of sequence")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| Error::format(start + line.find(',').unwrap_or(0) + 1, format!("bad reading '{val}'")))?;
            if !val.is_finite() {
                return Err(Error::format(start, "non-finite reading"));
            }
            meas.readings.push(val);
        }
        if !seen_header {
            return Err(Error::format(offset, "missing 'index,reading' header"));
        }
        Ok(meas)
    }
}

/// The linear map from an image on the pattern grid to noiseless
/// differential readings, `A x = depth * H_sel x`, and its transpose.
#[derive(Clone, Debug)]
pub struct SensingOperator<'a> {
    set: &'a PatternSet,
}

impl<'a> SensingOperator<'a> {
    pub fn new(set: &'a PatternSet) -> Self {
        Self { set }
    }

    pub fn set(&self) -> &PatternSet {
        self.set
    }

    /// `values` is row-major on the `n x n` pattern grid.
    pub fn forward(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.set.pixels());
        let mut coeffs = values.to_vec();
        fwht(&mut coeffs);
        let m = self.set.modulation_depth();
        self.set.selection().iter().map(|&r| m * coeffs[r]).collect()
    }

    /// Transpose of [`SensingOperator::forward`].
    pub fn adjoint(&self, readings: &[f64]) -> Vec<f64> {
        let m = self.set.modulation_depth();
        let mut coeffs = vec![0.0; self.set.pixels()];
        for (&r, &v) in self.set.selection().iter().zip(readings) {
            coeffs[r] = m * v;
        }
        fwht(&mut coeffs);
        coeffs
    }

    /// Spectral norm squared of `A`, exact for Hadamard rows.
    pub fn lipschitz(&self) -> f64 {
        let m = self.set.modulation_depth();
        m * m * self.set.pixels() as f64
    }
}

/// Sums an image over the blocks covered by each pattern cell.
pub(crate) fn bin_to_pattern_grid(image: &IntensityImage, set: &PatternSet) -> Result<Vec<f64>> {
    let n = set.order();
    let (w, h) = (image.width(), image.height());
    let f = replication_factor(w, h, n, n)?;
    if f == 1 {
        return Ok(image.values().to_vec());
    }
    let mut out = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * n + x / f] += image.values()[y * w + x];
        }
    }
    Ok(out)
}

/// Per-pattern noise stream: one ChaCha stream per pattern index.
fn noise_pair(seed: u64, index: usize, sigma: f64) -> (f64, f64) {
    if sigma == 0.0 {
        return (0.0, 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let a: f64 = StandardNormal.sample(&mut rng);
    let b: f64 = StandardNormal.sample(&mut rng);
    (sigma * a, sigma * b)
}

/// Differential single-pixel measurement of `diffracted` with additive
/// Gaussian noise on each half-measurement.
pub fn measure(diffracted: &IntensityImage, set: &PatternSet, noise_sigma: f64, seed: u64) -> Result<Measurement> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let binned = bin_to_pattern_grid(diffracted, set)?;
    let pitch = diffracted.pitch() * (diffracted.width() / set.order()) as f64;
    let mut readings = SensingOperator::new(set).forward(&binned);
    for (i, r) in readings.iter_mut().enumerate() {
        let (plus, minus) = noise_pair(seed, i, noise_sigma);
        *r += plus - minus;
    }
    Ok(Measurement {
        readings,
        pattern_ref: set.id(),
        noise_sigma,
        seed,
        differential: true,
        pitch,
    })
}

/// Predicted noiseless readings for an object-plane intensity estimate:
/// amplitude `sqrt(I)` with zero phase, propagated, squared, encoded.
pub fn forward_predict(object_estimate: &IntensityImage, prop: PropagationSpec, set: &PatternSet) -> Result<Vec<f64>> {
    let amplitude = IntensityImage::new(
        object_estimate.width(),
        object_estimate.height(),
        object_estimate.pitch(),
        object_estimate.values().iter().map(|v| v.sqrt()).collect(),
    )?;
    let field = field_from_real_amplitude(&amplitude)?;
    let diffracted = intensity(&Propagator::for_field(&field, prop)?.apply(&field)?);
    Ok(measure(&diffracted, set, 0.0, 0)?.readings)
}

/// Sum of the logical mask entries of pattern `i`.
pub fn pattern_total_intensity(set: &PatternSet, i: usize) -> Result<f64> {
    let row = *set
        .selection()
        .get(i)
        .ok_or_else(|| Error::Range(format!("pattern index {i} >= {}", set.count())))?;
    // Sylvester rows other than row 0 are balanced
    Ok(if row == 0 { set.pixels() as f64 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{apply_mask, Ordering};
    use crate::field::normalize;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> IntensityImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IntensityImage::new(n, n, 1e-4, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Brute force: integrate the image through both physical masks.
    fn brute_force(image: &IntensityImage, set: &PatternSet) -> Vec<f64> {
        let m = set.modulation_depth();
        (0..set.count())
            .map(|i| {
                let (plus, minus) = set.positive_negative_split(i).unwrap();
                // the +1 state is transparent: it is measured with the minus mask pumped
                apply_mask(image, &minus, m).unwrap().sum() - apply_mask(image, &plus, m).unwrap().sum()
            })
            .collect()
    }

    #[test]
    fn zero_image_gives_zero_readings() {
        let set = PatternSet::walsh_hadamard(4, 16, Ordering::Natural).unwrap();
        let meas = measure(&IntensityImage::zeros(4, 4, 1.0).unwrap(), &set, 0.0, 1).unwrap();
        assert!(meas.readings.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn uniform_image_only_lights_dc() {
        let set = PatternSet::walsh_hadamard(8, 64, Ordering::Sequency).unwrap();
        let meas = measure(&IntensityImage::filled(8, 8, 1.0, 2.0).unwrap(), &set, 0.0, 1).unwrap();
        assert!((meas.readings[0] - 0.9 * 2.0 * 64.0).abs() < 1e-12);
        assert!(meas.readings[1..].iter().all(|&r| r.abs() < 1e-12));
    }

    #[test]
    fn delta_image_reads_pattern_value() {
        let set = PatternSet::walsh_hadamard(4, 16, Ordering::Sequency)
            .unwrap()
            .with_modulation_depth(1.0)
            .unwrap();
        let mut v = vec![0.0; 16];
        v[9] = 2.5;
        let img = IntensityImage::new(4, 4, 1.0, v).unwrap();
        let meas = measure(&img, &set, 0.0, 0).unwrap();
        let brute = brute_force(&img, &set);
        for i in 0..16 {
            let want = 2.5 * set.mask(i).unwrap()[9] as f64;
            assert!((meas.readings[i] - want).abs() < 1e-12);
            assert!((brute[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_path_matches_brute_force_with_replication() {
        let set = PatternSet::walsh_hadamard(4, 10, Ordering::Sequency).unwrap();
        let img = random_image(8, 3);
        let fast = measure(&img, &set, 0.0, 0).unwrap().readings;
        for (a, b) in fast.iter().zip(brute_force(&img, &set)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(measure(&random_image(8, 3), &PatternSet::walsh_hadamard(2, 4, Ordering::Natural).unwrap(), 0.0, 0).is_ok());
        let bad = IntensityImage::zeros(6, 6, 1.0).unwrap();
        assert!(matches!(measure(&bad, &set, 0.0, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn negative_sigma_rejected() {
        let set = PatternSet::walsh_hadamard(4, 4, Ordering::Natural).unwrap();
        assert!(matches!(measure(&random_image(4, 1), &set, -1.0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn linearity_without_noise() {
        let set = PatternSet::walsh_hadamard(8, 20, Ordering::Sequency).unwrap();
        let (a, b) = (random_image(8, 1), random_image(8, 2));
        let (alpha, beta) = (0.7, 2.3);
        let mix = IntensityImage::new(
            8,
            8,
            1e-4,
            a.values().iter().zip(b.values()).map(|(p, q)| alpha * p + beta * q).collect(),
        )
        .unwrap();
        let ma = measure(&a, &set, 0.0, 0).unwrap().readings;
        let mb = measure(&b, &set, 0.0, 0).unwrap().readings;
        let mm = measure(&mix, &set, 0.0, 0).unwrap().readings;
        for i in 0..20 {
            assert!((mm[i] - alpha * ma[i] - beta * mb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn differential_noise_variance_doubles() {
        let set = PatternSet::walsh_hadamard(128, 16384, Ordering::Natural).unwrap();
        let img = IntensityImage::zeros(128, 128, 1.0).unwrap();
        let sigma = 0.3;
        let r = measure(&img, &set, sigma, 99).unwrap().readings;
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        let want = 2.0 * sigma * sigma;
        assert!((var - want).abs() / want < 0.05, "variance {var} vs {want}");
    }

    #[test]
    fn reproducible_bit_for_bit() {
        let set = PatternSet::walsh_hadamard(8, 32, Ordering::Sequency).unwrap();
        let img = random_image(8, 5);
        let a = measure(&img, &set, 0.1, 42).unwrap();
        let b = measure(&img, &set, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = measure(&img, &set, 0.1, 43).unwrap();
        assert_ne!(a.readings, c.readings);
    }

    #[test]
    fn forward_predict_examples() {
        let set = PatternSet::walsh_hadamard(32, 200, Ordering::Sequency).unwrap();
        let pitch = 10.5e-3 / 32.0;
        let obj = IntensityImage::new(32, 32, pitch, random_image(32, 8).into_values()).unwrap();
        let direct = measure(&obj, &set, 0.0, 0).unwrap().readings;
        let at_zero = forward_predict(&obj, PropagationSpec::new(833.3e-6, 0.0), &set).unwrap();
        for (a, b) in at_zero.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }

        let zero = IntensityImage::zeros(32, 32, pitch).unwrap();
        let spec = PropagationSpec::new(833.3e-6, 0.5e-3);
        assert!(forward_predict(&zero, spec, &set).unwrap().iter().all(|&v| v == 0.0));

        // independent path: field built by hand, propagated, squared, measured
        let amp = IntensityImage::new(32, 32, pitch, obj.values().iter().map(|v| v.sqrt()).collect()).unwrap();
        let field = field_from_real_amplitude(&amp).unwrap();
        let diffracted = intensity(&crate::propagation::propagate(&field, spec).unwrap());
        let via_measure = measure(&diffracted, &set, 0.0, 0).unwrap().readings;
        let predicted = forward_predict(&obj, spec, &set).unwrap();
        let dev = predicted.iter().zip(&via_measure).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-9, "{dev}");
        assert!(normalize(&diffracted).is_ok());
    }

    #[test]
    fn total_intensity_examples() {
        let set = PatternSet::walsh_hadamard(64, 10, Ordering::Sequency).unwrap();
        assert_eq!(pattern_total_intensity(&set, 0).unwrap(), 4096.0);
        for i in 1..10 {
            assert_eq!(pattern_total_intensity(&set, i).unwrap(), 0.0);
            let (p, m) = set.positive_negative_split(i).unwrap();
            assert_eq!(p.count_ones() as f64 - m.count_ones() as f64, 0.0);
        }
        let (p, m) = set.positive_negative_split(0).unwrap();
        assert_eq!(p.count_ones() as f64 - m.count_ones() as f64, 4096.0);
        assert!(pattern_total_intensity(&set, 10).is_err());
    }

    #[test]
    fn adjoint_matches_transpose() {
        let set = PatternSet::walsh_hadamard(8, 17, Ordering::Sequency).unwrap();
        let op = SensingOperator::new(&set);
        let x: Vec<f64> = random_image(8, 11).into_values();
        let y: Vec<f64> = (0..17).map(|i| (i as f64).cos()).collect();
        let lhs: f64 = op.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let set = PatternSet::walsh_hadamard(4, 6, Ordering::Sequency).unwrap();
        let meas = measure(&random_image(4, 2), &set, 0.05, 17).unwrap();
        let mut bytes = Vec::new();
        meas.write_csv(&mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# noise_sigma="));
        assert_eq!(text.lines().nth(1), Some("index,reading"));
        assert_eq!(Measurement::read_csv(&bytes[..]).unwrap(), meas);

        let bad = b"index,reading\n0,1.0\n2,3.0\n";
        match Measurement::read_csv(&bad[..]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        assert!(Measurement::read_csv(&b"0,1\n"[..]).is_err());
    }
}
