//! Angular-spectrum propagation with an explicit split into homogeneous
//! (propagating) and evanescent plane-wave components.
//!
//! A field is transformed to its angular spectrum, each bin is multiplied by
//! a transfer factor that depends on the normalized spatial frequency
//! `s = (lambda*fx)^2 + (lambda*fy)^2`, and the result is transformed back:
//!
//! * `s <= 1`: `exp(i k d sqrt(1 - s))` (pure phase, conjugate for `d < 0`)
//! * `s > 1`: `exp(-k |d| sqrt(s - 1))` or whatever the [`EvanescentPolicy`]
//!   prescribes.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{signed_index, Fft2};
use crate::field::ComplexField;

/// How evanescent bins (`s > 1`) are treated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvanescentPolicy {
    /// Decay as `exp(-k|d|sqrt(s-1))` in both directions.
    Attenuate,
    /// Drop evanescent content entirely.
    Zero,
    /// Decay forward; on backpropagation apply the physical inverse gain
    /// `exp(+k|d|sqrt(s-1))`, capped at `gain_cap`.
    Clamp { gain_cap: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationSpec {
    /// Meters.
    pub wavelength: f64,
    /// Meters; negative values backpropagate.
    pub distance: f64,
    pub evanescent_policy: EvanescentPolicy,
    /// Circular low-pass at the aliasing-free limit for this distance and grid.
    pub band_limit: bool,
    /// Zero-pad to twice the grid size before transforming (suppresses wraparound).
    pub pad: bool,
}

impl PropagationSpec {
    /// Defaults: attenuate evanescent waves going forward, drop them going backward.
    pub fn new(wavelength: f64, distance: f64) -> Self {
        let evanescent_policy = if distance < 0.0 {
            EvanescentPolicy::Zero
        } else {
            EvanescentPolicy::Attenuate
        };
        Self {
            wavelength,
            distance,
            evanescent_policy,
            band_limit: false,
            pad: false,
        }
    }

    pub fn with_policy(mut self, policy: EvanescentPolicy) -> Self {
        self.evanescent_policy = policy;
        self
    }

    pub fn with_distance(mut self, distance: f64) -> Self {
        self.distance = distance;
        self
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::Parameter(format!(
                "wavelength must be positive, got {}",
                self.wavelength
            )));
        }
        if !self.distance.is_finite() {
            return Err(Error::Parameter("propagation distance must be finite".into()));
        }
        if let EvanescentPolicy::Clamp { gain_cap } = self.evanescent_policy {
            if !(gain_cap >= 1.0) {
                return Err(Error::Parameter(format!("gain cap must be >= 1, got {gain_cap}")));
            }
        }
        Ok(())
    }
}

/// Side information from a propagation run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PropagationReport {
    /// At least one evanescent bin hit the clamp gain cap.
    pub gain_capped: bool,
}

/// A propagation operator bound to one grid geometry, with precomputed
/// transfer functions and FFT plans.
pub struct Propagator {
    spec: PropagationSpec,
    width: usize,
    height: usize,
    pitch: f64,
    work_width: usize,
    work_height: usize,
    homogeneous: Vec<Complex64>,
    evanescent: Vec<Complex64>,
    fft: Fft2,
    report: PropagationReport,
}

impl Propagator {
    pub fn new(width: usize, height: usize, pitch: f64, spec: PropagationSpec) -> Result<Self> {
        spec.validate()?;
        // validates the grid
        ComplexField::zeros(width, height, pitch)?;
        let (ww, wh) = if spec.pad { (2 * width, 2 * height) } else { (width, height) };
        let k = spec.wavenumber();
        let d = spec.distance;
        let lambda = spec.wavelength;
        let dfx = 1.0 / (ww as f64 * pitch);
        let dfy = 1.0 / (wh as f64 * pitch);
        let band_limit_sq = if spec.band_limit {
            let lim = |df: f64| 1.0 / (lambda * ((2.0 * df * d.abs()).powi(2) + 1.0).sqrt());
            Some(lim(dfx).min(lim(dfy)).powi(2))
        } else {
            None
        };

        let zero = Complex64::new(0.0, 0.0);
        let mut homogeneous = vec![zero; ww * wh];
        let mut evanescent = vec![zero; ww * wh];
        let mut report = PropagationReport::default();
        for ky in 0..wh {
            let fy = signed_index(ky, wh) * dfy;
            for kx in 0..ww {
                let fx = signed_index(kx, ww) * dfx;
                let idx = ky * ww + kx;
                if let Some(lim) = band_limit_sq {
                    if fx * fx + fy * fy > lim {
                        continue;
                    }
                }
                let (u, v) = (lambda * fx, lambda * fy);
                let s = u * u + v * v;
                if s <= 1.0 {
                    homogeneous[idx] = Complex64::from_polar(1.0, k * d * (1.0 - s).sqrt());
                } else if d == 0.0 {
                    evanescent[idx] = Complex64::new(1.0, 0.0);
                } else {
                    let decay = k * d.abs() * (s - 1.0).sqrt();
                    let gain = match spec.evanescent_policy {
                        EvanescentPolicy::Zero => 0.0,
                        EvanescentPolicy::Attenuate => (-decay).exp(),
                        EvanescentPolicy::Clamp { .. } if d > 0.0 => (-decay).exp(),
                        EvanescentPolicy::Clamp { gain_cap } => {
                            if decay > gain_cap.ln() {
                                report.gain_capped = true;
                                gain_cap
                            } else {
                                decay.exp()
                            }
                        }
                    };
                    evanescent[idx] = Complex64::new(gain, 0.0);
                }
            }
        }

        Ok(Self {
            spec,
            width,
            height,
            pitch,
            work_width: ww,
            work_height: wh,
            homogeneous,
            evanescent,
            fft: Fft2::new(ww, wh),
            report,
        })
    }

    pub fn for_field(field: &ComplexField, spec: PropagationSpec) -> Result<Self> {
        Self::new(field.width(), field.height(), field.pitch(), spec)
    }

    pub fn spec(&self) -> &PropagationSpec {
        &self.spec
    }

    pub fn report(&self) -> PropagationReport {
        self.report
    }

    fn check(&self, field: &ComplexField) -> Result<()> {
        if field.width() != self.width || field.height() != self.height {
            return Err(Error::Dimension(format!(
                "propagator built for {}x{}, field is {}x{}",
                self.width,
                self.height,
                field.width(),
                field.height()
            )));
        }
        if field.values().iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::InvalidField("non-finite sample in propagation input".into()));
        }
        Ok(())
    }

    pub fn apply(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check(field)?;
        if self.spec.distance == 0.0 && !self.spec.band_limit {
            return Ok(field.clone());
        }
        let mut buf = field.values().to_vec();
        self.apply_raw(&mut buf, false);
        self.finish(buf)
    }

    /// Conjugate-transpose of [`Propagator::apply`].
    pub fn adjoint(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check(field)?;
        if self.spec.distance == 0.0 && !self.spec.band_limit {
            return Ok(field.clone());
        }
        let mut buf = field.values().to_vec();
        self.apply_raw(&mut buf, true);
        self.finish(buf)
    }

    /// Returns `(homogeneous, evanescent)`; they sum to [`Propagator::apply`].
    pub fn split(&self, field: &ComplexField) -> Result<(ComplexField, ComplexField)> {
        self.check(field)?;
        let mut spectrum = self.to_spectrum(field.values());
        let mut ev = spectrum.clone();
        for (s, t) in spectrum.iter_mut().zip(&self.homogeneous) {
            *s *= t;
        }
        for (s, t) in ev.iter_mut().zip(&self.evanescent) {
            *s *= t;
        }
        let h = self.from_spectrum(spectrum);
        let e = self.from_spectrum(ev);
        Ok((self.finish(h)?, self.finish(e)?))
    }

    fn finish(&self, values: Vec<Complex64>) -> Result<ComplexField> {
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Numerical {
                stage: "propagation",
                detail: "non-finite output".into(),
            });
        }
        Ok(ComplexField::from_parts_unchecked(self.width, self.height, self.pitch, values))
    }

    /// In-place operator on a raw row-major buffer of the unpadded grid size.
    pub(crate) fn apply_raw(&self, buf: &mut Vec<Complex64>, adjoint: bool) {
        let mut spectrum = self.to_spectrum(buf);
        for ((s, h), e) in spectrum.iter_mut().zip(&self.homogeneous).zip(&self.evanescent) {
            let t = h + e;
            *s *= if adjoint { t.conj() } else { t };
        }
        *buf = self.from_spectrum(spectrum);
    }

    fn to_spectrum(&self, values: &[Complex64]) -> Vec<Complex64> {
        let mut work = if self.spec.pad {
            let mut w = vec![Complex64::new(0.0, 0.0); self.work_width * self.work_height];
            let (ox, oy) = (self.width / 2, self.height / 2);
            for y in 0..self.height {
                let dst = (y + oy) * self.work_width + ox;
                w[dst..dst + self.width].copy_from_slice(&values[y * self.width..(y + 1) * self.width]);
            }
            w
        } else {
            values.to_vec()
        };
        self.fft.forward(&mut work, &mut Vec::new());
        work
    }

    fn from_spectrum(&self, mut spectrum: Vec<Complex64>) -> Vec<Complex64> {
        self.fft.inverse(&mut spectrum, &mut Vec::new());
        if !self.spec.pad {
            return spectrum;
        }
        let (ox, oy) = (self.width / 2, self.height / 2);
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            let src = (y + oy) * self.work_width + ox;
            out.extend_from_slice(&spectrum[src..src + self.width]);
        }
        out
    }
}

/// Propagates `field` by `spec.distance`.
pub fn propagate(field: &ComplexField, spec: PropagationSpec) -> Result<ComplexField> {
    Propagator::for_field(field, spec)?.apply(field)
}

/// [`propagate`] plus the clamp report.
pub fn propagate_with_report(
    field: &ComplexField,
    spec: PropagationSpec,
) -> Result<(ComplexField, PropagationReport)> {
    let p = Propagator::for_field(field, spec)?;
    Ok((p.apply(field)?, p.report()))
}

pub fn split_components(field: &ComplexField, spec: PropagationSpec) -> Result<(ComplexField, ComplexField)> {
    Propagator::for_field(field, spec)?.split(field)
}

/// Applies the adjoint of [`propagate`] to an upstream gradient.
pub fn transfer_gradient(upstream: &ComplexField, spec: PropagationSpec) -> Result<ComplexField> {
    Propagator::for_field(upstream, spec)?.adjoint(upstream)
}
