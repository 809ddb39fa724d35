//! Sampled scalar fields and intensity images on uniform square-pixel grids.
//!
//! Storage is row-major: the value at column `x`, row `y` lives at
//! `y * width + x`.

use num_complex::Complex64;

use crate::error::{Error, Result};

fn check_pitch(pitch: f64) -> Result<()> {
    if pitch > 0.0 && pitch.is_finite() {
        Ok(())
    } else {
        Err(Error::Construction(format!("pixel pitch must be positive and finite, got {pitch}")))
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::Dimension(format!(
            "{width}x{height} grid needs {} values, got {len}",
            width * height
        )));
    }
    Ok(())
}

/// A sampled complex scalar wave field.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    width: usize,
    height: usize,
    pitch: f64,
    values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(width: usize, height: usize, pitch: f64, values: Vec<Complex64>) -> Result<Self> {
        for (name, side) in [("width", width), ("height", height)] {
            if side < 2 || !side.is_power_of_two() {
                return Err(Error::Construction(format!(
                    "field {name} must be a power of two >= 2, got {side}"
                )));
            }
        }
        check_pitch(pitch)?;
        check_len(width, height, values.len())?;
        if let Some(i) = values.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::InvalidField(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            pitch,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, pitch: f64) -> Result<Self> {
        Self::new(width, height, pitch, vec![Complex64::new(0.0, 0.0); width * height])
    }

    /// Internal constructor for values already known to satisfy the invariants.
    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        pitch: f64,
        values: Vec<Complex64>,
    ) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            pitch,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        self.values[y * self.width + x]
    }

    /// Multiplies every sample by `factor`.
    pub fn scaled(&self, factor: Complex64) -> Self {
        Self::from_parts_unchecked(
            self.width,
            self.height,
            self.pitch,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// Inner product `<self, other> = sum conj(self) * other`.
    pub fn inner(&self, other: &ComplexField) -> Result<Complex64> {
        same_shape(self.width, self.height, other.width, other.height)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// Total power `sum |E|^2`.
    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// A nonnegative real intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    pitch: f64,
    values: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, pitch: f64, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Construction("image must be non-empty".into()));
        }
        check_pitch(pitch)?;
        check_len(width, height, values.len())?;
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidField(format!(
                "intensity at index {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(Self {
            width,
            height,
            pitch,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, pitch: f64) -> Result<Self> {
        Self::new(width, height, pitch, vec![0.0; width * height])
    }

    pub fn filled(width: usize, height: usize, pitch: f64, value: f64) -> Result<Self> {
        Self::new(width, height, pitch, vec![value; width * height])
    }

    /// Builds an image from arbitrary reals, clamping negatives to zero.
    pub fn from_clamped(width: usize, height: usize, pitch: f64, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, pitch, values.into_iter().map(|v| v.max(0.0)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_grid(&self, other: &IntensityImage) -> Result<()> {
        same_shape(self.width, self.height, other.width, other.height)
    }

    pub fn transposed(&self) -> IntensityImage {
        let mut values = vec![0.0; self.values.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                values[x * self.height + y] = self.values[y * self.width + x];
            }
        }
        IntensityImage {
            width: self.height,
            height: self.width,
            pitch: self.pitch,
            values,
        }
    }
}

/// A real-valued grid without sign constraints (phases, signed estimates).
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl RealGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }
}

pub(crate) fn same_shape(w1: usize, h1: usize, w2: usize, h2: usize) -> Result<()> {
    if w1 != w2 || h1 != h2 {
        return Err(Error::Dimension(format!("grid {w1}x{h1} does not match {w2}x{h2}")));
    }
    Ok(())
}

/// Builds `amplitude * exp(i * phase)` pixelwise.
pub fn field_from_amplitude(amplitude: &IntensityImage, phase: &RealGrid) -> Result<ComplexField> {
    same_shape(amplitude.width, amplitude.height, phase.width, phase.height)?;
    let values = amplitude
        .values
        .iter()
        .zip(&phase.values)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    ComplexField::new(amplitude.width, amplitude.height, amplitude.pitch, values)
}

/// Zero-phase field from an amplitude image.
pub fn field_from_real_amplitude(amplitude: &IntensityImage) -> Result<ComplexField> {
    field_from_amplitude(amplitude, &RealGrid::zeros(amplitude.width, amplitude.height))
}

/// `|E|^2` pixelwise.
pub fn intensity(field: &ComplexField) -> IntensityImage {
    IntensityImage {
        width: field.width,
        height: field.height,
        pitch: field.pitch,
        values: field.values.iter().map(|v| v.norm_sqr()).collect(),
    }
}

/// Scales an image so that its maximum is exactly one.
pub fn normalize(image: &IntensityImage) -> Result<IntensityImage> {
    let max = image.max();
    if max <= 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero image".into()));
    }
    let mut values: Vec<f64> = image.values.iter().map(|v| v / max).collect();
    // division can land one ulp off for the maximal entries
    for (v, orig) in values.iter_mut().zip(&image.values) {
        if *orig == max {
            *v = 1.0;
        }
    }
    Ok(IntensityImage {
        values,
        ..image.clone()
    })
}

/// Affine map of arbitrary reals onto `[0, 1]`; a constant input maps to zeros.
pub fn rescale_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}
