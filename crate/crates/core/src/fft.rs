//! Row-major 2D FFT on top of `rustfft`.
//!
//! The forward transform is unnormalized; the inverse carries the `1/(w*h)`
//! factor, so `inverse(forward(x)) == x`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Fft2 {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn forward(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        self.run(data, scratch, &*self.row_fwd, &*self.col_fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        self.run(data, scratch, &*self.row_inv, &*self.col_inv);
        let scale = 1.0 / (self.width * self.height) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(
        &self,
        data: &mut [Complex64],
        scratch: &mut Vec<Complex64>,
        rows: &dyn Fft<f64>,
        cols: &dyn Fft<f64>,
    ) {
        debug_assert_eq!(data.len(), self.width * self.height);
        rows.process(data);
        scratch.resize(data.len(), Complex64::new(0.0, 0.0));
        transpose(data, scratch, self.width, self.height);
        cols.process(scratch);
        transpose(scratch, data, self.height, self.width);
    }
}

/// `src` is `rows x cols` row-major; `dst` receives the `cols x rows` transpose.
fn transpose(src: &[Complex64], dst: &mut [Complex64], cols: usize, rows: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Signed FFT frequency index for bin `k` of an `n`-point transform.
pub(crate) fn signed_index(k: usize, n: usize) -> f64 {
    if k < n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}
