//! Walsh–Hadamard pattern sets, differential mask decomposition, the
//! photomodulator transmission model and the Drude permittivity.
//!
//! Patterns are rows of the Sylvester Hadamard matrix of order `N = n*n`,
//! reshaped row-major onto an `n x n` grid. Entry `(r, c)` of that matrix is
//! `(-1)^popcount(r & c)`, so a row never has to be materialized to be used.

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::IntensityImage;

/// Row ordering of the Hadamard matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ordering {
    /// Sylvester (natural) row order.
    Natural,
    /// Ascending number of sign changes of the reshaped `n x n` mask, counted
    /// along both axes; ties keep natural order.
    Sequency,
}

impl Ordering {
    fn code(self) -> u8 {
        match self {
            Ordering::Natural => 0,
            Ordering::Sequency => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Ordering::Natural),
            1 => Some(Ordering::Sequency),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ordering::Natural => "natural",
            Ordering::Sequency => "sequency",
        }
    }
}

impl std::str::FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Ordering::Natural),
            "sequency" => Ok(Ordering::Sequency),
            other => Err(Error::Parameter(format!("unknown ordering '{other}'"))),
        }
    }
}

/// Default fractional attenuation of pumped modulator regions.
pub const DEFAULT_MODULATION_DEPTH: f64 = 0.9;

/// An ordered selection of Walsh–Hadamard rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternSet {
    order: usize,
    ordering: Ordering,
    selection: Vec<usize>,
    modulation_depth: f64,
}

/// Sign of Hadamard entry `(row, col)`: `+1` or `-1`.
#[inline]
pub fn hadamard_sign(row: usize, col: usize) -> i8 {
    if (row & col).count_ones().is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Number of sign changes of natural Walsh row `r` of length `n`.
fn sign_changes_1d(r: usize, n: usize) -> usize {
    (1..n).filter(|&c| hadamard_sign(r, c) != hadamard_sign(r, c - 1)).count()
}

/// Rows `0..N` in sequency order for an `n x n` pattern grid.
fn sequency_rows(n: usize) -> Vec<usize> {
    let seq: Vec<usize> = (0..n).map(|r| sign_changes_1d(r, n)).collect();
    let mut rows: Vec<usize> = (0..n * n).collect();
    // row r = ry*n + rx is the outer product h_ry(y) h_rx(x); its reshaped
    // mask has n*(seq(ry) + seq(rx)) sign changes in total
    rows.sort_by_key(|&r| (seq[r / n] + seq[r % n], r));
    rows
}

impl PatternSet {
    /// `count` rows from the chosen ordering of the order-`n*n` Hadamard matrix.
    pub fn walsh_hadamard(order: usize, count: usize, ordering: Ordering) -> Result<Self> {
        if order == 0 || !order.is_power_of_two() {
            return Err(Error::Construction(format!("pattern order must be a power of two, got {order}")));
        }
        let n_total = order * order;
        if count == 0 || count > n_total {
            return Err(Error::Range(format!("pattern count {count} outside 1..={n_total}")));
        }
        let selection = match ordering {
            Ordering::Natural => (0..count).collect(),
            Ordering::Sequency => {
                let mut rows = sequency_rows(order);
                rows.truncate(count);
                rows
            }
        };
        Ok(Self {
            order,
            ordering,
            selection,
            modulation_depth: DEFAULT_MODULATION_DEPTH,
        })
    }

    /// A set built from explicit Hadamard row indices (distinct, each `< n*n`).
    pub fn from_rows(order: usize, rows: Vec<usize>, ordering: Ordering) -> Result<Self> {
        let full = Self::walsh_hadamard(order, 1, ordering)?;
        let n_total = order * order;
        if rows.is_empty() || rows.len() > n_total {
            return Err(Error::Range(format!("{} rows for order {order}", rows.len())));
        }
        let mut seen = vec![false; n_total];
        for &r in &rows {
            if r >= n_total || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Range(format!("row {r} repeated or >= {n_total}")));
            }
        }
        Ok(Self { selection: rows, ..full })
    }

    /// Pattern count for a compression ratio, rounded to the nearest row (at least one).
    pub fn count_for_ratio(order: usize, ratio: f64) -> Result<usize> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Range(format!("compression ratio {ratio} outside (0, 1]")));
        }
        Ok(((ratio * (order * order) as f64).round() as usize).max(1))
    }

    pub fn with_modulation_depth(mut self, depth: f64) -> Result<Self> {
        check_depth(depth)?;
        self.modulation_depth = depth;
        Ok(self)
    }

    /// Pixels per side.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Pixels per pattern, `N`.
    pub fn pixels(&self) -> usize {
        self.order * self.order
    }

    /// Number of patterns, `M`.
    pub fn count(&self) -> usize {
        self.selection.len()
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    /// Hadamard row index of each pattern.
    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    pub fn modulation_depth(&self) -> f64 {
        self.modulation_depth
    }

    pub fn compression_ratio(&self) -> f64 {
        self.count() as f64 / self.pixels() as f64
    }

    /// Short identifier recorded alongside measurements.
    pub fn id(&self) -> String {
        format!("wh-n{}-m{}-{}", self.order, self.count(), self.ordering.name())
    }

    fn check_index(&self, i: usize) -> Result<usize> {
        self.selection
            .get(i)
            .copied()
            .ok_or_else(|| Error::Range(format!("pattern index {i} >= {}", self.count())))
    }

    /// Logical `+1/-1` mask of pattern `i`, row-major.
    pub fn mask(&self, i: usize) -> Result<Vec<i8>> {
        let row = self.check_index(i)?;
        Ok((0..self.pixels()).map(|c| hadamard_sign(row, c)).collect())
    }

    /// Binary decomposition `(P+, P-)` with `P+ - P- == P`.
    pub fn positive_negative_split(&self, i: usize) -> Result<(BinaryGrid, BinaryGrid)> {
        let mask = self.mask(i)?;
        let plus = mask.iter().map(|&v| u8::from(v > 0)).collect();
        let minus = mask.iter().map(|&v| u8::from(v < 0)).collect();
        Ok((
            BinaryGrid::new(self.order, self.order, plus)?,
            BinaryGrid::new(self.order, self.order, minus)?,
        ))
    }

    /// Writes the binary pattern file: `SPIP`, version, `n`, `M`, ordering,
    /// then `M*N` signed bytes.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PATTERN_MAGIC)?;
        w.write_all(&PATTERN_VERSION.to_le_bytes())?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&(self.count() as u32).to_le_bytes())?;
        w.write_all(&[self.ordering.code()])?;
        let mut buf = vec![0u8; self.pixels()];
        for &row in &self.selection {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = hadamard_sign(row, c) as u8;
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Parses a pattern file, checking every mask against its Hadamard row.
    pub fn read_from<R: Read>(mut r: R, modulation_depth: f64) -> Result<Self> {
        let mut header = [0u8; PATTERN_HEADER_LEN];
        read_exact_at(&mut r, &mut header, 0)?;
        if &header[0..4] != PATTERN_MAGIC {
            return Err(Error::format(0, "bad magic, expected SPIP"));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != PATTERN_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let order = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        if order == 0 || !order.is_power_of_two() {
            return Err(Error::format(6, format!("order {order} is not a power of two")));
        }
        let count = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        if count == 0 || count > order * order {
            return Err(Error::format(10, format!("pattern count {count} out of range")));
        }
        let ordering = Ordering::from_code(header[14])
            .ok_or_else(|| Error::format(14, format!("unknown ordering code {}", header[14])))?;

        let n = order * order;
        let mut buf = vec![0u8; n];
        let mut selection = Vec::with_capacity(count);
        for i in 0..count {
            let base = PATTERN_HEADER_LEN + i * n;
            read_exact_at(&mut r, &mut buf, base)?;
            // entry at column 2^j carries bit j of the row index
            let mut row = 0usize;
            let mut bit = 0;
            while (1usize << bit) < n {
                if buf[1 << bit] as i8 == -1 {
                    row |= 1 << bit;
                }
                bit += 1;
            }
            if let Some(c) = (0..n).find(|&c| buf[c] as i8 != hadamard_sign(row, c)) {
                return Err(Error::format(base + c, format!("mask {i} is not a Walsh-Hadamard row")));
            }
            selection.push(row);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format(PATTERN_HEADER_LEN + count * n, "trailing bytes after last mask"));
        }
        Self {
            order,
            ordering,
            selection,
            modulation_depth: DEFAULT_MODULATION_DEPTH,
        }
        .with_modulation_depth(modulation_depth)
    }
}

const PATTERN_MAGIC: &[u8; 4] = b"SPIP";
const PATTERN_VERSION: u16 = 1;
const PATTERN_HEADER_LEN: usize = 15;

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(offset, "unexpected end of file"),
        _ => Error::Io(e),
    })
}

pub(crate) fn check_depth(depth: f64) -> Result<()> {
    if depth > 0.0 && depth <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("modulation depth must lie in (0, 1], got {depth}")))
    }
}

/// A 0/1 grid (physical mask state: 1 = pumped / conductive).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl BinaryGrid {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} mask needs {} entries, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("binary mask entries must be 0 or 1".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Integer replication factor mapping a `coarse` grid side onto a `fine` one.
pub(crate) fn replication_factor(fine_w: usize, fine_h: usize, coarse_w: usize, coarse_h: usize) -> Result<usize> {
    let ok = coarse_w > 0
        && coarse_h > 0
        && fine_w.is_multiple_of(coarse_w)
        && fine_h.is_multiple_of(coarse_h)
        && fine_w / coarse_w == fine_h / coarse_h;
    if !ok {
        return Err(Error::Dimension(format!(
            "{coarse_w}x{coarse_h} pattern grid does not tile {fine_w}x{fine_h} image by an integer factor"
        )));
    }
    Ok(fine_w / coarse_w)
}

/// Transmission through a modulator pumped where `mask == 1`:
/// `out = image * (1 - depth * mask)`.
pub fn apply_mask(image: &IntensityImage, mask: &BinaryGrid, depth: f64) -> Result<IntensityImage> {
    check_depth(depth)?;
    let (w, h) = (image.width(), image.height());
    let f = replication_factor(w, h, mask.width, mask.height)?;
    let mut values = image.values().to_vec();
    for y in 0..h {
        for x in 0..w {
            if mask.values[(y / f) * mask.width + x / f] == 1 {
                values[y * w + x] *= 1.0 - depth;
            }
        }
    }
    IntensityImage::new(w, h, image.pitch(), values)
}

/// Free-carrier (Drude) permittivity parameters, SI units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrudeParams {
    pub eps_inf: f64,
    /// Plasma frequency, rad/s.
    pub omega_p: f64,
    /// Damping time, s.
    pub tau_d: f64,
    /// Probe frequency, rad/s.
    pub omega: f64,
}

/// `eps_inf - omega_p^2 / (omega * (omega + i/tau_d))` (e^{-i omega t} convention).
pub fn drude_permittivity(p: DrudeParams) -> Result<Complex64> {
    if p.omega == 0.0 {
        return Err(Error::Singularity("Drude permittivity diverges at omega = 0".into()));
    }
    if !(p.omega > 0.0 && p.tau_d > 0.0 && p.omega_p >= 0.0) {
        return Err(Error::Parameter(format!("invalid Drude parameters {p:?}")));
    }
    if p.omega_p == 0.0 {
        return Ok(Complex64::new(p.eps_inf, 0.0));
    }
    let denom = Complex64::new(p.omega * p.omega, p.omega / p.tau_d);
    Ok(Complex64::new(p.eps_inf, 0.0) - p.omega_p * p.omega_p / denom)
}

/// In-place fast Walsh–Hadamard transform in natural (Sylvester) order,
/// unnormalized: `out[r] = sum_c H[r][c] * x[c]`.
pub fn fwht(data: &mut [f64]) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (a, b) = block.split_at_mut(h);
            for (u, v) in a.iter_mut().zip(b.iter_mut()) {
                let (p, q) = (*u, *v);
                *u = p + q;
                *v = p - q;
            }
        }
        h *= 2;
    }
}
