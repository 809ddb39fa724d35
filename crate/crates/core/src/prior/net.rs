//! Untrained convolutional generator with a hand-written backward pass.
//!
//! Every block is `conv3x3 (same padding) -> batch norm -> LeakyReLU(0.2)`;
//! a final 3x3 convolution with bias maps to one channel and a sigmoid
//! squashes it into `(0, 1)`. Spatial size is preserved everywhere.
//!
//! Parameters live in one flat vector so that the optimizer, the checkpoint
//! format and finite-difference checks all see the same layout:
//! `[w_0, gamma_0, beta_0, w_1, gamma_1, beta_1, ..., w_head, b_head]`.
//! Block convolutions carry no bias; batch norm's shift takes that role.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Channel plan `1 -> 16 -> 32 -> 32 -> 16 -> 1`.
pub const DEFAULT_PLAN: [usize; 6] = [1, 16, 32, 32, 16, 1];

#[derive(Clone, Debug, PartialEq)]
struct LayerSlots {
    cin: usize,
    cout: usize,
    weight: Range<usize>,
    /// `(gamma, beta)` for normalized blocks, `bias` for the head.
    gamma: Range<usize>,
    beta: Range<usize>,
}

fn layout(plan: &[usize]) -> (Vec<LayerSlots>, usize) {
    let mut slots = Vec::new();
    let mut offset = 0;
    let layers = plan.len() - 1;
    for l in 0..layers {
        let (cin, cout) = (plan[l], plan[l + 1]);
        let weight = offset..offset + cout * cin * 9;
        offset = weight.end;
        let (gamma, beta) = if l + 1 < layers {
            let g = offset..offset + cout;
            let b = g.end..g.end + cout;
            offset = b.end;
            (g, b)
        } else {
            let b = offset..offset + cout;
            offset = b.end;
            (0..0, b)
        };
        slots.push(LayerSlots {
            cin,
            cout,
            weight,
            gamma,
            beta,
        });
    }
    (slots, offset)
}

/// How batch norm obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Per-call statistics over the spatial positions of the single image.
    Batch,
    /// Frozen running statistics.
    Running,
}

/// Per-channel batch statistics of every normalized block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    plan: Vec<usize>,
    params: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    running_initialized: bool,
    init_seed: u64,
}

struct BlockCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    pre: Array2<f64>,
}

pub(crate) struct ForwardCache {
    width: usize,
    height: usize,
    blocks: Vec<BlockCache>,
    head_input: Array2<f64>,
    output: Vec<f64>,
    stats: BatchStats,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn stats(&self) -> &BatchStats {
        &self.stats
    }
}

/// Patch matrix `(C*9, rows.len()*W)` of a `(C, H*W)` input for the output
/// rows `rows` of a 3x3 same-padded conv.
fn im2col_rows(input: ArrayView2<f64>, w: usize, h: usize, rows: Range<usize>) -> Array2<f64> {
    let c = input.nrows();
    let mut cols = Array2::<f64>::zeros((c * 9, rows.len() * w));
    for ch in 0..c {
        let src = input.row(ch);
        let src = src.as_slice().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let mut dst = cols.row_mut(ch * 9 + ky * 3 + kx);
                let dst = dst.as_slice_mut().expect("contiguous rows");
                for (i, y) in rows.clone().enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[i * w..(i + 1) * w];
                    // shift by kx - 1 with zero fill
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_rows`]: scatter-adds patch gradients onto `out`.
fn col2im_rows(cols: ArrayView2<f64>, w: usize, h: usize, rows: Range<usize>, out: &mut Array2<f64>) {
    for ch in 0..out.nrows() {
        let mut dst = out.row_mut(ch);
        let dst = dst.as_slice_mut().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(ch * 9 + ky * 3 + kx);
                let src = src.as_slice().expect("contiguous rows");
                for (i, y) in rows.clone().enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &src[i * w..(i + 1) * w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Output rows per conv tile, about 512 positions so the patch matrix stays
/// small enough to be cached and recycled by the allocator.
fn tile_rows(w: usize, h: usize) -> usize {
    (512 / w).clamp(1, h)
}

fn tiles(w: usize, h: usize) -> impl Iterator<Item = Range<usize>> {
    let step = tile_rows(w, h);
    (0..h).step_by(step).map(move |y0| y0..(y0 + step).min(h))
}

/// `weights (Cout, Cin*9)` convolved with `x (Cin, H*W)`.
fn conv_forward(x: ArrayView2<f64>, weights: ArrayView2<f64>, w: usize, h: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((weights.nrows(), w * h));
    for rows in tiles(w, h) {
        let cols = im2col_rows(x, w, h, rows.clone());
        general_mat_mul(1.0, &weights, &cols, 0.0, &mut out.slice_mut(s![.., rows.start * w..rows.end * w]));
    }
    out
}

/// Weight gradient and (optionally) input gradient of [`conv_forward`].
fn conv_backward(
    x: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    dout: ArrayView2<f64>,
    w: usize,
    h: usize,
    input_grad: bool,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut gw = Array2::<f64>::zeros(weights.raw_dim());
    let mut dx = input_grad.then(|| Array2::<f64>::zeros((x.nrows(), w * h)));
    for rows in tiles(w, h) {
        let cols = im2col_rows(x, w, h, rows.clone());
        let d = dout.slice(s![.., rows.start * w..rows.end * w]);
        general_mat_mul(1.0, &d, &cols.t(), 1.0, &mut gw);
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<f64>::zeros(cols.raw_dim());
            general_mat_mul(1.0, &weights.t(), &d, 0.0, &mut dcols);
            col2im_rows(dcols.view(), w, h, rows, dx);
        }
    }
    (gw, dx)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GeneratorNet {
    /// He-normal conv weights (LeakyReLU gain), unit scale, zero shift.
    pub fn new(plan: &[usize], seed: u64) -> Result<Self> {
        if plan.len() < 2 || plan.contains(&0) || *plan.last().unwrap() != 1 {
            return Err(Error::Parameter(format!(
                "channel plan must have >= 2 positive entries ending in 1, got {plan:?}"
            )));
        }
        let (slots, total) = layout(plan);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &slots {
            let fan_in = (s.cin * 9) as f64;
            let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[s.weight.clone()] {
                *p = normal.sample(&mut rng);
            }
            params[s.gamma.clone()].iter_mut().for_each(|g| *g = 1.0);
        }
        let blocks = &plan[1..plan.len() - 1];
        Ok(Self {
            plan: plan.to_vec(),
            params,
            running_mean: blocks.iter().map(|&c| vec![0.0; c]).collect(),
            running_var: blocks.iter().map(|&c| vec![1.0; c]).collect(),
            running_initialized: false,
            init_seed: seed,
        })
    }

    pub fn with_default_plan(seed: u64) -> Self {
        Self::new(&DEFAULT_PLAN, seed).expect("default plan is valid")
    }

    pub fn plan(&self) -> &[usize] {
        &self.plan
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn running_stats(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.running_mean, &self.running_var)
    }

    /// Exponential moving average of the batch statistics; the first update
    /// seeds the averages with the observed statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let keep = if self.running_initialized { BN_MOMENTUM } else { 0.0 };
        for (run, new) in self.running_mean.iter_mut().zip(&stats.mean) {
            run.iter_mut().zip(new).for_each(|(r, n)| *r = keep * *r + (1.0 - keep) * n);
        }
        for (run, new) in self.running_var.iter_mut().zip(&stats.var) {
            run.iter_mut().zip(new).for_each(|(r, n)| *r = keep * *r + (1.0 - keep) * n);
        }
        self.running_initialized = true;
    }

    fn check_input(&self, input: &[f64], w: usize, h: usize) -> Result<()> {
        if input.len() != w * h * self.plan[0] || w < 2 || h < 2 {
            return Err(Error::Dimension(format!(
                "generator input of {} values does not match {}x{}x{}",
                input.len(),
                self.plan[0],
                h,
                w
            )));
        }
        Ok(())
    }

    /// Forward pass; returns the `(0, 1)` output on the input grid.
    pub fn forward(&self, input: &[f64], w: usize, h: usize, mode: BnMode) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input, w, h, mode)?.output)
    }

    pub(crate) fn forward_cached(&self, input: &[f64], w: usize, h: usize, mode: BnMode) -> Result<ForwardCache> {
        self.check_input(input, w, h)?;
        let (slots, _) = layout(&self.plan);
        let hw = w * h;
        let mut x = Array2::from_shape_vec((self.plan[0], hw), input.to_vec()).expect("shape checked");
        let mut blocks = Vec::with_capacity(slots.len() - 1);
        let mut stats = BatchStats::default();

        for (b, s) in slots[..slots.len() - 1].iter().enumerate() {
            let weights = ArrayView2::from_shape((s.cout, s.cin * 9), &self.params[s.weight.clone()]).expect("layout");
            let conv = conv_forward(x.view(), weights, w, h);

            let gamma = &self.params[s.gamma.clone()];
            let beta = &self.params[s.beta.clone()];
            let mut inv_std = vec![0.0; s.cout];
            let mut means = vec![0.0; s.cout];
            let mut vars = vec![0.0; s.cout];
            let mut xhat = conv;
            let mut pre = Array2::<f64>::zeros((s.cout, hw));
            for c in 0..s.cout {
                let mut row = xhat.row_mut(c);
                let (mean, var) = match mode {
                    BnMode::Batch => {
                        let mean = row.sum() / hw as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                        (mean, var)
                    }
                    BnMode::Running => (self.running_mean[b][c], self.running_var[b][c]),
                };
                means[c] = mean;
                vars[c] = var;
                let is = 1.0 / (var + BN_EPSILON).sqrt();
                inv_std[c] = is;
                row.iter_mut().for_each(|v| *v = (*v - mean) * is);
                let mut prow = pre.row_mut(c);
                prow.iter_mut().zip(row.iter()).for_each(|(p, xh)| *p = gamma[c] * xh + beta[c]);
            }
            stats.mean.push(means);
            stats.var.push(vars);
            let act = pre.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, act),
                xhat,
                inv_std,
                pre,
            });
        }

        let head = slots.last().expect("at least one layer");
        let weights = ArrayView2::from_shape((head.cout, head.cin * 9), &self.params[head.weight.clone()]).expect("layout");
        let z = conv_forward(x.view(), weights, w, h);
        let bias = self.params[head.beta.start];
        let output = z.iter().map(|v| sigmoid(v + bias)).collect();
        Ok(ForwardCache {
            width: w,
            height: h,
            blocks,
            head_input: x,
            output,
            stats,
        })
    }

    /// Reverse pass for a batch-statistics forward; `d_output` is the loss
    /// gradient with respect to the sigmoid output.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_output: &[f64]) -> Vec<f64> {
        let (slots, total) = layout(&self.plan);
        let (w, h) = (cache.width, cache.height);
        let hw = w * h;
        let mut grad = vec![0.0; total];

        let head = slots.last().expect("at least one layer");
        let dz: Vec<f64> = d_output.iter().zip(&cache.output).map(|(g, o)| g * o * (1.0 - o)).collect();
        grad[head.beta.start] = dz.iter().sum();
        let dz = Array2::from_shape_vec((1, hw), dz).expect("shape");
        let weights = ArrayView2::from_shape((head.cout, head.cin * 9), &self.params[head.weight.clone()]).expect("layout");
        let (gw, dx) = conv_backward(cache.head_input.view(), weights, dz.view(), w, h, true);
        grad[head.weight.clone()].copy_from_slice(gw.as_slice().expect("contiguous"));
        let mut dx = dx.expect("requested");

        for (b, s) in slots[..slots.len() - 1].iter().enumerate().rev() {
            let cache_b = &cache.blocks[b];
            let gamma = &self.params[s.gamma.clone()];
            // LeakyReLU
            let mut dpre = dx;
            dpre.zip_mut_with(&cache_b.pre, |d, &p| {
                if p <= 0.0 {
                    *d *= LEAKY_SLOPE
                }
            });
            // batch norm with batch statistics
            let mut dconv = Array2::<f64>::zeros((s.cout, hw));
            for c in 0..s.cout {
                let dy = dpre.row(c);
                let xh = cache_b.xhat.row(c);
                let sum_dy: f64 = dy.sum();
                let sum_dy_xh: f64 = dy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                grad[s.beta.start + c] = sum_dy;
                grad[s.gamma.start + c] = sum_dy_xh;
                let k = gamma[c] * cache_b.inv_std[c];
                let (mdy, mdyx) = (sum_dy / hw as f64, sum_dy_xh / hw as f64);
                let mut out = dconv.row_mut(c);
                for ((o, &g), &x) in out.iter_mut().zip(dy.iter()).zip(xh.iter()) {
                    *o = k * (g - mdy - x * mdyx);
                }
            }
            let weights = ArrayView2::from_shape((s.cout, s.cin * 9), &self.params[s.weight.clone()]).expect("layout");
            // the network input needs no gradient
            let (gw, d_input) = conv_backward(cache_b.input.view(), weights, dconv.view(), w, h, b > 0);
            grad[s.weight.clone()].copy_from_slice(gw.as_slice().expect("contiguous"));
            dx = d_input.unwrap_or_default();
        }
        grad
    }

    /// Sign pattern of every LeakyReLU input (for locating kinks).
    pub fn activation_signs(&self, input: &[f64], w: usize, h: usize) -> Result<Vec<bool>> {
        let cache = self.forward_cached(input, w, h, BnMode::Batch)?;
        Ok(cache.blocks.iter().flat_map(|b| b.pre.iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect())
    }

    /// Binary checkpoint: `SPIN`, version, channel plan, init seed, the flat
    /// parameter vector and the running statistics, all little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.plan.len() as u32).to_le_bytes())?;
        for &c in &self.plan {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        w.write_all(&self.init_seed.to_le_bytes())?;
        w.write_all(&[u8::from(self.running_initialized)])?;
        for v in self.params.iter().chain(self.running_mean.iter().flatten()).chain(self.running_var.iter().flatten()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut offset = 0usize;
        let take = |r: &mut R, n: usize, offset: &mut usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::format(*offset, "unexpected end of checkpoint"),
                _ => Error::Io(e),
            })?;
            *offset += n;
            Ok(buf)
        };
        if take(&mut r, 4, &mut offset)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected SPIN"));
        }
        let version = u16::from_le_bytes(take(&mut r, 2, &mut offset)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(take(&mut r, 4, &mut offset)?.try_into().unwrap()) as usize;
        if !(2..=64).contains(&len) {
            return Err(Error::format(6, format!("implausible plan length {len}")));
        }
        let mut plan = Vec::with_capacity(len);
        for _ in 0..len {
            let at = offset;
            let c = u32::from_le_bytes(take(&mut r, 4, &mut offset)?.try_into().unwrap()) as usize;
            if c == 0 || c > 4096 {
                return Err(Error::format(at, format!("implausible channel count {c}")));
            }
            plan.push(c);
        }
        let seed = u64::from_le_bytes(take(&mut r, 8, &mut offset)?.try_into().unwrap());
        let mut net = Self::new(&plan, seed).map_err(|e| Error::format(10, e.to_string()))?;
        net.running_initialized = take(&mut r, 1, &mut offset)?[0] != 0;
        let read_f64 = |r: &mut R, offset: &mut usize| -> Result<f64> {
            let at = *offset;
            let v = f64::from_le_bytes(take(r, 8, offset)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(at, "non-finite value"));
            }
            Ok(v)
        };
        for i in 0..net.params.len() {
            net.params[i] = read_f64(&mut r, &mut offset)?;
        }
        for ch in net.running_mean.iter_mut().chain(net.running_var.iter_mut()) {
            for v in ch.iter_mut() {
                *v = read_f64(&mut r, &mut offset)?;
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format(offset, "trailing bytes after checkpoint"));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPIN";
const CHECKPOINT_VERSION: u16 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| ((i * 37 % 101) as f64) / 100.0).collect()
    }

    #[test]
    fn shapes_and_range() {
        let net = GeneratorNet::with_default_plan(3);
        let out = net.forward(&input(16), 16, 16, BnMode::Batch).unwrap();
        assert_eq!(out.len(), 256);
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
        assert!(net.forward(&input(16), 8, 8, BnMode::Batch).is_err());
        let rect = net.forward(&vec![0.5; 8 * 4], 8, 4, BnMode::Batch).unwrap();
        assert_eq!(rect.len(), 32);
    }

    #[test]
    fn deterministic_forward() {
        let net = GeneratorNet::with_default_plan(11);
        let a = net.forward(&input(8), 8, 8, BnMode::Batch).unwrap();
        let b = net.forward(&input(8), 8, 8, BnMode::Batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(GeneratorNet::with_default_plan(11), net);
        assert_ne!(GeneratorNet::with_default_plan(12).params(), net.params());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (c, w, h) = (2, 5, 4);
        let rows = 1..3;
        let x = Array2::from_shape_fn((c, w * h), |(a, b)| ((a * 31 + b * 7) % 13) as f64 - 6.0);
        let y = Array2::from_shape_fn((c * 9, w * rows.len()), |(a, b)| ((a * 5 + b * 3) % 11) as f64 * 0.1);
        let lhs: f64 = im2col_rows(x.view(), w, h, rows.clone()).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut back = Array2::zeros((c, w * h));
        col2im_rows(y.view(), w, h, rows, &mut back);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn tiled_conv_matches_direct_sum_and_its_adjoints() {
        // wide enough for one row per tile
        let (cin, cout, w, h) = (2, 3, 600, 3);
        assert_eq!(tiles(w, h).count(), 3);
        let x = Array2::from_shape_fn((cin, w * h), |(a, b)| ((a * 17 + b * 13) % 19) as f64 * 0.1 - 0.9);
        let k = Array2::from_shape_fn((cout, cin * 9), |(a, b)| ((a * 7 + b * 5) % 11) as f64 * 0.1 - 0.5);
        let out = conv_forward(x.view(), k.view(), w, h);
        for (o, y, px) in [(0, 0, 0), (1, 1, 7), (2, 2, 599), (1, 0, 300)] {
            let mut acc = 0.0;
            for c in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, px as isize + kx as isize - 1);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += k[[o, c * 9 + ky * 3 + kx]] * x[[c, sy as usize * w + sx as usize]];
                        }
                    }
                }
            }
            assert!((out[[o, y * w + px]] - acc).abs() < 1e-12);
        }
        let dout = Array2::from_shape_fn((cout, w * h), |(a, b)| ((a * 3 + b * 11) % 7) as f64 - 3.0);
        let (gw, dx) = conv_backward(x.view(), k.view(), dout.view(), w, h, true);
        let dx = dx.unwrap();
        let inner: f64 = out.iter().zip(dout.iter()).map(|(a, b)| a * b).sum();
        let via_w: f64 = gw.iter().zip(k.iter()).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        assert!((inner - via_w).abs() < 1e-9 * inner.abs());
        assert!((inner - via_x).abs() < 1e-9 * inner.abs());
        assert!(conv_backward(x.view(), k.view(), dout.view(), w, h, false).1.is_none());
    }

    #[test]
    fn conv_matches_direct_sum() {
        // one block: check the conv output via the normalized activations
        let net = GeneratorNet::new(&[1, 1], 5).unwrap();
        let (w, h) = (5, 4);
        let x = input(5)[..20].to_vec();
        let out = net.forward(&x, w, h, BnMode::Batch).unwrap();
        let k = &net.params()[0..9];
        let b = net.params()[9];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += k[ky * 3 + kx] * x[sy as usize * w + sx as usize];
                        }
                    }
                }
                assert!((out[y * w + xx] - sigmoid(acc)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_sum_of_squares() {
        let net = GeneratorNet::new(&[1, 3, 2, 1], 8).unwrap();
        let (w, h) = (6, 5);
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.77).sin().abs()).collect();
        let target: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).cos() * 0.5 + 0.5).collect();
        let loss = |n: &GeneratorNet| -> f64 {
            n.forward(&x, w, h, BnMode::Batch).unwrap().iter().zip(&target).map(|(o, t)| (o - t).powi(2)).sum()
        };
        let cache = net.forward_cached(&x, w, h, BnMode::Batch).unwrap();
        let d_out: Vec<f64> = cache.output().iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
        let grad = net.backward(&cache, &d_out);
        let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        for i in 0..net.num_params() {
            let mut p = net.clone();
            let h_step = 1e-6;
            p.params_mut()[i] += h_step;
            let up = loss(&p);
            p.params_mut()[i] -= 2.0 * h_step;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h_step);
            let denom = grad[i].abs().max(fd.abs()).max(1e-3 * scale);
            assert!((grad[i] - fd).abs() / denom < 1e-5, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut net = GeneratorNet::new(&[1, 4, 1], 77).unwrap();
        net.params_mut()[3] = 0.125;
        let stats = net.forward_cached(&input(4), 4, 4, BnMode::Batch).unwrap().stats().clone();
        net.update_running_stats(&stats);
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SPIN");
        let back = GeneratorNet::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, net);

        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(again, bytes);

        assert!(matches!(GeneratorNet::read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(GeneratorNet::read_checkpoint(&bad[..]), Err(Error::Format { offset: 0, .. })));
    }
}
