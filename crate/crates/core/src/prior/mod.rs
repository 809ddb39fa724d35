//! Untrained-generator reconstruction: a randomly initialized convolutional
//! network is fitted, per measurement, so that its output pushed through the
//! physical forward model reproduces the bucket readings.
//!
//! Chain: `o = f(input)` -> amplitude `sqrt(o)`, zero phase -> propagate by
//! the assumed distance -> `|E|^2` -> Hadamard sensing -> squared error
//! against the readings, plus a small TV penalty on `o`.

pub mod adam;
pub mod net;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::classical::{dgi_reconstruct, diff, diff_adjoint, total_variation, Method, ReconResult};
use crate::encoding::PatternSet;
use crate::error::{Error, Result};
use crate::field::IntensityImage;
use crate::measurement::{Measurement, SensingOperator};
use crate::propagation::{PropagationSpec, Propagator};

pub use adam::AdamState;
pub use net::{BatchStats, BnMode, GeneratorNet, DEFAULT_PLAN};

pub const DEFAULT_ITERATIONS: usize = 300;
pub const DEFAULT_TV_WEIGHT: f64 = 1e-10;

/// The fixed part of the loss: propagation and sensing for one grid.
pub struct PhysicsChain<'a> {
    set: &'a PatternSet,
    op: SensingOperator<'a>,
    propagator: Propagator,
    identity: bool,
    pitch: f64,
}

impl<'a> PhysicsChain<'a> {
    /// `pitch` is the object-plane sample spacing on the pattern grid.
    pub fn new(set: &'a PatternSet, prop: PropagationSpec, pitch: f64) -> Result<Self> {
        let n = set.order();
        let identity = prop.distance == 0.0 && !prop.band_limit;
        Ok(Self {
            set,
            op: SensingOperator::new(set),
            propagator: Propagator::new(n, n, pitch, prop)?,
            identity,
            pitch,
        })
    }

    pub fn order(&self) -> usize {
        self.set.order()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    fn diffracted_field(&self, object: &[f64]) -> Vec<Complex64> {
        let mut field: Vec<Complex64> = object.iter().map(|&o| Complex64::new(o.max(0.0).sqrt(), 0.0)).collect();
        if !self.identity {
            self.propagator.apply_raw(&mut field, false);
        }
        field
    }

    /// Noiseless readings predicted for an object-plane intensity.
    pub fn predict(&self, object: &[f64]) -> Vec<f64> {
        let diffracted: Vec<f64> = self.diffracted_field(object).iter().map(|e| e.norm_sqr()).collect();
        self.op.forward(&diffracted)
    }

    /// `sum (pred - readings)^2` and its gradient with respect to `object`.
    /// `object` must be strictly positive.
    pub fn data_loss_and_gradient(&self, object: &[f64], readings: &[f64]) -> Result<(f64, Vec<f64>)> {
        if object.len() != self.set.pixels() || readings.len() != self.set.count() {
            return Err(Error::Dimension(format!(
                "object of {} values / {} readings do not match {} pixels / {} patterns",
                object.len(),
                readings.len(),
                self.set.pixels(),
                self.set.count()
            )));
        }
        let field = self.diffracted_field(object);
        if field.iter().any(|e| !(e.re.is_finite() && e.im.is_finite())) {
            return Err(Error::Numerical {
                stage: "propagation",
                detail: "non-finite diffracted field".into(),
            });
        }
        let diffracted: Vec<f64> = field.iter().map(|e| e.norm_sqr()).collect();
        let residual: Vec<f64> = self.op.forward(&diffracted).iter().zip(readings).map(|(p, r)| p - r).collect();
        let loss: f64 = residual.iter().map(|r| r * r).sum();
        if !loss.is_finite() {
            return Err(Error::Numerical {
                stage: "sensing",
                detail: format!("non-finite data loss {loss}"),
            });
        }
        let two_r: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
        let g_intensity = self.op.adjoint(&two_r);
        let mut g_field: Vec<Complex64> = g_intensity.iter().zip(&field).map(|(&g, &e)| 2.0 * g * e).collect();
        if !self.identity {
            self.propagator.apply_raw(&mut g_field, true);
        }
        let grad = g_field.iter().zip(object).map(|(g, &o)| g.re / (2.0 * o.sqrt())).collect();
        Ok((loss, grad))
    }
}

/// Subgradient of the anisotropic TV (sign(0) taken as 0).
pub fn total_variation_gradient(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = w * h;
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    diff(values, w, h, &mut p, &mut q);
    let sign = |v: &mut f64| *v = if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 };
    p.iter_mut().for_each(sign);
    q.iter_mut().for_each(sign);
    let mut out = vec![0.0; n];
    diff_adjoint(&p, &q, w, h, &mut out);
    out
}

/// Generator input: the correlation-imaging estimate rescaled to `[0, 1]`.
pub fn generator_input(meas: &Measurement, set: &PatternSet) -> Result<IntensityImage> {
    Ok(dgi_reconstruct(meas, set)?.image)
}

/// Forward pass with batch statistics (the mode used while fitting).
pub fn generate(net: &GeneratorNet, input: &IntensityImage) -> Result<IntensityImage> {
    generate_with_mode(net, input, BnMode::Batch)
}

pub fn generate_with_mode(net: &GeneratorNet, input: &IntensityImage, mode: BnMode) -> Result<IntensityImage> {
    let out = net.forward(input.values(), input.width(), input.height(), mode)?;
    IntensityImage::new(input.width(), input.height(), input.pitch(), out)
}

/// One loss evaluation with everything the optimizer loop needs.
pub struct Evaluation {
    pub loss: f64,
    pub data_loss: f64,
    pub grad: Vec<f64>,
    pub output: Vec<f64>,
    pub stats: BatchStats,
}

pub fn evaluate(net: &GeneratorNet, input: &IntensityImage, readings: &[f64], chain: &PhysicsChain<'_>, tv_weight: f64) -> Result<Evaluation> {
    let n = chain.order();
    if input.width() != n || input.height() != n {
        return Err(Error::Dimension(format!(
            "generator input {}x{} does not match the {n}x{n} pattern grid",
            input.width(),
            input.height()
        )));
    }
    let cache = net.forward_cached(input.values(), n, n, BnMode::Batch)?;
    let output = cache.output().to_vec();
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            stage: "generator",
            detail: "non-finite network output".into(),
        });
    }
    let (data_loss, mut d_out) = chain.data_loss_and_gradient(&output, readings)?;
    let mut loss = data_loss;
    if tv_weight != 0.0 {
        loss += tv_weight * total_variation(&output, n, n);
        let tv_grad = total_variation_gradient(&output, n, n);
        d_out.iter_mut().zip(&tv_grad).for_each(|(d, t)| *d += tv_weight * t);
    }
    if !loss.is_finite() {
        return Err(Error::Numerical {
            stage: "regularizer",
            detail: format!("non-finite loss {loss}"),
        });
    }
    let grad = net.backward(&cache, &d_out);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            stage: "backward",
            detail: "non-finite parameter gradient".into(),
        });
    }
    Ok(Evaluation {
        loss,
        data_loss,
        grad,
        output,
        stats: cache.stats().clone(),
    })
}

/// `||I - I_hat||^2 + tv_weight * TV(o)` and its gradient with respect to the
/// network parameters.
pub fn loss_and_gradient(
    net: &GeneratorNet,
    input: &IntensityImage,
    meas: &Measurement,
    set: &PatternSet,
    prop: PropagationSpec,
    tv_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    meas.check_against(set)?;
    let chain = PhysicsChain::new(set, prop, meas.pitch)?;
    let e = evaluate(net, input, &meas.readings, &chain, tv_weight)?;
    Ok((e.loss, e.grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UntrainedOptions {
    pub iterations: usize,
    pub seed: u64,
    pub tv_weight: f64,
}

impl Default for UntrainedOptions {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            tv_weight: DEFAULT_TV_WEIGHT,
        }
    }
}

/// Fits a fresh generator and also returns it (for checkpointing).
pub fn fit_untrained(meas: &Measurement, set: &PatternSet, prop: PropagationSpec, opts: UntrainedOptions) -> Result<(ReconResult, GeneratorNet)> {
    meas.check_against(set)?;
    if opts.iterations == 0 {
        return Err(Error::Parameter("iterations must be >= 1".into()));
    }
    if !(opts.tv_weight >= 0.0 && opts.tv_weight.is_finite()) {
        return Err(Error::Parameter(format!("tv weight must be >= 0, got {}", opts.tv_weight)));
    }
    let input = generator_input(meas, set)?;
    let chain = PhysicsChain::new(set, prop, meas.pitch)?;
    let mut net = GeneratorNet::with_default_plan(opts.seed);
    let mut adam = AdamState::new(net.num_params());
    let mut history = Vec::with_capacity(opts.iterations);
    for iteration in 0..opts.iterations {
        let e = evaluate(&net, &input, &meas.readings, &chain, opts.tv_weight).map_err(|source| Error::Aborted {
            iteration,
            source: Box::new(source),
        })?;
        history.push(e.loss);
        net.update_running_stats(&e.stats);
        adam.update(net.params_mut(), &e.grad);
    }
    let image = generate(&net, &input)?;
    Ok((
        ReconResult {
            raw: image.values().to_vec(),
            image,
            method: Method::Untrained,
            iterations_used: opts.iterations,
            residual_history: history,
        },
        net,
    ))
}

pub fn reconstruct_untrained(meas: &Measurement, set: &PatternSet, prop: PropagationSpec, iterations: usize, seed: u64) -> Result<ReconResult> {
    let opts = UntrainedOptions {
        iterations,
        seed,
        ..UntrainedOptions::default()
    };
    Ok(fit_untrained(meas, set, prop, opts)?.0)
}

/// One reconstruction per assumed distance, same seed and patterns.
pub fn backprop_refocus_sweep(
    meas: &Measurement,
    set: &PatternSet,
    prop_base: PropagationSpec,
    distances: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<Vec<ReconResult>> {
    if distances.is_empty() {
        return Err(Error::Parameter("distance sweep is empty".into()));
    }
    distances
        .par_iter()
        .map(|&d| reconstruct_untrained(meas, set, prop_base.with_distance(d), iterations, seed))
        .collect()
}
