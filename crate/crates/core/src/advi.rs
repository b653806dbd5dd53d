//! Mean-field ADVI: parameter transforms, reparameterized ELBO estimates and
//! gradients, Adam with exponential step decay, and posterior sampling.
//!
//! The surrogate is a diagonal Gaussian over the unconstrained space, so
//! positive parameters get log-normal marginals and ordered thresholds are
//! realized as a first value plus cumulative exponentiated increments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{self, Real};
use crate::error::{contract, IrtError, Result};
use crate::factor::{self, LoadingMatrix};
use crate::grm::{self, Hyper, ModelParams, ModelShape, ResponseMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const MAX_REDRAWS: usize = 10;

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    /// `x = exp(u)`
    Log,
    /// `x_0 = u_0`, `x_k = x_{k-1} + exp(u_k)`
    Ordered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformBlock {
    pub name: String,
    pub kind: TransformKind,
    pub offset: usize,
    pub len: usize,
}

/// Layout of the unconstrained vector and the transform applied to each block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub blocks: Vec<TransformBlock>,
}

impl TransformSpec {
    pub fn new() -> Self {
        TransformSpec { blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: TransformKind, len: usize) -> &mut Self {
        let offset = self.dim();
        self.blocks.push(TransformBlock {
            name: name.into(),
            kind,
            offset,
            len,
        });
        self
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    /// Maps `u` to the constrained space, appending log-Jacobian terms.
    pub fn constrain<R: Real>(&self, u: &[R], out: &mut Vec<R>, log_jac: &mut Vec<R>) {
        debug_assert_eq!(u.len(), self.dim());
        out.reserve(u.len());
        for b in &self.blocks {
            let seg = &u[b.offset..b.offset + b.len];
            match b.kind {
                TransformKind::Identity => out.extend_from_slice(seg),
                TransformKind::Log => {
                    for &x in seg {
                        out.push(x.exp());
                        log_jac.push(x);
                    }
                }
                TransformKind::Ordered => {
                    if let Some((&first, rest)) = seg.split_first() {
                        let mut acc = first;
                        out.push(acc);
                        for &inc in rest {
                            acc = acc + inc.exp();
                            out.push(acc);
                            log_jac.push(inc);
                        }
                    }
                }
            }
        }
    }

    /// Plain-number forward map without Jacobian terms.
    pub fn forward(&self, u: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(u.len());
        let mut jac = Vec::new();
        self.constrain(u, &mut out, &mut jac);
        out
    }

    /// `log |det J|` of the forward map at `u`.
    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        let mut out = Vec::with_capacity(u.len());
        let mut jac = Vec::new();
        self.constrain(u, &mut out, &mut jac);
        jac.iter().sum()
    }

    /// Inverse of [`forward`](Self::forward). Fails on out-of-domain input.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return contract(format!("expected {} values, got {}", self.dim(), x.len()));
        }
        let mut u = Vec::with_capacity(x.len());
        for b in &self.blocks {
            let seg = &x[b.offset..b.offset + b.len];
            match b.kind {
                TransformKind::Identity => u.extend_from_slice(seg),
                TransformKind::Log => {
                    for &v in seg {
                        if !(v > 0.0) {
                            return contract(format!("{}: {v} is not positive", b.name));
                        }
                        u.push(v.ln());
                    }
                }
                TransformKind::Ordered => {
                    if let Some((&first, _)) = seg.split_first() {
                        u.push(first);
                        for w in seg.windows(2) {
                            let gap = w[1] - w[0];
                            if !(gap > 0.0) {
                                return contract(format!("{}: not strictly increasing", b.name));
                            }
                            u.push(gap.ln());
                        }
                    }
                }
            }
        }
        Ok(u)
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::new()
    }
}

/// Transform layout for the full model: traits, discriminations, thresholds
/// (one ordered block per item and dimension), threshold locations, then the
/// η, ξ, κ scales.
pub fn build_transforms(shape: &ModelShape) -> TransformSpec {
    let (p, i, d) = (shape.persons, shape.items, shape.dims);
    let mut t = TransformSpec::new();
    t.push("theta", TransformKind::Identity, p * d);
    t.push("lambda", TransformKind::Log, i * d);
    for item in 0..i {
        for dim in 0..d {
            t.push(
                format!("tau[{item},{dim}]"),
                TransformKind::Ordered,
                shape.categories[item] - 1,
            );
        }
    }
    t.push("mu", TransformKind::Identity, i * d);
    t.push("eta", TransformKind::Log, i);
    t.push("xi", TransformKind::Log, i * d);
    t.push("kappa", TransformKind::Log, d);
    t
}

/// Splits a constrained flat vector laid out by [`build_transforms`].
pub fn unflatten<R: Copy>(shape: &ModelShape, flat: &[R]) -> ModelParams<R> {
    let (p, i, d) = (shape.persons, shape.items, shape.dims);
    let mut at = 0;
    let mut take = |n: usize| {
        let s = flat[at..at + n].to_vec();
        at += n;
        s
    };
    let traits = take(p * d);
    let lambda = take(i * d);
    let mut thresholds = Vec::with_capacity(i * d);
    for item in 0..i {
        for _ in 0..d {
            thresholds.push(take(shape.categories[item] - 1));
        }
    }
    let mu = take(i * d);
    let eta = take(i);
    let xi = take(i * d);
    let kappa = take(d);
    ModelParams {
        shape: shape.clone(),
        traits,
        lambda,
        thresholds,
        mu,
        eta,
        xi,
        kappa,
    }
}

/// Inverse of [`unflatten`].
pub fn flatten<R: Copy>(params: &ModelParams<R>) -> Vec<R> {
    let mut v = Vec::new();
    v.extend_from_slice(&params.traits);
    v.extend_from_slice(&params.lambda);
    for t in &params.thresholds {
        v.extend_from_slice(t);
    }
    v.extend_from_slice(&params.mu);
    v.extend_from_slice(&params.eta);
    v.extend_from_slice(&params.xi);
    v.extend_from_slice(&params.kappa);
    v
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// A log density over an unconstrained vector, Jacobian included.
pub trait Model: Sync {
    fn dim(&self) -> usize;
    fn log_density<R: Real>(&self, u: &[R]) -> R;
    /// Rough node count of one recording.
    fn tape_capacity(&self) -> usize {
        self.dim() * 4 + 16
    }
}

struct AsScalarFn<'m, M>(&'m M);

impl<M: Model> diff::ScalarFn for AsScalarFn<'_, M> {
    fn eval<R: Real>(&self, x: &[R]) -> R {
        self.0.log_density(x)
    }
}

/// Wraps a model as a [`diff::ScalarFn`] for gradient checking.
pub fn as_scalar_fn<M: Model>(model: &M) -> impl diff::ScalarFn + '_ {
    AsScalarFn(model)
}

/// The full hierarchical model over every parameter.
#[derive(Debug, Clone)]
pub struct GrmModel<'a> {
    pub data: &'a ResponseMatrix,
    pub hyper: Hyper,
    pub shape: ModelShape,
    pub transform: TransformSpec,
}

impl<'a> GrmModel<'a> {
    pub fn new(data: &'a ResponseMatrix, dims: usize, hyper: Hyper) -> Result<Self> {
        let shape = ModelShape::for_data(data, dims);
        shape.validate()?;
        hyper.validate(dims)?;
        let transform = build_transforms(&shape);
        Ok(GrmModel {
            data,
            hyper,
            shape,
            transform,
        })
    }

    pub fn params(&self, u: &[f64]) -> ModelParams<f64> {
        unflatten(&self.shape, &self.transform.forward(u))
    }

    /// Log-Jacobian, prior and likelihood terms whose sum is the density.
    pub fn log_density_terms<R: Real>(&self, u: &[R]) -> Vec<R> {
        let mut x = Vec::with_capacity(u.len());
        let mut terms = Vec::with_capacity(self.data.observed() + 8 * u.len());
        self.transform.constrain(u, &mut x, &mut terms);
        let params = unflatten(&self.shape, &x);
        grm::prior_terms(&params, &self.hyper, &mut terms);
        grm::likelihood_terms(&params, self.data, self.hyper.nu, &mut terms);
        terms
    }
}

impl Model for GrmModel<'_> {
    fn dim(&self) -> usize {
        self.transform.dim()
    }

    fn log_density<R: Real>(&self, u: &[R]) -> R {
        R::sum(&self.log_density_terms(u))
    }

    fn tape_capacity(&self) -> usize {
        let per_response = 12 * self.shape.dims + 4;
        self.data.observed() * per_response + 12 * self.dim() + 64
    }
}

/// Traits of new respondents with item parameters held fixed; the scoring
/// counterpart of [`GrmModel`].
#[derive(Debug, Clone)]
pub struct TraitModel<'a> {
    pub data: &'a ResponseMatrix,
    /// Item parameters; its `traits` and person count are ignored.
    pub items: ModelParams<f64>,
    pub nu: f64,
}

impl<'a> TraitModel<'a> {
    pub fn new(data: &'a ResponseMatrix, items: &ModelParams<f64>, nu: f64) -> Result<Self> {
        let s = &items.shape;
        if s.items != data.items() || s.categories != data.categories() {
            return contract("item parameters do not match response layout");
        }
        let mut items = items.clone();
        items.shape.persons = data.persons();
        items.traits = vec![0.0; data.persons() * s.dims];
        items.validate()?;
        grm::check_data(&items, data)?;
        Ok(TraitModel { data, items, nu })
    }

    pub fn transform(&self) -> TransformSpec {
        let mut t = TransformSpec::new();
        t.push("theta", TransformKind::Identity, self.dim());
        t
    }
}

impl Model for TraitModel<'_> {
    fn dim(&self) -> usize {
        self.data.persons() * self.items.shape.dims
    }

    fn log_density<R: Real>(&self, u: &[R]) -> R {
        let c = |v: &[f64]| v.iter().map(|x| u[0].lift(*x)).collect::<Vec<R>>();
        let it = &self.items;
        let params = ModelParams {
            shape: it.shape.clone(),
            traits: u.to_vec(),
            lambda: c(&it.lambda),
            thresholds: it.thresholds.iter().map(|t| c(t)).collect(),
            mu: Vec::new(),
            eta: Vec::new(),
            xi: Vec::new(),
            kappa: Vec::new(),
        };
        let mut terms = Vec::with_capacity(self.data.observed() + u.len());
        for t in u {
            terms.push(-(t.square() * 0.5) - 0.5 * LN_2PI);
        }
        grm::likelihood_terms(&params, self.data, self.nu, &mut terms);
        R::sum(&terms)
    }

    fn tape_capacity(&self) -> usize {
        self.data.observed() * (12 * self.items.shape.dims + 4) + 4 * self.dim() + 64
    }
}

// ---------------------------------------------------------------------------
// Surrogate and ELBO
// ---------------------------------------------------------------------------

/// Diagonal Gaussian over the unconstrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub location: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub transform: TransformSpec,
}

impl VariationalPosterior {
    pub fn new(location: Vec<f64>, log_scale: Vec<f64>, transform: TransformSpec) -> Result<Self> {
        if location.len() != log_scale.len() || location.len() != transform.dim() {
            return contract("surrogate dimensions disagree with the transform layout");
        }
        Ok(VariationalPosterior {
            location,
            log_scale,
            transform,
        })
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.log_scale[k].exp()
    }

    /// Entropy of the diagonal Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_scale.iter().sum::<f64>() + 0.5 * self.dim() as f64 * (1.0 + LN_2PI)
    }

    /// `location + scale ⊙ eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.location
            .iter()
            .zip(&self.log_scale)
            .zip(eps)
            .map(|((m, w), e)| m + w.exp() * e)
            .collect()
    }

    pub fn draw_noise<G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// ELBO value with its gradient over the surrogate's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub elbo: f64,
    pub d_location: Vec<f64>,
    pub d_log_scale: Vec<f64>,
}

/// ELBO under fixed noise draws (common random numbers).
pub fn elbo_with_noise<M: Model>(model: &M, q: &VariationalPosterior, noise: &[Vec<f64>]) -> Result<f64> {
    if noise.is_empty() {
        return contract("at least one Monte Carlo draw required");
    }
    let mut total = 0.0;
    for eps in noise {
        let v = model.log_density(&q.reparameterize(eps));
        if !v.is_finite() {
            return Err(IrtError::Divergence {
                iteration: 0,
                retries: 0,
                last_finite: None,
            });
        }
        total += v;
    }
    Ok(total / noise.len() as f64 + q.entropy())
}

/// Monte Carlo ELBO estimate. Non-finite draws are redrawn up to 10 times.
pub fn elbo_estimate<M: Model, G: Rng + ?Sized>(
    model: &M,
    q: &VariationalPosterior,
    n_mc: usize,
    rng: &mut G,
) -> Result<f64> {
    if n_mc == 0 {
        return contract("at least one Monte Carlo draw required");
    }
    let mut total = 0.0;
    for _ in 0..n_mc {
        let mut tries = 0;
        loop {
            let v = model.log_density(&q.reparameterize(&q.draw_noise(rng)));
            if v.is_finite() {
                total += v;
                break;
            }
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(IrtError::Divergence {
                    iteration: 0,
                    retries: MAX_REDRAWS,
                    last_finite: None,
                });
            }
        }
    }
    Ok(total / n_mc as f64 + q.entropy())
}

fn draw_value_and_grad<M: Model>(model: &M, u: &[f64]) -> Option<(f64, Vec<f64>)> {
    let tape = diff::record_with_capacity(u, model.tape_capacity(), |x| vec![model.log_density(x)]).ok()?;
    let v = tape.value();
    if !v.is_finite() {
        return None;
    }
    let g = tape.backward().ok()?.into_vec();
    if g.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some((v, g))
}

/// Reparameterization gradient under fixed noise; `None` entries mark draws
/// whose density or gradient was not finite.
fn gradient_terms<M: Model>(
    model: &M,
    q: &VariationalPosterior,
    noise: &[Vec<f64>],
) -> Vec<Option<(f64, Vec<f64>)>> {
    noise
        .par_iter()
        .map(|eps| draw_value_and_grad(model, &q.reparameterize(eps)))
        .collect()
}

fn assemble(q: &VariationalPosterior, noise: &[Vec<f64>], terms: &[(f64, Vec<f64>)]) -> ElboGradient {
    let n = q.dim();
    let inv = 1.0 / terms.len() as f64;
    let mut d_loc = vec![0.0; n];
    let mut d_ls = vec![0.0; n];
    let mut value = 0.0;
    // canonical order: draw by draw
    for (eps, (v, g)) in noise.iter().zip(terms) {
        value += v;
        for k in 0..n {
            d_loc[k] += g[k] * inv;
            d_ls[k] += g[k] * q.log_scale[k].exp() * eps[k] * inv;
        }
    }
    for d in d_ls.iter_mut() {
        *d += 1.0; // entropy
    }
    ElboGradient {
        elbo: value * inv + q.entropy(),
        d_location: d_loc,
        d_log_scale: d_ls,
    }
}

/// ELBO and gradient under fixed noise (common random numbers).
pub fn elbo_gradient_with_noise<M: Model>(
    model: &M,
    q: &VariationalPosterior,
    noise: &[Vec<f64>],
) -> Result<ElboGradient> {
    if noise.is_empty() {
        return contract("at least one Monte Carlo draw required");
    }
    let terms: Option<Vec<_>> = gradient_terms(model, q, noise).into_iter().collect();
    match terms {
        Some(t) => Ok(assemble(q, noise, &t)),
        None => Err(IrtError::Divergence {
            iteration: 0,
            retries: 0,
            last_finite: None,
        }),
    }
}

/// Reparameterization-trick ELBO gradient from `n_mc` fresh draws.
pub fn elbo_gradient<M: Model, G: Rng + ?Sized>(
    model: &M,
    q: &VariationalPosterior,
    n_mc: usize,
    rng: &mut G,
) -> Result<ElboGradient> {
    if n_mc == 0 {
        return contract("at least one Monte Carlo draw required");
    }
    let mut noise: Vec<Vec<f64>> = (0..n_mc).map(|_| q.draw_noise(rng)).collect();
    let mut terms = gradient_terms(model, q, &noise);
    for k in 0..n_mc {
        let mut tries = 0;
        while terms[k].is_none() {
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(IrtError::Divergence {
                    iteration: 0,
                    retries: MAX_REDRAWS,
                    last_finite: None,
                });
            }
            noise[k] = q.draw_noise(rng);
            terms[k] = draw_value_and_grad(model, &q.reparameterize(&noise[k]));
        }
    }
    let terms: Vec<_> = terms.into_iter().map(|t| t.expect("filled")).collect();
    Ok(assemble(q, &noise, &terms))
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Model hyperconstants and optimizer settings for a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub dims: usize,
    pub nu: f64,
    pub eta0: f64,
    pub xi0: f64,
    pub kappa0_base: f64,
    pub kappa0_ratio: f64,
    /// Monte Carlo draws per ELBO estimate.
    pub mc_samples: usize,
    pub step_size: f64,
    pub decay_rate: f64,
    pub decay_interval: usize,
    pub step_floor: f64,
    pub max_iters: usize,
    pub window: usize,
    pub tolerance: f64,
    pub init_log_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            dims: 1,
            nu: 1.0,
            eta0: 0.01,
            xi0: 0.01,
            kappa0_base: 0.01,
            kappa0_ratio: 0.1,
            mc_samples: 8,
            step_size: 1e-3,
            decay_rate: 0.5,
            decay_interval: 2000,
            step_floor: 1e-4,
            max_iters: 20_000,
            window: 100,
            tolerance: 1e-4,
            init_log_scale: -2.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(IrtError::Validation("dims must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !(self.step_floor > 0.0) {
            return Err(IrtError::Validation("step sizes must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(IrtError::Validation("mc_samples must be at least 1".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) || self.decay_interval == 0 {
            return Err(IrtError::Validation("decay must lie in (0, 1] with a positive interval".into()));
        }
        if self.window == 0 || !(self.tolerance >= 0.0) {
            return Err(IrtError::Validation("window must be positive and tolerance nonnegative".into()));
        }
        self.hyper().validate(self.dims)
    }

    pub fn hyper(&self) -> Hyper {
        Hyper::with_schedule(
            self.dims,
            self.nu,
            self.eta0,
            self.xi0,
            self.kappa0_base,
            self.kappa0_ratio,
        )
    }

    /// Step size at iteration `t`: `max(floor, step · rate^(t / interval))`.
    pub fn step_at(&self, t: usize) -> f64 {
        let decayed = self.step_size * self.decay_rate.powf(t as f64 / self.decay_interval as f64);
        decayed.max(self.step_floor.min(self.step_size))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elbo: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub posterior: VariationalPosterior,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            params[k] += lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Maximizes the ELBO with Adam from `init`.
///
/// Stops after `max_iters` or once the mean ELBO of the latest window
/// improves on the previous window by less than `tolerance` (relative).
pub fn optimize<M: Model>(model: &M, init: VariationalPosterior, config: &FitConfig) -> Result<FitResult> {
    if init.dim() != model.dim() {
        return contract("surrogate dimension does not match the model");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = init.dim();
    let mut q = init;
    let mut adam = Adam::new(2 * n);
    let mut packed = vec![0.0; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut trace = Vec::new();
    let mut prev_window: Option<f64> = None;
    let mut converged = false;

    for it in 0..config.max_iters {
        let g = match elbo_gradient(model, &q, config.mc_samples, &mut rng) {
            Ok(g) => g,
            Err(IrtError::Divergence { retries, .. }) => {
                return Err(IrtError::Divergence {
                    iteration: it,
                    retries,
                    last_finite: Some(Box::new((q.location.clone(), q.log_scale.clone()))),
                })
            }
            Err(e) => return Err(e),
        };
        let lr = config.step_at(it);
        trace.push(TraceRow {
            iteration: it,
            elbo: g.elbo,
            step_size: lr,
        });

        packed[..n].copy_from_slice(&q.location);
        packed[n..].copy_from_slice(&q.log_scale);
        grad[..n].copy_from_slice(&g.d_location);
        grad[n..].copy_from_slice(&g.d_log_scale);
        adam.step(&mut packed, &grad, lr);
        q.location.copy_from_slice(&packed[..n]);
        q.log_scale.copy_from_slice(&packed[n..]);

        if (it + 1) % config.window == 0 {
            let w = &trace[trace.len() - config.window..];
            let mean = w.iter().map(|r| r.elbo).sum::<f64>() / w.len() as f64;
            if let Some(prev) = prev_window {
                if (mean - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.tolerance {
                    converged = true;
                    break;
                }
            }
            prev_window = Some(mean);
        }
    }
    Ok(FitResult {
        posterior: q,
        trace,
        converged,
    })
}

// ---------------------------------------------------------------------------
// GRM calibration
// ---------------------------------------------------------------------------

/// Starting point for a calibration run.
#[derive(Debug, Clone)]
pub enum Init {
    /// Discriminations from exploratory factor analysis of the data.
    FactorAnalysis,
    /// Discriminations seeded as one plus the given loadings.
    Loadings(LoadingMatrix),
    /// Every location taken from a parameter set.
    Params(ModelParams<f64>),
}

/// Thresholds from cumulative response proportions: `τ_k = −logit P(X > k)`.
pub fn empirical_thresholds(data: &ResponseMatrix, item: usize) -> Vec<f64> {
    let j = data.categories()[item];
    let mut counts = vec![0usize; j];
    for p in 0..data.persons() {
        if let Some(c) = data.get(p, item) {
            counts[c - 1] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let nf = n.max(1) as f64;
    let mut taus = Vec::with_capacity(j - 1);
    let mut above = n;
    for k in 0..j - 1 {
        above -= counts[k];
        let prop = ((above as f64).max(0.5) / nf).min(1.0 - 0.5 / nf.max(1.0));
        let prop = prop.clamp(1e-3, 1.0 - 1e-3);
        let mut tau = -(prop / (1.0 - prop)).ln();
        if let Some(&last) = taus.last() {
            tau = f64::max(tau, last + 0.05);
        }
        taus.push(tau);
    }
    taus
}

/// Builds the starting surrogate for a calibration run.
pub fn initial_posterior(
    data: &ResponseMatrix,
    config: &FitConfig,
    init: &Init,
) -> Result<VariationalPosterior> {
    let shape = ModelShape::for_data(data, config.dims);
    let transform = build_transforms(&shape);
    let params = match init {
        Init::Params(p) => {
            if p.shape != shape {
                return contract("initial parameters do not match the data shape");
            }
            p.validate()?;
            p.clone()
        }
        Init::FactorAnalysis => {
            let loadings = factor::exploratory(data, config.dims)?;
            default_params(data, &shape, &factor::init_from_loadings(&loadings))?
        }
        Init::Loadings(l) => default_params(data, &shape, &factor::init_from_loadings(l))?,
    };
    let location = transform.inverse(&flatten(&params))?;
    let log_scale = vec![config.init_log_scale; location.len()];
    VariationalPosterior::new(location, log_scale, transform)
}

fn default_params(data: &ResponseMatrix, shape: &ModelShape, lambda: &[f64]) -> Result<ModelParams<f64>> {
    let (p, i, d) = (shape.persons, shape.items, shape.dims);
    if lambda.len() != i * d {
        return contract(format!(
            "loadings cover {} entries, model needs {}",
            lambda.len(),
            i * d
        ));
    }
    let mut thresholds = Vec::with_capacity(i * d);
    let mut mu = Vec::with_capacity(i * d);
    for item in 0..i {
        let t = empirical_thresholds(data, item);
        for _ in 0..d {
            mu.push(t[0]);
            thresholds.push(t.clone());
        }
    }
    Ok(ModelParams {
        shape: shape.clone(),
        traits: vec![0.0; p * d],
        lambda: lambda.to_vec(),
        thresholds,
        mu,
        eta: vec![1.0; i],
        xi: vec![1.0; i * d],
        kappa: vec![1.0; d],
    })
}

/// A calibrated decoder: surrogate, trace and the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GrmFit {
    pub shape: ModelShape,
    pub hyper: Hyper,
    pub posterior: VariationalPosterior,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

/// Calibrates the full model on `data`.
pub fn fit(data: &ResponseMatrix, config: &FitConfig, init: &Init) -> Result<GrmFit> {
    config.validate()?;
    let model = GrmModel::new(data, config.dims, config.hyper())?;
    let q0 = initial_posterior(data, config, init)?;
    let res = optimize(&model, q0, config)?;
    Ok(GrmFit {
        shape: model.shape,
        hyper: model.hyper,
        posterior: res.posterior,
        trace: res.trace,
        converged: res.converged,
    })
}

impl GrmFit {
    /// Posterior-mean traits, `[person * dims + d]`. Exact because the trait
    /// transform is the identity.
    pub fn trait_means(&self) -> Vec<f64> {
        let b = &self.posterior.transform.blocks[0];
        self.posterior.location[b.offset..b.offset + b.len].to_vec()
    }

    /// Parameters at the surrogate location mapped to the constrained space.
    pub fn location_params(&self) -> ModelParams<f64> {
        unflatten(&self.shape, &self.posterior.transform.forward(&self.posterior.location))
    }

    /// Monte Carlo posterior mean of every constrained parameter.
    pub fn mean_params<G: Rng + ?Sized>(&self, draws: usize, rng: &mut G) -> Result<ModelParams<f64>> {
        let d = sample_posterior(&self.posterior, draws.max(2), rng)?;
        let n = d[0].len();
        let mut mean = vec![0.0; n];
        for x in &d {
            for k in 0..n {
                mean[k] += x[k] / d.len() as f64;
            }
        }
        let mut params = unflatten(&self.shape, &mean);
        // averages of ordered vectors stay ordered; traits are exact
        params.traits = self.trait_means();
        Ok(params)
    }

    /// Posterior expectation of the domain weights, `[item * dims + d]`.
    pub fn weight_means(&self, draws: &PosteriorDraws) -> Result<Vec<f64>> {
        let (i, d) = (self.shape.items, self.shape.dims);
        let mut acc = vec![0.0; i * d];
        for s in &draws.samples {
            for item in 0..i {
                let w = grm::domain_weights(s.item_lambda(item), self.hyper.nu)
                    .map_err(|_| IrtError::DegenerateItem { item })?;
                for k in 0..d {
                    acc[item * d + k] += w[k] / draws.samples.len() as f64;
                }
            }
        }
        Ok(acc)
    }

    pub fn draws<G: Rng + ?Sized>(&self, s: usize, rng: &mut G) -> Result<PosteriorDraws> {
        let samples = sample_posterior(&self.posterior, s, rng)?
            .into_iter()
            .map(|x| unflatten(&self.shape, &x))
            .collect();
        Ok(PosteriorDraws { samples })
    }
}

/// Joint parameter samples on the constrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub samples: Vec<ModelParams<f64>>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `S` independent draws from the surrogate, mapped to the constrained space.
pub fn sample_posterior<G: Rng + ?Sized>(
    q: &VariationalPosterior,
    s: usize,
    rng: &mut G,
) -> Result<Vec<Vec<f64>>> {
    if s < 2 {
        return contract(format!("need at least 2 posterior draws, got {s}"));
    }
    Ok((0..s)
        .map(|_| q.transform.forward(&q.reparameterize(&q.draw_noise(rng))))
        .collect())
}

/// Scores new respondents against fixed item parameters by fitting only
/// their traits. Returns the trait surrogate's location (posterior means).
pub fn fit_traits(
    data: &ResponseMatrix,
    items: &ModelParams<f64>,
    nu: f64,
    config: &FitConfig,
) -> Result<Vec<f64>> {
    let model = TraitModel::new(data, items, nu)?;
    let n = model.dim();
    let q0 = VariationalPosterior::new(vec![0.0; n], vec![config.init_log_scale; n], model.transform())?;
    Ok(optimize(&model, q0, config)?.posterior.location)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One coordinate with a standard normal prior and no data.
    struct StdNormal;
    impl Model for StdNormal {
        fn dim(&self) -> usize {
            1
        }
        fn log_density<R: Real>(&self, u: &[R]) -> R {
            -(u[0].square() * 0.5) - 0.5 * LN_2PI
        }
    }

    fn q1(m: f64, w: f64) -> VariationalPosterior {
        let mut t = TransformSpec::new();
        t.push("x", TransformKind::Identity, 1);
        VariationalPosterior::new(vec![m], vec![w], t).unwrap()
    }

    #[test]
    fn elbo_of_prior_matching_surrogate_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = elbo_estimate(&StdNormal, &q1(0.0, 0.0), 10_000, &mut rng).unwrap();
        assert!(e.abs() < 0.05, "{e}");
        let e = elbo_estimate(&StdNormal, &q1(1.0, 0.0), 10_000, &mut rng).unwrap();
        assert!((e + 0.5).abs() < 0.05, "{e}");
    }

    #[test]
    fn elbo_is_deterministic_for_a_seed() {
        let a = elbo_estimate(&StdNormal, &q1(0.3, -0.2), 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = elbo_estimate(&StdNormal, &q1(0.3, -0.2), 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradient_vanishes_at_optimum_under_common_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = q1(0.0, 0.0);
        let noise: Vec<Vec<f64>> = (0..16).map(|_| q.draw_noise(&mut rng)).collect();
        let g = elbo_gradient_with_noise(&StdNormal, &q, &noise).unwrap();
        // d/dm = -mean(eps) and d/dw = 1 - mean(eps²) only vanish in expectation,
        // but antithetic pairs make both exact
        let anti: Vec<Vec<f64>> = noise
            .iter()
            .flat_map(|e| [e.clone(), vec![-e[0]]])
            .collect();
        let g2 = elbo_gradient_with_noise(&StdNormal, &q, &anti).unwrap();
        assert!(g2.d_location[0].abs() < 1e-12);
        let m2: f64 = anti.iter().map(|e| e[0] * e[0]).sum::<f64>() / anti.len() as f64;
        assert!((g2.d_log_scale[0] - (1.0 - m2)).abs() < 1e-12);
        assert!(g.elbo.is_finite());
    }

    #[test]
    fn zero_budget_returns_initialization() {
        let q = q1(0.7, -1.0);
        let cfg = FitConfig {
            max_iters: 0,
            ..FitConfig::default()
        };
        let r = optimize(&StdNormal, q.clone(), &cfg).unwrap();
        assert_eq!(r.posterior, q);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn optimizer_finds_conjugate_optimum() {
        let cfg = FitConfig {
            step_size: 0.05,
            step_floor: 0.01,
            max_iters: 3000,
            mc_samples: 4,
            tolerance: -1.0,
            ..FitConfig::default()
        };
        let r = optimize(&StdNormal, q1(2.0, -2.0), &cfg).unwrap();
        assert!(r.posterior.location[0].abs() < 0.1, "{:?}", r.posterior);
        assert!(r.posterior.log_scale[0].abs() < 0.15, "{:?}", r.posterior);
    }

    #[test]
    fn step_schedule() {
        let c = FitConfig::default();
        assert_eq!(c.step_at(0), 1e-3);
        assert!((c.step_at(2000) - 5e-4).abs() < 1e-15);
        assert_eq!(c.step_at(100_000), 1e-4);
    }

    #[test]
    fn transform_shapes_and_jacobian() {
        let shape = ModelShape {
            persons: 2,
            items: 2,
            dims: 1,
            categories: vec![2, 4],
        };
        let t = build_transforms(&shape);
        let tau0 = t.blocks.iter().find(|b| b.name == "tau[0,0]").unwrap();
        assert_eq!(tau0.len, 1);
        let tau1 = t.blocks.iter().find(|b| b.name == "tau[1,0]").unwrap();
        assert_eq!(tau1.len, 3);

        let mut lt = TransformSpec::new();
        lt.push("s", TransformKind::Log, 1);
        assert_eq!(lt.log_jacobian(&[0.37]), 0.37);
        assert_eq!(lt.forward(&[0.0]), vec![1.0]);
    }

    #[test]
    fn sample_posterior_needs_two_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_posterior(&q1(0.0, 0.0), 1, &mut rng).is_err());
        assert_eq!(sample_posterior(&q1(0.0, 0.0), 2, &mut rng).unwrap().len(), 2);
    }

    #[test]
    fn empirical_thresholds_are_ordered() {
        let rows: Vec<Vec<Option<usize>>> = [1, 1, 2, 4, 4, 4]
            .iter()
            .map(|&c| vec![Some(c)])
            .collect();
        let data = ResponseMatrix::from_rows(&rows).unwrap();
        let t = empirical_thresholds(&data, 0);
        assert_eq!(t.len(), 3);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        // P(X > 1) = 4/6
        assert!((t[0] + (4.0f64 / 2.0).ln()).abs() < 1e-12);
    }
}
