//! Ground-truth parameter sets and synthetic responses drawn from the
//! generative model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, IrtError, Result};
use crate::grm::{self, ModelParams, ModelShape, ResponseMatrix};

/// Recipe for a sparse ground truth: every item loads on exactly one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub persons: usize,
    pub items: usize,
    pub dims: usize,
    pub categories: usize,
    /// 0-based dimension per item. Empty means contiguous equal blocks.
    pub assignment: Vec<usize>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Consecutive thresholds sit `threshold_spread · 2/(J−1)` apart.
    pub threshold_spread: f64,
    /// Standard deviation of the threshold centre μ.
    pub location_sd: f64,
    /// Fraction of cells masked completely at random.
    pub missing_rate: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            persons: 500,
            items: 10,
            dims: 1,
            categories: 5,
            assignment: Vec::new(),
            lambda_min: 1.0,
            lambda_max: 2.5,
            threshold_spread: 1.0,
            location_sd: 0.5,
            missing_rate: 0.0,
        }
    }
}

impl TruthSpec {
    /// Dimension of each item, expanding the contiguous-blocks default.
    pub fn resolved_assignment(&self) -> Vec<usize> {
        if !self.assignment.is_empty() {
            return self.assignment.clone();
        }
        (0..self.items)
            .map(|i| i * self.dims / self.items.max(1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.persons == 0 || self.items == 0 || self.dims == 0 {
            return contract("persons, items and dims must all be positive");
        }
        if self.categories < 2 {
            return contract("at least 2 categories required");
        }
        let a = self.resolved_assignment();
        if a.len() != self.items {
            return contract(format!(
                "assignment covers {} items, spec has {}",
                a.len(),
                self.items
            ));
        }
        if let Some(d) = a.iter().find(|&&d| d >= self.dims) {
            return contract(format!("assignment names dimension {d} of {}", self.dims));
        }
        if !(self.lambda_min > 0.0) || !(self.lambda_max >= self.lambda_min) {
            return contract("discrimination range must satisfy 0 < min <= max");
        }
        if !(self.threshold_spread > 0.0) || !(self.location_sd >= 0.0) {
            return contract("threshold spread must be positive and location sd nonnegative");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return contract("missing rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Draws a sparse ground truth.
///
/// Active discriminations are uniform on `[lambda_min, lambda_max]`, inactive
/// ones are exactly zero. Thresholds are equally spaced around a normal draw
/// of μ and traits are i.i.d. standard normal. Scales η, ξ, κ are set to one.
pub fn make_sparse_truth<G: Rng + ?Sized>(spec: &TruthSpec, rng: &mut G) -> Result<ModelParams<f64>> {
    spec.validate()?;
    let (p, i, d, j) = (spec.persons, spec.items, spec.dims, spec.categories);
    let assignment = spec.resolved_assignment();
    let gap = spec.threshold_spread * 2.0 / (j - 1) as f64;
    let centre = j as f64 / 2.0;
    let loc = Normal::new(0.0, spec.location_sd).map_err(|e| IrtError::Contract(e.to_string()))?;

    let mut lambda = vec![0.0; i * d];
    let mut thresholds = Vec::with_capacity(i * d);
    let mut mu = Vec::with_capacity(i * d);
    for item in 0..i {
        lambda[item * d + assignment[item]] = rng.random_range(spec.lambda_min..=spec.lambda_max);
        for _ in 0..d {
            let m: f64 = loc.sample(rng);
            mu.push(m);
            thresholds.push((1..j).map(|k| m + (k as f64 - centre) * gap).collect());
        }
    }
    let traits = (0..p * d).map(|_| rng.sample(StandardNormal)).collect();
    let params = ModelParams {
        shape: ModelShape {
            persons: p,
            items: i,
            dims: d,
            categories: vec![j; i],
        },
        traits,
        lambda,
        thresholds,
        mu,
        eta: vec![1.0; i],
        xi: vec![1.0; i * d],
        kappa: vec![1.0; d],
    };
    params.validate()?;
    Ok(params)
}

/// Category probabilities of the mixture for one person and item.
pub fn category_probs(params: &ModelParams<f64>, person: usize, item: usize, nu: f64) -> Result<Vec<f64>> {
    let theta = params.theta(person);
    let view = params.item(item);
    let w = grm::domain_weights(view.lambda, nu).map_err(|e| match e {
        IrtError::DegenerateItem { .. } => IrtError::DegenerateItem { item },
        other => other,
    })?;
    let j = params.shape.categories[item];
    (1..=j)
        .map(|c| {
            let mut p = 0.0;
            for (dim, wd) in w.iter().enumerate() {
                if *wd > 0.0 {
                    p += wd * grm::grm_cat_prob(theta[dim], view.lambda[dim], &view.thresholds[dim], c)?;
                }
            }
            Ok(p)
        })
        .collect()
}

/// Draws one response per person and item from the mixture model. Each
/// person gets its own stream split from a master seed drawn from `rng`.
pub fn sample_responses<G: Rng + ?Sized>(truth: &ModelParams<f64>, nu: f64, rng: &mut G) -> Result<ResponseMatrix> {
    truth.validate()?;
    let s = &truth.shape;
    for item in 0..s.items {
        if truth.item_lambda(item).iter().all(|l| *l == 0.0) {
            return Err(IrtError::DegenerateItem { item });
        }
    }
    let master: u64 = rng.random();
    let mut cells = Vec::with_capacity(s.persons * s.items);
    for p in 0..s.persons {
        let mut row_rng = ChaCha8Rng::seed_from_u64(master);
        row_rng.set_stream(p as u64);
        for item in 0..s.items {
            let probs = category_probs(truth, p, item, nu)?;
            let u: f64 = row_rng.random();
            let mut acc = 0.0;
            let mut code = probs.len();
            for (k, pr) in probs.iter().enumerate() {
                acc += pr;
                if u < acc {
                    code = k + 1;
                    break;
                }
            }
            cells.push(Some(code));
        }
    }
    ResponseMatrix::new(s.persons, s.items, cells, s.categories.clone())
}

/// Masks each cell independently with probability `rate`.
pub fn mask_missing<G: Rng + ?Sized>(data: &mut ResponseMatrix, rate: f64, rng: &mut G) {
    for p in 0..data.persons() {
        for i in 0..data.items() {
            if rng.random::<f64>() < rate {
                data.set_missing(p, i);
            }
        }
    }
}

/// Truth and responses from one spec, both from `seed`.
pub fn simulate(spec: &TruthSpec, seed: u64) -> Result<(ModelParams<f64>, ResponseMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = make_sparse_truth(spec, &mut rng)?;
    let mut data = sample_responses(&truth, 1.0, &mut rng)?;
    if spec.missing_rate > 0.0 {
        mask_missing(&mut data, spec.missing_rate, &mut rng);
    }
    Ok((truth, data))
}
