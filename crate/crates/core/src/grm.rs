//! Graded response model, its mixture extension over latent dimensions and
//! the horseshoe prior hierarchy.
//!
//! Indexing is 0-based throughout. An item with `J` categories carries `J - 1`
//! finite ordered thresholds per dimension; category codes run `1..=J`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::diff::{self, Real};
use crate::error::{contract, IrtError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_2: f64 = std::f64::consts::LN_2;
const LN_PI: f64 = 1.144_729_885_849_400_2;

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// P×I ordinal responses with per-item category counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    persons: usize,
    items: usize,
    /// Row-major codes; meaningless where `missing` is set.
    values: Vec<u16>,
    missing: Vec<bool>,
    categories: Vec<usize>,
    item_names: Vec<String>,
}

impl ResponseMatrix {
    /// Builds from row-major optional codes. Codes are 1-based.
    pub fn new(
        persons: usize,
        items: usize,
        cells: Vec<Option<usize>>,
        categories: Vec<usize>,
    ) -> Result<Self> {
        if cells.len() != persons * items {
            return contract(format!(
                "expected {} cells for {persons}x{items}, got {}",
                persons * items,
                cells.len()
            ));
        }
        if categories.len() != items {
            return contract(format!(
                "expected {items} category counts, got {}",
                categories.len()
            ));
        }
        for (i, &j) in categories.iter().enumerate() {
            if j < 2 {
                return Err(IrtError::Validation(format!(
                    "item {} has {j} categories; at least 2 required",
                    i + 1
                )));
            }
            if j > u16::MAX as usize {
                return Err(IrtError::Validation(format!("item {} has too many categories", i + 1)));
            }
        }
        let mut values = Vec::with_capacity(cells.len());
        let mut missing = Vec::with_capacity(cells.len());
        for (k, c) in cells.into_iter().enumerate() {
            match c {
                Some(code) => {
                    let i = k % items;
                    if code < 1 || code > categories[i] {
                        return Err(IrtError::Validation(format!(
                            "person {} item {}: code {code} outside 1..={}",
                            k / items + 1,
                            i + 1,
                            categories[i]
                        )));
                    }
                    values.push(code as u16);
                    missing.push(false);
                }
                None => {
                    values.push(0);
                    missing.push(true);
                }
            }
        }
        let item_names = (1..=items).map(|i| format!("item{i}")).collect();
        Ok(ResponseMatrix {
            persons,
            items,
            values,
            missing,
            categories,
            item_names,
        })
    }

    /// Builds from rows, inferring each item's category count as its largest
    /// observed code (at least 2).
    pub fn from_rows(rows: &[Vec<Option<usize>>]) -> Result<Self> {
        let persons = rows.len();
        let items = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != items) {
            return contract("ragged response rows");
        }
        let mut categories = vec![2usize; items];
        for r in rows {
            for (i, c) in r.iter().enumerate() {
                if let Some(c) = c {
                    categories[i] = categories[i].max(*c);
                }
            }
        }
        Self::new(persons, items, rows.concat(), categories)
    }

    pub fn with_item_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.items {
            return contract("item name count mismatch");
        }
        self.item_names = names;
        Ok(self)
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    /// 1-based code, or `None` when missing.
    #[inline]
    pub fn get(&self, person: usize, item: usize) -> Option<usize> {
        let k = person * self.items + item;
        if self.missing[k] {
            None
        } else {
            Some(self.values[k] as usize)
        }
    }

    pub fn row(&self, person: usize) -> Vec<Option<usize>> {
        (0..self.items).map(|i| self.get(person, i)).collect()
    }

    pub fn observed(&self) -> usize {
        self.missing.iter().filter(|m| !**m).count()
    }

    /// Keeps only the given persons, in order.
    pub fn select_persons(&self, persons: &[usize]) -> Self {
        let mut values = Vec::with_capacity(persons.len() * self.items);
        let mut missing = Vec::with_capacity(persons.len() * self.items);
        for &p in persons {
            let r = p * self.items..(p + 1) * self.items;
            values.extend_from_slice(&self.values[r.clone()]);
            missing.extend_from_slice(&self.missing[r]);
        }
        ResponseMatrix {
            persons: persons.len(),
            items: self.items,
            values,
            missing,
            categories: self.categories.clone(),
            item_names: self.item_names.clone(),
        }
    }

    /// Masks a cell as missing.
    pub fn set_missing(&mut self, person: usize, item: usize) {
        let k = person * self.items + item;
        self.missing[k] = true;
        self.values[k] = 0;
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Sizes that fix the parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub persons: usize,
    pub items: usize,
    pub dims: usize,
    pub categories: Vec<usize>,
}

impl ModelShape {
    pub fn for_data(data: &ResponseMatrix, dims: usize) -> Self {
        ModelShape {
            persons: data.persons(),
            items: data.items(),
            dims,
            categories: data.categories().to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return contract("at least one latent dimension required");
        }
        if self.categories.len() != self.items {
            return contract("category counts do not match item count");
        }
        if self.categories.iter().any(|&j| j < 2) {
            return contract("every item needs at least 2 categories");
        }
        Ok(())
    }
}

/// Every latent quantity of the hierarchical model.
///
/// Item-by-dimension arrays are row-major `[item * dims + d]`; traits are
/// `[person * dims + d]`; thresholds are indexed like item-by-dimension arrays
/// and each holds `J_i - 1` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = f64> {
    pub shape: ModelShape,
    pub traits: Vec<T>,
    pub lambda: Vec<T>,
    pub thresholds: Vec<Vec<T>>,
    pub mu: Vec<T>,
    pub eta: Vec<T>,
    pub xi: Vec<T>,
    pub kappa: Vec<T>,
}

impl<T: Copy> ModelParams<T> {
    #[inline]
    pub fn theta(&self, person: usize) -> &[T] {
        let d = self.shape.dims;
        &self.traits[person * d..(person + 1) * d]
    }

    #[inline]
    pub fn item_lambda(&self, item: usize) -> &[T] {
        let d = self.shape.dims;
        &self.lambda[item * d..(item + 1) * d]
    }

    #[inline]
    pub fn item_thresholds(&self, item: usize, dim: usize) -> &[T] {
        &self.thresholds[item * self.shape.dims + dim]
    }
}

impl ModelParams<f64> {
    /// Checks every structural and domain invariant.
    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        s.validate()?;
        let (p, i, d) = (s.persons, s.items, s.dims);
        let sizes = [
            ("traits", self.traits.len(), p * d),
            ("lambda", self.lambda.len(), i * d),
            ("thresholds", self.thresholds.len(), i * d),
            ("mu", self.mu.len(), i * d),
            ("eta", self.eta.len(), i),
            ("xi", self.xi.len(), i * d),
            ("kappa", self.kappa.len(), d),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return contract(format!("{name}: expected {want} entries, got {got}"));
            }
        }
        if let Some(k) = self.traits.iter().position(|t| !t.is_finite()) {
            return contract(format!("trait entry {k} is not finite"));
        }
        if let Some(k) = self.lambda.iter().position(|l| !(*l >= 0.0) || !l.is_finite()) {
            return contract(format!("discrimination entry {k} is negative or non-finite"));
        }
        for (name, v) in [("eta", &self.eta), ("xi", &self.xi), ("kappa", &self.kappa)] {
            if let Some(k) = v.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
                return contract(format!("{name} entry {k} must be positive"));
            }
        }
        for item in 0..i {
            for dim in 0..d {
                let t = self.item_thresholds(item, dim);
                check_thresholds(t, s.categories[item])
                    .map_err(|e| IrtError::Contract(format!("item {item} dim {dim}: {e}")))?;
            }
        }
        Ok(())
    }
}

fn check_thresholds(t: &[f64], categories: usize) -> Result<()> {
    if t.len() + 1 != categories {
        return contract(format!(
            "{} thresholds for {categories} categories",
            t.len()
        ));
    }
    if t.iter().any(|x| !x.is_finite()) {
        return contract("non-finite threshold");
    }
    if t.windows(2).any(|w| !(w[0] < w[1])) {
        return contract("thresholds are not strictly increasing");
    }
    Ok(())
}

/// Fixed hyperconstants of the shrinkage hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Weight exponent ν.
    pub nu: f64,
    pub eta0: f64,
    pub xi0: f64,
    /// One per dimension, strictly decreasing.
    pub kappa0: Vec<f64>,
}

impl Hyper {
    /// η₀ = ξ₀ = 0.01, κ₀ = 0.01·0.1^d for 0-based d, ν = 1.
    pub fn standard(dims: usize) -> Self {
        Self::with_schedule(dims, 1.0, 0.01, 0.01, 0.01, 0.1)
    }

    pub fn with_schedule(
        dims: usize,
        nu: f64,
        eta0: f64,
        xi0: f64,
        kappa_base: f64,
        kappa_ratio: f64,
    ) -> Self {
        Hyper {
            nu,
            eta0,
            xi0,
            kappa0: (0..dims).map(|d| kappa_base * kappa_ratio.powi(d as i32)).collect(),
        }
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        if !(self.nu > 0.0) {
            return contract("nu must be positive");
        }
        if !(self.eta0 > 0.0) || !(self.xi0 > 0.0) {
            return contract("eta0 and xi0 must be positive");
        }
        if self.kappa0.len() != dims {
            return contract(format!(
                "kappa0 has {} entries for {dims} dimensions",
                self.kappa0.len()
            ));
        }
        if self.kappa0.iter().any(|k| !(*k > 0.0)) {
            return contract("kappa0 entries must be positive");
        }
        if self.kappa0.windows(2).any(|w| !(w[1] < w[0])) {
            return contract("kappa0 must be strictly decreasing across dimensions");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

/// Probability of category `j` (1-based) under the graded response model:
/// `S(λ(θ − τ_{j−1})) − S(λ(θ − τ_j))` with `τ_0 = −∞`, `τ_J = +∞`.
pub fn grm_cat_prob(theta: f64, lambda: f64, thresholds: &[f64], j: usize) -> Result<f64> {
    let big_j = thresholds.len() + 1;
    if j < 1 || j > big_j {
        return contract(format!("category {j} outside 1..={big_j}"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return contract("thresholds are not strictly increasing");
    }
    if !(lambda >= 0.0) {
        return contract("discrimination must be nonnegative");
    }
    let upper = if j == 1 {
        1.0
    } else {
        diff::sigmoid(lambda * (theta - thresholds[j - 2]))
    };
    let lower = if j == big_j {
        0.0
    } else {
        diff::sigmoid(lambda * (theta - thresholds[j - 1]))
    };
    Ok((upper - lower).max(0.0))
}

/// Log of [`grm_cat_prob`] in a form that stays accurate when both sigmoids
/// saturate: `log S(a) + log S(−b) + log(1 − e^{−(a−b)})`.
///
/// Inputs are not validated.
#[inline]
pub fn grm_log_cat_prob<R: Real>(theta: R, lambda: R, thresholds: &[R], j: usize) -> R {
    let big_j = thresholds.len() + 1;
    if j == 1 {
        let b = lambda * (theta - thresholds[0]);
        (-b).log_sigmoid()
    } else if j == big_j {
        let a = lambda * (theta - thresholds[j - 2]);
        a.log_sigmoid()
    } else {
        let lo = thresholds[j - 2];
        let hi = thresholds[j - 1];
        let a = lambda * (theta - lo);
        let b = lambda * (theta - hi);
        a.log_sigmoid() + (-b).log_sigmoid() + (lambda * (hi - lo)).log1mexp()
    }
}

/// Mixture weights `w_d = λ_d^ν / Σ λ^ν`.
pub fn domain_weights(lambda: &[f64], nu: f64) -> Result<Vec<f64>> {
    if lambda.is_empty() {
        return contract("empty discrimination vector");
    }
    if !(nu > 0.0) {
        return contract("nu must be positive");
    }
    if lambda.iter().any(|l| !(*l >= 0.0)) {
        return contract("discrimination must be nonnegative");
    }
    if lambda.iter().all(|l| *l == 0.0) {
        return Err(IrtError::DegenerateItem { item: 0 });
    }
    Ok(log_domain_weights(lambda, nu)
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Log mixture weights `ν log λ_d − logsumexp(ν log λ)`. Unchecked.
#[inline]
pub fn log_domain_weights<R: Real>(lambda: &[R], nu: f64) -> Vec<R> {
    if lambda.len() == 1 {
        return vec![lambda[0].lift(0.0)];
    }
    let scaled: Vec<R> = lambda.iter().map(|l| l.ln() * nu).collect();
    let norm = R::log_sum_exp(&scaled);
    scaled.into_iter().map(|s| s - norm).collect()
}

/// Parameters of one item, borrowed out of a [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ItemView<'a, T> {
    pub lambda: &'a [T],
    pub thresholds: &'a [Vec<T>],
}

impl<T: Copy> ModelParams<T> {
    pub fn item(&self, item: usize) -> ItemView<'_, T> {
        let d = self.shape.dims;
        ItemView {
            lambda: &self.lambda[item * d..(item + 1) * d],
            thresholds: &self.thresholds[item * d..(item + 1) * d],
        }
    }
}

/// `log Σ_d exp(log_w_d + log P_d(j))` with precomputed log weights. Unchecked.
#[inline]
pub fn mixture_log_prob_with<R: Real>(j: usize, theta: &[R], item: ItemView<'_, R>, log_w: &[R]) -> R {
    if theta.len() == 1 {
        return grm_log_cat_prob(theta[0], item.lambda[0], &item.thresholds[0], j);
    }
    let comps: smallvec::SmallVec<[R; 8]> = (0..theta.len())
        .map(|d| log_w[d] + grm_log_cat_prob(theta[d], item.lambda[d], &item.thresholds[d], j))
        .collect();
    R::log_sum_exp(&comps)
}

/// Log-probability of response `j` under the dimension mixture:
/// `log Σ_d w_d · P(j | θ_d, λ_d, τ_d)`.
pub fn mixture_response_logprob(
    j: usize,
    theta: &[f64],
    item: ItemView<'_, f64>,
    nu: f64,
) -> Result<f64> {
    let dims = theta.len();
    if item.lambda.len() != dims || item.thresholds.len() != dims {
        return contract("item parameters do not match trait dimension");
    }
    let big_j = item.thresholds[0].len() + 1;
    if j < 1 || j > big_j {
        return contract(format!("category {j} outside 1..={big_j}"));
    }
    for t in item.thresholds {
        check_thresholds(t, big_j)?;
    }
    domain_weights(item.lambda, nu)?;
    let log_w = log_domain_weights(item.lambda, nu);
    Ok(mixture_log_prob_with(j, theta, item, &log_w))
}

// ---------------------------------------------------------------------------
// Prior and joint density
// ---------------------------------------------------------------------------

#[inline]
fn half_cauchy_logpdf<R: Real>(x: R, scale: f64) -> R {
    // log(2 / (π σ)) − log(1 + (x/σ)²)
    -(x / scale).square().ln_1p() + (LN_2 - LN_PI - scale.ln())
}

/// Appends every log-prior term to `out`. Unchecked.
pub fn prior_terms<R: Real>(params: &ModelParams<R>, hyper: &Hyper, out: &mut Vec<R>) {
    let s = &params.shape;
    let dims = s.dims;
    let half_normal_const = LN_2 - 0.5 * LN_2PI;
    let normal_const = -0.5 * LN_2PI;

    let ln_eta: Vec<R> = params.eta.iter().map(|e| e.ln()).collect();
    let ln_kappa: Vec<R> = params.kappa.iter().map(|k| k.ln()).collect();

    for item in 0..s.items {
        out.push(half_cauchy_logpdf(params.eta[item], hyper.eta0));
        for d in 0..dims {
            let k = item * dims + d;
            let xi = params.xi[k];
            out.push(half_cauchy_logpdf(xi, hyper.xi0));

            // λ ~ N⁺(0, η ξ κ), scale parameterization
            let scale = params.eta[item] * xi * params.kappa[d];
            let ln_scale = ln_eta[item] + xi.ln() + ln_kappa[d];
            let z = params.lambda[k] / scale;
            out.push(-(z.square() * 0.5) - ln_scale + half_normal_const);

            let mu = params.mu[k];
            out.push(-(mu.square() * 0.5) + normal_const);
            let t = &params.thresholds[k];
            out.push(-((t[0] - mu).square() * 0.5) + normal_const);
            for w in t.windows(2) {
                // normal truncated below at its predecessor
                out.push(-((w[1] - w[0]).square() * 0.5) + half_normal_const);
            }
        }
    }
    for d in 0..dims {
        out.push(half_cauchy_logpdf(params.kappa[d], hyper.kappa0[d]));
    }
    for t in &params.traits {
        out.push(-(t.square() * 0.5) + normal_const);
    }
}

/// Appends one log-likelihood term per observed response to `out`. Unchecked.
pub fn likelihood_terms<R: Real>(
    params: &ModelParams<R>,
    data: &ResponseMatrix,
    nu: f64,
    out: &mut Vec<R>,
) {
    let log_w: Vec<Vec<R>> = (0..data.items())
        .map(|i| log_domain_weights(params.item_lambda(i), nu))
        .collect();
    let items: Vec<ItemView<'_, R>> = (0..data.items()).map(|i| params.item(i)).collect();
    for p in 0..data.persons() {
        let theta = params.theta(p);
        for i in 0..data.items() {
            if let Some(j) = data.get(p, i) {
                out.push(mixture_log_prob_with(j, theta, items[i], &log_w[i]));
            }
        }
    }
}

/// Unchecked joint log density; the caller guarantees valid inputs.
pub fn joint_log_density_unchecked<R: Real>(
    params: &ModelParams<R>,
    data: &ResponseMatrix,
    hyper: &Hyper,
) -> R {
    let mut terms = Vec::with_capacity(data.observed() + 8 * params.lambda.len() + params.traits.len());
    prior_terms(params, hyper, &mut terms);
    likelihood_terms(params, data, hyper.nu, &mut terms);
    R::sum(&terms)
}

fn check_scales(params: &ModelParams<f64>, hyper: &Hyper) -> Result<()> {
    params.validate()?;
    hyper.validate(params.shape.dims)
}

/// Sum of every prior log-density term.
pub fn log_prior(params: &ModelParams<f64>, hyper: &Hyper) -> Result<f64> {
    check_scales(params, hyper)?;
    let mut terms = Vec::new();
    prior_terms(params, hyper, &mut terms);
    Ok(terms.iter().sum())
}

/// Log prior plus the mixture log-likelihood of every observed response.
pub fn joint_log_density(
    params: &ModelParams<f64>,
    data: &ResponseMatrix,
    hyper: &Hyper,
) -> Result<f64> {
    check_scales(params, hyper)?;
    check_data(params, data)?;
    Ok(joint_log_density_unchecked(params, data, hyper))
}

pub(crate) fn check_data(params: &ModelParams<f64>, data: &ResponseMatrix) -> Result<()> {
    let s = &params.shape;
    if s.persons != data.persons() || s.items != data.items() || s.categories != data.categories() {
        return contract(format!(
            "parameters shaped {}x{} do not match data {}x{}",
            s.persons,
            s.items,
            data.persons(),
            data.items()
        ));
    }
    for i in 0..s.items {
        if params.item_lambda(i).iter().all(|l| *l == 0.0) {
            return Err(IrtError::DegenerateItem { item: i });
        }
    }
    Ok(())
}

/// Draws from half-Cauchy(0, σ) through the nested inverse-gamma
/// representation: `a ~ IG(½, 1/σ²)`, `x² | a ~ IG(½, 1/a)`.
pub fn halfcauchy_aux_sample<G: Rng + ?Sized>(sigma: f64, rng: &mut G) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return contract(format!("half-Cauchy scale must be positive, got {sigma}"));
    }
    // IG(α, β) = 1 / Gamma(shape α, scale 1/β)
    let aux = 1.0 / Gamma::new(0.5, sigma * sigma).expect("valid gamma").sample(rng);
    let x2 = 1.0 / Gamma::new(0.5, aux).expect("valid gamma").sample(rng);
    Ok(x2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cat_prob_worked_example() {
        let t = [-1.0, 1.0];
        let p: Vec<f64> = (1..=3).map(|j| grm_cat_prob(0.0, 1.0, &t, j).unwrap()).collect();
        assert!((p[0] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((p[1] - 0.462_117_157_260_010).abs() < 1e-12);
        assert!((p[2] - 0.268_941_421_369_995).abs() < 1e-12);
    }

    #[test]
    fn zero_discrimination_splits_outer_categories() {
        let t = [-0.3, 2.0];
        let p: Vec<f64> = (1..=3).map(|j| grm_cat_prob(1.7, 0.0, &t, j).unwrap()).collect();
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn cat_prob_contract_errors() {
        assert!(grm_cat_prob(0.0, 1.0, &[-1.0, 1.0], 0).is_err());
        assert!(grm_cat_prob(0.0, 1.0, &[-1.0, 1.0], 4).is_err());
        assert!(grm_cat_prob(0.0, 1.0, &[1.0, -1.0], 1).is_err());
        assert!(grm_cat_prob(0.0, 1.0, &[1.0, 1.0], 1).is_err());
    }

    #[test]
    fn log_form_matches_difference_form() {
        let t = [-1.5, -0.2, 0.4, 2.0];
        for &theta in &[-3.0, -0.5, 0.0, 0.9, 4.0] {
            for &lambda in &[0.3, 1.0, 2.5] {
                for j in 1..=5 {
                    let p = grm_cat_prob(theta, lambda, &t, j).unwrap();
                    let lp = grm_log_cat_prob(theta, lambda, &t, j);
                    // the difference form loses relative accuracy in saturated tails
                    assert!((lp.exp() - p).abs() < 1e-14, "{theta} {lambda} {j}");
                }
            }
        }
    }

    #[test]
    fn log_form_stays_finite_when_saturated() {
        // S(a) and S(b) both round to 1.0 here
        let lp = grm_log_cat_prob(60.0, 1.0, &[0.0, 1.0], 2);
        assert!(lp.is_finite());
        assert!(lp < -50.0);
    }

    #[test]
    fn domain_weight_examples() {
        assert_eq!(domain_weights(&[2.0, 2.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let w = domain_weights(&[3.0, 1.0], 1.0).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let w = domain_weights(&[3.0, 1.0], 2.0).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 0.1).abs() < 1e-15);
        assert!(matches!(
            domain_weights(&[0.0, 0.0], 1.0),
            Err(IrtError::DegenerateItem { .. })
        ));
        assert_eq!(domain_weights(&[0.0, 4.0], 1.0).unwrap(), vec![0.0, 1.0]);
    }

    fn two_dim_item() -> (Vec<f64>, Vec<Vec<f64>>) {
        (vec![1.0, 1.0], vec![vec![-1.0, 1.0], vec![-1.0, 1.0]])
    }

    #[test]
    fn mixture_examples() {
        let (lambda, thresholds) = two_dim_item();
        let item = ItemView {
            lambda: &lambda,
            thresholds: &thresholds,
        };
        let lp = mixture_response_logprob(2, &[0.0, 0.0], item, 1.0).unwrap();
        assert!((lp - 0.462_117_157_260_010f64.ln()).abs() < 1e-12);

        let single = ItemView {
            lambda: &lambda[..1],
            thresholds: &thresholds[..1],
        };
        let lp1 = mixture_response_logprob(3, &[0.4], single, 1.0).unwrap();
        assert_eq!(lp1, grm_log_cat_prob(0.4, 1.0, &thresholds[0], 3));
        assert!((lp1 - grm_cat_prob(0.4, 1.0, &thresholds[0], 3).unwrap().ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_rejects_bad_category() {
        let (lambda, thresholds) = two_dim_item();
        let item = ItemView {
            lambda: &lambda,
            thresholds: &thresholds,
        };
        assert!(mixture_response_logprob(4, &[0.0, 0.0], item, 1.0).is_err());
        let zeros = [0.0, 0.0];
        let dead = ItemView {
            lambda: &zeros,
            thresholds: &thresholds,
        };
        assert!(matches!(
            mixture_response_logprob(1, &[0.0, 0.0], dead, 1.0),
            Err(IrtError::DegenerateItem { .. })
        ));
    }

    #[test]
    fn half_cauchy_at_its_scale() {
        for &s in &[0.01, 1.0, 7.0] {
            let v: f64 = half_cauchy_logpdf(s, s);
            assert!((v - (1.0 / (std::f64::consts::PI * s)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hyper_schedule() {
        let h = Hyper::standard(3);
        assert_eq!(h.nu, 1.0);
        assert_eq!((h.eta0, h.xi0), (0.01, 0.01));
        assert!((h.kappa0[0] - 0.01).abs() < 1e-18);
        assert!((h.kappa0[1] - 0.001).abs() < 1e-18);
        assert!((h.kappa0[2] - 0.0001).abs() < 1e-18);
        h.validate(3).unwrap();
        let mut bad = h.clone();
        bad.kappa0.swap(0, 1);
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn aux_sampler_positive_and_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(halfcauchy_aux_sample(0.5, &mut rng).unwrap() > 0.0);
        }
        assert!(halfcauchy_aux_sample(0.0, &mut rng).is_err());
        assert!(halfcauchy_aux_sample(-1.0, &mut rng).is_err());
    }

    #[test]
    fn response_matrix_validation() {
        assert!(ResponseMatrix::new(1, 2, vec![Some(1), Some(3)], vec![2, 2]).is_err());
        assert!(ResponseMatrix::new(1, 2, vec![Some(1), Some(0)], vec![2, 2]).is_err());
        assert!(ResponseMatrix::new(1, 1, vec![Some(1)], vec![1]).is_err());
        let m = ResponseMatrix::from_rows(&[vec![Some(1), None], vec![Some(3), Some(2)]]).unwrap();
        assert_eq!(m.categories(), &[3, 2]);
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.observed(), 3);
    }
}
