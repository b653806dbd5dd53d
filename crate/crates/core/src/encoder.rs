//! Feed-forward encoder that amortizes trait scoring: it regresses the
//! decoder's posterior-mean traits on one-hot response features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advi::Adam;
use crate::diff::{self, Real, ScalarFn};
use crate::error::{contract, IrtError, Result};
use crate::grm::ResponseMatrix;

/// One-hot block per item followed by one missing flag per item.
pub fn encode_features(x: &[Option<usize>], categories: &[usize]) -> Result<Vec<f64>> {
    if x.len() != categories.len() {
        return contract(format!(
            "response vector has {} items, layout has {}",
            x.len(),
            categories.len()
        ));
    }
    let width: usize = categories.iter().sum();
    let mut f = vec![0.0; width + categories.len()];
    let mut offset = 0;
    for (i, (&code, &j)) in x.iter().zip(categories).enumerate() {
        match code {
            Some(c) if (1..=j).contains(&c) => f[offset + c - 1] = 1.0,
            Some(c) => return contract(format!("item {} code {c} outside 1..={j}", i + 1)),
            None => f[width + i] = 1.0,
        }
        offset += j;
    }
    Ok(f)
}

/// Nonzero entries of a feature vector as `(index, value)` pairs.
fn sparse(features: &[f64]) -> Vec<(usize, f64)> {
    features
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(k, v)| (k, *v))
        .collect()
}

/// Posterior-mean traits of the training respondents, row-major `P×D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringTarget {
    pub dims: usize,
    pub values: Vec<f64>,
}

impl ScoringTarget {
    pub fn new(dims: usize, values: Vec<f64>) -> Result<Self> {
        if dims == 0 || values.len() % dims != 0 {
            return contract(format!("{} target values do not split into {dims} dimensions", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return contract("targets must be finite");
        }
        Ok(ScoringTarget { dims, values })
    }

    pub fn persons(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.dims..(p + 1) * self.dims]
    }

    /// Per-dimension sample variance (divisor P−1) averaged over dimensions.
    pub fn mean_variance(&self) -> f64 {
        let n = self.persons() as f64;
        (0..self.dims)
            .map(|d| {
                let m = (0..self.persons()).map(|p| self.row(p)[d]).sum::<f64>() / n;
                (0..self.persons()).map(|p| (self.row(p)[d] - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum::<f64>()
            / self.dims as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden widths. Empty means two layers of width `2·I`.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: Vec::new(),
            epochs: 300,
            batch_size: 32,
            step_size: 3e-3,
            patience: 20,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(IrtError::Validation("batch size and patience must be positive".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(IrtError::Validation("encoder step size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(IrtError::Validation("validation fraction must lie in (0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(IrtError::Validation("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Trained network plus the feature layout and the decoder it imitates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    /// Row-major `out×in` matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Categories per item, fixing the feature layout.
    pub categories: Vec<usize>,
    /// Content hash of the decoder fit that produced the targets.
    pub decoder_hash: String,
    pub validation_mse: f64,
    pub epochs_run: usize,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn tanh<R: Real>(x: R) -> R {
    (x * 2.0).sigmoid() * 2.0 - 1.0
}

/// Forward pass over a flat parameter vector (per layer: weights then biases).
fn forward<R: Real>(sizes: &[usize], params: &[R], input: &[(usize, f64)]) -> Vec<R> {
    let layers = sizes.len() - 1;
    let (n_in, n_out) = (sizes[0], sizes[1]);
    let b0 = n_in * n_out;
    let mut h: Vec<R> = (0..n_out)
        .map(|k| {
            let row = &params[k * n_in..(k + 1) * n_in];
            let mut terms = Vec::with_capacity(input.len() + 1);
            terms.push(params[b0 + k]);
            for &(f, v) in input {
                terms.push(if v == 1.0 { row[f] } else { row[f] * v });
            }
            R::sum(&terms)
        })
        .collect();
    let mut offset = b0 + n_out;
    for l in 1..layers {
        h = h.into_iter().map(tanh).collect();
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let b = offset + n_in * n_out;
        h = (0..n_out)
            .map(|k| R::dot(&params[offset + k * n_in..offset + (k + 1) * n_in], &h) + params[b + k])
            .collect();
        offset = b + n_out;
    }
    h
}

impl EncoderNet {
    fn init<G: Rng + ?Sized>(sizes: Vec<usize>, categories: Vec<usize>, rng: &mut G) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let sd = (2.0 / (w[0] + w[1]) as f64).sqrt();
            let n = Normal::new(0.0, sd).expect("positive sd");
            weights.push((0..w[0] * w[1]).map(|_| n.sample(rng)).collect());
            biases.push(vec![0.0; w[1]]);
        }
        EncoderNet {
            layer_sizes: sizes,
            weights,
            biases,
            categories,
            decoder_hash: String::new(),
            validation_mse: f64::NAN,
            epochs_run: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(param_count(&self.layer_sizes));
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            b.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
    }

    /// Checks layer shapes against `layer_sizes` and that every weight is finite.
    pub fn validate(&self) -> Result<()> {
        let s = &self.layer_sizes;
        if s.len() < 2 || self.weights.len() != s.len() - 1 || self.biases.len() != s.len() - 1 {
            return contract("layer list does not match layer sizes");
        }
        for (l, w) in s.windows(2).enumerate() {
            if self.weights[l].len() != w[0] * w[1] || self.biases[l].len() != w[1] {
                return contract(format!("layer {} has the wrong shape", l + 1));
            }
        }
        let width: usize = self.categories.iter().sum::<usize>() + self.categories.len();
        if width != s[0] {
            return contract("feature layout does not match the input width");
        }
        if self.flat_params().iter().any(|v| !v.is_finite()) {
            return contract("encoder weights must be finite");
        }
        Ok(())
    }

    /// Network output for an encoded feature vector.
    pub fn forward_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_width() {
            return contract(format!(
                "feature width {} does not match encoder input {}",
                features.len(),
                self.input_width()
            ));
        }
        Ok(forward(&self.layer_sizes, &self.flat_params(), &sparse(features)))
    }
}

/// Mean squared error over a set of examples, as a function of the flat
/// parameters.
struct MseLoss<'a> {
    sizes: &'a [usize],
    inputs: Vec<&'a [(usize, f64)]>,
    targets: Vec<&'a [f64]>,
}

impl ScalarFn for MseLoss<'_> {
    fn eval<R: Real>(&self, x: &[R]) -> R {
        let mut terms = Vec::with_capacity(self.inputs.len() * self.targets[0].len());
        for (inp, t) in self.inputs.iter().zip(&self.targets) {
            let out = forward(self.sizes, x, inp);
            for (o, y) in out.into_iter().zip(t.iter()) {
                terms.push((o - *y).square());
            }
        }
        R::sum(&terms) / terms.len() as f64
    }
}

fn mse(sizes: &[usize], params: &[f64], inputs: &[Vec<(usize, f64)>], targets: &ScoringTarget, rows: &[usize]) -> f64 {
    let loss = MseLoss {
        sizes,
        inputs: rows.iter().map(|&p| inputs[p].as_slice()).collect(),
        targets: rows.iter().map(|&p| targets.row(p)).collect(),
    };
    loss.eval(params)
}

/// Training loss of `net` over every respondent and its gradient with
/// respect to the flat parameters.
pub fn loss_and_gradient(
    net: &EncoderNet,
    data: &ResponseMatrix,
    targets: &ScoringTarget,
) -> Result<(f64, Vec<f64>)> {
    let inputs = person_features(data, &net.categories)?;
    let loss = MseLoss {
        sizes: &net.layer_sizes,
        inputs: inputs.iter().map(|v| v.as_slice()).collect(),
        targets: (0..targets.persons()).map(|p| targets.row(p)).collect(),
    };
    let (v, g) = diff::value_and_gradient(&loss, &net.flat_params())?;
    Ok((v, g.into_vec()))
}

/// Loss of `net` on all of `data` at an arbitrary flat parameter vector,
/// evaluated as a [`ScalarFn`].
pub fn loss_fn<'a>(
    net: &'a EncoderNet,
    features: &'a [Vec<(usize, f64)>],
    targets: &'a ScoringTarget,
) -> impl ScalarFn + 'a {
    MseLoss {
        sizes: &net.layer_sizes,
        inputs: features.iter().map(|v| v.as_slice()).collect(),
        targets: (0..targets.persons()).map(|p| targets.row(p)).collect(),
    }
}

/// Sparse features of every respondent.
pub fn person_features(data: &ResponseMatrix, categories: &[usize]) -> Result<Vec<Vec<(usize, f64)>>> {
    (0..data.persons())
        .map(|p| Ok(sparse(&encode_features(&data.row(p), categories)?)))
        .collect()
}

/// Fits an encoder to `targets` with Adam on minibatches, holding out a
/// validation split and stopping once it has not improved for `patience`
/// epochs. Returns the best checkpoint.
pub fn train_encoder(
    data: &ResponseMatrix,
    targets: &ScoringTarget,
    config: &EncoderConfig,
    decoder_hash: &str,
) -> Result<EncoderNet> {
    config.validate()?;
    let p = data.persons();
    if targets.persons() != p {
        return contract(format!("{} targets for {p} respondents", targets.persons()));
    }
    if p < 2 {
        return contract("need at least 2 respondents to hold out a validation split");
    }
    let categories = data.categories().to_vec();
    let inputs = person_features(data, &categories)?;
    let width = categories.iter().sum::<usize>() + categories.len();
    let mut sizes = vec![width];
    if config.hidden.is_empty() {
        sizes.extend([2 * data.items(), 2 * data.items()]);
    } else {
        sizes.extend(&config.hidden);
    }
    sizes.push(targets.dims);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng);
    let n_val = ((p as f64 * config.validation_fraction).round() as usize).clamp(1, p - 1);
    let val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();

    let mut net = EncoderNet::init(sizes.clone(), categories, &mut rng);
    net.decoder_hash = decoder_hash.to_string();
    let mut params = net.flat_params();
    let mut best = params.clone();
    let mut best_mse = mse(&sizes, &params, &inputs, targets, &val);
    let mut since_best = 0;
    let mut adam = Adam::new(params.len());
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let loss = MseLoss {
                sizes: &sizes,
                inputs: batch.iter().map(|&q| inputs[q].as_slice()).collect(),
                targets: batch.iter().map(|&q| targets.row(q)).collect(),
            };
            let step = diff::value_and_gradient(&loss, &params)
                .ok()
                .filter(|(v, g)| v.is_finite() && g.partials().iter().all(|x| x.is_finite()));
            let Some((_, g)) = step else {
                net.set_flat(&best);
                net.validation_mse = best_mse;
                net.epochs_run = epoch;
                return Err(IrtError::EncoderDivergence { epoch, best: Some(Box::new(net)) });
            };
            let descent: Vec<f64> = g.partials().iter().map(|x| -x).collect();
            adam.step(&mut params, &descent, config.step_size);
        }
        epochs_run = epoch + 1;
        let v = mse(&sizes, &params, &inputs, targets, &val);
        if !v.is_finite() {
            net.set_flat(&best);
            net.validation_mse = best_mse;
            net.epochs_run = epoch;
            return Err(IrtError::EncoderDivergence { epoch, best: Some(Box::new(net)) });
        }
        if v < best_mse {
            best_mse = v;
            best.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    net.set_flat(&best);
    net.validation_mse = best_mse;
    net.epochs_run = epochs_run;
    Ok(net)
}

/// Trait estimate for one response vector.
pub fn score(x: &[Option<usize>], net: &EncoderNet) -> Result<Vec<f64>> {
    if x.len() != net.categories.len() {
        return contract(format!(
            "response vector has {} items, encoder expects {}",
            x.len(),
            net.categories.len()
        ));
    }
    net.forward_features(&encode_features(x, &net.categories)?)
}

/// Scores every respondent, row-major `P×D`.
pub fn score_matrix(data: &ResponseMatrix, net: &EncoderNet) -> Result<Vec<f64>> {
    if data.categories() != net.categories.as_slice() {
        return contract("response layout does not match the encoder's feature layout");
    }
    let rows: Result<Vec<Vec<f64>>> = (0..data.persons())
        .into_par_iter()
        .map(|p| score(&data.row(p), net))
        .collect();
    Ok(rows?.concat())
}
