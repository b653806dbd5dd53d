//! Widely applicable information criterion for comparing dimensionalities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advi::PosteriorDraws;
use crate::diff::Real;
use crate::error::{contract, Result};
use crate::grm::{self, log_domain_weights, mixture_log_prob_with, ResponseMatrix};

/// Per-person log-likelihood under each posterior draw, row-major `P×S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseLogLik {
    pub persons: usize,
    pub samples: usize,
    pub values: Vec<f64>,
}

impl PointwiseLogLik {
    pub fn new(persons: usize, samples: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != persons * samples {
            return contract(format!(
                "{} values do not fill a {persons}x{samples} matrix",
                values.len()
            ));
        }
        Ok(PointwiseLogLik { persons, samples, values })
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.samples..(p + 1) * self.samples]
    }
}

/// `log Pr(X_p | draw s)` summed over each person's observed items.
pub fn pointwise_loglik(draws: &PosteriorDraws, data: &ResponseMatrix) -> Result<PointwiseLogLik> {
    pointwise_loglik_nu(draws, data, 1.0)
}

/// As [`pointwise_loglik`] with an explicit weight exponent.
pub fn pointwise_loglik_nu(draws: &PosteriorDraws, data: &ResponseMatrix, nu: f64) -> Result<PointwiseLogLik> {
    let s = draws.len();
    if s < 2 {
        return contract(format!("need at least 2 posterior draws, got {s}"));
    }
    for d in &draws.samples {
        grm::check_data(d, data)?;
    }
    let log_w: Vec<Vec<Vec<f64>>> = draws
        .samples
        .iter()
        .map(|d| (0..data.items()).map(|i| log_domain_weights(d.item_lambda(i), nu)).collect())
        .collect();
    let p = data.persons();
    let values: Vec<f64> = (0..p * s)
        .into_par_iter()
        .map(|cell| {
            let (person, k) = (cell / s, cell % s);
            let params = &draws.samples[k];
            let theta = params.theta(person);
            let terms: Vec<f64> = (0..data.items())
                .filter_map(|i| {
                    data.get(person, i)
                        .map(|j| mixture_log_prob_with(j, theta, params.item(i), &log_w[k][i]))
                })
                .collect();
            if terms.is_empty() {
                0.0
            } else {
                f64::sum(&terms)
            }
        })
        .collect();
    PointwiseLogLik::new(p, s, values)
}

fn row_lppd(row: &[f64]) -> f64 {
    f64::log_sum_exp(row) - (row.len() as f64).ln()
}

// Shifted by the first entry so constant rows give exactly zero.
fn row_var(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let shift = row[0];
    let mean = row.iter().map(|x| x - shift).sum::<f64>() / n;
    row.iter().map(|x| (x - shift - mean) * (x - shift - mean)).sum::<f64>() / (n - 1.0)
}

/// Log pointwise predictive density.
pub fn lppd(m: &PointwiseLogLik) -> Result<f64> {
    if m.samples < 1 {
        return contract("need at least one sample");
    }
    Ok((0..m.persons).map(|p| row_lppd(m.row(p))).sum())
}

/// Effective number of parameters: summed per-person sample variance.
pub fn pwaic(m: &PointwiseLogLik) -> Result<f64> {
    if m.samples < 2 {
        return contract(format!("need at least 2 samples, got {}", m.samples));
    }
    Ok((0..m.persons).map(|p| row_var(m.row(p))).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    pub lppd: f64,
    pub pwaic: f64,
    pub waic: f64,
    /// `√(P · Var_p(lppd_p − pwaic_p))`, on the elpd scale.
    pub se: f64,
    /// `lppd − pwaic`.
    pub elpd: f64,
    pub pointwise_lppd: Vec<f64>,
    pub pointwise_pwaic: Vec<f64>,
    pub pointwise_elpd: Vec<f64>,
}

pub fn waic(m: &PointwiseLogLik) -> Result<WaicReport> {
    if m.samples < 2 {
        return contract(format!("need at least 2 samples, got {}", m.samples));
    }
    if m.persons < 2 {
        return contract("standard error needs at least 2 persons");
    }
    let pointwise_lppd: Vec<f64> = (0..m.persons).map(|p| row_lppd(m.row(p))).collect();
    let pointwise_pwaic: Vec<f64> = (0..m.persons).map(|p| row_var(m.row(p))).collect();
    let pointwise_elpd: Vec<f64> = pointwise_lppd
        .iter()
        .zip(&pointwise_pwaic)
        .map(|(a, b)| a - b)
        .collect();
    let lppd: f64 = pointwise_lppd.iter().sum();
    let pwaic: f64 = pointwise_pwaic.iter().sum();
    let n = m.persons as f64;
    let se = (n * row_var(&pointwise_elpd)).sqrt();
    Ok(WaicReport {
        lppd,
        pwaic,
        waic: -2.0 * (lppd - pwaic),
        se,
        elpd: lppd - pwaic,
        pointwise_lppd,
        pointwise_pwaic,
        pointwise_elpd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub label: String,
    pub waic: f64,
    pub se: f64,
    /// WAIC minus the best WAIC.
    pub delta: f64,
}

/// Two models whose WAIC gap is smaller than either standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapFlag {
    pub first: String,
    pub second: String,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ranking: Vec<RankedModel>,
    pub within_one_se: Vec<OverlapFlag>,
}

/// Ranks models by ascending WAIC, ties kept in input order.
pub fn compare(reports: &[WaicReport], labels: &[String]) -> Result<Comparison> {
    if reports.len() < 2 {
        return contract("comparison needs at least 2 reports");
    }
    if reports.len() != labels.len() {
        return contract("one label per report required");
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].waic.total_cmp(&reports[b].waic));
    let best = reports[order[0]].waic;
    let ranking = order
        .iter()
        .map(|&k| RankedModel {
            label: labels[k].clone(),
            waic: reports[k].waic,
            se: reports[k].se,
            delta: reports[k].waic - best,
        })
        .collect();
    let mut within_one_se = Vec::new();
    for (x, &a) in order.iter().enumerate() {
        for &b in &order[x + 1..] {
            let diff = reports[b].waic - reports[a].waic;
            if diff.abs() < reports[a].se.max(reports[b].se) {
                within_one_se.push(OverlapFlag {
                    first: labels[a].clone(),
                    second: labels[b].clone(),
                    difference: diff,
                });
            }
        }
    }
    Ok(Comparison { ranking, within_one_se })
}
