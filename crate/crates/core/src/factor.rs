//! Linear exploratory factor analysis: Pearson correlations, iterated
//! principal-axis factoring, varimax rotation and the absolute-cutoff item
//! partition that IRT practice traditionally builds on.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{contract, IrtError, Result};
use crate::grm::ResponseMatrix;

const PAF_TOL: f64 = 1e-6;
const PAF_MAX_ITERS: usize = 200;
const VARIMAX_TOL: f64 = 1e-8;
const VARIMAX_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    Unrotated,
    Varimax,
}

/// Item-by-factor loadings, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingMatrix {
    pub items: usize,
    pub dims: usize,
    pub values: Vec<f64>,
    pub rotation: Rotation,
}

impl LoadingMatrix {
    pub fn new(items: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != items * dims {
            return contract("loading matrix size mismatch");
        }
        Ok(LoadingMatrix {
            items,
            dims,
            values,
            rotation: Rotation::Unrotated,
        })
    }

    #[inline]
    pub fn get(&self, item: usize, dim: usize) -> f64 {
        self.values[item * self.dims + dim]
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.values[item * self.dims..(item + 1) * self.dims]
    }

    pub fn communalities(&self) -> Vec<f64> {
        (0..self.items)
            .map(|i| self.row(i).iter().map(|l| l * l).sum())
            .collect()
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.items, self.dims, &self.values)
    }

    fn from_matrix(m: &DMatrix<f64>, rotation: Rotation) -> Self {
        let mut values = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for d in 0..m.ncols() {
                values.push(m[(i, d)]);
            }
        }
        LoadingMatrix {
            items: m.nrows(),
            dims: m.ncols(),
            values,
            rotation,
        }
    }
}

/// Pearson correlations over pairwise-complete observations.
pub fn correlation_matrix(data: &ResponseMatrix) -> Result<DMatrix<f64>> {
    let (p, n) = (data.persons(), data.items());
    if p < 2 {
        return contract("correlations need at least 2 persons");
    }
    let col = |i: usize| -> Vec<Option<f64>> { (0..p).map(|r| data.get(r, i).map(|c| c as f64)).collect() };
    let cols: Vec<Vec<Option<f64>>> = (0..n).map(col).collect();
    for (i, c) in cols.iter().enumerate() {
        let obs: Vec<f64> = c.iter().flatten().copied().collect();
        if obs.len() < 2 || obs.iter().all(|x| *x == obs[0]) {
            return Err(IrtError::ZeroVariance { item: i });
        }
    }
    let mut r = DMatrix::<f64>::identity(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let pairs: Vec<(f64, f64)> = cols[a]
                .iter()
                .zip(&cols[b])
                .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
                .collect();
            let m = pairs.len() as f64;
            let (mx, my) = pairs
                .iter()
                .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
            let (mx, my) = (mx / m, my / m);
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (x, y) in &pairs {
                sxy += (x - mx) * (y - my);
                sxx += (x - mx) * (x - mx);
                syy += (y - my) * (y - my);
            }
            if !(sxx > 0.0) {
                return Err(IrtError::ZeroVariance { item: a });
            }
            if !(syy > 0.0) {
                return Err(IrtError::ZeroVariance { item: b });
            }
            let v = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
            r[(a, b)] = v;
            r[(b, a)] = v;
        }
    }
    Ok(r)
}

fn initial_communalities(corr: &DMatrix<f64>) -> Vec<f64> {
    let n = corr.nrows();
    let max_offdiag = |i: usize| {
        (0..n)
            .filter(|&j| j != i)
            .map(|j| corr[(i, j)].abs())
            .fold(0.0, f64::max)
    };
    // squared multiple correlations, 1 - 1/diag(R⁻¹)
    let smc = corr.clone().try_inverse().map(|inv| {
        (0..n)
            .map(|i| 1.0 - 1.0 / inv[(i, i)])
            .collect::<Vec<_>>()
    });
    (0..n)
        .map(|i| match &smc {
            Some(s) if s[i].is_finite() && (0.0..=1.0).contains(&s[i]) => s[i],
            _ => max_offdiag(i),
        })
        .collect()
}

/// Flips each column so that its largest-magnitude entry is positive.
fn orient_columns(m: &mut DMatrix<f64>, rot: Option<&mut DMatrix<f64>>) {
    let mut flips = Vec::with_capacity(m.ncols());
    for d in 0..m.ncols() {
        let mut best = 0.0f64;
        for i in 0..m.nrows() {
            if m[(i, d)].abs() > best.abs() {
                best = m[(i, d)];
            }
        }
        let flip = best < 0.0;
        if flip {
            m.column_mut(d).neg_mut();
        }
        flips.push(flip);
    }
    if let Some(r) = rot {
        for (d, flip) in flips.into_iter().enumerate() {
            if flip {
                r.column_mut(d).neg_mut();
            }
        }
    }
}

/// Iterated principal-axis factoring with squared-multiple-correlation
/// starting communalities.
pub fn principal_axis(corr: &DMatrix<f64>, dims: usize) -> Result<LoadingMatrix> {
    let n = corr.nrows();
    if corr.ncols() != n {
        return contract("correlation matrix must be square");
    }
    if dims == 0 || dims >= n {
        return contract(format!("need 1 <= dims < items, got dims={dims} items={n}"));
    }
    for i in 0..n {
        if (corr[(i, i)] - 1.0).abs() > 1e-12 {
            return contract("correlation matrix must have a unit diagonal");
        }
        for j in 0..i {
            if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-12 {
                return contract("correlation matrix must be symmetric");
            }
        }
    }

    let mut h2 = initial_communalities(corr);
    let mut loadings = DMatrix::<f64>::zeros(n, dims);
    let mut change = f64::INFINITY;
    for _ in 0..PAF_MAX_ITERS {
        let mut reduced = corr.clone();
        for i in 0..n {
            reduced[(i, i)] = h2[i];
        }
        let eig = SymmetricEigen::new(reduced);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &src) in order.iter().take(dims).enumerate() {
            let ev = eig.eigenvalues[src].max(0.0).sqrt();
            for i in 0..n {
                loadings[(i, k)] = eig.eigenvectors[(i, src)] * ev;
            }
        }
        let next: Vec<f64> = (0..n)
            .map(|i| loadings.row(i).iter().map(|l| l * l).sum::<f64>().min(1.0))
            .collect();
        change = next
            .iter()
            .zip(&h2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        h2 = next;
        if change < PAF_TOL {
            orient_columns(&mut loadings, None);
            return Ok(LoadingMatrix::from_matrix(&loadings, Rotation::Unrotated));
        }
    }
    Err(IrtError::NonConvergence {
        iterations: PAF_MAX_ITERS,
        max_change: change,
        last_loadings: LoadingMatrix::from_matrix(&loadings, Rotation::Unrotated).values,
    })
}

/// Raw varimax criterion: summed column variances of squared loadings.
pub fn varimax_criterion(l: &LoadingMatrix) -> f64 {
    let p = l.items as f64;
    (0..l.dims)
        .map(|d| {
            let sq: Vec<f64> = (0..l.items).map(|i| l.get(i, d).powi(2)).collect();
            let m = sq.iter().sum::<f64>() / p;
            sq.iter().map(|s| s * s).sum::<f64>() / p - m * m
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarimaxResult {
    pub loadings: LoadingMatrix,
    /// Orthogonal D×D rotation, row-major, with `rotated = input · rotation`.
    pub rotation: Vec<f64>,
    /// Criterion before the first sweep and after each sweep.
    pub criterion: Vec<f64>,
}

/// Varimax rotation by pairwise planar sweeps.
pub fn varimax(loadings: &LoadingMatrix) -> LoadingMatrix {
    varimax_with_trace(loadings).loadings
}

pub fn varimax_with_trace(loadings: &LoadingMatrix) -> VarimaxResult {
    let (p, k) = (loadings.items, loadings.dims);
    if k < 2 {
        return VarimaxResult {
            loadings: loadings.clone(),
            rotation: vec![1.0; k * k],
            criterion: vec![varimax_criterion(loadings)],
        };
    }
    let mut l = loadings.to_matrix();
    let mut rot = DMatrix::<f64>::identity(k, k);
    let mut crit = vec![varimax_criterion(loadings)];
    let pf = p as f64;
    for _ in 0..VARIMAX_MAX_SWEEPS {
        for a in 0..k {
            for b in a + 1..k {
                let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p {
                    let (x, y) = (l[(i, a)], l[(i, b)]);
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    sa += u;
                    sb += v;
                    sc += u * u - v * v;
                    sd += 2.0 * u * v;
                }
                let num = sd - 2.0 * sa * sb / pf;
                let den = sc - (sa * sa - sb * sb) / pf;
                let phi = 0.25 * num.atan2(den);
                if phi.abs() < 1e-15 {
                    continue;
                }
                let (s, c) = phi.sin_cos();
                for m in [&mut l, &mut rot] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, a)], m[(i, b)]);
                        m[(i, a)] = x * c + y * s;
                        m[(i, b)] = -x * s + y * c;
                    }
                }
            }
        }
        let now = varimax_criterion(&LoadingMatrix::from_matrix(&l, Rotation::Varimax));
        let last = *crit.last().expect("nonempty");
        crit.push(now);
        if (now - last).abs() < VARIMAX_TOL {
            break;
        }
    }
    orient_columns(&mut l, Some(&mut rot));
    let mut rotation = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            rotation.push(rot[(i, j)]);
        }
    }
    VarimaxResult {
        loadings: LoadingMatrix::from_matrix(&l, Rotation::Varimax),
        rotation,
        criterion: crit,
    }
}

/// Per-item outcome of the absolute-loading cutoff rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// 0-based dimension.
    Dimension(usize),
    Unassigned,
    Multiple(Vec<usize>),
}

/// Assigns each item to every dimension where `|loading| >= cutoff`.
pub fn partition_by_cutoff(loadings: &LoadingMatrix, cutoff: f64) -> Result<Vec<Assignment>> {
    if !(cutoff > 0.0) {
        return contract("cutoff must be positive");
    }
    Ok((0..loadings.items)
        .map(|i| {
            let hits: Vec<usize> = loadings
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, l)| l.abs() >= cutoff)
                .map(|(d, _)| d)
                .collect();
            match hits.len() {
                0 => Assignment::Unassigned,
                1 => Assignment::Dimension(hits[0]),
                _ => Assignment::Multiple(hits),
            }
        })
        .collect())
}

/// Initial discrimination means: one plus each loading, floored at 0.05.
pub fn init_from_loadings(loadings: &LoadingMatrix) -> Vec<f64> {
    loadings.values.iter().map(|l| (1.0 + l).max(0.05)).collect()
}

/// Correlations, principal-axis extraction, then varimax when `dims >= 2`.
pub fn exploratory(data: &ResponseMatrix, dims: usize) -> Result<LoadingMatrix> {
    let corr = correlation_matrix(data)?;
    let l = principal_axis(&corr, dims)?;
    Ok(if dims >= 2 { varimax(&l) } else { l })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_factor_closed_form() {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.64, 0.64, 1.0]);
        let l = principal_axis(&corr, 1).unwrap();
        assert!((l.get(0, 0) - 0.8).abs() < 1e-5, "{:?}", l);
        assert!((l.get(1, 0) - 0.8).abs() < 1e-5);
    }

    #[test]
    fn identity_has_no_common_variance() {
        let l = principal_axis(&DMatrix::identity(4, 4), 1).unwrap();
        assert!(l.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn principal_axis_contract() {
        let corr = DMatrix::<f64>::identity(3, 3);
        assert!(principal_axis(&corr, 3).is_err());
        assert!(principal_axis(&corr, 0).is_err());
        let mut asym = DMatrix::<f64>::identity(2, 2);
        asym[(0, 1)] = 0.3;
        assert!(principal_axis(&asym, 1).is_err());
    }

    #[test]
    fn varimax_leaves_one_dimension_alone() {
        let l = LoadingMatrix::new(3, 1, vec![0.3, -0.5, 0.9]).unwrap();
        assert_eq!(varimax(&l).values, l.values);
    }

    #[test]
    fn cutoff_examples() {
        let l = LoadingMatrix::new(3, 2, vec![0.6, 0.1, 0.39, 0.39, 0.5, -0.45]).unwrap();
        let a = partition_by_cutoff(&l, 0.4).unwrap();
        assert_eq!(
            a,
            vec![
                Assignment::Dimension(0),
                Assignment::Unassigned,
                Assignment::Multiple(vec![0, 1])
            ]
        );
        assert!(partition_by_cutoff(&l, 0.0).is_err());
    }

    #[test]
    fn init_examples() {
        let l = LoadingMatrix::new(3, 1, vec![0.6, 0.0, -0.99]).unwrap();
        let v = init_from_loadings(&l);
        assert!((v[0] - 1.6).abs() < 1e-15);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 0.05);
    }

    #[test]
    fn duplicated_item_correlates_perfectly() {
        let rows: Vec<Vec<Option<usize>>> = [1, 3, 2, 2, 1, 3, 3]
            .iter()
            .zip([2, 1, 2, 1, 1, 2, 2])
            .map(|(&a, b)| vec![Some(a), Some(a), Some(b)])
            .collect();
        let data = ResponseMatrix::from_rows(&rows).unwrap();
        let r = correlation_matrix(&data).unwrap();
        assert!((r[(0, 1)] - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(r[(i, i)], 1.0);
        }
    }

    #[test]
    fn zero_variance_item_is_named() {
        let rows = vec![vec![Some(1), Some(2)], vec![Some(2), Some(2)], vec![Some(1), Some(2)]];
        let data = ResponseMatrix::from_rows(&rows).unwrap();
        assert!(matches!(
            correlation_matrix(&data),
            Err(IrtError::ZeroVariance { item: 1 })
        ));
    }
}
