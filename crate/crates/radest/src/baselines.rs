//! Comparison methods: the 2-D-histogram dictionary objective and EM-fitted
//! Gaussian mixtures with diagonal or full covariance.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::model::{feasible_parts, sample_categorical, sample_dirichlet_flat, CpdModel};
use crate::rad::{refine_factors, PairTarget};
use crate::rng::{substream, Stream};
use crate::simplex::PgdOptions;
use crate::sketch::{bin_index, make_edges, vec_col_major};

pub const VARIANCE_FLOOR: f64 = 1e-6;

// --- 2-D histogram baseline ------------------------------------------------

/// Fraction-of-samples 2-D histogram over uniform bins spanning the data
/// range per axis. Returns the matrix and the two edge lists.
pub fn histogram_2d(
    samples: ArrayView2<f64>,
    n_bins: usize,
) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("histogram_2d needs samples"));
    }
    let xs: Vec<f64> = samples.column(0).to_vec();
    let ys: Vec<f64> = samples.column(1).to_vec();
    let ex = make_edges(&xs, n_bins)?;
    let ey = make_edges(&ys, n_bins)?;
    let mut z = Array2::zeros((ex.len() - 1, ey.len() - 1));
    for row in samples.rows() {
        if let (Some(i), Some(j)) = (bin_index(&ex, row[0]), bin_index(&ey, row[1])) {
            z[(i, j)] += 1.0;
        }
    }
    z.mapv_inplace(|v| v / samples.nrows() as f64);
    Ok((z, ex, ey))
}

fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            let v = a[(i, j)];
            if v != 0.0 {
                out.slice_mut(ndarray::s![i * rb..(i + 1) * rb, j * cb..(j + 1) * cb])
                    .assign(&(v * b));
            }
        }
    }
    out
}

#[derive(Serialize)]
pub struct JupadReport {
    pub model: CpdModel,
    pub objective_trace: Vec<f64>,
}

/// Build the pair targets of the 2-D histogram objective: for each pair,
/// the flattened histogram and the fixed linear map `X -> D_j X D_k^T`
/// expressed as the Kronecker matrix acting on the column-major vec.
pub fn jupad_targets(
    samples: ArrayView2<f64>,
    dictionaries: &[Dictionary],
    n_bins: usize,
) -> Result<Vec<PairTarget>> {
    let n = dictionaries.len();
    // Per-feature edges double as the dictionary discretization grid.
    let mut discretized = Vec::with_capacity(n);
    for f in 0..n {
        let col: Vec<f64> = samples.column(f).to_vec();
        let edges = make_edges(&col, n_bins)?;
        discretized.push((edges.clone(), dictionaries[f].discretize(&edges)?));
    }
    let mut targets = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            let mut pair = Array2::zeros((samples.nrows(), 2));
            pair.column_mut(0).assign(&samples.column(j));
            pair.column_mut(1).assign(&samples.column(k));
            let (ex, _) = &discretized[j];
            let (ey, _) = &discretized[k];
            let mut z = Array2::zeros((ex.len() - 1, ey.len() - 1));
            for row in pair.rows() {
                if let (Some(a), Some(b)) = (bin_index(ex, row[0]), bin_index(ey, row[1])) {
                    z[(a, b)] += 1.0;
                }
            }
            z.mapv_inplace(|v| v / samples.nrows() as f64);
            let dj = &discretized[j].1;
            let dk = &discretized[k].1;
            targets.push(PairTarget {
                j,
                k,
                l_j: dj.ncols(),
                l_k: dk.ncols(),
                op: Arc::new(kron(dk, dj)),
                y: vec_col_major(&z),
            });
        }
    }
    Ok(targets)
}

/// Fit the 2-D-histogram dictionary objective by projected gradient descent
/// from a seeded random simplex initialization.
pub fn jupad_fit(
    samples: ArrayView2<f64>,
    dictionaries: &[Dictionary],
    rank: usize,
    n_bins: usize,
    opts: &PgdOptions,
    seed: u64,
) -> Result<JupadReport> {
    if samples.ncols() != dictionaries.len() {
        return Err(Error::dimension("samples and dictionaries disagree"));
    }
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let targets = jupad_targets(samples, dictionaries, n_bins)?;
    let mut rng = substream(seed, &[2]);
    let weights: Vec<Array2<f64>> = dictionaries
        .iter()
        .map(|d| {
            let mut b = Array2::zeros((d.len(), rank));
            for r in 0..rank {
                b.column_mut(r).assign(&sample_dirichlet_flat(d.len(), &mut rng));
            }
            b
        })
        .collect();
    let lambda = sample_dirichlet_flat(rank, &mut rng);
    let (weights, lambda, trace) = refine_factors(&targets, weights, lambda, opts)?;
    let (weights, lambda) = feasible_parts(&weights, &lambda)?;
    let model = CpdModel::new(dictionaries.to_vec(), weights, lambda)?;
    Ok(JupadReport { model, objective_trace: trace })
}

// --- Gaussian mixtures -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Diag,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Covariances {
    /// Per-component variance vectors.
    Diag { variances: Vec<Vec<f64>> },
    /// Per-component full symmetric positive-definite matrices (row-major).
    Full { matrices: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// Component means, one vector per component.
    pub means: Vec<Vec<f64>>,
    pub covariances: Covariances,
}

/// Lower-triangular Cholesky factor; fails on non-SPD input.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn forward_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

enum CompCov {
    Diag(Array1<f64>),
    /// Cholesky factor of the full covariance plus its log-determinant.
    Full { factor: Array2<f64>, log_det: f64 },
}

struct Component {
    mean: Array1<f64>,
    cov: CompCov,
}

impl Component {
    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let n = x.len() as f64;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        match &self.cov {
            CompCov::Diag(vars) => {
                let mut q = 0.0;
                let mut log_det = 0.0;
                for i in 0..x.len() {
                    let d = x[i] - self.mean[i];
                    q += d * d / vars[i];
                    log_det += vars[i].ln();
                }
                -n * half_log_2pi - 0.5 * log_det - 0.5 * q
            }
            CompCov::Full { factor, log_det } => {
                let diff = &x.to_owned() - &self.mean;
                let z = forward_solve(factor, &diff);
                -n * half_log_2pi - 0.5 * log_det - 0.5 * z.dot(&z)
            }
        }
    }
}

fn build_components(m: &GmmModel) -> Result<Vec<Component>> {
    let mut out = Vec::with_capacity(m.weights.len());
    for (c, mean) in m.means.iter().enumerate() {
        let mean = Array1::from(mean.clone());
        let cov = match &m.covariances {
            Covariances::Diag { variances } => CompCov::Diag(Array1::from(variances[c].clone())),
            Covariances::Full { matrices } => {
                let n = mean.len();
                let a = Array2::from_shape_fn((n, n), |(i, j)| matrices[c][i][j]);
                let factor = cholesky(&a).ok_or_else(|| {
                    Error::Degenerate(format!("component {c} covariance is not SPD"))
                })?;
                let log_det = 2.0 * (0..n).map(|i| factor[(i, i)].ln()).sum::<f64>();
                CompCov::Full { factor, log_det }
            }
        };
        out.push(Component { mean, cov });
    }
    Ok(out)
}

impl GmmModel {
    pub fn dimension(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn covariance_kind(&self) -> CovarianceKind {
        match self.covariances {
            Covariances::Diag { .. } => CovarianceKind::Diag,
            Covariances::Full { .. } => CovarianceKind::Full,
        }
    }

    pub fn density(&self, x: ArrayView1<f64>) -> f64 {
        self.log_density(x).exp()
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let comps = build_components(self).expect("validated at construction");
        let logs: Vec<f64> = comps
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| w.max(f64::MIN_POSITIVE).ln() + c.log_density(x))
            .collect();
        log_sum_exp(&logs)
    }

    pub fn sample(&self, count: usize, rng: &mut Stream) -> Array2<f64> {
        let comps = build_components(self).expect("validated at construction");
        let n = self.dimension();
        let weights = Array1::from(self.weights.clone());
        let mut out = Array2::zeros((count, n));
        for mut row in out.rows_mut() {
            let c = sample_categorical(weights.view(), rng);
            match &comps[c].cov {
                CompCov::Diag(vars) => {
                    for i in 0..n {
                        let z: f64 = rand_distr::StandardNormal.sample(rng);
                        row[i] = comps[c].mean[i] + vars[i].sqrt() * z;
                    }
                }
                CompCov::Full { factor, .. } => {
                    let z = Array1::from_shape_fn(n, |_| {
                        rand_distr::StandardNormal.sample(rng)
                    });
                    let v = factor.dot(&z) + &comps[c].mean;
                    row.assign(&v);
                }
            }
        }
        out
    }
}

use rand_distr::Distribution;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Serialize)]
pub struct GmmFitReport {
    pub model: GmmModel,
    pub loglik_trace: Vec<f64>,
    /// Components that collapsed and were re-seeded from a random sample.
    pub reinitialized: usize,
}

fn kmeanspp_means(samples: ArrayView2<f64>, c: usize, rng: &mut Stream) -> Array2<f64> {
    let k = samples.nrows();
    let n = samples.ncols();
    let mut means = Array2::zeros((c, n));
    let first = (rng.random::<f64>() * k as f64) as usize % k;
    means.row_mut(0).assign(&samples.row(first));
    let mut dist = vec![f64::INFINITY; k];
    for picked in 1..c {
        for i in 0..k {
            let prev = means.row(picked - 1);
            let d: f64 = samples
                .row(i)
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i] = dist[i].min(d);
        }
        let total: f64 = dist.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = k - 1;
        for i in 0..k {
            u -= dist[i];
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        means.row_mut(picked).assign(&samples.row(chosen));
    }
    means
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { tol: 1e-6, max_iters: 200 }
    }
}

/// Expectation-maximization for a Gaussian mixture with `c` components.
/// Collapsed components are re-seeded from a random sample and counted.
pub fn gmm_fit(
    samples: ArrayView2<f64>,
    c: usize,
    kind: CovarianceKind,
    opts: &EmOptions,
    seed: u64,
) -> Result<GmmFitReport> {
    let k = samples.nrows();
    let n = samples.ncols();
    if c == 0 || k <= c {
        return Err(Error::invalid(format!("need more samples ({k}) than components ({c})")));
    }
    let mut rng = substream(seed, &[3, c as u64]);
    let mut means = kmeanspp_means(samples, c, &mut rng);
    let mut weights = Array1::from_elem(c, 1.0 / c as f64);
    // Start covariances from the pooled per-feature variance.
    let pooled: Array1<f64> = {
        let mean = samples.mean_axis(Axis(0)).unwrap();
        let mut v = Array1::zeros(n);
        for row in samples.rows() {
            for i in 0..n {
                let d = row[i] - mean[i];
                v[i] += d * d;
            }
        }
        v.mapv(|x: f64| (x / k as f64).max(VARIANCE_FLOOR))
    };
    let mut covs: Vec<Array2<f64>> = (0..c).map(|_| Array2::from_diag(&pooled)).collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut reinitialized = 0usize;
    let mut reinit_last_step = false;
    let mut resp = Array2::zeros((k, c));
    for _ in 0..opts.max_iters {
        // E-step in the log domain.
        let model = snapshot(&weights, &means, &covs, kind);
        let comps = build_components(&model)?;
        let mut ll = 0.0;
        for (i, row) in samples.rows().into_iter().enumerate() {
            let logs: Vec<f64> = comps
                .iter()
                .zip(weights.iter())
                .map(|(cc, &w)| w.max(f64::MIN_POSITIVE).ln() + cc.log_density(row))
                .collect();
            let lse = log_sum_exp(&logs);
            ll += lse;
            for j in 0..c {
                resp[(i, j)] = (logs[j] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            // Re-seeding a collapsed component may drop the likelihood;
            // otherwise EM must not decrease it.
            if !reinit_last_step && ll < prev - 1e-8 * (1.0 + prev.abs()) {
                return Err(Error::NonFinite(format!(
                    "EM log-likelihood decreased ({prev} -> {ll})"
                )));
            }
            trace.push(ll);
            if !reinit_last_step && (ll - prev).abs() < opts.tol {
                break;
            }
        } else {
            trace.push(ll);
        }
        reinit_last_step = false;
        // M-step.
        for j in 0..c {
            let mass: f64 = resp.column(j).sum();
            if !(mass > 1e-10) {
                // Collapsed component: re-seed from a random sample.
                reinitialized += 1;
                reinit_last_step = true;
                let idx = (rng.random::<f64>() * k as f64) as usize % k;
                means.row_mut(j).assign(&samples.row(idx));
                covs[j] = Array2::from_diag(&pooled);
                weights[j] = 1.0 / k as f64;
                continue;
            }
            weights[j] = mass / k as f64;
            let mut mu = Array1::zeros(n);
            for (i, row) in samples.rows().into_iter().enumerate() {
                mu.scaled_add(resp[(i, j)], &row);
            }
            mu.mapv_inplace(|v| v / mass);
            means.row_mut(j).assign(&mu);
            match kind {
                CovarianceKind::Diag => {
                    let mut var = Array1::zeros(n);
                    for (i, row) in samples.rows().into_iter().enumerate() {
                        for d in 0..n {
                            let diff = row[d] - mu[d];
                            var[d] += resp[(i, j)] * diff * diff;
                        }
                    }
                    var.mapv_inplace(|v: f64| (v / mass).max(VARIANCE_FLOOR));
                    covs[j] = Array2::from_diag(&var);
                }
                CovarianceKind::Full => {
                    let mut sigma = Array2::zeros((n, n));
                    for (i, row) in samples.rows().into_iter().enumerate() {
                        let diff = &row.to_owned() - &mu;
                        let r = resp[(i, j)];
                        for a in 0..n {
                            for b in 0..n {
                                sigma[(a, b)] += r * diff[a] * diff[b];
                            }
                        }
                    }
                    sigma.mapv_inplace(|v| v / mass);
                    for d in 0..n {
                        sigma[(d, d)] += VARIANCE_FLOOR;
                    }
                    covs[j] = sigma;
                }
            }
        }
        let total: f64 = weights.sum();
        weights.mapv_inplace(|w| w / total);
    }
    let model = snapshot(&weights, &means, &covs, kind);
    build_components(&model)?; // SPD check on the final covariances
    Ok(GmmFitReport { model, loglik_trace: trace, reinitialized })
}

fn snapshot(
    weights: &Array1<f64>,
    means: &Array2<f64>,
    covs: &[Array2<f64>],
    kind: CovarianceKind,
) -> GmmModel {
    let c = weights.len();
    let covariances = match kind {
        CovarianceKind::Diag => Covariances::Diag {
            variances: (0..c).map(|j| covs[j].diag().to_vec()).collect(),
        },
        CovarianceKind::Full => Covariances::Full {
            matrices: (0..c)
                .map(|j| covs[j].rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
        },
    };
    GmmModel {
        weights: weights.to_vec(),
        means: means.rows().into_iter().map(|r| r.to_vec()).collect(),
        covariances,
    }
}

#[derive(Serialize)]
pub struct GmmSelection {
    pub model: GmmModel,
    pub selected_components: usize,
    /// (component count, validation negative log-likelihood per sample).
    pub validation_nll: Vec<(usize, f64)>,
}

/// Model selection over a component grid: seeded 90/10 split, fit each
/// count on the 90% part, pick the lowest validation NLL.
pub fn gmm_select(
    samples: ArrayView2<f64>,
    grid: &[usize],
    kind: CovarianceKind,
    opts: &EmOptions,
    seed: u64,
) -> Result<GmmSelection> {
    if grid.is_empty() {
        return Err(Error::invalid("component grid is empty"));
    }
    let k = samples.nrows();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut rng = substream(seed, &[4]);
    // Fisher-Yates shuffle.
    for i in (1..k).rev() {
        let j = (rng.random::<f64>() * (i + 1) as f64) as usize % (i + 1);
        idx.swap(i, j);
    }
    let n_val = (k / 10).max(1);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let gather = |ids: &[usize]| {
        let mut out = Array2::zeros((ids.len(), samples.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&samples.row(i));
        }
        out
    };
    let train = gather(train_idx);
    let val = gather(val_idx);
    let fits: Vec<(usize, GmmFitReport, f64)> = grid
        .par_iter()
        .map(|&c| -> Result<(usize, GmmFitReport, f64)> {
            let fit = gmm_fit(train.view(), c, kind, opts, seed ^ (c as u64).rotate_left(32))?;
            let nll = -val
                .rows()
                .into_iter()
                .map(|row| fit.model.log_density(row))
                .sum::<f64>()
                / val.nrows() as f64;
            Ok((c, fit, nll))
        })
        .collect::<Result<_>>()?;
    let mut validation_nll: Vec<(usize, f64)> = fits.iter().map(|(c, _, n)| (*c, *n)).collect();
    validation_nll.sort_by_key(|&(c, _)| c);
    let best = fits
        .into_iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)))
        .unwrap();
    Ok(GmmSelection { model: best.1.model, selected_components: best.0, validation_nll })
}
