//! The RAD estimator: fit a low-rank dictionary-coefficient mixture to the
//! concatenated projection-histogram sketches of every feature pair.
//!
//! Pipeline per fit: build per-pair sketches and sketch matrices, initialize
//! the auxiliary pair cores by simplex-constrained least squares, alternate
//! SPA factor extraction with coupled core updates on the intermediate
//! objective, then polish the factors with projected gradient descent on the
//! main objective.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::model::{feasible_parts, CpdModel};
use crate::simplex::{pgd_armijo, simplex_ls, PgdOptions, SimplexBlocks};
use crate::sketch::{
    bins_for_samples, empirical_sketch, gen_directions, radon_matrix, unvec_col_major,
    vec_col_major, PairSketch, RadonMatrix,
};
use crate::spa::{assemble, balanced_partition, extract_factors};

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct RadOptions {
    /// Tensor rank F.
    pub rank: usize,
    /// Projection directions per pair.
    pub directions: usize,
    /// Coupling weight between pair cores and the factor product.
    pub rho: f64,
    /// Monte Carlo draws per atom when building sketch matrices.
    pub mc_samples: usize,
    /// Options for the per-pair core updates.
    pub inner: PgdOptions,
    /// Maximum alternation sweeps on the intermediate objective.
    pub outer_iters: usize,
    /// Stopping threshold on the intermediate-objective change per sweep.
    pub outer_tol: f64,
    /// Options for the final projected-gradient polish.
    pub final_opts: PgdOptions,
    pub seed: u64,
    /// Reuse one projection set and one sketch matrix per distinct
    /// dictionary pair (valid when features share dictionaries).
    pub shared_dictionary: bool,
}

impl Default for RadOptions {
    fn default() -> Self {
        RadOptions {
            rank: 1,
            directions: 10,
            rho: 1.0,
            mc_samples: 100_000,
            inner: PgdOptions { tol: 1e-10, max_iters: 2000, ..Default::default() },
            outer_iters: 20,
            outer_tol: 1e-6,
            final_opts: PgdOptions { tol: 1e-6, max_iters: 500, ..Default::default() },
            seed: 0,
            shared_dictionary: true,
        }
    }
}

/// One pair's fitting target: the sketch vector and the linear map from a
/// vectorized `l_j x l_k` core to sketch space. Shared by the main-objective
/// gradient code and the 2-D histogram baseline.
#[derive(Debug, Clone)]
pub struct PairTarget {
    pub j: usize,
    pub k: usize,
    pub l_j: usize,
    pub l_k: usize,
    /// `b x (l_j * l_k)`, acting on column-major vectorized cores.
    pub op: Arc<Array2<f64>>,
    pub y: Array1<f64>,
}

fn pair_core_of(bj: &Array2<f64>, bk: &Array2<f64>, lambda: &Array1<f64>) -> Array2<f64> {
    let scaled = bj * &lambda.view().insert_axis(Axis(0));
    scaled.dot(&bk.t())
}

/// Main objective: sum over pairs of the squared sketch residual at the
/// current factors.
pub fn eval_objective(
    pairs: &[PairTarget],
    weights: &[Array2<f64>],
    lambda: &Array1<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let g = pair_core_of(&weights[p.j], &weights[p.k], lambda);
        if g.dim() != (p.l_j, p.l_k) {
            return Err(Error::dimension(format!("pair ({}, {}) core shape", p.j, p.k)));
        }
        let r = p.op.dot(&vec_col_major(&g)) - &p.y;
        total += r.dot(&r);
    }
    Ok(total)
}

/// Gradient of the main objective w.r.t. every weight matrix and the
/// mixture. For each pair with residual `r`, the back-projected residual
/// `G* = unvec(op^T r)` contributes `2 G* B_k Lambda` to the j factor,
/// `2 G*^T B_j Lambda` to the k factor, and `2 diag(B_j^T G* B_k)` to the
/// mixture.
pub fn grad_objective(
    pairs: &[PairTarget],
    weights: &[Array2<f64>],
    lambda: &Array1<f64>,
) -> Result<(Vec<Array2<f64>>, Array1<f64>)> {
    let f = lambda.len();
    let mut grads: Vec<Array2<f64>> =
        weights.iter().map(|b| Array2::zeros(b.dim())).collect();
    let mut grad_lambda = Array1::zeros(f);
    for p in pairs {
        let bj = &weights[p.j];
        let bk = &weights[p.k];
        let g = pair_core_of(bj, bk, lambda);
        let r = p.op.dot(&vec_col_major(&g)) - &p.y;
        let gstar = unvec_col_major(&p.op.t().dot(&r), p.l_j, p.l_k);
        let gb_k = gstar.dot(bk); // l_j x F
        let gb_j = gstar.t().dot(bj); // l_k x F
        {
            let contrib = 2.0 * &gb_k * &lambda.view().insert_axis(Axis(0));
            grads[p.j] += &contrib;
        }
        {
            let contrib = 2.0 * &gb_j * &lambda.view().insert_axis(Axis(0));
            grads[p.k] += &contrib;
        }
        for rr in 0..f {
            grad_lambda[rr] += 2.0 * bj.column(rr).dot(&gstar.dot(&bk.column(rr).to_owned()));
        }
    }
    Ok((grads, grad_lambda))
}

/// Flat packing of `({B_n}, lambda)` for the projected-gradient engine:
/// each matrix column-major, mixture last; every column and the mixture are
/// independent simplex blocks.
pub fn pack(weights: &[Array2<f64>], lambda: &Array1<f64>) -> (Array1<f64>, SimplexBlocks) {
    let total: usize = weights.iter().map(|b| b.len()).sum::<usize>() + lambda.len();
    let mut x = Array1::zeros(total);
    let mut off = 0;
    let mut shapes = Vec::new();
    for b in weights {
        let (rows, cols) = b.dim();
        shapes.push((rows, cols));
        for c in 0..cols {
            for r in 0..rows {
                x[off] = b[(r, c)];
                off += 1;
            }
        }
    }
    for (i, &v) in lambda.iter().enumerate() {
        x[off + i] = v;
    }
    let mut blocks = SimplexBlocks::matrix_columns(&shapes);
    blocks.blocks.push((off, lambda.len()));
    (x, blocks)
}

pub fn unpack(
    x: &Array1<f64>,
    shapes: &[(usize, usize)],
    f: usize,
) -> (Vec<Array2<f64>>, Array1<f64>) {
    let mut weights = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(rows, cols) in shapes {
        let mut b = Array2::zeros((rows, cols));
        for c in 0..cols {
            for r in 0..rows {
                b[(r, c)] = x[off];
                off += 1;
            }
        }
        weights.push(b);
    }
    let lambda = Array1::from_iter((0..f).map(|i| x[off + i]));
    (weights, lambda)
}

/// Projected-gradient polish of the factors against the pair targets.
/// Returns refined factors and the (nonincreasing) objective trace.
pub fn refine_factors(
    pairs: &[PairTarget],
    weights: Vec<Array2<f64>>,
    lambda: Array1<f64>,
    opts: &PgdOptions,
) -> Result<(Vec<Array2<f64>>, Array1<f64>, Vec<f64>)> {
    let shapes: Vec<(usize, usize)> = weights.iter().map(|b| b.dim()).collect();
    let f_rank = lambda.len();
    let (x0, blocks) = pack(&weights, &lambda);
    let shapes_f = shapes.clone();
    let shapes_g = shapes.clone();
    let (x, trace) = pgd_armijo(
        |x: &Array1<f64>| {
            let (w, l) = unpack(x, &shapes_f, f_rank);
            eval_objective(pairs, &w, &l).unwrap_or(f64::INFINITY)
        },
        |x: &Array1<f64>| {
            let (w, l) = unpack(x, &shapes_g, f_rank);
            let (gw, gl) = grad_objective(pairs, &w, &l).expect("gradient shapes fixed");
            pack(&gw, &gl).0
        },
        &blocks,
        x0,
        opts,
    )?;
    let (w, l) = unpack(&x, &shapes, f_rank);
    Ok((w, l, trace))
}

/// Initialize a pair core by simplex-constrained least squares against the
/// empirical sketch (the coupled objective with zero coupling weight).
pub fn init_core(sketch: &PairSketch, rm: &RadonMatrix, inner: &PgdOptions) -> Result<Array2<f64>> {
    let t = simplex_ls(&rm.r, &sketch.y, inner)?;
    Ok(unvec_col_major(&t, rm.l_j, rm.l_k))
}

/// Coupled core update: minimize the stacked least squares
/// `|| [R; sqrt(rho) I] vec(T) - [y; sqrt(rho) vec(B_j Lambda B_k^T)] ||`
/// over the simplex. Its stationarity conditions are the normal equations
/// of the pseudocode form, and it is the exact partial minimization of the
/// intermediate objective in T.
pub fn update_core(
    sketch: &PairSketch,
    rm: &RadonMatrix,
    bj: &Array2<f64>,
    bk: &Array2<f64>,
    lambda: &Array1<f64>,
    rho: f64,
    inner: &PgdOptions,
) -> Result<Array2<f64>> {
    if rho == 0.0 {
        return init_core(sketch, rm, inner);
    }
    let d = rm.l_j * rm.l_k;
    let b = rm.r.nrows();
    let sqrt_rho = rho.sqrt();
    let mut a = Array2::zeros((b + d, d));
    a.slice_mut(ndarray::s![..b, ..]).assign(&rm.r);
    for i in 0..d {
        a[(b + i, i)] = sqrt_rho;
    }
    let target = vec_col_major(&pair_core_of(bj, bk, lambda));
    let mut y = Array1::zeros(b + d);
    y.slice_mut(ndarray::s![..b]).assign(&sketch.y);
    for i in 0..d {
        y[b + i] = sqrt_rho * target[i];
    }
    let t = simplex_ls(&a, &y, inner)?;
    Ok(unvec_col_major(&t, rm.l_j, rm.l_k))
}

fn pair_j2_term(
    sketch: &PairSketch,
    rm: &RadonMatrix,
    t: &Array2<f64>,
    core: &Array2<f64>,
    rho: f64,
) -> f64 {
    let r = rm.r.dot(&vec_col_major(t)) - &sketch.y;
    let d = t - core;
    r.dot(&r) + rho * d.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct Timings {
    pub sketch_seconds: f64,
    pub init_seconds: f64,
    pub alternation_seconds: f64,
    pub refine_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub model: CpdModel,
    pub j1_trace: Vec<f64>,
    /// Intermediate objective after each alternation sweep.
    pub j2_trace: Vec<f64>,
    /// Change of the intermediate objective caused by each SPA re-extraction
    /// (may be positive; the extraction is a re-initialization, not descent).
    pub spa_deltas: Vec<f64>,
    /// Residual `||y - R vec(T)||^2` of each pair's initial core, in sorted
    /// pair order.
    pub init_residuals: Vec<f64>,
    pub timings: Timings,
}

struct PairState {
    j: usize,
    k: usize,
    sketch: PairSketch,
    rm: Arc<RadonMatrix>,
    core: Array2<f64>,
}

fn build_pairs(
    samples: ArrayView2<f64>,
    dictionaries: &[Dictionary],
    opts: &RadOptions,
) -> Result<Vec<PairState>> {
    let n = dictionaries.len();
    let k_samples = samples.nrows();
    let n_bins = bins_for_samples(k_samples);
    let pair_list: Vec<(usize, usize)> =
        (0..n).flat_map(|j| ((j + 1)..n).map(move |k| (j, k))).collect();
    let pair_view = |j: usize, k: usize| -> Array2<f64> {
        let mut v = Array2::zeros((k_samples, 2));
        v.column_mut(0).assign(&samples.column(j));
        v.column_mut(1).assign(&samples.column(k));
        v
    };
    if opts.shared_dictionary {
        // One direction set; edges pooled over all pairs so a single binning
        // is valid everywhere; one sketch matrix per distinct dictionary pair.
        let mut rng = crate::rng::substream(opts.seed, &[1]);
        let mut proj = gen_directions(opts.directions, &mut rng)?;
        let pair_samples: Vec<Array2<f64>> =
            pair_list.iter().map(|&(j, k)| pair_view(j, k)).collect();
        let views: Vec<ArrayView2<f64>> = pair_samples.iter().map(|s| s.view()).collect();
        proj.set_edges_from_data(&views, n_bins)?;
        let mut cache: BTreeMap<(u64, u64), Arc<RadonMatrix>> = BTreeMap::new();
        for &(j, k) in &pair_list {
            let key = (dictionaries[j].content_hash(), dictionaries[k].content_hash());
            if !cache.contains_key(&key) {
                let rm = radon_matrix(
                    0,
                    0,
                    &dictionaries[j],
                    &dictionaries[k],
                    &proj,
                    opts.mc_samples,
                    opts.seed ^ key.0 ^ key.1.rotate_left(17),
                )?;
                cache.insert(key, Arc::new(rm));
            }
        }
        pair_list
            .par_iter()
            .zip(pair_samples.par_iter())
            .map(|(&(j, k), s)| {
                let sketch = empirical_sketch(j, k, s.view(), &proj)?;
                let key = (dictionaries[j].content_hash(), dictionaries[k].content_hash());
                let rm = cache[&key].clone();
                Ok(PairState { j, k, sketch, rm, core: Array2::zeros((0, 0)) })
            })
            .collect()
    } else {
        pair_list
            .par_iter()
            .map(|&(j, k)| {
                let s = pair_view(j, k);
                let mut rng = crate::rng::substream(opts.seed, &[1, j as u64, k as u64]);
                let mut proj = gen_directions(opts.directions, &mut rng)?;
                proj.set_edges_from_data(&[s.view()], n_bins)?;
                let sketch = empirical_sketch(j, k, s.view(), &proj)?;
                let rm =
                    radon_matrix(j, k, &dictionaries[j], &dictionaries[k], &proj, opts.mc_samples, opts.seed)?;
                Ok(PairState { j, k, sketch, rm: Arc::new(rm), core: Array2::zeros((0, 0)) })
            })
            .collect()
    }
}

/// Fit the model to `samples` (a `K x N` matrix) with the given dictionaries.
pub fn fit(
    samples: ArrayView2<f64>,
    dictionaries: &[Dictionary],
    opts: &RadOptions,
) -> Result<FitReport> {
    let n = dictionaries.len();
    if samples.nrows() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    if samples.ncols() != n {
        return Err(Error::dimension(format!(
            "samples have {} features, {} dictionaries given",
            samples.ncols(),
            n
        )));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two features to form pairs"));
    }
    let (s1, s2) = balanced_partition(n);
    let rows: usize = s1.iter().map(|&j| dictionaries[j].len()).sum();
    let cols: usize = s2.iter().map(|&k| dictionaries[k].len()).sum();
    if opts.rank > rows.min(cols) {
        return Err(Error::invalid(format!(
            "rank {} exceeds assembly min dimension {}; mode factors would not be identifiable",
            opts.rank,
            rows.min(cols)
        )));
    }
    let mut timings = Timings::default();

    let t0 = Instant::now();
    let mut pairs = build_pairs(samples, dictionaries, opts)?;
    timings.sketch_seconds = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let cores: Vec<Array2<f64>> = pairs
        .par_iter()
        .map(|p| init_core(&p.sketch, &p.rm, &opts.inner))
        .collect::<Result<_>>()?;
    for (p, core) in pairs.iter_mut().zip(cores) {
        p.core = core;
    }
    let init_residuals: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let r = p.rm.r.dot(&vec_col_major(&p.core)) - &p.sketch.y;
            r.dot(&r)
        })
        .collect();
    timings.init_seconds = t0.elapsed().as_secs_f64();

    // Alternation on the intermediate objective.
    let t0 = Instant::now();
    let mut j2_trace = Vec::new();
    let mut spa_deltas = Vec::new();
    let mut factors: Option<(Vec<Array2<f64>>, Array1<f64>)> = None;
    for _sweep in 0..opts.outer_iters {
        let blocks: BTreeMap<(usize, usize), Array2<f64>> =
            pairs.iter().map(|p| ((p.j, p.k), p.core.clone())).collect();
        let assembly = assemble(&blocks, &s1, &s2)?;
        let extracted = extract_factors(&assembly, opts.rank)?;
        let (w, l) = (extracted.weights, extracted.mixture);
        let j2_after_spa: f64 = pairs
            .iter()
            .map(|p| {
                let core = pair_core_of(&w[p.j], &w[p.k], &l);
                pair_j2_term(&p.sketch, &p.rm, &p.core, &core, opts.rho)
            })
            .sum();
        if let Some(last) = j2_trace.last() {
            spa_deltas.push(j2_after_spa - last);
        }
        let new_cores: Vec<Array2<f64>> = pairs
            .par_iter()
            .map(|p| update_core(&p.sketch, &p.rm, &w[p.j], &w[p.k], &l, opts.rho, &opts.inner))
            .collect::<Result<_>>()?;
        let mut j2 = 0.0;
        for (p, core) in pairs.iter_mut().zip(new_cores) {
            let model_core = pair_core_of(&w[p.j], &w[p.k], &l);
            let before = pair_j2_term(&p.sketch, &p.rm, &p.core, &model_core, opts.rho);
            let after = pair_j2_term(&p.sketch, &p.rm, &core, &model_core, opts.rho);
            // The update is a partial minimization; if the solver's iterate
            // lands above the previous core by its own tolerance, keep the
            // previous core so the sweep objective never increases.
            if after <= before {
                p.core = core;
                j2 += after;
            } else {
                j2 += before;
            }
        }
        let done = j2_trace
            .last()
            .map(|&prev: &f64| (prev - j2).abs() < opts.outer_tol)
            .unwrap_or(false);
        j2_trace.push(j2);
        factors = Some((w, l));
        if done {
            break;
        }
    }
    timings.alternation_seconds = t0.elapsed().as_secs_f64();
    let (weights, lambda) =
        factors.ok_or_else(|| Error::invalid("outer_iters must be at least 1"))?;

    // Final polish on the main objective.
    let t0 = Instant::now();
    let targets: Vec<PairTarget> = pairs
        .iter()
        .map(|p| PairTarget {
            j: p.j,
            k: p.k,
            l_j: p.rm.l_j,
            l_k: p.rm.l_k,
            op: Arc::new(p.rm.r.clone()),
            y: p.sketch.y.clone(),
        })
        .collect();
    let (weights, lambda, j1_trace) =
        refine_factors(&targets, weights, lambda, &opts.final_opts)?;
    timings.refine_seconds = t0.elapsed().as_secs_f64();

    let (weights, lambda) = feasible_parts(&weights, &lambda)?;
    let model = CpdModel::new(dictionaries.to_vec(), weights, lambda)?;
    Ok(FitReport { model, j1_trace, j2_trace, spa_deltas, init_residuals, timings })
}
