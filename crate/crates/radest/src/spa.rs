//! Separable-NMF machinery: block assembly of pairwise cores and recovery
//! of the per-feature weight matrices and mixture via the successive
//! projection algorithm.

use ndarray::{s, Array1, Array2};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::simplex::{nnls, project_simplex, PgdOptions};

/// A dense block matrix built from pairwise cores: rows are features of the
/// first partition set, columns features of the second.
#[derive(Debug, Clone)]
pub struct BlockAssembly {
    pub matrix: Array2<f64>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    /// Row offset and height per feature in `s1`.
    pub row_spans: Vec<(usize, usize)>,
    /// Column offset and width per feature in `s2`.
    pub col_spans: Vec<(usize, usize)>,
}

/// Balanced partition of `[0, n)`: first ceil(n/2) features against the rest.
pub fn balanced_partition(n: usize) -> (Vec<usize>, Vec<usize>) {
    let split = n.div_ceil(2);
    ((0..split).collect(), (split..n).collect())
}

/// Concatenate pairwise core blocks into the assembly matrix. Blocks are
/// stored for `j < k` only; when a needed block has `j > k` the transpose of
/// the stored `(k, j)` block is used.
pub fn assemble(
    blocks: &BTreeMap<(usize, usize), Array2<f64>>,
    s1: &[usize],
    s2: &[usize],
) -> Result<BlockAssembly> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::invalid("both partition sets must be nonempty"));
    }
    let get = |j: usize, k: usize| -> Result<Array2<f64>> {
        if j < k {
            blocks
                .get(&(j, k))
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing block ({j}, {k})")))
        } else {
            Ok(blocks
                .get(&(k, j))
                .ok_or_else(|| Error::invalid(format!("missing block ({k}, {j})")))?
                .t()
                .to_owned())
        }
    };
    // Feature heights/widths from the first row/column of blocks.
    let mut row_spans = Vec::with_capacity(s1.len());
    let mut col_spans = Vec::with_capacity(s2.len());
    let mut total_rows = 0;
    let mut total_cols = 0;
    for &j in s1 {
        let h = get(j, s2[0])?.nrows();
        row_spans.push((total_rows, h));
        total_rows += h;
    }
    for &k in s2 {
        let w = get(s1[0], k)?.ncols();
        col_spans.push((total_cols, w));
        total_cols += w;
    }
    let mut matrix = Array2::zeros((total_rows, total_cols));
    for (ri, &j) in s1.iter().enumerate() {
        for (ci, &k) in s2.iter().enumerate() {
            let block = get(j, k)?;
            let (r0, h) = row_spans[ri];
            let (c0, w) = col_spans[ci];
            if block.dim() != (h, w) {
                return Err(Error::dimension(format!(
                    "block ({j}, {k}) is {:?}, expected ({h}, {w})",
                    block.dim()
                )));
            }
            matrix.slice_mut(s![r0..r0 + h, c0..c0 + w]).assign(&block);
        }
    }
    Ok(BlockAssembly { matrix, s1: s1.to_vec(), s2: s2.to_vec(), row_spans, col_spans })
}

/// Greedy extreme-column selection: repeatedly pick the column of maximal
/// residual l2 norm, then project all columns onto the orthogonal complement
/// of the pick. Ties break toward the lowest index.
pub fn spa_select(mx: &Array2<f64>, f: usize) -> Result<Vec<usize>> {
    let (rows, cols) = mx.dim();
    if f == 0 || f > cols || f > rows {
        return Err(Error::invalid(format!(
            "rank {f} out of range for a {rows}x{cols} matrix; mode factors are not \
             identifiable when the rank exceeds the assembly dimensions"
        )));
    }
    let mut work = mx.clone();
    let mut picked = Vec::with_capacity(f);
    for _ in 0..f {
        let mut best = 0;
        let mut best_norm = -1.0;
        for c in 0..cols {
            let n = work.column(c).dot(&work.column(c));
            if n > best_norm + 1e-15 && !picked.contains(&c) {
                best = c;
                best_norm = n;
            }
        }
        picked.push(best);
        let u = work.column(best).to_owned();
        let norm_sq = u.dot(&u);
        if norm_sq > 0.0 {
            // Deflate: columns minus their projection on u.
            let coeffs = u.dot(&work); // length cols
            for c in 0..cols {
                let scale = coeffs[c] / norm_sq;
                let mut col = work.column_mut(c);
                col.zip_mut_with(&u, |v, &uu| *v -= scale * uu);
            }
        }
    }
    Ok(picked)
}

/// Dense linear solve by Gaussian elimination with partial pivoting; the
/// systems here are tiny (rank x rank).
fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap()
        })?;
        if m[(pivot, col)].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = m[(col, c)];
                m[(col, c)] = m[(pivot, c)];
                m[(pivot, c)] = tmp;
            }
            x.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = m[(row, col)] / m[(col, col)];
            for c in col..n {
                m[(row, c)] -= factor * m[(col, c)];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        for row in 0..col {
            let factor = m[(row, col)] / m[(col, col)];
            x[row] -= factor * x[col];
        }
        x[col] /= m[(col, col)];
    }
    Some(x)
}

/// Nonnegative least squares with an exact polish: projected gradient finds
/// the active set, then the unconstrained least squares on that support is
/// solved exactly. Falls back to the iterate when the polish leaves the
/// nonnegative orthant.
fn nnls_polished(a: &Array2<f64>, y: &Array1<f64>, opts: &PgdOptions) -> Result<Array1<f64>> {
    let x = nnls(a, y, opts)?;
    let mut support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 1e-9).collect();
    // Solve the unconstrained problem on the support; coefficients driven
    // negative belong to the active set, so drop them and re-solve.
    while !support.is_empty() {
        let mut asub = Array2::zeros((a.nrows(), support.len()));
        for (ci, &i) in support.iter().enumerate() {
            asub.column_mut(ci).assign(&a.column(i));
        }
        let ata = asub.t().dot(&asub);
        let aty = asub.t().dot(y);
        match solve_dense(&ata, &aty) {
            Some(z) if z.iter().all(|&v| v >= 0.0) => {
                let mut out = Array1::zeros(x.len());
                for (ci, &i) in support.iter().enumerate() {
                    out[i] = z[ci];
                }
                return Ok(out);
            }
            Some(z) => {
                let keep: Vec<usize> = support
                    .iter()
                    .zip(z.iter())
                    .filter(|&(_, &v)| v >= 0.0)
                    .map(|(&i, _)| i)
                    .collect();
                if keep.len() == support.len() {
                    break;
                }
                support = keep;
            }
            None => break,
        }
    }
    Ok(x)
}

/// Factors recovered from a block assembly.
#[derive(Debug)]
pub struct ExtractedFactors {
    /// Per-feature weight matrices in feature order `0..N`.
    pub weights: Vec<Array2<f64>>,
    pub mixture: Array1<f64>,
}

/// Recover `{B_n}` and `lambda` from the assembly by SPA column selection
/// followed by nonnegative least squares for the coefficient matrix.
pub fn extract_factors(assembly: &BlockAssembly, f: usize) -> Result<ExtractedFactors> {
    let t = &assembly.matrix;
    let (rows, cols) = t.dim();
    if f > rows.min(cols) {
        return Err(Error::invalid(format!(
            "rank {f} exceeds assembly min dimension {}; mode factors would not be identifiable",
            rows.min(cols)
        )));
    }
    // SPA expects columns that are convex combinations of the extremes;
    // normalize each column to unit l1 mass before selection.
    let mut normalized = t.clone();
    for mut col in normalized.columns_mut() {
        let s: f64 = col.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            col.mapv_inplace(|v| v / s);
        }
    }
    let picked = spa_select(&normalized, f)?;
    let mut w = Array2::zeros((rows, f));
    for (r, &c) in picked.iter().enumerate() {
        w.column_mut(r).assign(&t.column(c));
    }
    // The selected columns carry an arbitrary positive scale (they absorb
    // lambda and the extreme coefficient). Rescale each so its feature
    // blocks sum to one on average, matching stacked simplex columns; the
    // mixture weight then survives in the H column sums.
    for r in 0..f {
        let s: f64 = w.column(r).sum();
        if s <= 0.0 {
            return Err(Error::Degenerate(format!(
                "selected column for component {r} has zero mass"
            )));
        }
        let scale = assembly.s1.len() as f64 / s;
        w.column_mut(r).mapv_inplace(|v| v * scale);
    }
    // T ~= W H^T: row c of H solves nnls(W, T[:, c]).
    let nnls_opts = PgdOptions { tol: 1e-14, max_iters: 3000, ..Default::default() };
    let mut h = Array2::zeros((cols, f));
    for c in 0..cols {
        let sol = nnls_polished(&w, &t.column(c).to_owned(), &nnls_opts)?;
        h.row_mut(c).assign(&sol);
    }
    // Split W and H at the feature spans; normalize block columns to the
    // simplex; lambda is the mean over second-set features of the H-block
    // column sums.
    let n_features = assembly
        .s1
        .iter()
        .chain(assembly.s2.iter())
        .copied()
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let mut weights: Vec<Option<Array2<f64>>> = vec![None; n_features];
    let mut lambda = Array1::zeros(f);
    for (ci, &k) in assembly.s2.iter().enumerate() {
        let (c0, width) = assembly.col_spans[ci];
        let block = h.slice(s![c0..c0 + width, ..]); // width x F, = (Lambda B_k^T)^T
        let mut b = Array2::zeros((width, f));
        for r in 0..f {
            let col = block.column(r);
            let s: f64 = col.sum();
            if s <= 0.0 {
                // Noisy small-sample assemblies can leave a component without
                // mass in one block; seed it uniformly and let the coupled
                // updates repair it.
                b.column_mut(r).fill(1.0 / width as f64);
            } else {
                for l in 0..width {
                    b[(l, r)] = col[l] / s;
                }
            }
            lambda[r] += s.max(0.0);
        }
        weights[k] = Some(b);
    }
    lambda.mapv_inplace(|v| v / assembly.s2.len() as f64);
    for (ri, &j) in assembly.s1.iter().enumerate() {
        let (r0, height) = assembly.row_spans[ri];
        let block = w.slice(s![r0..r0 + height, ..]);
        let mut b = Array2::zeros((height, f));
        for r in 0..f {
            let col = block.column(r);
            let s: f64 = col.sum();
            if s <= 0.0 {
                b.column_mut(r).fill(1.0 / height as f64);
            } else {
                for l in 0..height {
                    b[(l, r)] = col[l] / s;
                }
            }
        }
        weights[j] = Some(b);
    }
    let lambda = project_simplex(lambda.view())?;
    // Columns already normalized; clamp rounding noise onto the simplex.
    let weights = weights
        .into_iter()
        .enumerate()
        .map(|(n, b)| b.ok_or_else(|| Error::invalid(format!("feature {n} missing from partition"))))
        .collect::<Result<Vec<_>>>()?;
    let mut cleaned = Vec::with_capacity(weights.len());
    for b in weights {
        let mut b = b;
        for mut col in b.columns_mut() {
            let p = project_simplex(col.view())?;
            col.assign(&p);
        }
        cleaned.push(b);
    }
    Ok(ExtractedFactors { weights: cleaned, mixture: lambda })
}

/// Greedy bipartite matching of estimated to reference components by total
/// variation distance between stacked factor columns. Reporting aid only.
pub fn match_components(
    est_weights: &[Array2<f64>],
    ref_weights: &[Array2<f64>],
) -> Vec<usize> {
    let f = est_weights[0].ncols();
    let mut cost = Array2::zeros((f, f));
    for (be, br) in est_weights.iter().zip(ref_weights) {
        for re in 0..f {
            for rr in 0..f {
                let tv: f64 = be
                    .column(re)
                    .iter()
                    .zip(br.column(rr))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                cost[(re, rr)] += 0.5 * tv;
            }
        }
    }
    let mut assignment = vec![usize::MAX; f];
    let mut used = vec![false; f];
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for re in 0..f {
        for rr in 0..f {
            order.push((cost[(re, rr)], re, rr));
        }
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, re, rr) in order {
        if assignment[re] == usize::MAX && !used[rr] {
            assignment[re] = rr;
            used[rr] = true;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_dirichlet_flat;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn core(bj: &Array2<f64>, bk: &Array2<f64>, lambda: &Array1<f64>) -> Array2<f64> {
        let scaled = bj * &lambda.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&bk.t())
    }

    /// Random on-simplex factors where the first F rows of each feature's
    /// matrix hold a scaled identity sub-block (the separability condition).
    fn separable_instance(
        seed: u64,
        n: usize,
        f: usize,
        l: usize,
    ) -> (Vec<Array2<f64>>, Array1<f64>) {
        assert!(l >= f + 1);
        let mut rng = substream(seed, &[]);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = Array2::zeros((l, f));
            for r in 0..f {
                let rest = sample_dirichlet_flat(l - f, &mut rng) * 0.4;
                b[(r, r)] = 0.6;
                for l2 in f..l {
                    b[(l2, r)] = rest[l2 - f];
                }
            }
            weights.push(b);
        }
        let lambda = {
            let d = sample_dirichlet_flat(f, &mut rng);
            0.5 * &d + Array1::from_elem(f, 0.5 / f as f64)
        };
        (weights, lambda)
    }

    fn blocks_from(
        weights: &[Array2<f64>],
        lambda: &Array1<f64>,
    ) -> BTreeMap<(usize, usize), Array2<f64>> {
        let n = weights.len();
        let mut blocks = BTreeMap::new();
        for j in 0..n {
            for k in j + 1..n {
                blocks.insert((j, k), core(&weights[j], &weights[k], lambda));
            }
        }
        blocks
    }

    #[test]
    fn assemble_single_pair_is_identity() {
        let (w, l) = separable_instance(1, 2, 2, 3);
        let blocks = blocks_from(&w, &l);
        let a = assemble(&blocks, &[0], &[1]).unwrap();
        assert_eq!(a.matrix, blocks[&(0, 1)]);
    }

    #[test]
    fn assemble_stacks_blocks() {
        let (w, l) = separable_instance(2, 3, 2, 3);
        let blocks = blocks_from(&w, &l);
        let a = assemble(&blocks, &[0, 1], &[2]).unwrap();
        assert_eq!(a.matrix.nrows(), 6);
        assert_eq!(a.matrix.slice(s![0..3, ..]), blocks[&(0, 2)]);
        assert_eq!(a.matrix.slice(s![3..6, ..]), blocks[&(1, 2)]);
    }

    #[test]
    fn assemble_equals_stacked_factorization() {
        let (w, lambda) = separable_instance(3, 4, 3, 5);
        let blocks = blocks_from(&w, &lambda);
        let (s1, s2) = balanced_partition(4);
        let a = assemble(&blocks, &s1, &s2).unwrap();
        // T~ = W H^T with W = stacked B_j, H^T = Lambda [B_k^T].
        let mut stacked_w = Array2::zeros((0, 3));
        for &j in &s1 {
            stacked_w = ndarray::concatenate![ndarray::Axis(0), stacked_w, w[j].clone()];
        }
        let mut stacked_bk = Array2::zeros((0, 3));
        for &k in &s2 {
            stacked_bk = ndarray::concatenate![ndarray::Axis(0), stacked_bk, w[k].clone()];
        }
        let ht = &stacked_bk * &lambda.view().insert_axis(ndarray::Axis(0));
        let product = stacked_w.dot(&ht.t());
        let diff = (&a.matrix - &product).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn assemble_missing_block_errors() {
        let (w, l) = separable_instance(4, 3, 2, 3);
        let mut blocks = blocks_from(&w, &l);
        blocks.remove(&(0, 2));
        assert!(assemble(&blocks, &[0, 1], &[2]).is_err());
    }

    #[test]
    fn spa_identity_matrix() {
        let mx = Array2::eye(3);
        let picked = spa_select(&mx, 3).unwrap();
        assert_eq!(picked, vec![0, 1, 2]);
    }

    #[test]
    fn spa_picks_extreme_points() {
        let mx = array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]];
        let picked = spa_select(&mx, 2).unwrap();
        let mut sorted = picked.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1]);
    }

    #[test]
    fn spa_recovers_separable_columns() {
        let mut rng = substream(5, &[]);
        for trial in 0..10 {
            let f = 4;
            let w = Array2::from_shape_fn((8, f), |_| rng.random::<f64>() + 0.2);
            // H^T columns: first f are the identity (extremes), rest mixtures.
            let mut ht = Array2::zeros((f, f + 6));
            for r in 0..f {
                ht[(r, r)] = 1.0;
            }
            for c in f..f + 6 {
                let mix = sample_dirichlet_flat(f, &mut rng);
                ht.column_mut(c).assign(&mix);
            }
            let mx = w.dot(&ht);
            let picked = spa_select(&mx, f).unwrap();
            let mut sorted = picked.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3], "trial {trial}");
        }
    }

    #[test]
    fn spa_scale_invariant_selection() {
        let mut rng = substream(6, &[]);
        let mx = Array2::from_shape_fn((5, 7), |_| rng.random::<f64>());
        let a = spa_select(&mx, 3).unwrap();
        let b = spa_select(&(&mx * 3.7), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spa_rank_out_of_range() {
        let mx = Array2::eye(3);
        assert!(spa_select(&mx, 4).is_err());
    }

    fn recovery_error(
        est: &ExtractedFactors,
        true_w: &[Array2<f64>],
        true_lambda: &Array1<f64>,
    ) -> f64 {
        let perm = match_components(&est.weights, true_w);
        let mut err: f64 = 0.0;
        for (be, bt) in est.weights.iter().zip(true_w) {
            for re in 0..perm.len() {
                for l in 0..bt.nrows() {
                    err = err.max((be[(l, re)] - bt[(l, perm[re])]).abs());
                }
            }
        }
        for re in 0..perm.len() {
            err = err.max((est.mixture[re] - true_lambda[perm[re]]).abs());
        }
        err
    }

    #[test]
    fn extract_recovers_constructed_factors() {
        for trial in 0..20 {
            let mut rng = substream(1000 + trial, &[]);
            let n = 3 + (rng.random::<f64>() * 3.0) as usize; // 3..5
            let f = 2 + (rng.random::<f64>() * 3.0) as usize; // 2..4
            let l = f + 1 + (rng.random::<f64>() * 2.0) as usize;
            let (w, lambda) = separable_instance(500 + trial, n, f, l.min(6));
            let blocks = blocks_from(&w, &lambda);
            let (s1, s2) = balanced_partition(n);
            let a = assemble(&blocks, &s1, &s2).unwrap();
            let est = extract_factors(&a, f).unwrap();
            let err = recovery_error(&est, &w, &lambda);
            assert!(err < 1e-8, "trial {trial}: error {err}");
        }
    }

    #[test]
    fn extract_tolerates_small_noise() {
        let (w, lambda) = separable_instance(9, 4, 3, 5);
        let mut blocks = blocks_from(&w, &lambda);
        let mut rng = substream(10, &[]);
        for b in blocks.values_mut() {
            b.mapv_inplace(|v| v + rng.random::<f64>() * 1e-6);
        }
        let (s1, s2) = balanced_partition(4);
        let a = assemble(&blocks, &s1, &s2).unwrap();
        let est = extract_factors(&a, 3).unwrap();
        let err = recovery_error(&est, &w, &lambda);
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn extract_rank_one() {
        let (w, _) = separable_instance(11, 3, 2, 4);
        // Collapse to F=1 by using only the first column of each factor.
        let w1: Vec<Array2<f64>> =
            w.iter().map(|b| b.column(0).to_owned().insert_axis(ndarray::Axis(1))).collect();
        let lambda = array![1.0];
        let blocks = blocks_from(&w1, &lambda);
        let (s1, s2) = balanced_partition(3);
        let a = assemble(&blocks, &s1, &s2).unwrap();
        let est = extract_factors(&a, 1).unwrap();
        assert_abs_diff_eq!(est.mixture[0], 1.0, epsilon = 1e-9);
        let err = recovery_error(&est, &w1, &lambda);
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn extracted_columns_are_on_simplex() {
        let (w, lambda) = separable_instance(13, 5, 3, 5);
        let blocks = blocks_from(&w, &lambda);
        let (s1, s2) = balanced_partition(5);
        let a = assemble(&blocks, &s1, &s2).unwrap();
        let est = extract_factors(&a, 3).unwrap();
        for b in &est.weights {
            for col in b.columns() {
                assert!(col.iter().all(|&v| v >= 0.0));
                assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-9);
            }
        }
        assert_abs_diff_eq!(est.mixture.sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn extract_rejects_infeasible_rank() {
        let (w, lambda) = separable_instance(15, 2, 2, 3);
        let blocks = blocks_from(&w, &lambda);
        let a = assemble(&blocks, &[0], &[1]).unwrap();
        let err = extract_factors(&a, 5).unwrap_err();
        assert!(err.to_string().contains("identifiable"));
    }
}
