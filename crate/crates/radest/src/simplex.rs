//! Shared constrained-optimization primitives: Euclidean projection onto the
//! probability simplex, simplex-constrained least squares, and a projected
//! gradient engine with Armijo backtracking over per-column simplex blocks.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PgdOptions {
    pub max_iters: usize,
    /// Absolute objective-change stopping threshold.
    pub tol: f64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    /// Initial step size for the backtracking line search.
    pub eta0: f64,
}

impl Default for PgdOptions {
    fn default() -> Self {
        PgdOptions { max_iters: 500, tol: 1e-6, armijo_c: 1e-4, armijo_shrink: 0.5, eta0: 1.0 }
    }
}

impl PgdOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1
            || self.tol <= 0.0
            || !(0.0 < self.armijo_c && self.armijo_c < 1.0)
            || !(0.0 < self.armijo_shrink && self.armijo_shrink < 1.0)
            || self.eta0 <= 0.0
        {
            return Err(Error::invalid("bad PgdOptions"));
        }
        Ok(())
    }
}

/// Euclidean projection of `v` onto the probability simplex, by sorting and
/// thresholding. The projection is unique, so threshold ties are harmless.
pub fn project_simplex(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("project_simplex input".into()));
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    Ok(v.mapv(|x| (x - theta).max(0.0)))
}

/// In-place variant for block updates.
pub fn project_simplex_inplace(mut v: ArrayViewMut1<f64>) -> Result<()> {
    let p = project_simplex(v.view())?;
    v.assign(&p);
    Ok(())
}

/// Variable layout for the projected-gradient engine: a flat vector split
/// into contiguous blocks, each constrained to its own probability simplex.
#[derive(Debug, Clone)]
pub struct SimplexBlocks {
    /// (offset, length) of each simplex block; blocks must tile a prefix of
    /// the variable (unconstrained trailing entries are not supported).
    pub blocks: Vec<(usize, usize)>,
}

impl SimplexBlocks {
    /// One block covering the whole vector.
    pub fn single(dim: usize) -> Self {
        SimplexBlocks { blocks: vec![(0, dim)] }
    }

    /// Column blocks of a stack of matrices: for each matrix of shape
    /// (rows, cols) stored column-major in sequence, every column is a block.
    pub fn matrix_columns(shapes: &[(usize, usize)]) -> Self {
        let mut blocks = Vec::new();
        let mut off = 0;
        for &(rows, cols) in shapes {
            for _ in 0..cols {
                blocks.push((off, rows));
                off += rows;
            }
        }
        SimplexBlocks { blocks }
    }

    pub fn project(&self, x: &mut Array1<f64>) -> Result<()> {
        for &(off, len) in &self.blocks {
            project_simplex_inplace(x.slice_mut(ndarray::s![off..off + len]))?;
        }
        Ok(())
    }

    pub fn is_feasible(&self, x: &Array1<f64>, tol: f64) -> bool {
        self.blocks.iter().all(|&(off, len)| {
            let s = x.slice(ndarray::s![off..off + len]);
            s.iter().all(|&v| v >= -tol) && (s.sum() - 1.0).abs() <= len as f64 * tol
        })
    }
}

/// Projection operators accepted by the shared descent engine.
enum Feasible<'a> {
    Simplex(&'a SimplexBlocks),
    Nonnegative,
}

impl Feasible<'_> {
    fn apply(&self, x: &mut Array1<f64>) -> Result<()> {
        match self {
            Feasible::Simplex(b) => b.project(x),
            Feasible::Nonnegative => {
                x.mapv_inplace(|v| v.max(0.0));
                Ok(())
            }
        }
    }
}

fn pgd_engine<F, G>(
    f: &F,
    g: &G,
    feasible: &Feasible<'_>,
    x0: Array1<f64>,
    opts: &PgdOptions,
) -> Result<(Array1<f64>, Vec<f64>)>
where
    F: Fn(&Array1<f64>) -> f64,
    G: Fn(&Array1<f64>) -> Array1<f64>,
{
    opts.validate()?;
    let mut x = x0;
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at start point".into()));
    }
    let mut trace = vec![fx];
    let mut eta = opts.eta0;
    for _ in 0..opts.max_iters {
        let grad = g(&x);
        // Warm-start the line search near the last accepted step.
        eta = (eta * 4.0).min(opts.eta0);
        let mut accepted = None;
        while eta > 1e-18 {
            let mut cand = &x - &(eta * &grad);
            feasible.apply(&mut cand)?;
            let step = &cand - &x;
            let step_sq = step.dot(&step);
            if step_sq == 0.0 {
                break;
            }
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx - opts.armijo_c / eta * step_sq {
                accepted = Some((cand, fc));
                break;
            }
            eta *= opts.armijo_shrink;
        }
        match accepted {
            None => break, // no descent step found: stationary
            Some((cand, fc)) => {
                let delta = fx - fc;
                x = cand;
                fx = fc;
                trace.push(fx);
                if delta < opts.tol {
                    break;
                }
            }
        }
    }
    Ok((x, trace))
}

/// Projected gradient descent with Armijo backtracking over per-block
/// simplex constraints. `x0` must be feasible. Returns the final point and
/// the (nonincreasing) objective trace.
pub fn pgd_armijo<F, G>(
    f: F,
    g: G,
    blocks: &SimplexBlocks,
    x0: Array1<f64>,
    opts: &PgdOptions,
) -> Result<(Array1<f64>, Vec<f64>)>
where
    F: Fn(&Array1<f64>) -> f64,
    G: Fn(&Array1<f64>) -> Array1<f64>,
{
    if !blocks.is_feasible(&x0, 1e-9) {
        return Err(Error::invalid("pgd_armijo start point is infeasible"));
    }
    pgd_engine(&f, &g, &Feasible::Simplex(blocks), x0, opts)
}

/// Least squares `min ||y - A x||^2` subject to `x` on the probability
/// simplex, solved by projected gradient descent. Deterministic.
pub fn simplex_ls(a: &Array2<f64>, y: &Array1<f64>, opts: &PgdOptions) -> Result<Array1<f64>> {
    let (rows, cols) = a.dim();
    if y.len() != rows {
        return Err(Error::dimension(format!(
            "simplex_ls: A is {rows}x{cols} but y has length {}",
            y.len()
        )));
    }
    let x0 = Array1::from_elem(cols, 1.0 / cols as f64);
    let f = |x: &Array1<f64>| {
        let r = a.dot(x) - y;
        r.dot(&r)
    };
    let g = |x: &Array1<f64>| {
        let r = a.dot(x) - y;
        2.0 * a.t().dot(&r)
    };
    let blocks = SimplexBlocks::single(cols);
    let (x, _) = pgd_engine(&f, &g, &Feasible::Simplex(&blocks), x0, opts)?;
    Ok(x)
}

/// Nonnegative least squares `min ||y - A x||^2, x >= 0` via the same
/// projected-gradient engine with a nonnegativity projection.
pub fn nnls(a: &Array2<f64>, y: &Array1<f64>, opts: &PgdOptions) -> Result<Array1<f64>> {
    let (rows, cols) = a.dim();
    if y.len() != rows {
        return Err(Error::dimension("nnls shape mismatch"));
    }
    let x0 = Array1::zeros(cols);
    let f = |x: &Array1<f64>| {
        let r = a.dot(x) - y;
        r.dot(&r)
    };
    let g = |x: &Array1<f64>| {
        let r = a.dot(x) - y;
        2.0 * a.t().dot(&r)
    };
    let (x, _) = pgd_engine(&f, &g, &Feasible::Nonnegative, x0, opts)?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    /// Brute-force simplex projection by active-set enumeration: try every
    /// nonempty support set, solve the equality-constrained quadratic in
    /// closed form, keep the feasible candidate closest to v.
    fn project_bruteforce(v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << d) {
            let support: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
            let s: f64 = support.iter().map(|&i| v[i]).sum();
            let shift = (s - 1.0) / support.len() as f64;
            let mut w = vec![0.0; d];
            let mut ok = true;
            for &i in &support {
                w[i] = v[i] - shift;
                if w[i] < -1e-12 {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            let dist: f64 = (0..d).map(|i| (w[i] - v[i]).powi(2)).sum();
            if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
                best = Some((dist, w));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_identity_on_simplex() {
        let v = array![0.2, 0.3, 0.5];
        let p = project_simplex(v.view()).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(p[i], v[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_symmetric() {
        let p = project_simplex(array![1.0, 1.0].view()).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn projection_clips_negative() {
        let p = project_simplex(array![0.8, -0.2].view()).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_bruteforce() {
        let mut rng = substream(31, &[]);
        for _ in 0..200 {
            let d = 1 + (rng.random::<f64>() * 4.0) as usize;
            let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let p = project_simplex(Array1::from(v.clone()).view()).unwrap();
            let b = project_bruteforce(&v);
            for i in 0..d {
                assert_abs_diff_eq!(p[i], b[i], epsilon = 1e-10);
            }
            assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_idempotent() {
        let mut rng = substream(37, &[]);
        for _ in 0..50 {
            let v: Array1<f64> = Array1::from_iter((0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0));
            let p1 = project_simplex(v.view()).unwrap();
            let p2 = project_simplex(p1.view()).unwrap();
            for i in 0..6 {
                assert!((p1[i] - p2[i]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn projection_rejects_nonfinite() {
        assert!(project_simplex(array![f64::NAN, 0.0].view()).is_err());
    }

    #[test]
    fn simplex_ls_identity_cases() {
        let opts = PgdOptions { tol: 1e-14, max_iters: 2000, ..Default::default() };
        let a = Array2::eye(3);
        let y = array![0.2, 0.5, 0.3];
        let x = simplex_ls(&a, &y, &opts).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], y[i], epsilon = 1e-8);
        }
        let a2 = Array2::eye(2);
        let x2 = simplex_ls(&a2, &array![1.0, 1.0], &opts).unwrap();
        assert_abs_diff_eq!(x2[0], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn simplex_ls_matches_grid_oracle() {
        let mut rng = substream(41, &[]);
        let a = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(6, |_| rng.random::<f64>());
        let opts = PgdOptions { tol: 1e-14, max_iters: 5000, ..Default::default() };
        let x = simplex_ls(&a, &y, &opts).unwrap();
        let obj = {
            let r = a.dot(&x) - &y;
            r.dot(&r)
        };
        // Dense grid over the 3-simplex at resolution 1e-3.
        let mut best = f64::INFINITY;
        let steps = 1000;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let k = steps - i - j;
                let c = array![
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    k as f64 / steps as f64
                ];
                let r = a.dot(&c) - &y;
                let v = r.dot(&r);
                if v < best {
                    best = v;
                }
            }
        }
        assert!(obj <= best + 1e-5, "pgd {obj} vs grid {best}");
    }

    #[test]
    fn pgd_zero_gradient_returns_start() {
        let blocks = SimplexBlocks::single(3);
        let x0 = array![0.3, 0.3, 0.4];
        let (x, trace) =
            pgd_armijo(|_| 1.0, |_| Array1::zeros(3), &blocks, x0.clone(), &PgdOptions::default())
                .unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(x, x0);
    }

    #[test]
    fn pgd_quadratic_converges_to_target() {
        let c = array![0.1, 0.6, 0.3];
        let blocks = SimplexBlocks::single(3);
        let x0 = array![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let opts = PgdOptions { tol: 1e-15, max_iters: 5000, ..Default::default() };
        let cc = c.clone();
        let (x, trace) = pgd_armijo(
            move |x: &Array1<f64>| {
                let d = x - &cc;
                d.dot(&d)
            },
            {
                let c = c.clone();
                move |x: &Array1<f64>| 2.0 * (x - &c)
            },
            &blocks,
            x0,
            &opts,
        )
        .unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], c[i], epsilon = 1e-6);
        }
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn pgd_rejects_infeasible_start() {
        let blocks = SimplexBlocks::single(2);
        let r = pgd_armijo(
            |_| 0.0,
            |_| Array1::zeros(2),
            &blocks,
            array![0.9, 0.9],
            &PgdOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn nnls_unconstrained_optimum_nonnegative() {
        // When the unconstrained solution is nonnegative, nnls finds it.
        let a = array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        let x_true = array![0.7, 0.4];
        let y = a.dot(&x_true);
        let opts = PgdOptions { tol: 1e-16, max_iters: 10_000, ..Default::default() };
        let x = nnls(&a, &y, &opts).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(x[i], x_true[i], epsilon = 1e-6);
        }
    }
}
