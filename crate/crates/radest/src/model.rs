//! The low-rank mixture-of-products density model.
//!
//! `f(x) = sum_r lambda[r] * prod_n (D_n B_n[:, r])(x_n)` where `D_n` is the
//! feature's dictionary and each `B_n` column is a point on the probability
//! simplex. Densities are taken w.r.t. the product of Lebesgue measure on
//! continuous features and counting measure on discrete ones, so mixed
//! models have well-defined likelihoods.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::simplex::project_simplex;

const VALIDATE_TOL: f64 = 1e-9;
const RENORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CpdModel {
    dictionaries: Vec<Dictionary>,
    /// Per-feature weight matrices, shape `L_n x F`, columns on the simplex.
    weights: Vec<Array2<f64>>,
    /// Mixture weights over the F latent components.
    mixture: Array1<f64>,
}

fn normalize_column(col: &mut ndarray::ArrayViewMut1<f64>, what: &str) -> Result<()> {
    let s = col.sum();
    if col.iter().any(|&v| v < -RENORM_TOL) || (s - 1.0).abs() > RENORM_TOL {
        return Err(Error::invalid(format!("{what} is not on the simplex (sum {s})")));
    }
    if s <= 0.0 {
        return Err(Error::Degenerate(format!("{what} has zero mass")));
    }
    if (s - 1.0).abs() > VALIDATE_TOL || col.iter().any(|&v| v < 0.0) {
        col.mapv_inplace(|v| v.max(0.0));
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    Ok(())
}

impl CpdModel {
    /// Build a model, checking simplex invariants at tolerance 1e-9 and
    /// renormalizing inputs that are off by at most 1e-6 (optimizer rounding
    /// noise); anything worse is rejected.
    pub fn new(
        dictionaries: Vec<Dictionary>,
        mut weights: Vec<Array2<f64>>,
        mixture: Array1<f64>,
    ) -> Result<Self> {
        if dictionaries.is_empty() || dictionaries.len() != weights.len() {
            return Err(Error::dimension("dictionaries and weights must align"));
        }
        let f = mixture.len();
        if f == 0 {
            return Err(Error::invalid("mixture must have at least one component"));
        }
        for (n, (d, b)) in dictionaries.iter().zip(&weights).enumerate() {
            let (l, bf) = b.dim();
            if l != d.len() || bf != f {
                return Err(Error::dimension(format!(
                    "weights[{n}] has shape {l}x{bf}, expected {}x{f}",
                    d.len()
                )));
            }
        }
        for (n, b) in weights.iter_mut().enumerate() {
            for (r, mut col) in b.columns_mut().into_iter().enumerate() {
                normalize_column(&mut col, &format!("weights[{n}] column {r}"))?;
            }
        }
        let mut mixture = mixture;
        normalize_column(&mut mixture.view_mut(), "mixture")?;
        Ok(CpdModel { dictionaries, weights, mixture })
    }

    pub fn num_features(&self) -> usize {
        self.dictionaries.len()
    }

    pub fn rank(&self) -> usize {
        self.mixture.len()
    }

    pub fn dictionaries(&self) -> &[Dictionary] {
        &self.dictionaries
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn mixture(&self) -> &Array1<f64> {
        &self.mixture
    }

    /// Joint density at `x` (w.r.t. the mixed product measure).
    pub fn joint_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.num_features() {
            return Err(Error::dimension(format!(
                "point has dimension {}, model has {}",
                x.len(),
                self.num_features()
            )));
        }
        // factor[n][r] = (D_n B_n[:, r])(x_n)
        let mut total = 0.0;
        let f = self.rank();
        let mut per_comp = self.mixture.to_vec();
        for (n, (d, b)) in self.dictionaries.iter().zip(&self.weights).enumerate() {
            let row = d.eval_row(x[n]);
            let vals = row.dot(b); // length F
            for r in 0..f {
                per_comp[r] *= vals[r];
            }
        }
        for r in 0..f {
            total += per_comp[r];
        }
        Ok(total)
    }

    /// Exact 1-D marginal density/mass of feature `n` at `x`.
    pub fn marginal_1d(&self, n: usize, x: f64) -> Result<f64> {
        if n >= self.num_features() {
            return Err(Error::invalid(format!("feature index {n} out of range")));
        }
        let row = self.dictionaries[n].eval_row(x);
        Ok(row.dot(&self.weights[n].dot(&self.mixture)))
    }

    /// `G = B_j diag(lambda) B_k^T`, the dictionary-coefficient core of the
    /// pairwise marginal of features `(j, k)`.
    pub fn pair_core(&self, j: usize, k: usize) -> Result<Array2<f64>> {
        if j >= k || k >= self.num_features() {
            return Err(Error::invalid(format!("pair ({j}, {k}) out of range")));
        }
        let bj = &self.weights[j];
        let bk = &self.weights[k];
        let scaled = bj * &self.mixture.view().insert_axis(Axis(0)); // B_j * lambda per column
        Ok(scaled.dot(&bk.t()))
    }

    /// Ancestral sampling: component r ~ lambda, atom l_n ~ B_n[:, r],
    /// value ~ atoms[l_n]. Returns a `count x N` matrix.
    pub fn sample(&self, count: usize, rng: &mut Stream) -> Array2<f64> {
        let n_feat = self.num_features();
        let mut out = Array2::zeros((count, n_feat));
        for mut row in out.rows_mut() {
            let r = sample_categorical(self.mixture.view(), rng);
            for n in 0..n_feat {
                let l = sample_categorical(self.weights[n].column(r), rng);
                row[n] = self.dictionaries[n].atoms[l].sample(rng);
            }
        }
        out
    }
}

/// Draw an index from an (approximately normalized) nonnegative weight vector.
pub fn sample_categorical(weights: ArrayView1<f64>, rng: &mut Stream) -> usize {
    let total: f64 = weights.sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draw a simplex point from the flat Dirichlet (uniform on the simplex).
pub fn sample_dirichlet_flat(dim: usize, rng: &mut Stream) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(dim, |_| {
        let u: f64 = rng.random();
        -(1.0 - u).max(f64::MIN_POSITIVE).ln()
    });
    let s = v.sum();
    v.mapv_inplace(|x| x / s);
    v
}

// --- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CpdModelJson {
    dictionaries: Vec<Dictionary>,
    weights: Vec<MatrixJson>,
    mixture: Vec<f64>,
}

impl Serialize for CpdModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let j = CpdModelJson {
            dictionaries: self.dictionaries.clone(),
            weights: self
                .weights
                .iter()
                .map(|b| MatrixJson {
                    rows: b.nrows(),
                    cols: b.ncols(),
                    data: b.iter().copied().collect(),
                })
                .collect(),
            mixture: self.mixture.to_vec(),
        };
        j.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CpdModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = CpdModelJson::deserialize(d)?;
        let weights = j
            .weights
            .into_iter()
            .map(|m| {
                Array2::from_shape_vec((m.rows, m.cols), m.data)
                    .map_err(|e| serde::de::Error::custom(format!("bad weight shape: {e}")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        CpdModel::new(j.dictionaries, weights, Array1::from(j.mixture))
            .map_err(|e| serde::de::Error::custom(format!("invalid model: {e}")))
    }
}

/// Project every weight column and the mixture back onto their simplices.
/// Used to clean up optimizer output before constructing a model.
pub fn feasible_parts(
    weights: &[Array2<f64>],
    mixture: &Array1<f64>,
) -> Result<(Vec<Array2<f64>>, Array1<f64>)> {
    let mut ws = Vec::with_capacity(weights.len());
    for b in weights {
        let mut b = b.clone();
        for mut col in b.columns_mut() {
            let p = project_simplex(col.view())?;
            col.assign(&p);
        }
        ws.push(b);
    }
    Ok((ws, project_simplex(mixture.view())?))
}
