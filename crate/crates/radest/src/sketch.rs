//! 1-D random-projection sketches of pairwise marginals.
//!
//! For a feature pair (j, k), samples are projected onto M random unit
//! directions and histogrammed per direction; the concatenated per-direction
//! PMFs form the sketch vector `y_{j,k}`. The linear map from a
//! dictionary-coefficient core `B_j diag(lambda) B_k^T` to that sketch is
//! precomputed column by column with Monte Carlo draws from atom pairs.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Projection directions plus per-direction histogram edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub angles: Vec<f64>,
    /// Unit vectors (cos theta, sin theta).
    pub directions: Vec<[f64; 2]>,
    /// Per-direction strictly increasing bin edges; empty until set.
    pub edges: Vec<Vec<f64>>,
}

impl ProjectionSet {
    pub fn from_angles(angles: &[f64]) -> Self {
        let directions = angles.iter().map(|&t| [t.cos(), t.sin()]).collect();
        ProjectionSet { angles: angles.to_vec(), directions, edges: vec![Vec::new(); angles.len()] }
    }

    pub fn num_directions(&self) -> usize {
        self.angles.len()
    }

    pub fn edges_set(&self) -> bool {
        self.edges.iter().all(|e| e.len() >= 2)
    }

    /// Total sketch length b = sum of per-direction bin counts.
    pub fn sketch_len(&self) -> usize {
        self.edges.iter().map(|e| e.len().saturating_sub(1)).sum()
    }

    pub fn project(&self, m: usize, x: f64, y: f64) -> f64 {
        let d = self.directions[m];
        d[0] * x + d[1] * y
    }

    /// Build per-direction edges from projected sample pairs. `pairs` may
    /// pool samples from several feature pairs when one binning is shared.
    pub fn set_edges_from_data(&mut self, pairs: &[ArrayView2<f64>], n_bins: usize) -> Result<()> {
        for m in 0..self.num_directions() {
            let mut projected = Vec::new();
            for s in pairs {
                for row in s.rows() {
                    projected.push(self.project(m, row[0], row[1]));
                }
            }
            self.edges[m] = make_edges(&projected, n_bins)?;
        }
        Ok(())
    }

    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &a in &self.angles {
            feed(a);
        }
        for e in &self.edges {
            for &v in e {
                feed(v);
            }
        }
        h
    }
}

/// Draw M i.i.d. projection angles uniformly from [0, pi).
pub fn gen_directions(m: usize, rng: &mut Stream) -> Result<ProjectionSet> {
    if m == 0 {
        return Err(Error::invalid("need at least one projection direction"));
    }
    let angles: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * std::f64::consts::PI).collect();
    Ok(ProjectionSet::from_angles(&angles))
}

/// Uniform-width bin edges spanning the data range, with the top edge
/// widened so the maximum lands inside the last bin. A degenerate range
/// yields one unit-width bin centered on the value.
pub fn make_edges(values: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("cannot build edges from no values"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("projected values".into()));
    }
    if lo == hi {
        return Ok(vec![lo - 0.5, lo + 0.5]);
    }
    let range = hi - lo;
    let top = hi + 1e-9 * range;
    let mut edges: Vec<f64> = (0..=n_bins)
        .map(|i| lo + (top - lo) * i as f64 / n_bins as f64)
        .collect();
    edges[0] = lo;
    *edges.last_mut().unwrap() = top;
    Ok(edges)
}

/// Bin-count rule: ceil(K^(1/3)) bins for K training samples.
pub fn bins_for_samples(k: usize) -> usize {
    (k as f64).cbrt().ceil() as usize
}

pub(crate) fn bin_index(edges: &[f64], v: f64) -> Option<usize> {
    if v < edges[0] || v >= *edges.last().unwrap() {
        return None;
    }
    // Binary search over the sorted edges.
    match edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
        Ok(i) => Some(i.min(edges.len() - 2)),
        Err(i) => Some(i - 1),
    }
}

/// Empirical sketch of one feature pair: concatenated per-direction PMFs.
#[derive(Debug, Clone)]
pub struct PairSketch {
    pub j: usize,
    pub k: usize,
    pub y: Array1<f64>,
    pub projections: ProjectionSet,
}

/// Histogram the projections of `samples` (a K x 2 matrix) per direction.
/// Each per-direction segment of the result sums to 1 when the edges were
/// built to cover these samples.
pub fn empirical_sketch(
    j: usize,
    k: usize,
    samples: ArrayView2<f64>,
    proj: &ProjectionSet,
) -> Result<PairSketch> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("empirical_sketch needs samples"));
    }
    if !proj.edges_set() {
        return Err(Error::invalid("projection edges not set"));
    }
    let total = proj.sketch_len();
    let mut y = Array1::zeros(total);
    let count = samples.nrows() as f64;
    let mut off = 0;
    for m in 0..proj.num_directions() {
        let edges = &proj.edges[m];
        let nb = edges.len() - 1;
        for row in samples.rows() {
            let p = proj.project(m, row[0], row[1]);
            if let Some(i) = bin_index(edges, p) {
                y[off + i] += 1.0;
            }
        }
        for i in 0..nb {
            y[off + i] /= count;
        }
        off += nb;
    }
    Ok(PairSketch { j, k, y, projections: proj.clone() })
}

/// Precomputed linear map from a vectorized `L_j x L_k` core to a sketch.
/// Columns are stored at flat index `l_k * L_j + l_j` (column-major vec).
#[derive(Debug, Clone)]
pub struct RadonMatrix {
    pub j: usize,
    pub k: usize,
    pub r: Array2<f64>,
    pub l_j: usize,
    pub l_k: usize,
    pub projections: ProjectionSet,
    /// Per-column fraction of MC projections that fell outside the edges.
    pub dropped: Vec<f64>,
}

/// Monte Carlo estimate of the sketch matrix for a dictionary pair.
///
/// Per atom and side, `mc_samples` values are drawn once (substreams keyed
/// by `(j, k, side, atom)`); column `(l_j, l_k)` pairs the i-th draws of the
/// two atoms, which is valid because the coordinates are independent.
pub fn radon_matrix(
    j: usize,
    k: usize,
    d_j: &Dictionary,
    d_k: &Dictionary,
    proj: &ProjectionSet,
    mc_samples: usize,
    master_seed: u64,
) -> Result<RadonMatrix> {
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    if !proj.edges_set() {
        return Err(Error::invalid("projection edges not set"));
    }
    let (l_j, l_k) = (d_j.len(), d_k.len());
    let draw = |side: u64, dict: &Dictionary| -> Vec<Vec<f64>> {
        dict.atoms
            .iter()
            .enumerate()
            .map(|(l, atom)| {
                let mut rng = crate::rng::substream(
                    master_seed,
                    &[0x5254_4d, j as u64, k as u64, side, l as u64],
                );
                (0..mc_samples).map(|_| atom.sample(&mut rng)).collect()
            })
            .collect()
    };
    let xs = draw(0, d_j);
    let ys = draw(1, d_k);
    let b = proj.sketch_len();
    let mut r = Array2::zeros((b, l_j * l_k));
    let mut dropped = vec![0.0; l_j * l_k];
    for lk in 0..l_k {
        for lj in 0..l_j {
            let col = lk * l_j + lj;
            let mut lost = 0usize;
            let mut off = 0;
            for m in 0..proj.num_directions() {
                let edges = &proj.edges[m];
                let nb = edges.len() - 1;
                let d = proj.directions[m];
                for i in 0..mc_samples {
                    let p = d[0] * xs[lj][i] + d[1] * ys[lk][i];
                    match bin_index(edges, p) {
                        Some(bi) => r[(off + bi, col)] += 1.0,
                        None => lost += 1,
                    }
                }
                for bi in 0..nb {
                    r[(off + bi, col)] /= mc_samples as f64;
                }
                off += nb;
            }
            // `lost` counts per direction; normalize to a fraction of all
            // projected points for this column.
            dropped[col] = lost as f64 / (mc_samples * proj.num_directions()) as f64;
        }
    }
    Ok(RadonMatrix { j, k, r, l_j, l_k, projections: proj.clone(), dropped })
}

impl RadonMatrix {
    /// Apply the sketch map to a core matrix: `R . vec(G)`, column-major vec.
    pub fn apply(&self, g: &Array2<f64>) -> Result<Array1<f64>> {
        if g.dim() != (self.l_j, self.l_k) {
            return Err(Error::dimension(format!(
                "core is {:?}, sketch expects ({}, {})",
                g.dim(),
                self.l_j,
                self.l_k
            )));
        }
        Ok(self.r.dot(&vec_col_major(g)))
    }

    /// Binary cache file name component for a given configuration.
    pub fn cache_key(d_j: &Dictionary, d_k: &Dictionary, proj: &ProjectionSet, s: usize, seed: u64) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [d_j.content_hash(), d_k.content_hash(), proj.content_hash(), s as u64, seed] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Persist to the binary cache format: magic, shape header, row-major
    /// f64 payload, dropped fractions.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"RADMTX1\0")?;
        for v in [self.j, self.k, self.l_j, self.l_k, self.r.nrows(), self.projections.num_directions()] {
            f.write_all(&(v as u64).to_le_bytes())?;
        }
        for &a in &self.projections.angles {
            f.write_all(&a.to_le_bytes())?;
        }
        for e in &self.projections.edges {
            f.write_all(&(e.len() as u64).to_le_bytes())?;
            for &v in e {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        for &v in self.r.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.dropped {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RadonMatrix> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"RADMTX1\0" {
            return Err(Error::invalid("bad sketch cache magic"));
        }
        let read_u64 = |f: &mut std::fs::File| -> Result<u64> {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let j = read_u64(&mut f)? as usize;
        let k = read_u64(&mut f)? as usize;
        let l_j = read_u64(&mut f)? as usize;
        let l_k = read_u64(&mut f)? as usize;
        let rows = read_u64(&mut f)? as usize;
        let m = read_u64(&mut f)? as usize;
        let read_f64 = |f: &mut std::fs::File| -> Result<f64> {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let angles: Vec<f64> = (0..m).map(|_| read_f64(&mut f)).collect::<Result<_>>()?;
        let mut proj = ProjectionSet::from_angles(&angles);
        for e in proj.edges.iter_mut() {
            let len = read_u64(&mut f)? as usize;
            *e = (0..len).map(|_| read_f64(&mut f)).collect::<Result<_>>()?;
        }
        let data: Vec<f64> =
            (0..rows * l_j * l_k).map(|_| read_f64(&mut f)).collect::<Result<_>>()?;
        let r = Array2::from_shape_vec((rows, l_j * l_k), data)
            .map_err(|e| Error::invalid(format!("cache shape: {e}")))?;
        let dropped: Vec<f64> =
            (0..l_j * l_k).map(|_| read_f64(&mut f)).collect::<Result<_>>()?;
        Ok(RadonMatrix { j, k, r, l_j, l_k, projections: proj, dropped })
    }
}

/// Column-major vectorization of a matrix.
pub fn vec_col_major(g: &Array2<f64>) -> Array1<f64> {
    let (rows, cols) = g.dim();
    let mut v = Array1::zeros(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            v[c * rows + r] = g[(r, c)];
        }
    }
    v
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let mut g = Array2::zeros((rows, cols));
    for c in 0..cols {
        for r in 0..rows {
            g[(r, c)] = v[c * rows + r];
        }
    }
    g
}
