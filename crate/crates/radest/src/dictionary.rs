//! 1-D density atoms and per-feature dictionaries.
//!
//! A dictionary is an ordered list of 1-D densities (atoms); conditional
//! factors of the joint model are convex combinations of its columns.
//! Discrete features use point-mass atoms, whose "density" is a probability
//! mass w.r.t. counting measure.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const SPREAD_FLOOR: f64 = 1e-3;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomKind {
    Gaussian,
    Laplacian,
    PointMass,
}

/// A single 1-D density: Gaussian or Laplacian with mean `location` and
/// standard deviation `spread`, or a point mass at `location`.
///
/// The Laplacian is parameterized by its standard deviation, so its scale
/// parameter is `spread / sqrt(2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub kind: AtomKind,
    pub location: f64,
    pub spread: f64,
}

impl Atom {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        assert!(std > 0.0, "gaussian atom needs positive spread");
        Atom { kind: AtomKind::Gaussian, location: mean, spread: std }
    }

    pub fn laplacian(mean: f64, std: f64) -> Self {
        assert!(std > 0.0, "laplacian atom needs positive spread");
        Atom { kind: AtomKind::Laplacian, location: mean, spread: std }
    }

    pub fn point_mass(value: f64) -> Self {
        Atom { kind: AtomKind::PointMass, location: value, spread: 0.0 }
    }

    /// Density at `x` (probability mass for point-mass atoms).
    pub fn pdf(&self, x: f64) -> f64 {
        match self.kind {
            AtomKind::Gaussian => {
                let z = (x - self.location) / self.spread;
                (-0.5 * z * z).exp() / (self.spread * (2.0 * std::f64::consts::PI).sqrt())
            }
            AtomKind::Laplacian => {
                let b = self.spread / SQRT_2;
                (-(x - self.location).abs() / b).exp() / (2.0 * b)
            }
            AtomKind::PointMass => {
                if x == self.location {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact CDF at `x`; a right-continuous unit step for point masses.
    pub fn cdf(&self, x: f64) -> f64 {
        match self.kind {
            AtomKind::Gaussian => {
                let z = (x - self.location) / (self.spread * SQRT_2);
                0.5 * (1.0 + libm::erf(z))
            }
            AtomKind::Laplacian => {
                let b = self.spread / SQRT_2;
                let d = x - self.location;
                if d < 0.0 {
                    0.5 * (d / b).exp()
                } else {
                    1.0 - 0.5 * (-d / b).exp()
                }
            }
            AtomKind::PointMass => {
                if x >= self.location {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Draw one value from the atom's distribution.
    pub fn sample(&self, rng: &mut Stream) -> f64 {
        match self.kind {
            AtomKind::Gaussian => {
                Normal::new(self.location, self.spread).unwrap().sample(rng)
            }
            AtomKind::Laplacian => {
                // Inverse-CDF: u uniform on (0,1).
                let b = self.spread / SQRT_2;
                let u: f64 = rng.random();
                let u = u - 0.5;
                self.location - b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
            AtomKind::PointMass => self.location,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, AtomKind::PointMass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Discrete,
}

/// An ordered set of atoms for one feature. Atom order is fixed: column `l`
/// of the weight matrices addresses `atoms[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub feature_kind: FeatureKind,
    pub atoms: Vec<Atom>,
}

impl Dictionary {
    pub fn new(feature_kind: FeatureKind, atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::invalid("dictionary needs at least one atom"));
        }
        let ok = match feature_kind {
            FeatureKind::Discrete => atoms.iter().all(|a| a.is_discrete()),
            FeatureKind::Continuous => atoms.iter().all(|a| !a.is_discrete()),
        };
        if !ok {
            return Err(Error::invalid(
                "discrete dictionaries hold only point masses, continuous ones none",
            ));
        }
        Ok(Dictionary { feature_kind, atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_discrete(&self) -> bool {
        self.feature_kind == FeatureKind::Discrete
    }

    /// Row vector of all atom densities evaluated at `x`.
    pub fn eval_row(&self, x: f64) -> Array1<f64> {
        Array1::from_iter(self.atoms.iter().map(|a| a.pdf(x)))
    }

    /// Bin masses of every atom over the bins defined by `bin_edges`
    /// (length `I + 1`, strictly increasing). Returns an `I x L` matrix.
    pub fn discretize(&self, bin_edges: &[f64]) -> Result<Array2<f64>> {
        if bin_edges.len() < 2 {
            return Err(Error::invalid("need at least two bin edges"));
        }
        if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        let n_bins = bin_edges.len() - 1;
        let mut d = Array2::zeros((n_bins, self.len()));
        for (l, atom) in self.atoms.iter().enumerate() {
            for i in 0..n_bins {
                // Half-open bins [e_i, e_{i+1}); the last bin is closed by the
                // widened top edge supplied by the caller.
                let mass = atom.cdf(bin_edges[i + 1]) - atom.cdf(bin_edges[i]);
                d[(i, l)] = mass.max(0.0);
            }
        }
        Ok(d)
    }

    /// FNV-1a hash over the canonical byte encoding, used to key shared
    /// sketch-matrix caches.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(&[self.feature_kind as u8]);
        for a in &self.atoms {
            feed(&[a.kind as u8]);
            feed(&a.location.to_bits().to_le_bytes());
            feed(&a.spread.to_bits().to_le_bytes());
        }
        h
    }
}

/// Propose a dictionary from 1-D samples of one feature.
///
/// Continuous: `l` Gaussian atoms placed at the `(i - 0.5) / l` sample
/// quantiles with spread `max(sample_std / l, SPREAD_FLOOR)`. Discrete:
/// point masses at the `l` most frequent distinct values.
pub fn propose(samples: &[f64], l: usize, kind: FeatureKind) -> Result<Dictionary> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot propose a dictionary from no samples"));
    }
    if l == 0 {
        return Err(Error::invalid("dictionary size must be at least 1"));
    }
    match kind {
        FeatureKind::Continuous => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let mean = sorted.iter().sum::<f64>() / n as f64;
            let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let spread = (var.sqrt() / l as f64).max(SPREAD_FLOOR);
            let atoms = (0..l)
                .map(|i| {
                    let q = (i as f64 + 0.5) / l as f64;
                    let idx = ((q * n as f64) as usize).min(n - 1);
                    Atom::gaussian(sorted[idx], spread)
                })
                .collect();
            Dictionary::new(FeatureKind::Continuous, atoms)
        }
        FeatureKind::Discrete => {
            let mut counts: Vec<(f64, usize)> = Vec::new();
            for &x in samples {
                match counts.iter_mut().find(|(v, _)| *v == x) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((x, 1)),
                }
            }
            if counts.len() < l {
                return Err(Error::invalid(format!(
                    "requested {l} point masses but only {} distinct values observed",
                    counts.len()
                )));
            }
            counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.partial_cmp(&b.0).unwrap()));
            let mut values: Vec<f64> = counts.iter().take(l).map(|(v, _)| *v).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Dictionary::new(FeatureKind::Discrete, values.into_iter().map(Atom::point_mass).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    /// Composite Simpson quadrature, used as the independent integral oracle.
    pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 0 { n } else { n + 1 };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn gaussian_peak_value() {
        let a = Atom::gaussian(0.0, 1.0);
        assert_abs_diff_eq!(a.pdf(0.0), 0.3989422804014327, epsilon = 1e-12);
    }

    #[test]
    fn point_mass_pdf_is_exact_indicator() {
        let a = Atom::point_mass(0.5);
        assert_eq!(a.pdf(0.5), 1.0);
        assert_eq!(a.pdf(0.49), 0.0);
    }

    #[test]
    fn laplacian_peak_matches_closed_form() {
        // b = sigma / sqrt(2); peak = 1 / (2b). Variance oracle: 2 b^2 = sigma^2.
        let sigma = 0.1;
        let a = Atom::laplacian(0.0, sigma);
        let b = sigma / SQRT_2;
        assert_abs_diff_eq!(2.0 * b * b, sigma * sigma, epsilon = 1e-15);
        assert_abs_diff_eq!(a.pdf(0.0), 7.0710678118654755, epsilon = 1e-10);
    }

    #[test]
    fn cdf_trivial_symmetry() {
        assert_abs_diff_eq!(Atom::gaussian(0.0, 1.0).cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(Atom::laplacian(0.0, 0.3).cdf(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_cdf_matches_quadrature() {
        let a = Atom::gaussian(0.0, 1.0);
        let oracle = 0.5 + simpson(|x| a.pdf(x), 0.0, 1.0, 4000);
        assert_abs_diff_eq!(a.cdf(1.0), oracle, epsilon = 1e-10);
        assert_abs_diff_eq!(a.cdf(1.0), 0.8413447460685429, epsilon = 1e-9);
    }

    #[test]
    fn continuous_pdfs_integrate_to_one() {
        for atom in [Atom::gaussian(0.4, 0.07), Atom::laplacian(-0.2, 0.15)] {
            let lo = atom.location - 12.0 * atom.spread;
            let hi = atom.location + 12.0 * atom.spread;
            let total = simpson(|x| atom.pdf(x), lo, hi, 20_000);
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cdf_is_integral_of_pdf() {
        let mut rng = substream(7, &[0]);
        for atom in [Atom::gaussian(0.1, 0.5), Atom::laplacian(-0.3, 0.4)] {
            for _ in 0..5 {
                let x = atom.location + atom.spread * (rng.random::<f64>() * 4.0 - 2.0);
                let y = x + atom.spread * (rng.random::<f64>() * 2.0 + 0.1);
                let q = simpson(|t| atom.pdf(t), x, y, 20_000);
                assert_abs_diff_eq!(atom.cdf(y) - atom.cdf(x), q, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn sampling_matches_cdf_ks() {
        for (key, atom) in
            [(0u64, Atom::gaussian(0.3, 0.1)), (1, Atom::laplacian(0.0, 0.2))]
        {
            let mut rng = substream(11, &[key]);
            let n = 100_000;
            let mut draws: Vec<f64> = (0..n).map(|_| atom.sample(&mut rng)).collect();
            draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ks = draws
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let e_hi = (i + 1) as f64 / n as f64;
                    let e_lo = i as f64 / n as f64;
                    let c = atom.cdf(x);
                    (c - e_lo).abs().max((e_hi - c).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.01, "KS statistic {ks} too large");
        }
    }

    #[test]
    fn gaussian_sample_mean_clt() {
        let atom = Atom::gaussian(0.3, 0.1);
        let mut rng = substream(13, &[]);
        let n = 100_000;
        let mean = (0..n).map(|_| atom.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.002);
    }

    #[test]
    fn laplacian_sample_variance() {
        let atom = Atom::laplacian(0.0, 0.2);
        let mut rng = substream(17, &[]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| atom.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((var - 0.04).abs() < 0.04 * 0.15, "variance {var}");
    }

    #[test]
    fn point_mass_sample_is_constant() {
        let atom = Atom::point_mass(-1.5);
        let mut rng = substream(19, &[]);
        for _ in 0..100 {
            assert_eq!(atom.sample(&mut rng), -1.5);
        }
    }

    #[test]
    fn discretize_point_mass() {
        let d = Dictionary::new(FeatureKind::Discrete, vec![Atom::point_mass(0.5)]).unwrap();
        let m = d.discretize(&[0.0, 1.0]).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
    }

    #[test]
    fn discretize_symmetric_gaussian() {
        let d = Dictionary::new(FeatureKind::Continuous, vec![Atom::gaussian(0.0, 1.0)]).unwrap();
        let m = d.discretize(&[-50.0, 0.0, 50.0]).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn discretize_tight_gaussian_tail_mass() {
        let atom = Atom::gaussian(0.0, 0.1);
        let d = Dictionary::new(FeatureKind::Continuous, vec![atom]).unwrap();
        let edges: Vec<f64> = (0..21).map(|i| -1.0 + i as f64 * 0.1).collect();
        let m = d.discretize(&edges).unwrap();
        let total: f64 = m.column(0).sum();
        // Tail-mass oracle: mass outside [-1, 1] is 2 * (1 - cdf(1)) for
        // a symmetric atom, below 2e-23 at 10 sigma.
        let tail = 2.0 * (1.0 - atom.cdf(1.0));
        assert!(tail < 2e-23);
        assert!(total >= 1.0 - 2e-23);
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn discretize_rejects_bad_edges() {
        let d = Dictionary::new(FeatureKind::Continuous, vec![Atom::gaussian(0.0, 1.0)]).unwrap();
        assert!(d.discretize(&[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn discretize_columns_nonneg_sum_le_one() {
        let d = Dictionary::new(
            FeatureKind::Continuous,
            vec![Atom::gaussian(0.2, 0.3), Atom::laplacian(-0.4, 0.2)],
        )
        .unwrap();
        let edges: Vec<f64> = (0..11).map(|i| -1.0 + i as f64 * 0.2).collect();
        let m = d.discretize(&edges).unwrap();
        for col in m.columns() {
            assert!(col.iter().all(|&v| v >= 0.0));
            assert!(col.sum() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn propose_discrete_recovers_support() {
        let mut rng = substream(23, &[]);
        let support = [-1.5, -0.5, 0.5, 1.5];
        let samples: Vec<f64> =
            (0..10_000).map(|_| support[(rng.random::<f64>() * 4.0) as usize % 4]).collect();
        let d = propose(&samples, 4, FeatureKind::Discrete).unwrap();
        let locs: Vec<f64> = d.atoms.iter().map(|a| a.location).collect();
        assert_eq!(locs, support.to_vec());
    }

    #[test]
    fn propose_degenerate_continuous() {
        let d = propose(&[2.5; 100], 1, FeatureKind::Continuous).unwrap();
        assert_eq!(d.atoms.len(), 1);
        assert_eq!(d.atoms[0].location, 2.5);
        assert_eq!(d.atoms[0].spread, SPREAD_FLOOR);
    }

    #[test]
    fn propose_bimodal_quantiles() {
        // Equal mixture of Gaussians at +-1 with sigma 0.05; the 0.25 and
        // 0.75 quantiles of the mixture sit within 0.05 of the modes.
        let mut rng = substream(29, &[]);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| {
                let center = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                Atom::gaussian(center, 0.05).sample(&mut rng)
            })
            .collect();
        let d = propose(&samples, 2, FeatureKind::Continuous).unwrap();
        assert!((d.atoms[0].location - -1.0).abs() < 0.05);
        assert!((d.atoms[1].location - 1.0).abs() < 0.05);
    }

    #[test]
    fn propose_errors() {
        assert!(propose(&[], 2, FeatureKind::Continuous).is_err());
        assert!(propose(&[1.0, 1.0, 2.0], 3, FeatureKind::Discrete).is_err());
    }

    #[test]
    fn dictionary_json_round_trip() {
        let d = Dictionary::new(
            FeatureKind::Continuous,
            vec![Atom::gaussian(0.1, 0.08), Atom::laplacian(-0.2, 0.1)],
        )
        .unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"feature_kind\":\"continuous\""));
        assert!(s.contains("\"kind\":\"gaussian\""));
        let back: Dictionary = serde_json::from_str(&s).unwrap();
        assert_eq!(d, back);
    }
}
