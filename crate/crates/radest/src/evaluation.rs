//! Monte Carlo divergence estimation between density-evaluable, sampleable
//! models.

use ndarray::{Array2, ArrayView1};

use crate::baselines::GmmModel;
use crate::error::{Error, Result};
use crate::model::CpdModel;
use crate::rng::Stream;

/// Densities below this are clamped inside the log so numerically-zero
/// tails do not produce infinities; triggering it often is flagged.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Fraction of floored samples above which an estimate is flagged.
pub const FLOOR_FLAG_FRACTION: f64 = 1e-3;

/// Anything that can evaluate its density and draw samples.
pub trait DensityHandle {
    fn dimension(&self) -> usize;
    /// Density w.r.t. the mixed product measure shared by both models under
    /// comparison.
    fn density(&self, x: ArrayView1<f64>) -> Result<f64>;
    fn draw(&self, count: usize, rng: &mut Stream) -> Array2<f64>;
}

impl DensityHandle for CpdModel {
    fn dimension(&self) -> usize {
        self.num_features()
    }
    fn density(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.joint_density(x)
    }
    fn draw(&self, count: usize, rng: &mut Stream) -> Array2<f64> {
        self.sample(count, rng)
    }
}

impl DensityHandle for GmmModel {
    fn dimension(&self) -> usize {
        self.dimension()
    }
    fn density(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.density(x))
    }
    fn draw(&self, count: usize, rng: &mut Stream) -> Array2<f64> {
        self.sample(count, rng)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DivergenceEstimate {
    pub value: f64,
    /// Standard error of the Monte Carlo mean.
    pub std_error: f64,
    /// Fraction of samples whose second-argument density hit the floor.
    pub floored_fraction: f64,
}

impl DivergenceEstimate {
    pub fn flagged(&self) -> bool {
        self.floored_fraction > FLOOR_FLAG_FRACTION
    }
}

fn kld_terms<P, Q>(p: &P, q: &Q, s: usize, rng: &mut Stream) -> Result<(Vec<f64>, usize)>
where
    P: DensityHandle + ?Sized,
    Q: DensityHandle + ?Sized,
{
    if p.dimension() != q.dimension() {
        return Err(Error::dimension("divergence between different dimensions"));
    }
    if s == 0 {
        return Err(Error::invalid("need at least one evaluation sample"));
    }
    let samples = p.draw(s, rng);
    let mut terms = Vec::with_capacity(s);
    let mut floored = 0usize;
    for row in samples.rows() {
        let pv = p.density(row)?;
        let qv = q.density(row)?;
        if !pv.is_finite() || !qv.is_finite() {
            return Err(Error::NonFinite("density at an evaluation sample".into()));
        }
        let mut qv_c = qv;
        if qv_c < DENSITY_FLOOR {
            qv_c = DENSITY_FLOOR;
            floored += 1;
        }
        // P-zero points carry zero contribution in the integrand limit.
        terms.push(if pv == 0.0 { 0.0 } else { (pv / qv_c).ln() });
    }
    Ok((terms, floored))
}

fn summarize(terms: &[f64], floored: usize) -> DivergenceEstimate {
    let s = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / s;
    let var = terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / s;
    DivergenceEstimate {
        value: mean,
        std_error: (var / s).sqrt(),
        floored_fraction: floored as f64 / s,
    }
}

/// Monte Carlo Kullback-Leibler divergence `D(P || Q)` from `s` samples of
/// `P`, natural log.
pub fn kld_mc<P, Q>(p: &P, q: &Q, s: usize, rng: &mut Stream) -> Result<DivergenceEstimate>
where
    P: DensityHandle + ?Sized,
    Q: DensityHandle + ?Sized,
{
    let (terms, floored) = kld_terms(p, q, s, rng)?;
    Ok(summarize(&terms, floored))
}

struct Midpoint<'a> {
    p: &'a dyn DensityHandle,
    q: &'a dyn DensityHandle,
}

impl DensityHandle for Midpoint<'_> {
    fn dimension(&self) -> usize {
        self.p.dimension()
    }
    fn density(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(0.5 * (self.p.density(x)? + self.q.density(x)?))
    }
    fn draw(&self, _count: usize, _rng: &mut Stream) -> Array2<f64> {
        unreachable!("the midpoint mixture is only evaluated, never sampled")
    }
}

/// Monte Carlo Jensen-Shannon divergence: `(D(P||M) + D(Q||M)) / 2` with
/// `M = (P + Q) / 2`, each term estimated from `s` samples of its first
/// argument. Natural log; the upper bound is ln 2.
pub fn jsd_mc(
    p: &dyn DensityHandle,
    q: &dyn DensityHandle,
    s: usize,
    rng: &mut Stream,
) -> Result<DivergenceEstimate> {
    let m = Midpoint { p, q };
    let (terms_p, fl_p) = kld_terms(p, &m, s, rng)?;
    let (terms_q, fl_q) = kld_terms(q, &m, s, rng)?;
    let combined: Vec<f64> = terms_p
        .iter()
        .zip(&terms_q)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(summarize(&combined, fl_p + fl_q))
}
