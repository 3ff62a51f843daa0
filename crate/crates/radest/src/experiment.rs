//! Seeded synthetic-experiment harness: generate the four benchmark density
//! families, run the estimators across a sample-size grid with repeated
//! trials, score each fit by Monte Carlo Jensen-Shannon divergence against
//! the generating model, and emit CSV/JSON results.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::baselines::{gmm_fit, gmm_select, jupad_fit, CovarianceKind, Covariances, EmOptions, GmmModel};
use crate::dictionary::{propose, Atom, AtomKind, Dictionary, FeatureKind};
use crate::error::{Error, Result};
use crate::evaluation::{jsd_mc, DensityHandle};
use crate::model::{sample_dirichlet_flat, CpdModel};
use crate::rad::{self, RadOptions};
use crate::rng::{substream, Stream};
use crate::simplex::PgdOptions;

/// Features with at most this many distinct training values are treated as
/// discrete when dictionaries must be inferred from data.
pub const DISCRETE_DETECTION_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Laplacian,
    MixedGl,
    MixedDiscrete,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Laplacian => "laplacian",
            Family::MixedGl => "mixed_gl",
            Family::MixedDiscrete => "mixed_discrete",
        }
    }

    pub fn id(&self) -> u64 {
        match self {
            Family::Gaussian => 1,
            Family::Laplacian => 2,
            Family::MixedGl => 3,
            Family::MixedDiscrete => 4,
        }
    }

    /// Benchmark defaults: (features N, rank F, atoms per feature L).
    pub fn defaults(&self) -> (usize, usize, usize) {
        match self {
            Family::Gaussian => (8, 25, 10),
            Family::Laplacian => (6, 7, 10),
            Family::MixedGl => (5, 9, 12),
            Family::MixedDiscrete => (7, 13, 8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RadStar,
    Rad,
    Jupad,
    Gmm,
    GmmDiag,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::RadStar => "rad_star",
            Method::Rad => "rad",
            Method::Jupad => "jupad",
            Method::Gmm => "gmm",
            Method::GmmDiag => "gmm_diag",
        }
    }

    fn id(&self) -> u64 {
        match self {
            Method::RadStar => 1,
            Method::Rad => 2,
            Method::Jupad => 3,
            Method::Gmm => 4,
            Method::GmmDiag => 5,
        }
    }

    pub fn is_gmm(&self) -> bool {
        matches!(self, Method::Gmm | Method::GmmDiag)
    }
}

fn default_trials() -> usize {
    4
}
fn default_eval_samples() -> usize {
    100_000
}
fn default_jupad_bins() -> usize {
    50
}
fn default_gmm_grid() -> Vec<usize> {
    vec![5, 10, 15, 20, 25, 30, 35, 40]
}
fn default_methods() -> Vec<Method> {
    vec![Method::RadStar, Method::Rad, Method::Jupad, Method::GmmDiag]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: Family,
    /// Overrides of the family defaults, for scaled-down runs.
    pub features: Option<usize>,
    pub rank: Option<usize>,
    pub atoms: Option<usize>,
    pub k_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub rad: RadOptions,
    #[serde(default)]
    pub jupad_opts: PgdOptions,
    #[serde(default = "default_jupad_bins")]
    pub jupad_bins: usize,
    /// Dictionary size used when dictionaries are inferred from data (the
    /// unknown-dictionary method); defaults to the family's atom count,
    /// standing in for reading the component count off the 1-D histograms.
    #[serde(default)]
    pub proposal_atoms: Option<usize>,
    #[serde(default = "default_gmm_grid")]
    pub gmm_grid: Vec<usize>,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Report fit_seconds as 0 so repeated runs produce identical bytes.
    #[serde(default)]
    pub zero_timings: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() {
            return Err(Error::invalid("k_grid must be nonempty"));
        }
        if !self.k_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("k_grid must be strictly ascending"));
        }
        if self.trials < 1 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods must be nonempty"));
        }
        if self.family == Family::MixedDiscrete && self.methods.iter().all(Method::is_gmm) {
            return Err(Error::invalid(
                "Gaussian mixtures cannot represent discrete features; \
                 no applicable method remains for the mixed_discrete family",
            ));
        }
        if self.eval_samples == 0 {
            return Err(Error::invalid("eval_samples must be at least 1"));
        }
        Ok(())
    }

    fn dims(&self) -> (usize, usize, usize) {
        let (n, f, l) = self.family.defaults();
        (
            self.features.unwrap_or(n),
            self.rank.unwrap_or(f),
            self.atoms.unwrap_or(l),
        )
    }
}

/// The discrete support of the mixed_discrete family.
pub const DISCRETE_SUPPORT: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];

fn random_continuous_atoms(l: usize, laplacian_count: usize, rng: &mut Stream) -> Vec<Atom> {
    (0..l)
        .map(|i| {
            let mean = -1.0 + 2.0 * rng.random::<f64>();
            let std = 0.05 + 0.15 * rng.random::<f64>();
            if i < laplacian_count {
                Atom::laplacian(mean, std)
            } else {
                Atom::gaussian(mean, std)
            }
        })
        .collect()
}

/// Generate a ground-truth model for a family. All continuous features share
/// one dictionary (locations uniform on [-1, 1], spreads uniform on
/// [0.05, 0.2]); mode factors and the mixture are uniform on their
/// simplices.
pub fn gen_family(
    family: Family,
    n: usize,
    f: usize,
    l: usize,
    rng: &mut Stream,
) -> Result<CpdModel> {
    if n < 2 || f < 1 || l < 1 {
        return Err(Error::invalid("family needs n >= 2, f >= 1, l >= 1"));
    }
    let continuous = |atoms: Vec<Atom>| Dictionary::new(FeatureKind::Continuous, atoms);
    let dictionaries: Vec<Dictionary> = match family {
        Family::Gaussian => {
            let d = continuous(random_continuous_atoms(l, 0, rng))?;
            vec![d; n]
        }
        Family::Laplacian => {
            let d = continuous(random_continuous_atoms(l, l, rng))?;
            vec![d; n]
        }
        Family::MixedGl => {
            let d = continuous(random_continuous_atoms(l, l / 2, rng))?;
            vec![d; n]
        }
        Family::MixedDiscrete => {
            let n_cont = n.div_ceil(2);
            let cont = continuous(random_continuous_atoms(l, l / 2, rng))?;
            let disc = Dictionary::new(
                FeatureKind::Discrete,
                DISCRETE_SUPPORT.iter().map(|&v| Atom::point_mass(v)).collect(),
            )?;
            (0..n)
                .map(|i| if i < n_cont { cont.clone() } else { disc.clone() })
                .collect()
        }
    };
    let weights = dictionaries
        .iter()
        .map(|d| {
            let mut b = Array2::zeros((d.len(), f));
            for r in 0..f {
                b.column_mut(r).assign(&sample_dirichlet_flat(d.len(), rng));
            }
            b
        })
        .collect();
    let mixture = sample_dirichlet_flat(f, rng);
    CpdModel::new(dictionaries, weights, mixture)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub family: Family,
    pub method: Method,
    pub k: usize,
    pub trial: usize,
    pub jsd: f64,
    pub jsd_se: f64,
    pub fit_seconds: f64,
    /// "ok", or the failure/skip reason.
    pub status: String,
    /// Selected mixture size (Gaussian-mixture methods only).
    pub selected_components: Option<usize>,
    pub rank: Option<usize>,
}

/// Infer per-feature dictionaries from training data. Features with few
/// distinct values get point-mass dictionaries on the observed values. The
/// remaining features share one continuous dictionary: their samples are
/// pooled (the generator shares atoms across features, and pooling mirrors
/// inspecting overlaid 1-D histograms) and an `l`-component 1-D mixture is
/// fitted; its component locations and spreads become atoms of the hinted
/// family.
/// EM for a 1-D mixture of Laplacians: responsibilities in the log domain,
/// weighted-median location update, mean-absolute-deviation scale update.
/// Used to sharpen atom proposals when the pooled marginal is heavy-tailed.
fn laplacian_mixture_em(
    x_sorted: &[f64],
    init: &[(f64, f64)],
    iters: usize,
) -> Vec<(f64, f64)> {
    let c = init.len();
    let k = x_sorted.len();
    let mut loc: Vec<f64> = init.iter().map(|p| p.0).collect();
    // Our spread parameter is a standard deviation; the Laplacian scale is
    // spread / sqrt(2).
    let mut scale: Vec<f64> = init.iter().map(|p| (p.1 / std::f64::consts::SQRT_2).max(1e-4)).collect();
    let mut weight = vec![1.0 / c as f64; c];
    let mut resp = vec![0.0; k * c];
    for _ in 0..iters {
        for (i, &x) in x_sorted.iter().enumerate() {
            let logs: Vec<f64> = (0..c)
                .map(|j| weight[j].ln() - (2.0 * scale[j]).ln() - (x - loc[j]).abs() / scale[j])
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            for j in 0..c {
                resp[i * c + j] = (logs[j] - m).exp() / z;
            }
        }
        for j in 0..c {
            let total: f64 = (0..k).map(|i| resp[i * c + j]).sum();
            if total <= 0.0 {
                continue;
            }
            weight[j] = total / k as f64;
            let mut acc = 0.0;
            let mut median = x_sorted[k - 1];
            for (i, &x) in x_sorted.iter().enumerate() {
                acc += resp[i * c + j];
                if acc >= 0.5 * total {
                    median = x;
                    break;
                }
            }
            loc[j] = median;
            let mad: f64 =
                (0..k).map(|i| resp[i * c + j] * (x_sorted[i] - median).abs()).sum::<f64>() / total;
            scale[j] = mad.max(1e-4);
        }
    }
    let mut out: Vec<(f64, f64)> =
        loc.iter().zip(&scale).map(|(&m, &b)| (m, (b * std::f64::consts::SQRT_2).max(1e-3))).collect();
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

pub fn propose_dictionaries(
    samples: ArrayView2<f64>,
    l: usize,
    kind: AtomKind,
) -> Result<Vec<Dictionary>> {
    let mut slots: Vec<Option<Dictionary>> = Vec::with_capacity(samples.ncols());
    let mut pooled: Vec<f64> = Vec::new();
    for n in 0..samples.ncols() {
        let col: Vec<f64> = samples.column(n).to_vec();
        let mut distinct: Vec<f64> = col.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() <= DISCRETE_DETECTION_LIMIT {
            slots.push(Some(propose(&col, distinct.len(), FeatureKind::Discrete)?));
        } else {
            slots.push(None);
            pooled.extend_from_slice(&col);
        }
    }
    let shared = if pooled.is_empty() {
        None
    } else {
        let rows = pooled.len();
        let data = Array2::from_shape_vec((rows, 1), pooled)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let report = gmm_fit(
            data.view(),
            l.min(rows),
            CovarianceKind::Diag,
            &EmOptions::default(),
            0x70_726f_70,
        )?;
        let variances = match &report.model.covariances {
            Covariances::Diag { variances } => variances.clone(),
            Covariances::Full { .. } => unreachable!("diagonal fit requested"),
        };
        let mut params: Vec<(f64, f64)> = report
            .model
            .means
            .iter()
            .zip(&variances)
            .map(|(m, v)| (m[0], v[0].sqrt().max(1e-3)))
            .collect();
        params.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if kind == AtomKind::Laplacian {
            let mut sorted: Vec<f64> = data.column(0).to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            params = laplacian_mixture_em(&sorted, &params, 60);
        }
        let atoms = params
            .into_iter()
            .map(|(loc, spread)| match kind {
                AtomKind::Laplacian => Atom::laplacian(loc, spread),
                _ => Atom::gaussian(loc, spread),
            })
            .collect();
        Some(Dictionary::new(FeatureKind::Continuous, atoms)?)
    };
    slots
        .into_iter()
        .map(|s| match s {
            Some(d) => Ok(d),
            None => shared
                .clone()
                .ok_or_else(|| Error::invalid("no continuous feature to share atoms with")),
        })
        .collect()
}

/// A fitted model of either kind, ready for evaluation or export.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "snake_case")]
pub enum FittedModel {
    Cpd(CpdModel),
    Gmm(GmmModel),
}

impl DensityHandle for FittedModel {
    fn dimension(&self) -> usize {
        match self {
            FittedModel::Cpd(m) => DensityHandle::dimension(m),
            FittedModel::Gmm(m) => DensityHandle::dimension(m),
        }
    }
    fn density(&self, x: ndarray::ArrayView1<f64>) -> Result<f64> {
        match self {
            FittedModel::Cpd(m) => DensityHandle::density(m, x),
            FittedModel::Gmm(m) => DensityHandle::density(m, x),
        }
    }
    fn draw(&self, count: usize, rng: &mut Stream) -> Array2<f64> {
        match self {
            FittedModel::Cpd(m) => DensityHandle::draw(m, count, rng),
            FittedModel::Gmm(m) => DensityHandle::draw(m, count, rng),
        }
    }
}

fn fit_one(
    cfg: &ExperimentConfig,
    method: Method,
    truth: &CpdModel,
    train: ArrayView2<f64>,
    seed: u64,
) -> Result<(FittedModel, Option<usize>, Option<usize>)> {
    let f = truth.rank();
    match method {
        Method::RadStar | Method::Rad => {
            let mut opts = cfg.rad.clone();
            opts.rank = f;
            opts.seed = seed;
            let dictionaries: Vec<Dictionary> = if method == Method::RadStar {
                truth.dictionaries().to_vec()
            } else {
                opts.shared_dictionary = false;
                let l_prop = cfg.proposal_atoms.unwrap_or_else(|| cfg.dims().2);
                let kind = match cfg.family {
                    Family::Laplacian => AtomKind::Laplacian,
                    _ => AtomKind::Gaussian,
                };
                propose_dictionaries(train, l_prop, kind)?
            };
            let report = rad::fit(train, &dictionaries, &opts)?;
            Ok((FittedModel::Cpd(report.model), None, Some(f)))
        }
        Method::Jupad => {
            let report = jupad_fit(
                train,
                truth.dictionaries(),
                f,
                cfg.jupad_bins,
                &cfg.jupad_opts,
                seed,
            )?;
            Ok((FittedModel::Cpd(report.model), None, Some(f)))
        }
        Method::Gmm | Method::GmmDiag => {
            let kind = if method == Method::Gmm {
                CovarianceKind::Full
            } else {
                CovarianceKind::Diag
            };
            let sel = gmm_select(train, &cfg.gmm_grid, kind, &cfg.em, seed)?;
            let c = sel.selected_components;
            Ok((FittedModel::Gmm(sel.model), Some(c), None))
        }
    }
}

/// Fit one method on trial 0 at the largest grid size; used by the CLI's
/// single-fit command. Returns the trial record and the fitted model.
pub fn fit_single(
    cfg: &ExperimentConfig,
    method: Method,
) -> Result<(TrialRecord, FittedModel)> {
    cfg.validate()?;
    if method.is_gmm() && cfg.family == Family::MixedDiscrete {
        return Err(Error::invalid(
            "Gaussian mixtures cannot represent discrete features",
        ));
    }
    let (n, f, l) = cfg.dims();
    let fam = cfg.family.id();
    let k = *cfg.k_grid.last().unwrap();
    let mut truth_rng = substream(cfg.seed, &[fam, 0, 0]);
    let truth = gen_family(cfg.family, n, f, l, &mut truth_rng)?;
    let mut data_rng = substream(cfg.seed, &[fam, 0, 1]);
    let pool = truth.sample(k, &mut data_rng);
    let fit_seed = splat(cfg.seed, &[fam, 0, 2, method.id(), k as u64]);
    let started = Instant::now();
    let (model, selected, rank) = fit_one(cfg, method, &truth, pool.view(), fit_seed)?;
    let fit_seconds = if cfg.zero_timings { 0.0 } else { started.elapsed().as_secs_f64() };
    let mut eval_rng = substream(cfg.seed, &[fam, 0, 3, method.id(), k as u64]);
    let est = jsd_mc(&truth, &model, cfg.eval_samples, &mut eval_rng)?;
    let record = TrialRecord {
        family: cfg.family,
        method,
        k,
        trial: 0,
        jsd: est.value,
        jsd_se: est.std_error,
        fit_seconds,
        status: if est.flagged() {
            "ok (density floor exceeded 0.1% of samples)".into()
        } else {
            "ok".into()
        },
        selected_components: selected,
        rank,
    };
    Ok((record, model))
}

/// Run the full sweep: for each trial, draw a fresh ground truth and one
/// sample pool of size max(k_grid); every K uses the pool's leading prefix,
/// so JSD-vs-K trends are not confounded by resampling. Returns records
/// sorted by (family, method, K, trial).
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let (n, f, _l) = cfg.dims();
    let fam = cfg.family.id();
    let k_max = *cfg.k_grid.last().unwrap();

    let trials: Vec<(CpdModel, Array2<f64>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<(CpdModel, Array2<f64>)> {
            let mut truth_rng = substream(cfg.seed, &[fam, t as u64, 0]);
            let truth = gen_family(cfg.family, n, f, cfg.dims().2, &mut truth_rng)?;
            let mut data_rng = substream(cfg.seed, &[fam, t as u64, 1]);
            let pool = truth.sample(k_max, &mut data_rng);
            Ok((truth, pool))
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for t in 0..cfg.trials {
        for &method in &cfg.methods {
            for &k in &cfg.k_grid {
                cells.push((t, method, k));
            }
        }
    }

    let mut records: Vec<TrialRecord> = cells
        .par_iter()
        .map(|&(t, method, k)| {
            let (truth, pool) = &trials[t];
            if method.is_gmm() && cfg.family == Family::MixedDiscrete {
                return TrialRecord {
                    family: cfg.family,
                    method,
                    k,
                    trial: t,
                    jsd: f64::NAN,
                    jsd_se: f64::NAN,
                    fit_seconds: 0.0,
                    status: "skipped: Gaussian mixtures cannot represent discrete features"
                        .into(),
                    selected_components: None,
                    rank: None,
                };
            }
            let train = pool.slice(ndarray::s![..k, ..]);
            let fit_seed = splat(cfg.seed, &[fam, t as u64, 2, method.id(), k as u64]);
            let started = Instant::now();
            let fitted = fit_one(cfg, method, truth, train, fit_seed);
            let fit_seconds = if cfg.zero_timings {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            };
            match fitted {
                Ok((model, selected, rank)) => {
                    let mut eval_rng =
                        substream(cfg.seed, &[fam, t as u64, 3, method.id(), k as u64]);
                    match jsd_mc(truth, &model, cfg.eval_samples, &mut eval_rng) {
                        Ok(est) => TrialRecord {
                            family: cfg.family,
                            method,
                            k,
                            trial: t,
                            jsd: est.value,
                            jsd_se: est.std_error,
                            fit_seconds,
                            status: if est.flagged() {
                                "ok (density floor exceeded 0.1% of samples)".into()
                            } else {
                                "ok".into()
                            },
                            selected_components: selected,
                            rank,
                        },
                        Err(e) => failed(cfg.family, method, k, t, fit_seconds, &e),
                    }
                }
                Err(e) => failed(cfg.family, method, k, t, fit_seconds, &e),
            }
        })
        .collect();

    records.sort_by(|a, b| {
        (a.family, a.method, a.k, a.trial).cmp(&(b.family, b.method, b.k, b.trial))
    });
    Ok(records)
}

fn failed(
    family: Family,
    method: Method,
    k: usize,
    trial: usize,
    fit_seconds: f64,
    e: &Error,
) -> TrialRecord {
    TrialRecord {
        family,
        method,
        k,
        trial,
        jsd: f64::NAN,
        jsd_se: f64::NAN,
        fit_seconds,
        status: format!("failed: {e}"),
        selected_components: None,
        rank: None,
    }
}

/// Derive a child seed the same way substreams are keyed, for passing into
/// APIs that take a plain seed.
fn splat(master: u64, key: &[u64]) -> u64 {
    let mut rng = substream(master, key);
    rng.random::<u64>()
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub const CSV_HEADER: &str = "family,method,K,trial,jsd,jsd_se,fit_seconds,status";

/// Render the records as CSV text with a fixed header and row order.
pub fn results_csv(records: &[TrialRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::invalid("no records to emit"));
    }
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let status = if r.status.contains(',') || r.status.contains('"') {
            format!("\"{}\"", r.status.replace('"', "\"\""))
        } else {
            r.status.clone()
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.family.as_str(),
            r.method.as_str(),
            r.k,
            r.trial,
            fmt_f64(r.jsd),
            fmt_f64(r.jsd_se),
            fmt_f64(r.fit_seconds),
            status
        )
        .expect("string writes cannot fail");
    }
    Ok(out)
}

/// Parse CSV produced by `results_csv` back into records (status and
/// numeric fields only; optional fields are not part of the CSV contract).
pub fn parse_results_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let family = match row.get(0).unwrap_or("") {
            "gaussian" => Family::Gaussian,
            "laplacian" => Family::Laplacian,
            "mixed_gl" => Family::MixedGl,
            "mixed_discrete" => Family::MixedDiscrete,
            other => return Err(Error::invalid(format!("unknown family {other:?}"))),
        };
        let method = match row.get(1).unwrap_or("") {
            "rad_star" => Method::RadStar,
            "rad" => Method::Rad,
            "jupad" => Method::Jupad,
            "gmm" => Method::Gmm,
            "gmm_diag" => Method::GmmDiag,
            other => return Err(Error::invalid(format!("unknown method {other:?}"))),
        };
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number in column {i}: {e}")))
        };
        out.push(TrialRecord {
            family,
            method,
            k: num(2)? as usize,
            trial: num(3)? as usize,
            jsd: num(4)?,
            jsd_se: num(5)?,
            fit_seconds: num(6)?,
            status: row.get(7).unwrap_or("").to_string(),
            selected_components: None,
            rank: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryCell {
    pub family: Family,
    pub method: Method,
    pub k: usize,
    /// Trials whose status is ok.
    pub trials: usize,
    pub jsd_mean: f64,
    pub jsd_sd: f64,
}

/// Per-(family, method, K) mean and standard deviation over successful
/// trials, in sorted key order.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<(Family, Method, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.status.starts_with("ok") {
            groups.entry((r.family, r.method, r.k)).or_default().push(r.jsd);
        }
    }
    groups
        .into_iter()
        .map(|((family, method, k), vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            SummaryCell { family, method, k, trials: vals.len(), jsd_mean: mean, jsd_sd: var.sqrt() }
        })
        .collect()
}

/// Write results.csv and summary.json into `out_dir`.
pub fn emit_results(records: &[TrialRecord], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.csv"), results_csv(records)?)?;
    let summary = summarize(records);
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(())
}

use rand::Rng;
