//! Experiment command-line interface: fit a single model, run a full sweep,
//! score two serialized models against each other, or emit a synthetic
//! dataset.

use clap::{Args, Parser, Subcommand};
use ndarray::ArrayView1;
use std::path::PathBuf;
use std::process::ExitCode;

use radest::baselines::GmmModel;
use radest::evaluation::{jsd_mc, DensityHandle};
use radest::experiment::{
    emit_results, fit_single, gen_family, run_sweep, ExperimentConfig, Method,
};
use radest::model::CpdModel;
use radest::rng::substream;
use radest::{Error, Result};

#[derive(Parser)]
#[command(name = "radest", about = "Pairwise-sketch density estimation experiments")]
struct Cli {
    /// Size of the worker thread pool (defaults to the logical CPU count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one trial's dataset and fit a single method; writes the
    /// fitted model as JSON.
    Fit {
        #[command(flatten)]
        common: ConfigArgs,
        /// One of: rad_star, rad, jupad, gmm, gmm_diag.
        #[arg(long)]
        method: String,
    },
    /// Run the full sweep from a config; writes results.csv and
    /// summary.json.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Monte Carlo Jensen-Shannon divergence between two serialized models.
    Eval {
        /// First model (JSON; mixture-of-products or Gaussian mixture).
        #[arg(long)]
        p: PathBuf,
        /// Second model (JSON).
        #[arg(long)]
        q: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a ground-truth model and dataset for a config's family.
    Gen {
        #[command(flatten)]
        common: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_handle(path: &PathBuf) -> Result<Box<dyn DensityHandle>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<CpdModel>(&text) {
        return Ok(Box::new(m));
    }
    let m: GmmModel = serde_json::from_str(&text)?;
    Ok(Box::new(m))
}

fn parse_method(name: &str) -> Result<Method> {
    match name {
        "rad_star" => Ok(Method::RadStar),
        "rad" => Ok(Method::Rad),
        "jupad" => Ok(Method::Jupad),
        "gmm" => Ok(Method::Gmm),
        "gmm_diag" => Ok(Method::GmmDiag),
        other => Err(Error::invalid(format!(
            "unknown method {other:?} (expected rad_star, rad, jupad, gmm, gmm_diag)"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Sweep { common } => {
            let cfg = load_config(&common)?;
            let records = run_sweep(&cfg)?;
            emit_results(&records, &common.out)?;
            let failures = records.iter().filter(|r| r.status.starts_with("failed")).count();
            eprintln!(
                "wrote {} records to {} ({failures} failures)",
                records.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::Fit { common, method } => {
            let cfg = load_config(&common)?;
            let method = parse_method(&method)?;
            let (record, model) = fit_single(&cfg, method)?;
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(
                common.out.join("model.json"),
                serde_json::to_string_pretty(&model)?,
            )?;
            std::fs::write(
                common.out.join("record.json"),
                serde_json::to_string_pretty(&record)?,
            )?;
            eprintln!(
                "{} on {} at K={}: jsd {:.6} +- {:.6}",
                record.method.as_str(),
                record.family.as_str(),
                record.k,
                record.jsd,
                record.jsd_se
            );
            Ok(())
        }
        Command::Eval { p, q, samples, seed } => {
            let hp = load_handle(&p)?;
            let hq = load_handle(&q)?;
            let mut rng = substream(seed, &[0x6576616c]);
            let est = jsd_mc(hp.as_ref(), hq.as_ref(), samples, &mut rng)?;
            println!("jsd {:.16e} se {:.16e}", est.value, est.std_error);
            if est.flagged() {
                eprintln!(
                    "warning: density floor hit on {:.3}% of samples",
                    100.0 * est.floored_fraction
                );
            }
            Ok(())
        }
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            let (n, f, l) = dims_of(&cfg);
            let mut rng = substream(cfg.seed, &[cfg.family.id(), 0, 0]);
            let truth = gen_family(cfg.family, n, f, l, &mut rng)?;
            let mut data_rng = substream(cfg.seed, &[cfg.family.id(), 0, 1]);
            let k = *cfg.k_grid.last().unwrap();
            let samples = truth.sample(k, &mut data_rng);
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(
                common.out.join("truth.json"),
                serde_json::to_string_pretty(&truth)?,
            )?;
            let mut w = csv::Writer::from_path(common.out.join("samples.csv"))?;
            w.write_record((0..n).map(|i| format!("x{i}")))?;
            for row in samples.rows() {
                write_row(&mut w, row)?;
            }
            w.flush()?;
            eprintln!("wrote truth.json and samples.csv ({k} rows) to {}", common.out.display());
            Ok(())
        }
    }
}

fn write_row<W: std::io::Write>(w: &mut csv::Writer<W>, row: ArrayView1<f64>) -> Result<()> {
    w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    Ok(())
}

fn dims_of(cfg: &ExperimentConfig) -> (usize, usize, usize) {
    let (n, f, l) = cfg.family.defaults();
    (
        cfg.features.unwrap_or(n),
        cfg.rank.unwrap_or(f),
        cfg.atoms.unwrap_or(l),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::NonFinite(_) | Error::Degenerate(_))) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
