use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manifold_gcd::data::{gen_synthetic, load_embeddings, mean_patch_features, save_embeddings};
use manifold_gcd::error::{Error, Result};
use manifold_gcd::runner::{estimate_k_on, evaluate, load_checkpoint, train, RunConfig};
use manifold_gcd::spectral::{spectral_report, verify_theory, write_spectrum};

#[derive(Parser)]
#[command(name = "manifold-gcd", version, about = "Spectral diagnostics and MTMC training for generalized category discovery")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON RunConfig; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the run and dataset seeds from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only errors are logged.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset: manifest.json and features.csv.
    GenData,
    /// Train and write metrics.csv plus a checkpoint.
    Train {
        /// Comma-separated seeds, one run directory `seed-<s>` each.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Cluster a dataset with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Number of clusters; defaults to the dataset's class count.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Spectral report of an embedding CSV.
    Diagnose {
        #[arg(long)]
        input: PathBuf,
        /// L2-normalize rows before the report.
        #[arg(long)]
        normalize: bool,
    },
    /// Estimate the number of classes.
    EstimateK {
        /// Embedding CSV aligned with the dataset; mean patch features otherwise.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Embed with this checkpoint instead.
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Check the spectral claims on an embedding CSV.
    VerifyTheory {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = match (&common.out, cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.output_dir.clone(),
        (None, None) => return Err(Error::Config("--out is required".into())),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn worker_cap(runs: usize) -> Result<usize> {
    match std::env::var("MANIFOLD_GCD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(runs)),
            _ => Err(Error::Config(format!("MANIFOLD_GCD_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(runs),
    }
}

fn run_train(common: &Common, seeds: &[u64]) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common, Some(&cfg))?;
    if seeds.is_empty() {
        let outcome = train(&cfg, &out)?;
        if let Some(last) = outcome.metrics.last() {
            println!("{}", serde_json::to_string(last)?);
        }
        return Ok(());
    }
    let jobs: Vec<(u64, RunConfig, PathBuf)> =
        seeds.iter().map(|&s| (s, cfg.clone().with_seed(s), out.join(format!("seed-{s}")))).collect();
    let workers = worker_cap(jobs.len())?;
    for chunk in jobs.chunks(workers) {
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(s, c, dir)| {
                    scope.spawn(move || {
                        let outcome = train(c, dir)?;
                        if let Some(last) = outcome.metrics.last() {
                            println!("seed {s}: {}", serde_json::to_string(last)?);
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Cmd::GenData => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Some(&cfg))?;
            let data = gen_synthetic(&cfg.synth)?;
            data.manifest().save(&out.join("manifest.json"))?;
            save_embeddings(&mean_patch_features(&data.batch.patches)?, &out.join("features.csv"))?;
            log::info!("wrote {} samples to {}", data.len(), out.display());
        }
        Cmd::Train { seeds } => run_train(common, &seeds)?,
        Cmd::Eval { checkpoint, manifest, k } => {
            let out = out_dir(common, None)?;
            let report = evaluate(&checkpoint, &manifest, k, common.seed.unwrap_or(0))?;
            write_json(&out.join("evaluation.json"), &report)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::Diagnose { input, normalize } => {
            let out = out_dir(common, None)?;
            let mut z = load_embeddings(&input)?;
            if normalize {
                z = z.normalize_rows()?;
            }
            let report = spectral_report(&z)?;
            write_spectrum(&report, &out, "spectrum")?;
            write_json(&out.join("report.json"), &report)?;
            println!("entropy={} effective_rank_99={}", report.entropy, report.effective_rank_99);
        }
        Cmd::EstimateK { embeddings, checkpoint, k_min, k_max } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Some(&cfg))?;
            let data = gen_synthetic(&cfg.synth)?;
            let features = match (embeddings, checkpoint) {
                (Some(p), _) => Some(load_embeddings(&p)?),
                (None, Some(dir)) => {
                    let (model, _) = load_checkpoint(&dir)?;
                    Some(manifold_gcd::model::embed(&model.params, &data.batch.patches)?.0)
                }
                (None, None) => None,
            };
            let k_min = k_min.unwrap_or(cfg.synth.n_classes_known.max(1));
            let k_max = k_max.unwrap_or(2 * cfg.synth.n_classes()).min(data.len());
            let est = estimate_k_on(&data, features.as_ref(), k_min, k_max, cfg.seed)?;
            write_json(&out.join("estimate_k.json"), &est)?;
            println!("k={}", est.k);
        }
        Cmd::VerifyTheory { input } => {
            let out = out_dir(common, None)?;
            let z = load_embeddings(&input)?;
            let report = verify_theory(&z, common.seed.unwrap_or(0));
            write_json(&out.join("theory.json"), &report)?;
            for c in &report.checks {
                println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            if !report.all_passed {
                return Err(Error::Invalid("one or more theory checks failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
