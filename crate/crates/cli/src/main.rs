use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlmcmc::config::{sha256_hex, RunConfig};
use mlmcmc::darcy::SyntheticData;
use mlmcmc::experiment::{
    self, data_hash, diagnose, load_surrogate, run_chains, train_surrogate, write_loss_history, write_reports,
    write_summary, ChainContext, ChainRun,
};
use mlmcmc::grf::sample_white_noise;
use mlmcmc::io::{read_chain_file, RunManifest};
use mlmcmc::mcmc::CoarseMode;
use mlmcmc::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "mlmcmc",
    version,
    about = "Multilevel delayed-acceptance MCMC for Darcy flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `output.directory` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic observations.
    GenerateData(Common),
    /// Draw prior fields and write them as CSV.
    SampleGrf {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train the coarsest-level surrogate.
    TrainSurrogate(Common),
    /// Run chains of one coarse mode.
    RunChain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<CoarseMode>,
        /// Synthetic data file; defaults to `darcy.data_path` or `<out>/data.json`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained surrogate; defaults to `surrogate.model_path` or `<out>/surrogate.json`.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Data, surrogate and all three modes followed by diagnostics.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarise chain CSVs against the reference-mode chain among them.
    Diagnostics {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        chains: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::default().resolve(),
    }
}

fn out_dir(common: &Common, config: &RunConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| config.output.directory.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes the effective configuration next to the outputs.
fn emit_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.json"), config.to_json()?)?;
    Ok(())
}

fn first_existing(candidates: [Option<PathBuf>; 3], what: &str) -> Result<PathBuf> {
    candidates
        .into_iter()
        .flatten()
        .find(|p| p.exists())
        .ok_or_else(|| Error::MissingDependency(format!("no {what} found; pass it explicitly or generate it first")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(common) => {
            let mut config = load_config(&common)?;
            if let Some(s) = common.seed {
                config.darcy.data_seed = s;
            }
            let dir = out_dir(&common, &config)?;
            emit_config(&dir, &config)?;
            let model = config.build_model()?;
            let data = experiment::load_or_generate_data(&config, &model)?;
            fs::write(dir.join("data.json"), data.to_json()?)?;
            println!("data_hash={} true_qoi={}", data_hash(&data)?, data.true_qoi);
        }
        Command::SampleGrf { common, level, count } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            emit_config(&dir, &config)?;
            let model = config.build_model()?;
            let sampler = model.sampler();
            let grid = sampler.hierarchy().level(level)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(config.mcmc.seed));
            let mut w = csv::Writer::from_path(dir.join("grf.csv")).map_err(Error::from)?;
            let axes = ["x", "y", "z"];
            let mut head = vec!["sample".to_string(), "cell".to_string()];
            head.extend(axes[..grid.dimension()].iter().map(|a| a.to_string()));
            head.push("value".into());
            w.write_record(&head)?;
            for s in 0..count {
                let zeta = sample_white_noise(sampler.hierarchy(), level, &mut rng)?;
                let field = sampler.solve(&zeta)?;
                for (cell, v) in field.values.iter().enumerate() {
                    let mut row = vec![s.to_string(), cell.to_string()];
                    row.extend(grid.physical_cell_center(cell).iter().map(|c| c.to_string()));
                    row.push(v.to_string());
                    w.write_record(&row)?;
                }
            }
            w.flush()?;
        }
        Command::TrainSurrogate(common) => {
            let mut config = load_config(&common)?;
            if let Some(s) = common.seed {
                config.surrogate.train.seed = s;
            }
            let dir = out_dir(&common, &config)?;
            emit_config(&dir, &config)?;
            let model = config.build_model()?;
            let t = train_surrogate(&config, &model)?;
            write_loss_history(&dir.join("loss_history.csv"), &t.history)?;
            fs::write(dir.join("surrogate.json"), t.surrogate.to_json()?)?;
            println!(
                "best epoch {:?}: validation MSE {:.4e} ({:.2}% of the constant predictor)",
                t.best_epoch,
                t.surrogate.final_valid_mse,
                100.0 * t.relative_valid_mse()
            );
        }
        Command::RunChain {
            common,
            mode,
            data,
            surrogate,
            workers,
        } => {
            let mut config = load_config(&common)?;
            if let Some(s) = common.seed {
                config.mcmc.seed = s;
            }
            if let Some(m) = mode {
                config.mcmc.mode = m;
            }
            let mode = config.mcmc.mode;
            let dir = out_dir(&common, &config)?;
            let data_path = first_existing(
                [data, config.darcy.data_path.clone(), Some(dir.join("data.json"))],
                "synthetic data",
            )?;
            let data = SyntheticData::from_json(
                &fs::read_to_string(&data_path)
                    .map_err(|e| Error::MissingDependency(format!("{}: {e}", data_path.display())))?,
            )?;
            let trained = if mode.needs_surrogate() {
                let path = first_existing(
                    [
                        surrogate,
                        config.surrogate.model_path.clone(),
                        Some(dir.join("surrogate.json")),
                    ],
                    "trained surrogate",
                )?;
                Some(load_surrogate(&path)?)
            } else {
                None
            };
            emit_config(&dir, &config)?;
            let model = config.build_model()?;
            let subsample = experiment::choose_subsample(&config, &model, &data)?;
            let ctx = ChainContext {
                config: &config,
                config_hash: config.hash()?,
                model: &model,
                data: &data,
                data_hash: data_hash(&data)?,
                surrogate: trained.as_ref(),
                surrogate_hash: trained
                    .as_ref()
                    .map(|s| s.to_json().map(|j| sha256_hex(j.as_bytes())))
                    .transpose()?,
                subsample: subsample.subsample,
                initial: subsample.final_state,
            };
            let chains_dir = dir.join("chains");
            fs::create_dir_all(&chains_dir)?;
            let jobs: Vec<_> = (0..config.mcmc.chains).map(|c| (mode, c)).collect();
            for run in run_chains(&ctx, &jobs, workers, Some(&chains_dir))? {
                println!(
                    "{}: {} records -> {}",
                    run.label,
                    run.records.len(),
                    run.manifest.chain_file
                );
            }
        }
        Command::RunExperiment { common, workers } => {
            let mut config = load_config(&common)?;
            if let Some(s) = common.seed {
                config.mcmc.seed = s;
            }
            let dir = out_dir(&common, &config)?;
            let outcome = experiment::run_experiment(&config, &dir, workers)?;
            write_summary(&mut std::io::stdout().lock(), &outcome.report)?;
        }
        Command::Diagnostics { common, chains } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config)?;
            let mut runs = Vec::with_capacity(chains.len());
            for path in &chains {
                let (header, records) = read_chain_file(path)?;
                let manifest_path = path.with_extension("manifest.json");
                let manifest = match fs::read_to_string(&manifest_path) {
                    Ok(text) => RunManifest::from_json(&text)?,
                    Err(_) => {
                        return Err(Error::MissingDependency(format!(
                            "manifest {} not found",
                            manifest_path.display()
                        )))
                    }
                };
                let label = path
                    .file_stem()
                    .map_or_else(|| header.mode.to_string(), |s| s.to_string_lossy().into_owned());
                runs.push(ChainRun {
                    label,
                    header,
                    manifest,
                    records,
                });
            }
            let report = diagnose(&runs, &config.summary_options())?;
            write_reports(
                &dir,
                &report,
                &runs,
                config.output.histogram_bins,
                config.output.max_lag,
            )?;
            let mut out = std::io::stdout().lock();
            write_summary(&mut out, &report)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingDependency(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
