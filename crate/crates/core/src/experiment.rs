//! The full pipeline: synthetic data, surrogate training, pilot runs, the
//! three coarse modes with paired seeds, and the diagnostics reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::darcy::{generate_synthetic_data, ForwardModel, SyntheticData};
use crate::diagnostics::{
    autocorrelation_curve, histogram, log_linear_fit, records_by_level, summarize, ChainStatistics, SummaryOptions,
};
use crate::error::{Error, Result};
use crate::grf::WhiteNoise;
use crate::io::{ChainHeader, ChainWriter, RunManifest, RunStatus, MANIFEST_FORMAT_VERSION, TOOL_VERSION};
use crate::mcmc::{ChainSettings, CoarseMode, MultilevelSampler, SampleRecord, SubsampleEstimate};
use crate::surrogate::{generate_training_data, train, EpochLoss, Surrogate, TrainedSurrogate};

pub fn data_hash(data: &SyntheticData) -> Result<String> {
    Ok(sha256_hex(data.to_json()?.as_bytes()))
}

/// Loads `darcy.data_path` if set, otherwise generates the data.
pub fn load_or_generate_data(config: &RunConfig, model: &ForwardModel) -> Result<SyntheticData> {
    if let Some(path) = &config.darcy.data_path {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingDependency(format!("cannot read data {}: {e}", path.display())))?;
        let data = SyntheticData::from_json(&text)?;
        if data.probes.len() != model.probes().len() {
            return Err(Error::Config("data probes differ from the configured probes".into()));
        }
        return Ok(data);
    }
    generate_synthetic_data(
        model,
        config.darcy.reference_level.unwrap_or(config.top_level()),
        config.darcy.sigma_eta,
        config.darcy.data_seed,
    )
}

pub fn load_surrogate(path: &Path) -> Result<TrainedSurrogate> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingDependency(format!("cannot read surrogate {}: {e}", path.display())))?;
    TrainedSurrogate::from_json(&text)
}

#[derive(Debug, Clone)]
pub struct SurrogateTraining {
    pub surrogate: TrainedSurrogate,
    pub history: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    pub constant_valid_mse: f64,
    pub skipped_samples: usize,
}

impl SurrogateTraining {
    /// Best validation MSE relative to predicting the training mean.
    pub fn relative_valid_mse(&self) -> f64 {
        self.surrogate.final_valid_mse / self.constant_valid_mse
    }
}

/// Trains the coarsest-level surrogate on prior draws.
pub fn train_surrogate(config: &RunConfig, model: &ForwardModel) -> Result<SurrogateTraining> {
    let s = &config.surrogate;
    let (train_set, valid_set, skipped) = generate_training_data(model, 0, s.n_train, s.n_valid, s.data_seed)?;
    let spec = config.surrogate_spec()?;
    let outcome = train(&spec, &train_set, &valid_set, &s.train)?;
    let grid = model.sampler().hierarchy().level(0)?;
    let input_scale = grid.mass_diagonal().iter().map(|w| 1.0 / w.sqrt()).collect();
    let history = outcome.history.clone();
    let best_epoch = outcome.best_epoch;
    let constant_valid_mse = outcome.constant_valid_mse;
    let surrogate = TrainedSurrogate::from_outcome(outcome, input_scale, 0, s.data_seed)?;
    Ok(SurrogateTraining {
        surrogate,
        history,
        best_epoch,
        constant_valid_mse,
        skipped_samples: skipped,
    })
}

pub fn write_loss_history(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in history {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a chain needs besides its mode and index.
pub struct ChainContext<'a> {
    pub config: &'a RunConfig,
    pub config_hash: String,
    pub model: &'a ForwardModel,
    pub data: &'a SyntheticData,
    pub data_hash: String,
    pub surrogate: Option<&'a TrainedSurrogate>,
    pub surrogate_hash: Option<String>,
    pub subsample: Vec<usize>,
    pub initial: Option<WhiteNoise>,
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub label: String,
    pub header: ChainHeader,
    pub manifest: RunManifest,
    pub records: Vec<SampleRecord>,
}

pub fn chain_label(mode: CoarseMode, chain: usize, chains: usize) -> String {
    if chains == 1 {
        mode.to_string()
    } else {
        format!("{mode}_c{chain}")
    }
}

/// Seed of chain `k`; shared by all modes so their proposals are paired.
pub fn chain_seed(config: &RunConfig, chain: usize) -> u64 {
    config.mcmc.seed.wrapping_add(chain as u64)
}

/// Pilot-estimated subsampling rates, or the configured ones.
pub fn choose_subsample(config: &RunConfig, model: &ForwardModel, data: &SyntheticData) -> Result<SubsampleEstimate> {
    if let Some(j) = &config.mcmc.subsample {
        return Ok(SubsampleEstimate {
            subsample: j.clone(),
            iact: vec![None; j.len()],
            final_state: None,
        });
    }
    SubsampleEstimate::from_pilot(
        model,
        &data.observations(),
        None,
        CoarseMode::Reference,
        config.top_level(),
        config.betas(),
        config.mcmc.seed ^ 0x9E37_79B9_7F4A_7C15,
        config.mcmc.pilot_length,
        config.mcmc.max_subsample,
    )
}

/// Runs one chain, streaming records to `<dir>/<label>.csv` when `dir` is
/// given. A failed chain still leaves its partial CSV and an aborted
/// manifest behind.
pub fn run_chain(ctx: &ChainContext<'_>, mode: CoarseMode, chain: usize, dir: Option<&Path>) -> Result<ChainRun> {
    let cfg = ctx.config;
    let label = chain_label(mode, chain, cfg.mcmc.chains);
    let header = ChainHeader {
        tool_version: TOOL_VERSION.into(),
        config_hash: ctx.config_hash.clone(),
        data_hash: ctx.data_hash.clone(),
        mode,
        chain,
    };
    let seed = chain_seed(cfg, chain);
    let mut manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        tool_version: TOOL_VERSION.into(),
        config_hash: ctx.config_hash.clone(),
        data_hash: ctx.data_hash.clone(),
        surrogate_hash: if mode.needs_surrogate() {
            ctx.surrogate_hash.clone()
        } else {
            None
        },
        mode,
        chain,
        seed,
        top_level: cfg.top_level(),
        betas: cfg.betas().to_vec(),
        subsample: ctx.subsample.clone(),
        n_fine_samples: cfg.mcmc.n_fine_samples,
        records: 0,
        chain_file: format!("{label}.csv"),
        status: RunStatus::Complete,
        error: None,
        summary: None,
    };
    let mut writer = match dir {
        Some(d) => Some(ChainWriter::new(
            BufWriter::new(File::create(d.join(&manifest.chain_file))?),
            &header,
        )?),
        None => None,
    };
    let observations = ctx.data.observations();
    let surrogate = ctx.surrogate.map(|s| s as &dyn Surrogate);
    let settings = ChainSettings {
        betas: cfg.betas().to_vec(),
        subsample: ctx.subsample.clone(),
        seed,
        record_wall_time: cfg.output.record_wall_time,
    };
    let mut records = Vec::new();
    let mut summary = None;
    let result = MultilevelSampler::new(
        ctx.model,
        &observations,
        surrogate,
        mode,
        cfg.top_level(),
        settings,
        ctx.initial.as_ref(),
    )
    .and_then(|mut sampler| {
        let outcome = sampler.run(cfg.mcmc.n_fine_samples, &mut |r| {
            if let Some(w) = writer.as_mut() {
                w.write(r)?;
            }
            records.push(r.clone());
            Ok(())
        });
        summary = Some(sampler.summary());
        outcome
    });
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    manifest.records = records.len() as u64;
    manifest.summary = summary;
    if let Err(e) = &result {
        manifest.status = RunStatus::Aborted;
        manifest.error = Some(e.to_string());
    }
    if let Some(d) = dir {
        fs::write(d.join(format!("{label}.manifest.json")), manifest.to_json()?)?;
    }
    result?;
    Ok(ChainRun {
        label,
        header,
        manifest,
        records,
    })
}

/// Runs `(mode, chain)` jobs on up to `workers` threads; results keep the
/// job order.
pub fn run_chains(
    ctx: &ChainContext<'_>,
    jobs: &[(CoarseMode, usize)],
    workers: usize,
    dir: Option<&Path>,
) -> Result<Vec<ChainRun>> {
    let workers = workers.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ChainRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(mode, chain)) = jobs.get(i) else {
                    break;
                };
                let run = run_chain(ctx, mode, chain, dir);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(run);
            });
        }
    });
    results
        .into_inner()
        .expect("workers have finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecay {
    pub variances: Vec<f64>,
    pub strictly_decreasing: bool,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r2: Option<f64>,
}

impl VarianceDecay {
    pub fn from_statistics(stats: &ChainStatistics) -> Self {
        let variances: Vec<f64> = stats.levels.iter().map(|l| l.variance_y).collect();
        let strictly_decreasing = variances.windows(2).all(|w| w[1] < w[0]);
        let fit = log_linear_fit(&variances).ok();
        Self {
            strictly_decreasing,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            r2: fit.map(|f| f.2),
            variances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub mode: CoarseMode,
    pub chain: usize,
    /// Label of the run this one is compared against.
    pub reference: Option<String>,
    pub statistics: ChainStatistics,
    pub variance_decay: VarianceDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub tool_version: String,
    pub config_hashes: Vec<String>,
    pub data_hash: String,
    pub options: SummaryOptions,
    pub runs: Vec<RunReport>,
}

/// Summarises every run; runs are compared against the reference-mode run
/// with the same chain index. Refuses runs on different data.
pub fn diagnose(runs: &[ChainRun], options: &SummaryOptions) -> Result<DiagnosticsReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to diagnose".into()))?;
    if let Some(r) = runs.iter().find(|r| r.header.data_hash != first.header.data_hash) {
        return Err(Error::InvalidArgument(format!(
            "runs '{}' and '{}' were sampled against different data",
            first.label, r.label
        )));
    }
    let mut config_hashes: Vec<String> = runs.iter().map(|r| r.header.config_hash.clone()).collect();
    config_hashes.sort();
    config_hashes.dedup();
    let mut reports = Vec::with_capacity(runs.len());
    for run in runs {
        let reference = runs
            .iter()
            .find(|r| r.header.mode == CoarseMode::Reference && r.header.chain == run.header.chain)
            .or_else(|| runs.iter().find(|r| r.header.mode == CoarseMode::Reference));
        let statistics = summarize(&run.records, reference.map(|r| r.records.as_slice()), options)?;
        reports.push(RunReport {
            label: run.label.clone(),
            mode: run.header.mode,
            chain: run.header.chain,
            reference: reference.map(|r| r.label.clone()),
            variance_decay: VarianceDecay::from_statistics(&statistics),
            statistics,
        });
    }
    Ok(DiagnosticsReport {
        tool_version: TOOL_VERSION.into(),
        config_hashes,
        data_hash: first.header.data_hash.clone(),
        options: *options,
        runs: reports,
    })
}

fn after_burn_in(values: Vec<f64>, fraction: f64) -> Vec<f64> {
    let skip = (values.len() as f64 * fraction).floor() as usize;
    values[skip.min(values.len())..].to_vec()
}

fn level_series(run: &ChainRun, burn_in: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    records_by_level(&run.records)
        .into_iter()
        .map(|level| {
            let q = after_burn_in(level.iter().map(|r| r.qoi).collect(), burn_in);
            let y = after_burn_in(level.iter().map(|r| r.y).collect(), burn_in);
            (q, y)
        })
        .collect()
}

/// Writes `report.json`, `table1.csv`, `wasserstein.csv`, and per run
/// `acf_<label>.csv` and `hist_<label>.csv` (bins shared across runs).
pub fn write_reports(
    dir: &Path,
    report: &DiagnosticsReport,
    runs: &[ChainRun],
    bins: usize,
    max_lag: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;

    let mut table = csv::Writer::from_path(dir.join("table1.csv"))?;
    table.write_record([
        "run",
        "level",
        "samples",
        "mean_Y",
        "variance_Y",
        "iact_Y",
        "iact_Y_converged",
        "cost_per_sample_ms",
        "effective_cost_ms",
        "planned_samples",
        "acceptance_rate",
        "stage1_rate",
        "stage2_rate",
    ])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in &report.runs {
        for l in &r.statistics.levels {
            let planned = r
                .statistics
                .sample_plan
                .as_ref()
                .map_or_else(String::new, |p| p.samples[l.level].to_string());
            table.write_record([
                r.label.clone(),
                l.level.to_string(),
                l.samples.to_string(),
                l.mean_y.to_string(),
                l.variance_y.to_string(),
                opt(l.iact_y),
                l.iact_y_converged.to_string(),
                l.cost_per_sample_ms.to_string(),
                opt(l.effective_cost_ms),
                planned,
                l.acceptance_rate.to_string(),
                l.stage1_rate.to_string(),
                l.stage2_rate.to_string(),
            ])?;
        }
    }
    table.flush()?;

    let mut w1 = csv::Writer::from_path(dir.join("wasserstein.csv"))?;
    w1.write_record(["run", "reference", "level", "W1_Q", "W1_Y"])?;
    for r in &report.runs {
        for l in &r.statistics.levels {
            w1.write_record([
                r.label.clone(),
                r.reference.clone().unwrap_or_default(),
                l.level.to_string(),
                opt(l.wasserstein_q),
                opt(l.wasserstein_y),
            ])?;
        }
    }
    w1.flush()?;

    let burn_in = report.options.burn_in_fraction;
    let series: Vec<_> = runs.iter().map(|r| level_series(r, burn_in)).collect();
    let levels = series.iter().map(Vec::len).max().unwrap_or(0);
    // shared bin ranges per level and quantity
    let mut ranges = vec![[(f64::INFINITY, f64::NEG_INFINITY); 2]; levels];
    for run in &series {
        for (l, (q, y)) in run.iter().enumerate() {
            for (k, values) in [q, y].into_iter().enumerate() {
                for &v in values {
                    ranges[l][k].0 = ranges[l][k].0.min(v);
                    ranges[l][k].1 = ranges[l][k].1.max(v);
                }
            }
        }
    }
    for (run, levels_of_run) in runs.iter().zip(&series) {
        let mut hist = csv::Writer::from_path(dir.join(format!("hist_{}.csv", run.label)))?;
        hist.write_record(["level", "quantity", "bin_center", "density"])?;
        for (l, (q, y)) in levels_of_run.iter().enumerate() {
            for (k, (name, values)) in [("Q", q), ("Y", y)].into_iter().enumerate() {
                let (lo, hi) = ranges[l][k];
                if values.is_empty() || !(hi > lo) {
                    continue;
                }
                for (center, density) in histogram(values, lo, hi, bins)? {
                    hist.write_record([l.to_string(), name.into(), center.to_string(), density.to_string()])?;
                }
            }
        }
        hist.flush()?;

        let curves: Vec<Vec<f64>> = levels_of_run
            .iter()
            .flat_map(|(q, y)| [q, y])
            .map(|s| autocorrelation_curve(s, max_lag).unwrap_or_default())
            .collect();
        let mut acf = csv::Writer::from_path(dir.join(format!("acf_{}.csv", run.label)))?;
        let mut head = vec!["lag".to_string()];
        for l in 0..levels_of_run.len() {
            head.push(format!("Q_level{l}"));
            head.push(format!("Y_level{l}"));
        }
        acf.write_record(&head)?;
        let rows = curves.iter().map(Vec::len).max().unwrap_or(0);
        for lag in 0..rows {
            let mut row = vec![lag.to_string()];
            row.extend(
                curves
                    .iter()
                    .map(|c| c.get(lag).map_or_else(String::new, |v| v.to_string())),
            );
            acf.write_record(&row)?;
        }
        acf.flush()?;
    }
    Ok(())
}

/// Files and results of a full experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub directory: PathBuf,
    pub data: SyntheticData,
    pub training: Option<SurrogateTraining>,
    pub subsample: SubsampleEstimate,
    pub runs: Vec<ChainRun>,
    pub report: DiagnosticsReport,
}

/// Data, surrogate, pilot, three paired modes and diagnostics, written
/// under `out`.
pub fn run_experiment(config: &RunConfig, out: &Path, workers: usize) -> Result<ExperimentOutcome> {
    fs::create_dir_all(out)?;
    let config_hash = config.hash()?;
    fs::write(out.join("config.json"), config.to_json()?)?;
    let model = config.build_model()?;

    let data = load_or_generate_data(config, &model)?;
    let data_hash = data_hash(&data)?;
    fs::write(out.join("data.json"), data.to_json()?)?;

    let (surrogate, training) = match &config.surrogate.model_path {
        Some(path) => (load_surrogate(path)?, None),
        None => {
            let t = train_surrogate(config, &model)?;
            write_loss_history(&out.join("loss_history.csv"), &t.history)?;
            (t.surrogate.clone(), Some(t))
        }
    };
    let surrogate_json = surrogate.to_json()?;
    fs::write(out.join("surrogate.json"), &surrogate_json)?;

    let subsample = choose_subsample(config, &model, &data)?;
    fs::write(
        out.join("subsample.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "subsample": subsample.subsample,
            "pilot_iact": subsample.iact,
        }))?,
    )?;

    let ctx = ChainContext {
        config,
        config_hash,
        model: &model,
        data: &data,
        data_hash,
        surrogate: Some(&surrogate),
        surrogate_hash: Some(sha256_hex(surrogate_json.as_bytes())),
        subsample: subsample.subsample.clone(),
        initial: subsample.final_state.clone(),
    };
    let chains_dir = out.join("chains");
    fs::create_dir_all(&chains_dir)?;
    let jobs: Vec<(CoarseMode, usize)> = CoarseMode::ALL
        .iter()
        .flat_map(|&m| (0..config.mcmc.chains).map(move |c| (m, c)))
        .collect();
    let runs = run_chains(&ctx, &jobs, workers, Some(&chains_dir))?;

    let report = diagnose(&runs, &config.summary_options())?;
    write_reports(out, &report, &runs, config.output.histogram_bins, config.output.max_lag)?;
    let mut log = BufWriter::new(File::create(out.join("summary.txt"))?);
    write_summary(&mut log, &report)?;
    log.flush()?;
    Ok(ExperimentOutcome {
        directory: out.to_path_buf(),
        data,
        training,
        subsample,
        runs,
        report,
    })
}

/// Human-readable digest of a report.
pub fn write_summary(w: &mut dyn Write, report: &DiagnosticsReport) -> Result<()> {
    for r in &report.runs {
        let s = &r.statistics;
        writeln!(
            w,
            "{}: estimate {:.6}, wall {:.1} ms{}",
            r.label,
            s.estimate.value,
            s.total_wall_ms,
            s.speedup.map_or_else(String::new, |v| format!(", speedup {v:.3}"))
        )?;
        for l in &s.levels {
            writeln!(
                w,
                "  level {}: n {} mean Y {:.4e} var Y {:.4e} iact {} accept {:.3} (stage1 {:.3}, stage2 {:.3}){}",
                l.level,
                l.samples,
                l.mean_y,
                l.variance_y,
                match l.iact_y {
                    Some(t) if l.iact_y_converged => format!("{t:.2}"),
                    Some(t) => format!(">{t:.2}"),
                    None => "-".into(),
                },
                l.acceptance_rate,
                l.stage1_rate,
                l.stage2_rate,
                l.wasserstein_q.map_or_else(String::new, |d| format!(" W1(Q) {d:.3e}")),
            )?;
        }
    }
    Ok(())
}
