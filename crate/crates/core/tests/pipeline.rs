use std::fs;
use std::path::Path;

use mlmcmc::config::RunConfig;
use mlmcmc::experiment::{data_hash, diagnose, load_or_generate_data, run_chain, run_experiment, ChainContext};
use mlmcmc::io::{read_chain_file, RunManifest, RunStatus};
use mlmcmc::mcmc::CoarseMode;
use mlmcmc::Error;

fn tiny_config() -> RunConfig {
    RunConfig::from_json(
        r#"{
            "hierarchy": {"coarse_dims": [4, 4], "num_levels": 2},
            "darcy": {"sigma_eta": 0.05},
            "surrogate": {
                "hidden_layers": [{"width": 8, "activation": "tanh"}],
                "n_train": 60, "n_valid": 20,
                "train": {"epochs_main": 3, "epochs_finetune": 1, "batch_size": 16}
            },
            "mcmc": {"n_fine_samples": 6, "pilot_length": 20, "max_subsample": 3},
            "output": {"record_wall_time": false, "max_lag": 5}
        }"#,
    )
    .unwrap()
}

fn chain_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("chains"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn experiment_writes_every_artifact_and_repeats_exactly() {
    let config = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config, a.path(), 2).unwrap();
    run_experiment(&config, b.path(), 1).unwrap();

    for name in [
        "config.json",
        "data.json",
        "surrogate.json",
        "loss_history.csv",
        "subsample.json",
        "report.json",
        "table1.csv",
        "wasserstein.csv",
        "summary.txt",
    ] {
        assert!(a.path().join(name).is_file(), "{name} missing");
    }
    for mode in CoarseMode::ALL {
        for prefix in ["acf_", "hist_"] {
            assert!(a.path().join(format!("{prefix}{mode}.csv")).is_file());
        }
        let manifest = RunManifest::from_json(
            &fs::read_to_string(a.path().join("chains").join(format!("{mode}.manifest.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.status, RunStatus::Complete);
        assert_eq!(manifest.config_hash, config.hash().unwrap());
    }

    let first = chain_bytes(a.path());
    assert_eq!(first.len(), 3);
    assert_eq!(first, chain_bytes(b.path()));

    // every chain file carries its provenance
    let (header, records) = read_chain_file(&a.path().join("chains/filtered.csv")).unwrap();
    assert_eq!(header.config_hash, config.hash().unwrap());
    assert_eq!(header.data_hash, data_hash(&outcome.data).unwrap());
    let j = outcome.subsample.subsample[0];
    assert_eq!(records.iter().filter(|r| r.level == 1).count(), 6);
    assert_eq!(records.iter().filter(|r| r.level == 0).count(), 6 * j);

    // the emitted configuration reloads to the same run
    let reloaded = RunConfig::load(&a.path().join("config.json")).unwrap();
    assert_eq!(reloaded, config);
    assert_eq!(reloaded.hash().unwrap(), config.hash().unwrap());
}

#[test]
fn filtered_level_zero_runs_the_pde_only_after_stage_one() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config, dir.path(), 1).unwrap();
    let filtered = outcome
        .runs
        .iter()
        .find(|r| r.header.mode == CoarseMode::Filtered)
        .unwrap();
    let tallies = filtered.manifest.summary.as_ref().unwrap().tallies[0];
    assert_eq!(tallies.exact_evaluations, tallies.stage1_accepted);
    assert_eq!(tallies.surrogate_evaluations, tallies.steps);
    let unfiltered = outcome
        .runs
        .iter()
        .find(|r| r.header.mode == CoarseMode::Unfiltered)
        .unwrap();
    assert_eq!(
        unfiltered.manifest.summary.as_ref().unwrap().tallies[0].exact_evaluations,
        0
    );
}

#[test]
fn zero_fine_samples_give_an_empty_valid_chain() {
    let mut config = tiny_config();
    config.mcmc.n_fine_samples = 0;
    config.mcmc.subsample = Some(vec![2]);
    let model = config.build_model().unwrap();
    let data = load_or_generate_data(&config, &model).unwrap();
    let ctx = ChainContext {
        config: &config,
        config_hash: config.hash().unwrap(),
        model: &model,
        data: &data,
        data_hash: data_hash(&data).unwrap(),
        surrogate: None,
        surrogate_hash: None,
        subsample: vec![2],
        initial: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let run = run_chain(&ctx, CoarseMode::Reference, 0, Some(dir.path())).unwrap();
    assert!(run.records.is_empty());
    let (_, records) = read_chain_file(&dir.path().join("reference.csv")).unwrap();
    assert!(records.is_empty());
    let manifest =
        RunManifest::from_json(&fs::read_to_string(dir.path().join("reference.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.records, 0);

    // surrogate modes refuse to start without one
    let err = run_chain(&ctx, CoarseMode::Filtered, 0, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::MissingDependency(_)));
    let aborted =
        RunManifest::from_json(&fs::read_to_string(dir.path().join("filtered.manifest.json")).unwrap()).unwrap();
    assert_eq!(aborted.status, RunStatus::Aborted);
}

#[test]
fn diagnostics_refuse_runs_on_different_data() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config, dir.path(), 1).unwrap();
    let mut runs = outcome.runs.clone();
    runs[1].header.data_hash = "ff".into();
    assert!(diagnose(&runs, &config.summary_options()).is_err());
    let report = diagnose(&outcome.runs, &config.summary_options()).unwrap();
    let reference = report.runs.iter().find(|r| r.mode == CoarseMode::Reference).unwrap();
    assert!(reference
        .statistics
        .levels
        .iter()
        .all(|l| l.wasserstein_q == Some(0.0) && l.wasserstein_y == Some(0.0)));
}
