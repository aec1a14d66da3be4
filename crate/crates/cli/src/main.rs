//! Command-line driver for the fingerprinting pipeline.
//!
//! Five subcommands cover the full workflow: `simulate` synthesizes capture
//! campaigns and writes feature datasets plus the enrollment CFO database,
//! `train` fits a classifier on one dataset and writes a checkpoint,
//! `evaluate` scores a checkpoint against test datasets under the requested
//! fusion modes, `spectra` dumps per-subcarrier amplifier output spectra, and
//! `ingest` converts a directory of external IQ captures into datasets.
//!
//! Everything that draws randomness takes an explicit `--seed`; two runs with
//! the same flags produce byte-identical output files.

use std::error::Error;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rffi_core::classifier::{self, ModelConfig, TrainConfig};
use rffi_core::dataset::{self, FeatureDataset};
use rffi_core::features::FeatureKind;
use rffi_core::fusion::{self, CfoDatabase, FusionMode, NUM_ANTENNAS};
use rffi_core::harness::{self, CellResult, ExperimentConfig, PopulationConfig};
use rffi_core::volterra::{self, KernelBank};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "rffi", version, about = "Simulated RF fingerprint identification over 802.11 preambles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize capture campaigns into feature datasets and a CFO database
    Simulate(SimulateArgs),
    /// Train a classifier on one feature dataset and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on test datasets under the requested fusion modes
    Evaluate(EvaluateArgs),
    /// Dump per-subcarrier amplifier output spectra as CSV
    Spectra(SpectraArgs),
    /// Convert a directory of external IQ captures into feature datasets
    Ingest(IngestArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Master seed for device draws, padding, noise, and channels
    #[arg(long)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of devices in the population
    #[arg(long, default_value_t = 10)]
    devices: usize,
    /// Seed for the per-device amplifier kernel draws
    #[arg(long, default_value_t = 0)]
    kernel_seed: u64,
    /// Nominal oscillator offset spacing between adjacent devices
    #[arg(long, default_value_t = 2500.0)]
    cfo_spacing_hz: f64,
    /// Standard deviation of per-frame oscillator wander
    #[arg(long, default_value_t = 50.0)]
    frame_jitter_hz: f64,
    /// Standard deviation of per-session oscillator drift
    #[arg(long, default_value_t = 150.0)]
    session_jitter_hz: f64,
    /// Session drift used by the stress campaign instead of the standard one
    #[arg(long, default_value_t = 600.0)]
    stress_session_jitter_hz: f64,
    /// Receive SNR applied to every capture
    #[arg(long, default_value_t = 32.0)]
    snr_db: f64,
    /// Frames per device in the training campaign
    #[arg(long, default_value_t = 128)]
    train_frames: usize,
    /// Frames per device in each test campaign
    #[arg(long, default_value_t = 64)]
    test_frames: usize,
    /// Feature families to extract (sr, as, dolos, eq)
    #[arg(long, value_delimiter = ',', default_values_t = [FeatureKind::Sr, FeatureKind::As])]
    kinds: Vec<FeatureKind>,
    /// Channel seed for the training campaign
    #[arg(long, default_value_t = 1)]
    train_channel_seed: u64,
    /// Channel seeds for the five test campaigns (must avoid the train seed)
    #[arg(long, value_delimiter = ',', default_values_t = [2u64, 3, 4, 5, 6])]
    test_channel_seeds: Vec<u64>,
    /// Number of sessions the training campaign spans
    #[arg(long, default_value_t = 2)]
    train_sessions: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Seed for model initialization and batch shuffling
    #[arg(long)]
    seed: u64,
    /// Training dataset (.rffi) produced by `simulate` or `ingest`
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr0: f64,
    /// Multiplicative learning-rate decay applied after each epoch
    #[arg(long, default_value_t = 0.7)]
    lr_decay: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Early-stop patience in epochs; 0 disables early stopping
    #[arg(long, default_value_t = 6)]
    patience: usize,
    /// Fraction of samples held out for validation
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Use the wide model preset instead of the compact default
    #[arg(long)]
    full_model: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Model checkpoint (.ckpt) produced by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Enrollment CFO database (cfo_db.json) produced by `simulate`
    #[arg(long)]
    db: PathBuf,
    /// Test dataset (.rffi); repeat the flag for several campaigns
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Fusion modes to evaluate
    #[arg(long, value_delimiter = ',', default_values_t = FusionMode::ALL)]
    modes: Vec<FusionMode>,
    /// CFO gate width for the zeroing modes
    #[arg(long, default_value_t = fusion::DEFAULT_ZEROING_THRESHOLD_HZ)]
    threshold_hz: f64,
}

#[derive(Args, Debug)]
struct SpectraArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Kernel bank JSON; defaults to the built-in reference bank
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Directory of IQ captures (one .iq file per device/frame/antenna)
    #[arg(long)]
    input: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Feature families to extract (sr, as, dolos, eq)
    #[arg(long, value_delimiter = ',', default_values_t = [FeatureKind::Sr, FeatureKind::As])]
    kinds: Vec<FeatureKind>,
    /// Provenance label recorded in the emitted datasets
    #[arg(long, default_value = "external")]
    provenance: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Spectra(a) => run_spectra(a),
        Command::Ingest(a) => run_ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_simulate(a: SimulateArgs) -> Result<(), Box<dyn Error>> {
    let mut cfg = ExperimentConfig::new(a.seed);
    cfg.population = PopulationConfig {
        num_devices: a.devices,
        kernel_seed: a.kernel_seed,
        cfo_spacing_hz: a.cfo_spacing_hz,
        frame_jitter_hz: a.frame_jitter_hz,
        session_jitter_hz: a.session_jitter_hz,
        stress_session_jitter_hz: a.stress_session_jitter_hz,
        snr_db: a.snr_db,
        train_frames: a.train_frames,
        test_frames: a.test_frames,
    };
    cfg.feature_kinds = a.kinds;
    cfg.train_channel_seed = a.train_channel_seed;
    cfg.test_channel_seeds = a.test_channel_seeds;
    cfg.train_sessions = a.train_sessions;
    cfg.validate()?;

    fs::create_dir_all(&a.out)?;
    let devices = harness::build_population(&cfg.population);
    let ids: Vec<String> = devices.iter().map(|d| d.id.clone()).collect();

    let save_campaign = |spec: &harness::ScenarioSpec| -> Result<harness::ScenarioFeatures, Box<dyn Error>> {
        let captures = harness::synthesize_scenario(&devices, spec, &cfg.population, cfg.seed);
        let extracted =
            harness::extract_scenario_features(&captures, &cfg.feature_kinds, &ids, &spec.name)?;
        for (kind, ds) in cfg.feature_kinds.iter().zip(&extracted.datasets) {
            let path = a.out.join(format!("{}_{kind}.rffi", spec.name));
            ds.save(&path)?;
            println!("wrote {} records to {}", ds.len(), path.display());
        }
        if extracted.failed_captures > 0 {
            eprintln!(
                "warning: {} captures in {} failed front-end processing",
                extracted.failed_captures, spec.name
            );
        }
        Ok(extracted)
    };

    let train_feats = save_campaign(&harness::train_scenario(&cfg))?;
    let db = fusion::build_cfo_database(&train_feats.cfo_records)?;
    db.save(&a.out.join("cfo_db.json"))?;
    for spec in harness::test_scenarios(&cfg) {
        save_campaign(&spec)?;
    }

    // Snapshot the resolved configuration next to the data it produced. The
    // file carries no filesystem paths, so identical flags give identical
    // bytes regardless of where the run landed.
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    println!("simulated {} devices into {}", devices.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummaryFile {
    feature: FeatureKind,
    num_classes: usize,
    num_parameters: usize,
    epochs_run: usize,
    best_epoch: usize,
    stopped_early: bool,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
}

fn run_train(a: TrainArgs) -> Result<(), Box<dyn Error>> {
    let ds = FeatureDataset::load(&a.dataset)?;
    let kind = match ds.records.first() {
        Some(r) => r.kind,
        None => return Err(format!("dataset {} has no records", a.dataset.display()).into()),
    };
    if let Some(r) = ds.records.iter().find(|r| r.kind != kind) {
        return Err(format!("dataset mixes feature kinds {kind} and {}", r.kind).into());
    }
    if ds.device_ids.len() < 2 {
        return Err(format!("dataset lists {} devices; need at least 2", ds.device_ids.len()).into());
    }

    let num_classes = ds.device_ids.len();
    let mut model_cfg =
        if a.full_model { ModelConfig::new(num_classes) } else { ModelConfig::compact(num_classes) };
    model_cfg.input_length = kind.len();
    model_cfg.seed = a.seed;
    let train_cfg = TrainConfig {
        lr0: a.lr0,
        weight_decay: a.weight_decay,
        lr_decay_per_epoch: a.lr_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        patience: if a.patience == 0 { None } else { Some(a.patience) },
        validation_fraction: a.val_fraction,
        seed: a.seed,
    };

    let mut model = classifier::build_model::<f32>(&model_cfg)?;
    let (features, labels) = ds.features_and_labels();
    let report = classifier::train(&mut model, &features, &labels, &train_cfg)?;

    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join(format!("model_{kind}.ckpt"));
    dataset::save_checkpoint(&ckpt, &model)?;
    let best = &report.epochs[report.best_epoch];
    let summary = TrainSummaryFile {
        feature: kind,
        num_classes,
        num_parameters: model.num_parameters(),
        epochs_run: report.epochs.len(),
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        train_accuracy: best.train_accuracy,
        val_accuracy: best.val_accuracy,
    };
    fs::write(a.out.join("train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "trained {kind} model ({} parameters) on {} records; best epoch {} train acc {:.4}",
        summary.num_parameters,
        ds.len(),
        report.best_epoch,
        best.train_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalHealth {
    scenario: String,
    feature: FeatureKind,
    groups_evaluated: usize,
    dropped_frames: usize,
}

#[derive(Serialize)]
struct EvalReport {
    device_ids: Vec<String>,
    threshold_hz: f64,
    health: Vec<EvalHealth>,
    results: Vec<CellResult>,
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), Box<dyn Error>> {
    let model = dataset::load_checkpoint(&a.checkpoint)?;
    let db = CfoDatabase::load(&a.db)?;
    fs::create_dir_all(&a.out)?;

    let mut health = Vec::new();
    let mut results = Vec::new();
    for path in &a.datasets {
        let ds = FeatureDataset::load(path)?;
        let kind = match ds.records.first() {
            Some(r) => r.kind,
            None => return Err(format!("dataset {} has no records", path.display()).into()),
        };
        let (complete, dropped) = harness::complete_groups(&ds.records);
        let evals = harness::evaluate_dataset(&model, &complete, &db, &a.modes, a.threshold_hz)?;
        health.push(EvalHealth {
            scenario: ds.provenance.clone(),
            feature: kind,
            groups_evaluated: complete.len() / NUM_ANTENNAS,
            dropped_frames: dropped,
        });
        for eval in evals {
            let log = a.out.join(format!("decisions_{}_{kind}_{}.csv", ds.provenance, eval.mode));
            dataset::write_decision_log(&log, &eval.decisions)?;
            println!(
                "{} {kind} {}: accuracy {:.4}",
                ds.provenance,
                eval.mode,
                eval.confusion.accuracy()
            );
            results.push(CellResult {
                scenario: ds.provenance.clone(),
                feature: kind,
                mode: eval.mode,
                accuracy: eval.confusion.accuracy(),
                per_device_accuracy: eval.confusion.per_class_accuracy(),
                confusion: eval.confusion,
            });
        }
    }

    let report = EvalReport {
        device_ids: db.device_ids().to_vec(),
        threshold_hz: a.threshold_hz,
        health,
        results,
    };
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {}", a.out.join("report.json").display());
    Ok(())
}

fn run_spectra(a: SpectraArgs) -> Result<(), Box<dyn Error>> {
    let bank = match &a.bank {
        Some(path) => KernelBank::load(path)?,
        None => volterra::table1_bank(),
    };
    let csv = harness::dump_spectra(&bank)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("spectra.csv");
    fs::write(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct IngestSummaryFile {
    provenance: String,
    device_ids: Vec<String>,
    records_per_kind: usize,
    failed_captures: usize,
}

fn run_ingest(a: IngestArgs) -> Result<(), Box<dyn Error>> {
    let extracted = harness::ingest_to_features(&a.input, &a.kinds, &a.provenance)?;
    fs::create_dir_all(&a.out)?;
    for (kind, ds) in a.kinds.iter().zip(&extracted.datasets) {
        let path = a.out.join(format!("{}_{kind}.rffi", a.provenance));
        ds.save(&path)?;
        println!("wrote {} records to {}", ds.len(), path.display());
    }
    if !extracted.cfo_records.is_empty() {
        let db = fusion::build_cfo_database(&extracted.cfo_records)?;
        db.save(&a.out.join("cfo_db.json"))?;
    }
    let summary = IngestSummaryFile {
        provenance: a.provenance,
        device_ids: extracted.datasets[0].device_ids.clone(),
        records_per_kind: extracted.datasets[0].len(),
        failed_captures: extracted.failed_captures,
    };
    fs::write(a.out.join("ingest_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}
