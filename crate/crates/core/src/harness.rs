//! Experiment orchestration: synthetic device populations, capture scenarios,
//! end-to-end train/evaluate runs, confusion matrices, and spectrum dumps.
//!
//! An experiment owns a population of transmitters (each with its own
//! amplifier kernel and oscillator offset), synthesizes a training campaign
//! over per-frame fading channels, trains one classifier per feature family,
//! and then scores every requested fusion mode on held-out campaigns whose
//! channels come from disjoint seed sets. All randomness hangs off one master
//! seed, so a config reproduces its report byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{self, ClassifierError, Model32, ModelConfig, TrainConfig};
use crate::dataset::{self, DatasetError, FeatureDataset, FeatureRecord, LabeledFrame};
use crate::features::{self, FeatureKind, RffFeature};
use crate::frame::ComplexFrame;
use crate::frontend::{self, CfoRecord, FrontendError};
use crate::fusion::{
    self, build_cfo_database, CfoDatabase, Decision, DecisionRow, FusionError, FusionInput,
    FusionMode, FusionOptions, DEFAULT_ZEROING_THRESHOLD_HZ, NUM_ANTENNAS,
};
use crate::impairments::{self, ChannelFading, ChannelInstance, ChannelKind};
use crate::preamble;
use crate::seed;
use crate::volterra::{self, KernelBank, Table1Setup, VolterraKernel};
use num_complex::Complex64;

/// Name of the oscillator-drift stress campaign in the standard test set.
pub const STRESS_SCENARIO: &str = "test-stress";

// Coordinate tags keeping unrelated seed streams apart.
const TAG_SESSION: u64 = 0x73657373;
const TAG_WANDER: u64 = 0x77616e64;
const TAG_PAD: u64 = 0x706164;
const TAG_NOISE: u64 = 0x6e6f6973;
const TAG_MODEL: u64 = 0x6d6f64656c;
const TAG_TRAIN: u64 = 0x747261696e;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error("train channel seed {0} reappears in the test channel seeds")]
    ChannelSeedOverlap(u64),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("got {predictions} predictions but {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("empty evaluation input")]
    EmptyInput,
    #[error("device {device_label} frame {frame_id} has {got} antennas, expected {NUM_ANTENNAS}")]
    IncompleteFrame { device_label: u16, frame_id: u32, got: usize },
    #[error("device {device_label} frame {frame_id} repeats antenna {antenna}")]
    DuplicateCapture { device_label: u16, frame_id: u32, antenna: u8 },
    #[error("dataset mixes feature kinds: expected {expected}, found {found}")]
    MixedKinds { expected: FeatureKind, found: FeatureKind },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifierError),
    #[error("fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("amplifier model: {0}")]
    Volterra(#[from] volterra::VolterraError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Population
// ---------------------------------------------------------------------------

/// Knobs for the synthetic transmitter population and capture conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub num_devices: usize,
    /// Base seed for drawing each device's amplifier kernel.
    pub kernel_seed: u64,
    /// Nominal oscillator offsets sit on a grid with this pitch, centered
    /// on zero so the worst offset stays well inside the estimator range.
    pub cfo_spacing_hz: f64,
    /// Frame-to-frame oscillator wander, standard deviation.
    pub frame_jitter_hz: f64,
    /// Session-to-session oscillator offset for ordinary campaigns.
    pub session_jitter_hz: f64,
    /// Session offset for the drift stress campaign; months, not minutes.
    pub stress_session_jitter_hz: f64,
    pub snr_db: f64,
    /// Training frames per device per antenna.
    pub train_frames: usize,
    /// Test frames per device per antenna, per campaign.
    pub test_frames: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            num_devices: 10,
            kernel_seed: 0,
            cfo_spacing_hz: 2500.0,
            frame_jitter_hz: 50.0,
            session_jitter_hz: 150.0,
            stress_session_jitter_hz: 600.0,
            snr_db: 32.0,
            train_frames: 128,
            test_frames: 64,
        }
    }
}

/// One synthetic transmitter: identity, amplifier, oscillator.
#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub id: String,
    pub kernel: VolterraKernel,
    pub nominal_cfo_hz: f64,
}

/// Draws the population. Ids are zero-padded so their lexicographic order is
/// the index order, which makes dataset labels coincide with indices.
pub fn build_population(cfg: &PopulationConfig) -> Vec<DeviceSpec> {
    let mid = (cfg.num_devices as f64 - 1.0) / 2.0;
    (0..cfg.num_devices)
        .map(|i| DeviceSpec {
            id: format!("dev{i:03}"),
            kernel: volterra::random_device_kernel(seed::mix(cfg.kernel_seed, &[i as u64])),
            nominal_cfo_hz: (i as f64 - mid) * cfg.cfo_spacing_hz,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenarios and synthesis
// ---------------------------------------------------------------------------

/// One capture campaign: which channels the frames see and which capture
/// sessions they fall into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub channel: ChannelKind,
    pub fading: ChannelFading,
    pub frames_per_device: usize,
    /// Sessions the frames cycle through; each (device, session) pair draws
    /// one oscillator offset that all its frames share.
    pub sessions: Vec<u64>,
    pub session_jitter_hz: f64,
    /// Identity of this campaign's channel set. Train/test disjointness is
    /// enforced on these seeds.
    pub channel_seed: u64,
}

/// The training campaign: fresh fading per frame, so the classifier cannot
/// bind to any single channel realization.
pub fn train_scenario(cfg: &ExperimentConfig) -> ScenarioSpec {
    ScenarioSpec {
        name: "train-dynamic".into(),
        channel: ChannelKind::Nlos,
        fading: ChannelFading::Dynamic,
        frames_per_device: cfg.population.train_frames,
        sessions: (0..cfg.train_sessions as u64).collect(),
        session_jitter_hz: cfg.population.session_jitter_hz,
        channel_seed: cfg.train_channel_seed,
    }
}

/// The standard held-out campaigns: three static rooms, one dynamic room,
/// and a drift-stressed session far from the training sessions.
pub fn test_scenarios(cfg: &ExperimentConfig) -> Vec<ScenarioSpec> {
    let pop = &cfg.population;
    let base = cfg.train_sessions as u64;
    let seed_at = |i: usize| cfg.test_channel_seeds[i % cfg.test_channel_seeds.len()];
    let mk = |name: &str, channel, fading, session, jitter, channel_seed| ScenarioSpec {
        name: name.into(),
        channel,
        fading,
        frames_per_device: pop.test_frames,
        sessions: vec![session],
        session_jitter_hz: jitter,
        channel_seed,
    };
    vec![
        mk(
            "test-static-los-1",
            ChannelKind::Los,
            ChannelFading::Static,
            base,
            pop.session_jitter_hz,
            seed_at(0),
        ),
        mk(
            "test-static-los-2",
            ChannelKind::Los,
            ChannelFading::Static,
            base + 1,
            pop.session_jitter_hz,
            seed_at(1),
        ),
        mk(
            "test-static-nlos",
            ChannelKind::Nlos,
            ChannelFading::Static,
            base + 2,
            pop.session_jitter_hz,
            seed_at(2),
        ),
        mk(
            "test-dynamic",
            ChannelKind::Nlos,
            ChannelFading::Dynamic,
            base + 3,
            pop.session_jitter_hz,
            seed_at(3),
        ),
        mk(
            STRESS_SCENARIO,
            ChannelKind::Los,
            ChannelFading::Static,
            base + 1000,
            pop.stress_session_jitter_hz,
            seed_at(4),
        ),
    ]
}

fn gaussian(seed_value: u64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    Normal::new(0.0, sigma).unwrap().sample(&mut rng)
}

/// Zero-pads a frame into a longer capture stream.
fn embed(body: &ComplexFrame, offset: usize, tail: usize) -> ComplexFrame {
    let mut samples = vec![Complex64::new(0.0, 0.0); offset + body.len() + tail];
    samples[offset..offset + body.len()].copy_from_slice(body.samples());
    ComplexFrame::new(samples, body.sample_rate_hz()).expect("padded stream is a valid frame")
}

/// Synthesizes every capture of one campaign: per frame, the ideal preamble
/// is rotated by the device's momentary oscillator offset, pushed through its
/// amplifier once, and then received on four antennas with independent
/// channels, random placement in the capture window, and independent noise.
///
/// The oscillator offset is shared by all four antennas of a frame; session
/// offsets are keyed by (device, session) only, so two campaigns listing the
/// same session see the same offset, which is what lets the fusion database
/// stay valid across same-campaign tests and go stale under drift.
pub fn synthesize_scenario(
    devices: &[DeviceSpec],
    scenario: &ScenarioSpec,
    pop: &PopulationConfig,
    master_seed: u64,
) -> Vec<LabeledFrame> {
    assert!(!scenario.sessions.is_empty(), "scenario needs at least one session");
    let ideal = preamble::generate_preamble(preamble::SAMPLE_RATE_HZ).expect("ideal preamble");
    let scen = seed::hash_str(&scenario.name);
    let mut out =
        Vec::with_capacity(devices.len() * scenario.frames_per_device * NUM_ANTENNAS);
    for (d, dev) in devices.iter().enumerate() {
        let d64 = d as u64;
        let channels: Vec<ChannelInstance> = (0..NUM_ANTENNAS)
            .map(|a| {
                ChannelInstance::new(
                    scenario.channel,
                    scenario.fading,
                    seed::mix(scenario.channel_seed, &[d64, a as u64]),
                )
            })
            .collect();
        for f in 0..scenario.frames_per_device {
            let fi = f as u64;
            let session = scenario.sessions[f % scenario.sessions.len()];
            let session_offset = gaussian(
                seed::mix(master_seed, &[TAG_SESSION, d64, session]),
                scenario.session_jitter_hz,
            );
            let wander =
                gaussian(seed::mix(master_seed, &[TAG_WANDER, scen, d64, fi]), pop.frame_jitter_hz);
            let cfo_hz = dev.nominal_cfo_hz + session_offset + wander;
            let rotated = impairments::apply_cfo(&ideal, cfo_hz);
            let amplified = ComplexFrame::new(
                volterra::volterra_time_1d(&dev.kernel, rotated.samples()),
                ideal.sample_rate_hz(),
            )
            .expect("amplifier output is a valid frame");
            let frame_id = (d * scenario.frames_per_device + f) as u32;
            for (a, chan) in channels.iter().enumerate() {
                let faded = impairments::apply_channel(&chan.frame_taps(fi), &amplified);
                let mut pad_rng = ChaCha8Rng::seed_from_u64(seed::mix(
                    master_seed,
                    &[TAG_PAD, scen, d64, a as u64, fi],
                ));
                let stream = embed(&faded, pad_rng.gen_range(32..96), 32);
                // Noise referenced to the frame's own power, not the stream
                // average, so the zero padding does not inflate the SNR.
                let noisy = impairments::add_awgn_with_reference(
                    &stream,
                    faded.mean_power(),
                    pop.snr_db,
                    seed::mix(master_seed, &[TAG_NOISE, scen, d64, a as u64, fi]),
                );
                out.push(LabeledFrame {
                    device_id: dev.id.clone(),
                    antenna: a as u8,
                    frame_id,
                    frame: noisy,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Receive processing
// ---------------------------------------------------------------------------

/// Features of one capture across the requested kinds, plus the front-end
/// oscillator readout that the fusion database is built from.
#[derive(Debug, Clone)]
pub struct ProcessedCapture {
    pub device_id: String,
    pub antenna: u8,
    pub frame_id: u32,
    /// Parallel to the `kinds` argument of [`process_capture`].
    pub features: Vec<RffFeature>,
    pub estimated_cfo_hz: f64,
}

/// Runs the full receive chain on one capture: detect, derotate, normalize,
/// segment, then extract every requested feature family.
pub fn process_capture(
    capture: &LabeledFrame,
    kinds: &[FeatureKind],
) -> Result<ProcessedCapture, FrontendError> {
    let pre = frontend::preprocess(&capture.frame)?;
    let symbols =
        preamble::segment_symbols(&pre.preamble).expect("preprocessed preamble has fixed length");
    Ok(ProcessedCapture {
        device_id: capture.device_id.clone(),
        antenna: capture.antenna,
        frame_id: capture.frame_id,
        features: kinds.iter().map(|&k| features::extract(k, &symbols)).collect(),
        estimated_cfo_hz: pre.estimated_cfo_hz,
    })
}

/// Everything extracted from one campaign's captures.
#[derive(Debug)]
pub struct ScenarioFeatures {
    /// One dataset per requested kind, records in capture order.
    pub datasets: Vec<FeatureDataset>,
    /// One oscillator readout per surviving capture.
    pub cfo_records: Vec<CfoRecord>,
    /// Captures the front end failed to lock onto.
    pub failed_captures: usize,
}

/// Processes a batch of captures into per-kind datasets. Captures the front
/// end cannot lock onto are skipped and counted, not errors: a receiver that
/// misses a frame still has a valid day.
pub fn extract_scenario_features(
    captures: &[LabeledFrame],
    kinds: &[FeatureKind],
    device_ids: &[String],
    provenance: &str,
) -> Result<ScenarioFeatures, HarnessError> {
    if kinds.is_empty() {
        return Err(HarnessError::BadConfig("no feature kinds requested".into()));
    }
    let mut datasets: Vec<FeatureDataset> = kinds
        .iter()
        .map(|_| FeatureDataset::new(provenance, device_ids.to_vec()))
        .collect();
    let mut cfo_records = Vec::new();
    let mut failed = 0usize;
    for cap in captures {
        let label = device_ids.binary_search(&cap.device_id).map_err(|_| {
            HarnessError::BadConfig(format!("capture from unknown device {}", cap.device_id))
        })?;
        let label = u16::try_from(label)
            .map_err(|_| HarnessError::BadConfig("more than 65535 devices".into()))?;
        let processed = match process_capture(cap, kinds) {
            Ok(p) => p,
            Err(_) => {
                failed += 1;
                continue;
            }
        };
        for (ds, feat) in datasets.iter_mut().zip(&processed.features) {
            ds.records.push(FeatureRecord {
                device_label: label,
                antenna: cap.antenna,
                kind: feat.kind,
                values: feat.values.clone(),
                cfo_hz: processed.estimated_cfo_hz as f32,
                frame_id: cap.frame_id,
            });
        }
        cfo_records.push(CfoRecord {
            device_id: Some(cap.device_id.clone()),
            antenna_index: cap.antenna,
            estimated_cfo_hz: processed.estimated_cfo_hz,
            frame_id: cap.frame_id,
        });
    }
    Ok(ScenarioFeatures { datasets, cfo_records, failed_captures: failed })
}

/// Reads an external IQ directory into labeled frames ready for
/// [`process_capture`].
pub fn ingest_external(dir: &Path) -> Result<Vec<LabeledFrame>, HarnessError> {
    Ok(dataset::ingest_iq_dir(dir)?)
}

/// Full ingest path: external IQ directory to feature datasets, with the
/// label set taken from the device ids present in the manifest.
pub fn ingest_to_features(
    dir: &Path,
    kinds: &[FeatureKind],
    provenance: &str,
) -> Result<ScenarioFeatures, HarnessError> {
    let frames = ingest_external(dir)?;
    let ids: BTreeSet<String> = frames.iter().map(|f| f.device_id.clone()).collect();
    let ids: Vec<String> = ids.into_iter().collect();
    extract_scenario_features(&frames, kinds, &ids, provenance)
}

// ---------------------------------------------------------------------------
// Confusion matrices
// ---------------------------------------------------------------------------

/// Classification counts: `counts[t][p]` is frames of true class `t` decided
/// as class `p`. Refusals live in a separate per-class column so each row
/// still sums to the number of frames evaluated for that class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub rejected: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
            rejected: vec![0; num_classes],
        }
    }

    pub fn record(&mut self, truth: usize, decision: Decision) -> Result<(), HarnessError> {
        if truth >= self.num_classes {
            return Err(HarnessError::LabelOutOfRange {
                label: truth,
                num_classes: self.num_classes,
            });
        }
        match decision {
            Decision::Rejected => self.rejected[truth] += 1,
            Decision::Device(p) => {
                if p >= self.num_classes {
                    return Err(HarnessError::LabelOutOfRange {
                        label: p,
                        num_classes: self.num_classes,
                    });
                }
                self.counts[truth][p] += 1;
            }
        }
        Ok(())
    }

    /// All evaluated frames, refusals included.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.rejected.iter().sum::<u64>()
    }

    /// Frames of class `t`, refusals included.
    pub fn row_total(&self, t: usize) -> u64 {
        self.counts[t].iter().sum::<u64>() + self.rejected[t]
    }

    /// Trace of the count matrix.
    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.correct() as f64 / total as f64
    }

    pub fn per_class_accuracy(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|t| {
                let row = self.row_total(t);
                if row == 0 {
                    0.0
                } else {
                    self.counts[t][t] as f64 / row as f64
                }
            })
            .collect()
    }
}

/// Tabulates hard predictions against ground truth.
pub fn confusion_matrix(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix, HarnessError> {
    if predictions.len() != truths.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut m = ConfusionMatrix::new(num_classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        m.record(t, Decision::Device(p))?;
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Outcome of one (dataset, fusion mode) evaluation.
#[derive(Debug)]
pub struct ModeEvaluation {
    pub mode: FusionMode,
    pub confusion: ConfusionMatrix,
    pub decisions: Vec<DecisionRow>,
}

/// Drops all records of any frame that lost an antenna on the way in, so
/// evaluation only ever sees complete four-antenna groups. Returns the
/// surviving records and the number of frames dropped.
pub fn complete_groups(records: &[FeatureRecord]) -> (Vec<FeatureRecord>, usize) {
    let mut antennas: BTreeMap<(u16, u32), usize> = BTreeMap::new();
    for r in records {
        *antennas.entry((r.device_label, r.frame_id)).or_default() += 1;
    }
    let dropped = antennas.values().filter(|&&n| n != NUM_ANTENNAS).count();
    let kept = records
        .iter()
        .filter(|r| antennas[&(r.device_label, r.frame_id)] == NUM_ANTENNAS)
        .cloned()
        .collect();
    (kept, dropped)
}

/// Groups one kind's records into four-antenna frames and fuses each group
/// under every requested mode, reusing a single batch of forward passes.
pub fn evaluate_dataset(
    model: &Model32,
    records: &[FeatureRecord],
    db: &CfoDatabase,
    modes: &[FusionMode],
    threshold_hz: f64,
) -> Result<Vec<ModeEvaluation>, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let num_classes = model.config().num_classes;
    if db.num_devices() != num_classes {
        return Err(HarnessError::BadConfig(format!(
            "database covers {} devices but the model has {} classes",
            db.num_devices(),
            num_classes
        )));
    }
    let kind = records[0].kind;
    let mut groups: BTreeMap<(u16, u32), [Option<usize>; NUM_ANTENNAS]> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.kind != kind {
            return Err(HarnessError::MixedKinds { expected: kind, found: r.kind });
        }
        let a = r.antenna as usize;
        if a >= NUM_ANTENNAS {
            return Err(HarnessError::BadConfig(format!("antenna index {a} out of range")));
        }
        let slot = &mut groups.entry((r.device_label, r.frame_id)).or_default()[a];
        if slot.is_some() {
            return Err(HarnessError::DuplicateCapture {
                device_label: r.device_label,
                frame_id: r.frame_id,
                antenna: r.antenna,
            });
        }
        *slot = Some(i);
    }

    // One forward pass over everything; every mode reuses the same scores.
    let feats: Vec<RffFeature> = records.iter().map(|r| r.feature()).collect();
    let scores = classifier::predict_scores(model, &feats)?;

    let mut evals: Vec<ModeEvaluation> = modes
        .iter()
        .map(|&mode| ModeEvaluation {
            mode,
            confusion: ConfusionMatrix::new(num_classes),
            decisions: Vec::with_capacity(groups.len()),
        })
        .collect();

    for (&(label, frame_id), slots) in &groups {
        let got = slots.iter().flatten().count();
        if got != NUM_ANTENNAS {
            return Err(HarnessError::IncompleteFrame { device_label: label, frame_id, got });
        }
        let idx: Vec<usize> = slots.iter().map(|s| s.unwrap()).collect();
        let input = FusionInput {
            scores: idx.iter().map(|&i| scores[i].clone()).collect(),
            cfos_hz: idx.iter().map(|&i| records[i].cfo_hz as f64).collect(),
        };
        let mut antenna_argmax = [0usize; NUM_ANTENNAS];
        let mut cfos_hz = [0f64; NUM_ANTENNAS];
        for a in 0..NUM_ANTENNAS {
            antenna_argmax[a] = input.scores[a].argmax();
            cfos_hz[a] = input.cfos_hz[a];
        }
        for eval in &mut evals {
            let decision =
                fusion::fuse(eval.mode, &input, db, FusionOptions::default(), threshold_hz)?;
            eval.confusion.record(label as usize, decision)?;
            eval.decisions.push(DecisionRow {
                frame_id,
                true_label: label as usize,
                mode: eval.mode,
                decision,
                antenna_argmax,
                cfos_hz,
            });
        }
    }
    Ok(evals)
}

// ---------------------------------------------------------------------------
// Experiment configuration and report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub feature_kinds: Vec<FeatureKind>,
    pub fusion_modes: Vec<FusionMode>,
    /// Shape template; input length, class count, and init seed are set per
    /// feature kind by [`ExperimentConfig::model_for`].
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_channel_seed: u64,
    pub test_channel_seeds: Vec<u64>,
    /// Number of capture sessions the training campaign spans.
    pub train_sessions: usize,
    /// Master seed for oscillator draws, padding, noise, and model init.
    pub seed: u64,
    pub zeroing_threshold_hz: f64,
    /// When set, the report, decision logs, database, and checkpoints are
    /// written here.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        let population = PopulationConfig::default();
        let model = ModelConfig::compact(population.num_devices);
        Self {
            population,
            feature_kinds: vec![FeatureKind::Sr, FeatureKind::As],
            fusion_modes: FusionMode::ALL.to_vec(),
            model,
            // A gentler decay than the halving default; the halving schedule
            // freezes the compact model before it finishes fitting.
            train: TrainConfig {
                epochs: 15,
                patience: Some(6),
                lr_decay_per_epoch: 0.7,
                ..TrainConfig::default()
            },
            train_channel_seed: 1,
            test_channel_seeds: vec![2, 3, 4, 5, 6],
            train_sessions: 2,
            seed,
            zeroing_threshold_hz: DEFAULT_ZEROING_THRESHOLD_HZ,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.population.num_devices < 2 {
            return Err(HarnessError::BadConfig("need at least 2 devices".into()));
        }
        if self.population.num_devices > u16::MAX as usize {
            return Err(HarnessError::BadConfig("more than 65535 devices".into()));
        }
        if self.population.train_frames == 0 || self.population.test_frames == 0 {
            return Err(HarnessError::BadConfig("frame counts must be positive".into()));
        }
        if self.feature_kinds.is_empty() {
            return Err(HarnessError::BadConfig("no feature kinds requested".into()));
        }
        let mut seen = BTreeSet::new();
        for k in &self.feature_kinds {
            if !seen.insert(k.code()) {
                return Err(HarnessError::BadConfig(format!("feature kind {k} listed twice")));
            }
        }
        if self.fusion_modes.is_empty() {
            return Err(HarnessError::BadConfig("no fusion modes requested".into()));
        }
        if self.test_channel_seeds.is_empty() {
            return Err(HarnessError::BadConfig("no test channel seeds".into()));
        }
        if self.test_channel_seeds.contains(&self.train_channel_seed) {
            return Err(HarnessError::ChannelSeedOverlap(self.train_channel_seed));
        }
        if self.train_sessions == 0 {
            return Err(HarnessError::BadConfig("need at least one training session".into()));
        }
        if !(self.zeroing_threshold_hz > 0.0) {
            return Err(HarnessError::BadConfig("zeroing threshold must be positive".into()));
        }
        Ok(())
    }

    /// Model template specialized to one feature family's geometry.
    pub fn model_for(&self, kind: FeatureKind, num_devices: usize) -> ModelConfig {
        ModelConfig {
            input_length: kind.len(),
            num_classes: num_devices,
            seed: seed::mix(self.seed, &[TAG_MODEL, kind.code() as u64]),
            ..self.model.clone()
        }
    }

    /// Training schedule specialized to one feature family.
    pub fn train_for(&self, kind: FeatureKind) -> TrainConfig {
        TrainConfig {
            seed: seed::mix(self.seed, &[TAG_TRAIN, kind.code() as u64]),
            ..self.train.clone()
        }
    }

    /// Hex digest of the canonical JSON form; two configs hash equal exactly
    /// when every knob matches.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How training went for one feature family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub feature: FeatureKind,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Receive-chain health of one campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHealth {
    pub scenario: String,
    /// Captures the front end failed to lock onto.
    pub failed_captures: usize,
    /// Frames dropped because one of their antenna captures failed.
    pub dropped_frames: usize,
}

/// One (campaign, feature, mode) cell of the result grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: String,
    pub feature: FeatureKind,
    pub mode: FusionMode,
    pub accuracy: f64,
    pub per_device_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// The full outcome of one experiment. Field order is the JSON order; all
/// collections are vectors so serialization is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub train_channel_seed: u64,
    pub test_channel_seeds: Vec<u64>,
    pub device_ids: Vec<String>,
    pub health: Vec<ScenarioHealth>,
    pub training: Vec<TrainSummary>,
    pub results: Vec<CellResult>,
}

impl MetricsReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut text = self.to_json_string();
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Accuracy of one exact cell.
    pub fn accuracy_of(
        &self,
        scenario: &str,
        feature: FeatureKind,
        mode: FusionMode,
    ) -> Option<f64> {
        self.results
            .iter()
            .find(|c| c.scenario == scenario && c.feature == feature && c.mode == mode)
            .map(|c| c.accuracy)
    }

    /// Mean accuracy of one (feature, mode) pair over every campaign whose
    /// name passes the filter.
    pub fn mean_accuracy<P: Fn(&str) -> bool>(
        &self,
        feature: FeatureKind,
        mode: FusionMode,
        filter: P,
    ) -> Option<f64> {
        let cells: Vec<f64> = self
            .results
            .iter()
            .filter(|c| c.feature == feature && c.mode == mode && filter(&c.scenario))
            .map(|c| c.accuracy)
            .collect();
        if cells.is_empty() {
            None
        } else {
            Some(cells.iter().sum::<f64>() / cells.len() as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// The experiment itself
// ---------------------------------------------------------------------------

/// Runs the full protocol on a caller-supplied population. The population
/// must match the config's device count, and ids must be strictly sorted so
/// labels are stable.
pub fn run_with_population(
    cfg: &ExperimentConfig,
    devices: &[DeviceSpec],
) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    if devices.len() != cfg.population.num_devices {
        return Err(HarnessError::BadConfig(format!(
            "population has {} devices but the config says {}",
            devices.len(),
            cfg.population.num_devices
        )));
    }
    if devices.windows(2).any(|w| w[0].id >= w[1].id) {
        return Err(HarnessError::BadConfig("device ids must be strictly increasing".into()));
    }
    let device_ids: Vec<String> = devices.iter().map(|d| d.id.clone()).collect();

    // Train on the dynamic campaign, all four antennas pooled.
    let train_spec = train_scenario(cfg);
    let train_feats = {
        let captures = synthesize_scenario(devices, &train_spec, &cfg.population, cfg.seed);
        extract_scenario_features(&captures, &cfg.feature_kinds, &device_ids, &train_spec.name)?
    };
    let db = build_cfo_database(&train_feats.cfo_records)?;
    let mut health = vec![ScenarioHealth {
        scenario: train_spec.name.clone(),
        failed_captures: train_feats.failed_captures,
        dropped_frames: 0,
    }];

    let mut models = Vec::with_capacity(cfg.feature_kinds.len());
    let mut training = Vec::with_capacity(cfg.feature_kinds.len());
    for (ki, &kind) in cfg.feature_kinds.iter().enumerate() {
        let mut model: Model32 = classifier::build_model(&cfg.model_for(kind, devices.len()))?;
        let (feats, labels) = train_feats.datasets[ki].features_and_labels();
        let report = classifier::train(&mut model, &feats, &labels, &cfg.train_for(kind))?;
        let best = &report.epochs[report.best_epoch];
        training.push(TrainSummary {
            feature: kind,
            epochs_run: report.epochs.len(),
            best_epoch: report.best_epoch,
            train_accuracy: best.train_accuracy,
            val_accuracy: best.val_accuracy,
        });
        models.push(model);
    }

    let mut results = Vec::new();
    let mut logs: Vec<(String, Vec<DecisionRow>)> = Vec::new();
    for spec in test_scenarios(cfg) {
        let feats = {
            let captures = synthesize_scenario(devices, &spec, &cfg.population, cfg.seed);
            extract_scenario_features(&captures, &cfg.feature_kinds, &device_ids, &spec.name)?
        };
        let mut dropped = 0usize;
        for (ki, &kind) in cfg.feature_kinds.iter().enumerate() {
            let (records, d) = complete_groups(&feats.datasets[ki].records);
            dropped = d;
            let evals = evaluate_dataset(
                &models[ki],
                &records,
                &db,
                &cfg.fusion_modes,
                cfg.zeroing_threshold_hz,
            )?;
            for eval in evals {
                results.push(CellResult {
                    scenario: spec.name.clone(),
                    feature: kind,
                    mode: eval.mode,
                    accuracy: eval.confusion.accuracy(),
                    per_device_accuracy: eval.confusion.per_class_accuracy(),
                    confusion: eval.confusion,
                });
                logs.push((format!("decisions_{}_{kind}_{}.csv", spec.name, eval.mode), eval.decisions));
            }
        }
        health.push(ScenarioHealth {
            scenario: spec.name.clone(),
            failed_captures: feats.failed_captures,
            dropped_frames: dropped,
        });
    }

    let report = MetricsReport {
        config_hash: cfg.config_hash(),
        master_seed: cfg.seed,
        train_channel_seed: cfg.train_channel_seed,
        test_channel_seeds: cfg.test_channel_seeds.clone(),
        device_ids,
        health,
        training,
        results,
    };

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        report.save(&dir.join("report.json"))?;
        db.save(&dir.join("cfo_db.json"))?;
        for (model, &kind) in models.iter().zip(&cfg.feature_kinds) {
            dataset::save_checkpoint(&dir.join(format!("model_{kind}.ckpt")), model)?;
        }
        for (name, rows) in &logs {
            dataset::write_decision_log(&dir.join(name), rows)?;
        }
    }
    Ok(report)
}

/// Runs the full protocol: synthesize the population, train on the dynamic
/// campaign, evaluate every (feature, mode) pair on the held-out campaigns.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    let devices = build_population(&cfg.population);
    run_with_population(cfg, &devices)
}

// ---------------------------------------------------------------------------
// Spectrum dumps
// ---------------------------------------------------------------------------

/// Per-subcarrier amplitude table for external plotting. Two 64-row blocks:
/// the first short training symbol, then the first long training symbol,
/// both indexed by subcarrier -32..31. Columns are the ideal amplitude and
/// the amplifier output under each bank setup.
pub fn dump_spectra(bank: &KernelBank) -> Result<String, HarnessError> {
    let ideal = preamble::generate_preamble(preamble::SAMPLE_RATE_HZ).expect("ideal preamble");
    let symbols = preamble::segment_symbols(&ideal).expect("ideal preamble segments");
    let spectra = symbols.spectra();
    let through: Vec<_> = Table1Setup::ALL
        .iter()
        .map(|&s| volterra::simulate_table1(s, bank))
        .collect::<Result<_, _>>()?;

    let mut out = String::from("index,ideal,memory,nonlinearity,combined\n");
    // spectra()[0] is the first STF analysis symbol, [2] the first LTF one.
    for (ideal_spec, pick) in
        [(&spectra[0], 0usize), (&spectra[2], 1usize)]
    {
        for k in -32i32..32 {
            let row: Vec<f64> = through
                .iter()
                .map(|s: &volterra::SetupSpectra| {
                    if pick == 0 { s.stf.at(k).norm() } else { s.ltf.at(k).norm() }
                })
                .collect();
            writeln!(out, "{},{},{},{},{}", k, ideal_spec.at(k).norm(), row[0], row[1], row[2])
                .expect("string write");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preamble::PREAMBLE_LEN;

    fn tiny_population(n: usize) -> PopulationConfig {
        PopulationConfig {
            num_devices: n,
            cfo_spacing_hz: 4000.0,
            train_frames: 24,
            test_frames: 8,
            ..PopulationConfig::default()
        }
    }

    fn tiny_config(seed: u64, n: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(seed);
        cfg.population = tiny_population(n);
        cfg.model = ModelConfig::compact(n);
        cfg.feature_kinds = vec![FeatureKind::Sr];
        cfg.fusion_modes = vec![FusionMode::Direct, FusionMode::Df, FusionMode::Hybrid];
        cfg.train = TrainConfig {
            epochs: 4,
            batch_size: 16,
            patience: None,
            ..TrainConfig::default()
        };
        cfg
    }

    #[test]
    fn test_population_deterministic_and_sorted() {
        let cfg = PopulationConfig::default();
        let a = build_population(&cfg);
        let b = build_population(&cfg);
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.nominal_cfo_hz, y.nominal_cfo_hz);
        }
        for w in a.windows(2) {
            assert!(w[0].id < w[1].id);
        }
        // Grid centered on zero: offsets for 10 devices at 2.5 kHz pitch run
        // -11250, -8750, ..., +11250 and sum to zero.
        assert_eq!(a[0].nominal_cfo_hz, -11250.0);
        assert_eq!(a[9].nominal_cfo_hz, 11250.0);
        let sum: f64 = a.iter().map(|d| d.nominal_cfo_hz).sum();
        assert!(sum.abs() < 1e-9);
    }

    #[test]
    fn test_synthesize_shapes_and_determinism() {
        let pop = tiny_population(2);
        let devices = build_population(&pop);
        let spec = ScenarioSpec {
            name: "shape-check".into(),
            channel: ChannelKind::Nlos,
            fading: ChannelFading::Static,
            frames_per_device: 3,
            sessions: vec![0],
            session_jitter_hz: 100.0,
            channel_seed: 11,
        };
        let a = synthesize_scenario(&devices, &spec, &pop, 5);
        let b = synthesize_scenario(&devices, &spec, &pop, 5);
        // 2 devices x 3 frames x 4 antennas.
        assert_eq!(a.len(), 24);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.device_id, y.device_id);
            assert_eq!(x.antenna, y.antenna);
            assert_eq!(x.frame_id, y.frame_id);
            for (s, t) in x.frame.samples().iter().zip(y.frame.samples()) {
                assert_eq!(s.re.to_bits(), t.re.to_bits());
                assert_eq!(s.im.to_bits(), t.im.to_bits());
            }
        }
        // Pad geometry: offset in [32, 96) plus 32 tail samples. Channel
        // convolution adds up to taps-1 samples of ring-out inside the tail.
        for cap in &a {
            assert!(cap.frame.len() >= PREAMBLE_LEN + 32 + 32);
            assert!(cap.frame.len() < PREAMBLE_LEN + 96 + 32 + 16);
        }
        let c = synthesize_scenario(&devices, &spec, &pop, 6);
        assert!(a[0].frame.samples()[40] != c[0].frame.samples()[40]);
    }

    #[test]
    fn test_process_capture_reads_back_the_oscillator() {
        // No jitter: the true offset is exactly the nominal grid value.
        let pop = PopulationConfig {
            frame_jitter_hz: 0.0,
            session_jitter_hz: 0.0,
            ..tiny_population(2)
        };
        let devices = build_population(&pop);
        let spec = ScenarioSpec {
            name: "cfo-check".into(),
            channel: ChannelKind::Los,
            fading: ChannelFading::Static,
            frames_per_device: 1,
            sessions: vec![0],
            session_jitter_hz: 0.0,
            channel_seed: 3,
        };
        let caps = synthesize_scenario(&devices, &spec, &pop, 9);
        for cap in &caps {
            let p = process_capture(cap, &[FeatureKind::Sr, FeatureKind::DoLoS]).unwrap();
            assert_eq!(p.features[0].len(), 128);
            assert_eq!(p.features[1].len(), 64);
            let want = if cap.device_id == "dev000" { -2000.0 } else { 2000.0 };
            // Estimator noise at 30 dB is tens of hertz.
            assert!(
                (p.estimated_cfo_hz - want).abs() < 400.0,
                "device {} read {} Hz, wanted about {want}",
                cap.device_id,
                p.estimated_cfo_hz
            );
        }
    }

    #[test]
    fn test_extract_scenario_features_counts() {
        let pop = tiny_population(2);
        let devices = build_population(&pop);
        let spec = ScenarioSpec {
            name: "extract-check".into(),
            channel: ChannelKind::Nlos,
            fading: ChannelFading::Dynamic,
            frames_per_device: 2,
            sessions: vec![0],
            session_jitter_hz: 100.0,
            channel_seed: 21,
        };
        let caps = synthesize_scenario(&devices, &spec, &pop, 1);
        let ids: Vec<String> = devices.iter().map(|d| d.id.clone()).collect();
        let out =
            extract_scenario_features(&caps, &[FeatureKind::Sr, FeatureKind::As], &ids, "t")
                .unwrap();
        assert_eq!(out.failed_captures, 0);
        assert_eq!(out.datasets.len(), 2);
        for ds in &out.datasets {
            assert_eq!(ds.records.len(), 16);
        }
        assert_eq!(out.cfo_records.len(), 16);
        // Labels follow sorted-id order.
        for r in &out.datasets[0].records {
            let expect = if r.frame_id < 2 { 0 } else { 1 };
            assert_eq!(r.device_label, expect);
        }
        let unknown = LabeledFrame {
            device_id: "ghost".into(),
            antenna: 0,
            frame_id: 0,
            frame: caps[0].frame.clone(),
        };
        assert!(matches!(
            extract_scenario_features(&[unknown], &[FeatureKind::Sr], &ids, "t"),
            Err(HarnessError::BadConfig(_))
        ));
    }

    #[test]
    fn test_confusion_all_correct_is_diagonal() {
        let m = confusion_matrix(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.correct(), 4);
        assert_eq!(m.total(), 4);
        assert_eq!(m.accuracy(), 1.0);
        for t in 0..3 {
            for p in 0..3 {
                let want = match (t, p) {
                    (0, 0) => 1,
                    (1, 1) => 2,
                    (2, 2) => 1,
                    _ => 0,
                };
                assert_eq!(m.counts[t][p], want);
            }
        }
    }

    #[test]
    fn test_confusion_single_miss() {
        let m = confusion_matrix(&[0, 2, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.correct(), 2);
        assert_eq!(m.counts[1][2], 1);
        let off: u64 = (0..3)
            .map(|t| (0..3).filter(|&p| p != t).map(|p| m.counts[t][p]).sum::<u64>())
            .sum();
        assert_eq!(off, 1);
        // Accuracy 2/3.
        assert!((m.accuracy() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn test_confusion_error_cases() {
        assert!(matches!(
            confusion_matrix(&[0], &[0, 1], 2),
            Err(HarnessError::LengthMismatch { .. })
        ));
        assert!(matches!(confusion_matrix(&[], &[], 2), Err(HarnessError::EmptyInput)));
        assert!(matches!(
            confusion_matrix(&[2], &[0], 2),
            Err(HarnessError::LabelOutOfRange { label: 2, .. })
        ));
        assert!(matches!(
            confusion_matrix(&[0], &[5], 2),
            Err(HarnessError::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn test_confusion_rejections_keep_row_sums() {
        let mut m = ConfusionMatrix::new(2);
        m.record(0, Decision::Device(0)).unwrap();
        m.record(0, Decision::Rejected).unwrap();
        m.record(1, Decision::Device(0)).unwrap();
        assert_eq!(m.row_total(0), 2);
        assert_eq!(m.row_total(1), 1);
        assert_eq!(m.total(), 3);
        // 1 correct of 3 seen; the rejection is not correct.
        assert!((m.accuracy() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class_accuracy(), vec![0.5, 0.0]);
    }

    #[test]
    fn test_complete_groups_drops_partial_frames() {
        let rec = |label: u16, antenna: u8, frame_id: u32| FeatureRecord {
            device_label: label,
            antenna,
            kind: FeatureKind::DoLoS,
            values: vec![0.0; 64],
            cfo_hz: 0.0,
            frame_id,
        };
        let mut records = Vec::new();
        for a in 0..4 {
            records.push(rec(0, a, 0));
        }
        for a in 0..3 {
            records.push(rec(0, a, 1));
        }
        let (kept, dropped) = complete_groups(&records);
        assert_eq!(kept.len(), 4);
        assert_eq!(dropped, 1);
        assert!(kept.iter().all(|r| r.frame_id == 0));
    }

    #[test]
    fn test_evaluate_dataset_group_mechanics() {
        let pop = tiny_population(2);
        let devices = build_population(&pop);
        let spec = ScenarioSpec {
            name: "eval-check".into(),
            channel: ChannelKind::Los,
            fading: ChannelFading::Static,
            frames_per_device: 4,
            sessions: vec![0],
            session_jitter_hz: 100.0,
            channel_seed: 31,
        };
        let caps = synthesize_scenario(&devices, &spec, &pop, 2);
        let ids: Vec<String> = devices.iter().map(|d| d.id.clone()).collect();
        let out = extract_scenario_features(&caps, &[FeatureKind::Sr], &ids, "t").unwrap();
        let db = build_cfo_database(&out.cfo_records).unwrap();
        // Untrained model: decisions are arbitrary but the bookkeeping is not.
        let model: Model32 =
            classifier::build_model(&ModelConfig { seed: 3, ..ModelConfig::compact(2) }).unwrap();
        let modes = [FusionMode::Direct, FusionMode::Df, FusionMode::Zeroing];
        let evals =
            evaluate_dataset(&model, &out.datasets[0].records, &db, &modes, 500.0).unwrap();
        assert_eq!(evals.len(), 3);
        for eval in &evals {
            assert_eq!(eval.confusion.total(), 8);
            assert_eq!(eval.confusion.row_total(0), 4);
            assert_eq!(eval.confusion.row_total(1), 4);
            assert_eq!(eval.decisions.len(), 8);
        }
        // Frames arrive grouped in (label, frame_id) order.
        let ids_seen: Vec<u32> = evals[0].decisions.iter().map(|d| d.frame_id).collect();
        let mut sorted = ids_seen.clone();
        sorted.sort_unstable();
        assert_eq!(ids_seen, sorted);
    }

    #[test]
    fn test_evaluate_dataset_rejects_incomplete_group() {
        let mut records = Vec::new();
        for a in 0..3u8 {
            records.push(FeatureRecord {
                device_label: 0,
                antenna: a,
                kind: FeatureKind::Sr,
                values: vec![0.0; 128],
                cfo_hz: 0.0,
                frame_id: 0,
            });
        }
        let model: Model32 = classifier::build_model(&ModelConfig::compact(2)).unwrap();
        let db = CfoDatabase::from_means(vec![
            ("a".into(), [0.0; 4]),
            ("b".into(), [1000.0; 4]),
        ])
        .unwrap();
        let err = evaluate_dataset(&model, &records, &db, &[FusionMode::Df], 500.0).unwrap_err();
        assert!(matches!(err, HarnessError::IncompleteFrame { got: 3, .. }));
        // A duplicated antenna is caught before fusion too.
        records.push(records[0].clone());
        let err = evaluate_dataset(&model, &records, &db, &[FusionMode::Df], 500.0).unwrap_err();
        assert!(matches!(err, HarnessError::DuplicateCapture { antenna: 0, .. }));
    }

    #[test]
    fn test_validate_rejects_seed_overlap_and_dupes() {
        let mut cfg = ExperimentConfig::new(1);
        cfg.test_channel_seeds = vec![2, cfg.train_channel_seed, 4];
        assert!(matches!(cfg.validate(), Err(HarnessError::ChannelSeedOverlap(_))));
        let mut cfg = ExperimentConfig::new(1);
        cfg.feature_kinds = vec![FeatureKind::Sr, FeatureKind::Sr];
        assert!(matches!(cfg.validate(), Err(HarnessError::BadConfig(_))));
        assert!(ExperimentConfig::new(1).validate().is_ok());
    }

    #[test]
    fn test_config_hash_tracks_every_knob() {
        let a = ExperimentConfig::new(1);
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
        b.population.snr_db += 1.0;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.fusion_modes = vec![FusionMode::Df];
        assert_ne!(a.config_hash(), c.config_hash());
    }

    /// Two devices with bit-identical amplifiers (clean passthrough) and
    /// oscillators 4 kHz apart: the features carry no device information, so
    /// a lone classifier is a coin flip, while the oscillator prior nails it.
    #[test]
    fn test_cfo_only_population_hybrid_beats_direct() {
        let mut cfg = tiny_config(12, 2);
        cfg.train = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let devices: Vec<DeviceSpec> = build_population(&cfg.population)
            .into_iter()
            .map(|d| DeviceSpec { kernel: VolterraKernel::identity(), ..d })
            .collect();
        let report = run_with_population(&cfg, &devices).unwrap();
        let every = |_: &str| true;
        let hybrid = report.mean_accuracy(FeatureKind::Sr, FusionMode::Hybrid, every).unwrap();
        let direct = report.mean_accuracy(FeatureKind::Sr, FusionMode::Direct, every).unwrap();
        assert!(
            hybrid > direct + 0.2,
            "hybrid {hybrid} should clearly beat direct {direct} when only the oscillator differs"
        );
        assert!(hybrid > 0.95, "oscillator prior alone should nearly solve 2 devices: {hybrid}");
    }

    #[test]
    fn test_run_experiment_is_deterministic() {
        let mut cfg = tiny_config(77, 2);
        cfg.population.train_frames = 16;
        cfg.population.test_frames = 4;
        cfg.train = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
        assert_eq!(a.config_hash, cfg.config_hash());
        // 5 standard campaigns x 1 kind x 3 modes.
        assert_eq!(a.results.len(), 15);
        for cell in &a.results {
            assert_eq!(cell.confusion.total(), 8);
        }
    }

    #[test]
    fn test_dump_spectra_layout() {
        let csv = dump_spectra(&volterra::table1_bank()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "index,ideal,memory,nonlinearity,combined");
        // Header plus two 64-row blocks.
        assert_eq!(lines.len(), 1 + 128);
        let parse = |line: &str| -> Vec<f64> {
            line.split(',').map(|v| v.parse().unwrap()).collect()
        };
        // STF block rows carry subcarriers -32..31, then the LTF block again.
        assert_eq!(parse(lines[1])[0], -32.0);
        assert_eq!(parse(lines[64])[0], 31.0);
        assert_eq!(parse(lines[65])[0], -32.0);
        assert_eq!(parse(lines[128])[0], 31.0);
        for (i, line) in lines[1..].iter().enumerate() {
            let row = parse(line);
            assert_eq!(row.len(), 5);
            let k = row[0] as i32;
            // The memory-only amplifier cannot move energy across bins, so
            // its column vanishes wherever the ideal amplitude does.
            if row[1] < 1e-9 {
                assert!(row[2] < 1e-9, "memory energy on inactive bin {k}: {}", row[2]);
            }
            // Third-order products land on the low guard bins of the LTS.
            if i >= 64 && (-32..=-27).contains(&k) {
                assert!(row[3] > 1e-9, "no regrowth on bin {k}");
                assert!(row[4] > 1e-9, "no combined regrowth on bin {k}");
            }
        }
    }

    #[test]
    fn test_ingest_matches_direct_extraction_counts() {
        let pop = tiny_population(2);
        let devices = build_population(&pop);
        let spec = ScenarioSpec {
            name: "ingest-check".into(),
            channel: ChannelKind::Los,
            fading: ChannelFading::Static,
            frames_per_device: 2,
            sessions: vec![0],
            session_jitter_hz: 50.0,
            channel_seed: 41,
        };
        let caps = synthesize_scenario(&devices, &spec, &pop, 3);
        let dir = tempfile::tempdir().unwrap();
        dataset::export_iq_dir(dir.path(), &caps).unwrap();
        let frames = ingest_external(dir.path()).unwrap();
        assert_eq!(frames.len(), caps.len());
        let out = ingest_to_features(dir.path(), &[FeatureKind::Sr], "ingest").unwrap();
        assert_eq!(out.datasets[0].records.len(), 16);
        assert_eq!(out.datasets[0].device_ids, ["dev000", "dev001"]);
        assert_eq!(out.failed_captures, 0);
    }

    #[test]
    fn test_report_helpers() {
        let cell = |scenario: &str, mode: FusionMode, accuracy: f64| CellResult {
            scenario: scenario.into(),
            feature: FeatureKind::Sr,
            mode,
            accuracy,
            per_device_accuracy: vec![accuracy],
            confusion: ConfusionMatrix::new(1),
        };
        let report = MetricsReport {
            config_hash: "x".into(),
            master_seed: 0,
            train_channel_seed: 1,
            test_channel_seeds: vec![2],
            device_ids: vec!["dev000".into()],
            health: vec![],
            training: vec![],
            results: vec![
                cell("test-a", FusionMode::Df, 0.5),
                cell("test-b", FusionMode::Df, 0.7),
                cell(STRESS_SCENARIO, FusionMode::Df, 0.1),
            ],
        };
        assert_eq!(report.accuracy_of("test-b", FeatureKind::Sr, FusionMode::Df), Some(0.7));
        assert_eq!(report.accuracy_of("test-b", FeatureKind::As, FusionMode::Df), None);
        // Mean over the non-stress cells: (0.5 + 0.7) / 2.
        let mean = report
            .mean_accuracy(FeatureKind::Sr, FusionMode::Df, |s| s != STRESS_SCENARIO)
            .unwrap();
        assert!((mean - 0.6).abs() < 1e-12);
        let parsed = MetricsReport::from_json_str(&report.to_json_string()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn test_softmax_scores_survive_grouping() {
        // Hand-check that evaluate_dataset pairs scores with the right
        // antennas: a frame whose per-antenna argmaxes disagree must still
        // log them in antenna order.
        let mut records = Vec::new();
        for a in 0..4u8 {
            records.push(FeatureRecord {
                device_label: 1,
                antenna: 3 - a,
                kind: FeatureKind::DoLoS,
                values: vec![0.1 * a as f32; 64],
                cfo_hz: 100.0 * a as f32,
                frame_id: 9,
            });
        }
        let model: Model32 = classifier::build_model(&ModelConfig {
            input_length: 64,
            ..ModelConfig::compact(2)
        })
        .unwrap();
        let db = CfoDatabase::from_means(vec![
            ("a".into(), [0.0; 4]),
            ("b".into(), [150.0; 4]),
        ])
        .unwrap();
        let evals = evaluate_dataset(&model, &records, &db, &[FusionMode::Df], 500.0).unwrap();
        let row = &evals[0].decisions[0];
        // Antenna 3 was pushed first with cfo 0, antenna 0 last with cfo 300.
        assert_eq!(row.cfos_hz, [300.0, 200.0, 100.0, 0.0]);
        assert_eq!(row.true_label, 1);
        assert_eq!(row.frame_id, 9);
    }
}
