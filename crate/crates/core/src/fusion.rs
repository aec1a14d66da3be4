//! Multi-antenna decision fusion with CFO-weighted score calibration.
//!
//! A receiver observes each frame on four antennas. Every antenna yields a
//! softmax score vector and a CFO estimate; fusion turns those into one
//! device decision. Modes:
//!
//! - Direct: argmax of a single antenna's scores.
//! - DF: argmax of the plain four-antenna score average.
//! - Hybrid: each antenna's scores are first multiplied elementwise by
//!   1 / max(|cfo - mean_i|, 1 Hz) reciprocal-distance weights against a
//!   per-device, per-antenna CFO database, then averaged and argmaxed.
//! - Zeroing: benchmark that zeroes any device whose database CFO is more
//!   than a threshold away, then DF-averages; an all-zero result is an
//!   explicit rejection.
//! - ZeroingImproved: same, but the rejected case falls back to plain DF.
//!
//! Ties always break to the lowest device index. The 1 Hz floor keeps the
//! reciprocal finite when a measured CFO lands exactly on a stored mean;
//! it is far below estimator noise, so it never distorts realistic weights.

use crate::classifier::SoftmaxScores;
use crate::frontend::CfoRecord;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const NUM_ANTENNAS: usize = 4;
/// Floor on the CFO distance inside the reciprocal weight.
pub const CFO_EPSILON_HZ: f64 = 1.0;
/// Default zeroing threshold: between frame-level CFO jitter and typical
/// inter-device spacing in the synthetic populations.
pub const DEFAULT_ZEROING_THRESHOLD_HZ: f64 = 500.0;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("expected {NUM_ANTENNAS} antennas, got {got}")]
    AntennaCountMismatch { got: usize },
    #[error("score vectors disagree in length ({a} vs {b})")]
    ScoreLengthMismatch { a: usize, b: usize },
    #[error("score vectors have {scores} entries but the database has {devices} devices")]
    SizeMismatch { scores: usize, devices: usize },
    #[error("no scores to fuse")]
    EmptyInput,
    #[error("CFO record for frame {frame_id} has no device label")]
    MissingDeviceId { frame_id: u32 },
    #[error("antenna index {got} out of range (0..{NUM_ANTENNAS})")]
    BadAntennaIndex { got: u8 },
    #[error("device {device_id} has no CFO records for antenna {antenna}")]
    MissingCell { device_id: String, antenna: usize },
    #[error("duplicate device id {0}")]
    DuplicateDevice(String),
    #[error("non-finite CFO mean for device {0}")]
    NonFiniteMean(String),
    #[error("reading CFO database: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing CFO database: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Direct,
    Df,
    Hybrid,
    Zeroing,
    ZeroingImproved,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Direct,
        FusionMode::Df,
        FusionMode::Hybrid,
        FusionMode::Zeroing,
        FusionMode::ZeroingImproved,
    ];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Direct => "direct",
            FusionMode::Df => "df",
            FusionMode::Hybrid => "hybrid",
            FusionMode::Zeroing => "zeroing",
            FusionMode::ZeroingImproved => "zeroing-improved",
        })
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(FusionMode::Direct),
            "df" => Ok(FusionMode::Df),
            "hybrid" => Ok(FusionMode::Hybrid),
            "zeroing" => Ok(FusionMode::Zeroing),
            "zeroing-improved" => Ok(FusionMode::ZeroingImproved),
            other => Err(format!("unknown fusion mode: {other}")),
        }
    }
}

impl serde::Serialize for FusionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for FusionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of a fused prediction; only Zeroing can reject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Device(usize),
    Rejected,
}

impl Decision {
    pub fn device(self) -> Option<usize> {
        match self {
            Decision::Device(i) => Some(i),
            Decision::Rejected => None,
        }
    }
}

// Rejections print as a word so log consumers cannot mistake them for an
// index.
impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Device(i) => write!(f, "{i}"),
            Decision::Rejected => f.write_str("rejected"),
        }
    }
}

/// Mean measured CFO per (device, antenna). Device order is the sorted
/// device-id order, which is also the class-label order everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct CfoDatabase {
    device_ids: Vec<String>,
    means_hz: Vec<[f64; NUM_ANTENNAS]>,
    counts: Vec<[u32; NUM_ANTENNAS]>,
}

impl CfoDatabase {
    /// Builds from explicit means; each cell gets count 1.
    pub fn from_means(entries: Vec<(String, [f64; NUM_ANTENNAS])>) -> Result<Self, FusionError> {
        let mut sorted = entries;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(FusionError::DuplicateDevice(pair[0].0.clone()));
            }
        }
        for (id, means) in &sorted {
            if means.iter().any(|m| !m.is_finite()) {
                return Err(FusionError::NonFiniteMean(id.clone()));
            }
        }
        let n = sorted.len();
        let mut device_ids = Vec::with_capacity(n);
        let mut means_hz = Vec::with_capacity(n);
        for (id, means) in sorted {
            device_ids.push(id);
            means_hz.push(means);
        }
        Ok(Self { device_ids, means_hz, counts: vec![[1; NUM_ANTENNAS]; n] })
    }

    pub fn num_devices(&self) -> usize {
        self.device_ids.len()
    }

    pub fn device_ids(&self) -> &[String] {
        &self.device_ids
    }

    /// Class label of a device id, by sorted position.
    pub fn label_of(&self, device_id: &str) -> Option<usize> {
        self.device_ids.binary_search_by(|id| id.as_str().cmp(device_id)).ok()
    }

    pub fn mean_hz(&self, device: usize, antenna: usize) -> f64 {
        self.means_hz[device][antenna]
    }

    pub fn count(&self, device: usize, antenna: usize) -> u32 {
        self.counts[device][antenna]
    }

    /// JSON object mapping device id to its four per-antenna means in Hz.
    pub fn to_json_string(&self) -> String {
        let map: BTreeMap<&str, &[f64; NUM_ANTENNAS]> = self
            .device_ids
            .iter()
            .map(String::as_str)
            .zip(&self.means_hz)
            .collect();
        serde_json::to_string_pretty(&map).expect("plain floats always serialize")
    }

    pub fn from_json_str(text: &str) -> Result<Self, FusionError> {
        let map: BTreeMap<String, [f64; NUM_ANTENNAS]> = serde_json::from_str(text)?;
        Self::from_means(map.into_iter().collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        Ok(std::fs::write(path, self.to_json_string())?)
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Arithmetic mean of the estimated CFO per (device, antenna) cell. Every
/// record needs a device label, and every device must cover all four
/// antennas.
pub fn build_cfo_database(records: &[CfoRecord]) -> Result<CfoDatabase, FusionError> {
    let mut cells: BTreeMap<String, [(f64, u32); NUM_ANTENNAS]> = BTreeMap::new();
    for record in records {
        let id = record
            .device_id
            .clone()
            .ok_or(FusionError::MissingDeviceId { frame_id: record.frame_id })?;
        if record.antenna_index as usize >= NUM_ANTENNAS {
            return Err(FusionError::BadAntennaIndex { got: record.antenna_index });
        }
        let cell = &mut cells.entry(id).or_insert([(0.0, 0); NUM_ANTENNAS])
            [record.antenna_index as usize];
        cell.0 += record.estimated_cfo_hz;
        cell.1 += 1;
    }
    if cells.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    let mut device_ids = Vec::with_capacity(cells.len());
    let mut means_hz = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len());
    for (id, cell) in cells {
        let mut means = [0.0; NUM_ANTENNAS];
        let mut n = [0u32; NUM_ANTENNAS];
        for (a, &(sum, count)) in cell.iter().enumerate() {
            if count == 0 {
                return Err(FusionError::MissingCell { device_id: id, antenna: a });
            }
            means[a] = sum / count as f64;
            n[a] = count;
        }
        device_ids.push(id);
        means_hz.push(means);
        counts.push(n);
    }
    Ok(CfoDatabase { device_ids, means_hz, counts })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FusionOptions {
    /// Rescale each antenna's weight vector to sum to 1 before applying.
    /// Off by default: raw reciprocals, argmax-invariant per antenna.
    pub normalize_weights: bool,
}

/// Reciprocal-distance calibration weights for one antenna:
/// `w_i = 1 / max(|cfo_dut - mean_i|, 1 Hz)`.
pub fn cfo_weights(cfo_dut_hz: f64, db: &CfoDatabase, antenna: usize) -> Vec<f64> {
    cfo_weights_opt(cfo_dut_hz, db, antenna, FusionOptions::default())
}

pub fn cfo_weights_opt(
    cfo_dut_hz: f64,
    db: &CfoDatabase,
    antenna: usize,
    opts: FusionOptions,
) -> Vec<f64> {
    let mut weights: Vec<f64> = (0..db.num_devices())
        .map(|i| 1.0 / (cfo_dut_hz - db.mean_hz(i, antenna)).abs().max(CFO_EPSILON_HZ))
        .collect();
    if opts.normalize_weights {
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
    }
    weights
}

/// Scores and CFO estimates from all four antennas for one frame.
#[derive(Debug, Clone)]
pub struct FusionInput {
    pub scores: Vec<SoftmaxScores>,
    pub cfos_hz: Vec<f64>,
}

impl FusionInput {
    fn validate(&self) -> Result<usize, FusionError> {
        if self.scores.len() != NUM_ANTENNAS {
            return Err(FusionError::AntennaCountMismatch { got: self.scores.len() });
        }
        if self.cfos_hz.len() != NUM_ANTENNAS {
            return Err(FusionError::AntennaCountMismatch { got: self.cfos_hz.len() });
        }
        let n = self.scores[0].scores.len();
        for s in &self.scores[1..] {
            if s.scores.len() != n {
                return Err(FusionError::ScoreLengthMismatch { a: n, b: s.scores.len() });
            }
        }
        if n == 0 {
            return Err(FusionError::EmptyInput);
        }
        Ok(n)
    }

    fn validate_with_db(&self, db: &CfoDatabase) -> Result<usize, FusionError> {
        let n = self.validate()?;
        if n != db.num_devices() {
            return Err(FusionError::SizeMismatch { scores: n, devices: db.num_devices() });
        }
        Ok(n)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Single-antenna decision: plain argmax.
pub fn predict_direct(score: &SoftmaxScores) -> usize {
    score.argmax()
}

/// Decision-fusion baseline: argmax of the plain score average.
pub fn fuse_df(scores: &[SoftmaxScores]) -> Result<usize, FusionError> {
    if scores.is_empty() || scores[0].scores.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    let n = scores[0].scores.len();
    for s in &scores[1..] {
        if s.scores.len() != n {
            return Err(FusionError::ScoreLengthMismatch { a: n, b: s.scores.len() });
        }
    }
    let mut mean = vec![0.0; n];
    for s in scores {
        for (m, &v) in mean.iter_mut().zip(&s.scores) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= scores.len() as f64;
    }
    Ok(argmax(&mean))
}

/// CFO-weighted fusion: elementwise weights, four-antenna average, argmax.
pub fn fuse_hybrid(input: &FusionInput, db: &CfoDatabase) -> Result<usize, FusionError> {
    fuse_hybrid_opt(input, db, FusionOptions::default())
}

pub fn fuse_hybrid_opt(
    input: &FusionInput,
    db: &CfoDatabase,
    opts: FusionOptions,
) -> Result<usize, FusionError> {
    let n = input.validate_with_db(db)?;
    let mut fused = vec![0.0; n];
    for (antenna, (score, &cfo)) in input.scores.iter().zip(&input.cfos_hz).enumerate() {
        let weights = cfo_weights_opt(cfo, db, antenna, opts);
        for ((f, &w), &s) in fused.iter_mut().zip(&weights).zip(&score.scores) {
            *f += w * s;
        }
    }
    for f in &mut fused {
        *f /= NUM_ANTENNAS as f64;
    }
    Ok(argmax(&fused))
}

/// Benchmark: zero out devices whose database CFO is farther than
/// `threshold_hz` on that antenna, DF-average the rest. All-zero -> rejected.
pub fn fuse_zeroing(
    input: &FusionInput,
    db: &CfoDatabase,
    threshold_hz: f64,
) -> Result<Decision, FusionError> {
    let n = input.validate_with_db(db)?;
    let mut fused = vec![0.0; n];
    for (antenna, (score, &cfo)) in input.scores.iter().zip(&input.cfos_hz).enumerate() {
        for (i, (f, &s)) in fused.iter_mut().zip(&score.scores).enumerate() {
            if (cfo - db.mean_hz(i, antenna)).abs() <= threshold_hz {
                *f += s;
            }
        }
    }
    if fused.iter().all(|&f| f == 0.0) {
        return Ok(Decision::Rejected);
    }
    Ok(Decision::Device(argmax(&fused)))
}

/// Zeroing with the documented fallback: a rejected frame is re-decided by
/// plain DF on the unmodified scores.
pub fn fuse_zeroing_improved(
    input: &FusionInput,
    db: &CfoDatabase,
    threshold_hz: f64,
) -> Result<usize, FusionError> {
    match fuse_zeroing(input, db, threshold_hz)? {
        Decision::Device(i) => Ok(i),
        Decision::Rejected => fuse_df(&input.scores),
    }
}

/// Mode dispatcher used by the evaluation harness. Direct uses antenna 0.
pub fn fuse(
    mode: FusionMode,
    input: &FusionInput,
    db: &CfoDatabase,
    opts: FusionOptions,
    threshold_hz: f64,
) -> Result<Decision, FusionError> {
    input.validate()?;
    match mode {
        FusionMode::Direct => Ok(Decision::Device(predict_direct(&input.scores[0]))),
        FusionMode::Df => Ok(Decision::Device(fuse_df(&input.scores)?)),
        FusionMode::Hybrid => Ok(Decision::Device(fuse_hybrid_opt(input, db, opts)?)),
        FusionMode::Zeroing => fuse_zeroing(input, db, threshold_hz),
        FusionMode::ZeroingImproved => {
            Ok(Decision::Device(fuse_zeroing_improved(input, db, threshold_hz)?))
        }
    }
}

/// One line of the evaluation decision log.
#[derive(Debug, Clone)]
pub struct DecisionRow {
    pub frame_id: u32,
    pub true_label: usize,
    pub mode: FusionMode,
    pub decision: Decision,
    pub antenna_argmax: [usize; NUM_ANTENNAS],
    pub cfos_hz: [f64; NUM_ANTENNAS],
}

impl DecisionRow {
    pub fn csv_header() -> &'static str {
        "frame_id,true_label,mode,predicted,ant0_argmax,ant1_argmax,ant2_argmax,ant3_argmax,\
         cfo0_hz,cfo1_hz,cfo2_hz,cfo3_hz"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.frame_id,
            self.true_label,
            self.mode,
            self.decision,
            self.antenna_argmax[0],
            self.antenna_argmax[1],
            self.antenna_argmax[2],
            self.antenna_argmax[3],
            self.cfos_hz[0],
            self.cfos_hz[1],
            self.cfos_hz[2],
            self.cfos_hz[3],
        )
    }
}
