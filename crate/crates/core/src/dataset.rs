//! On-disk formats: feature datasets, model checkpoints, IQ frame
//! containers, and the decision log.
//!
//! All binary formats are little-endian and versioned, and every writer has
//! a reader that reproduces the written bytes exactly (bit-exact round
//! trips are part of the contract, tested below).
//!
//! - Feature dataset: magic `RFFI1`, a length-prefixed JSON header with
//!   counts and provenance, then packed records
//!   {device_label: u16, antenna: u8, kind: u8, length: u16,
//!   values: f32[length], cfo_hz: f32, frame_id: u32}.
//! - Checkpoint: magic `RFFICKPT`, version, a JSON header carrying the model
//!   config and the tensor catalogue, then raw f32 blobs in catalogue order.
//! - IQ container: a directory with `manifest.json` (sample rate plus one
//!   entry per frame) and one `.iq` file per frame of interleaved f32 I/Q.
//!   Samples are quantized to f32 on export.

use crate::classifier::{build_model, Model, ModelConfig};
use crate::features::{FeatureKind, RffFeature};
use crate::frame::ComplexFrame;
use crate::fusion::DecisionRow;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const FEATURE_MAGIC: &[u8; 5] = b"RFFI1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"RFFICKPT";
const FEATURE_VERSION: u32 = 1;
const CHECKPOINT_VERSION: u32 = 1;
const IQ_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic: expected {expected}, found something else")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("unknown feature kind code {0}")]
    BadKind(u8),
    #[error("record for frame {frame_id} holds a non-finite value")]
    NonFiniteValue { frame_id: u32 },
    #[error("feature of length {0} does not fit the u16 record length field")]
    LengthOverflow(usize),
    #[error("header promises {expected} records, found {got}")]
    RecordCountMismatch { expected: u64, got: u64 },
    #[error("checkpoint rejected: {0}")]
    CheckpointShape(String),
    #[error("manifest entry {file}: expected {expected} bytes of IQ, found {got}")]
    TruncatedIq { file: String, expected: u64, got: u64 },
    #[error("manifest entry {file} declares antenna {antenna}, outside 0..4")]
    BadAntenna { file: String, antenna: u8 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Frame(#[from] crate::frame::FrameError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
}

/// Byte cursor with checked little-endian reads.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Truncated { context });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, DatasetError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn f32(&mut self, context: &'static str) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// One labeled feature vector as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub device_label: u16,
    pub antenna: u8,
    pub kind: FeatureKind,
    pub values: Vec<f32>,
    pub cfo_hz: f32,
    pub frame_id: u32,
}

impl FeatureRecord {
    pub fn feature(&self) -> RffFeature {
        RffFeature::new(self.kind, self.values.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    version: u32,
    record_count: u64,
    provenance: String,
    #[serde(default)]
    device_ids: Vec<String>,
}

/// A feature dataset plus the provenance carried in its header. The
/// device-id list, when present, maps `device_label` to a device id by
/// index.
#[derive(Debug, Clone, Default)]
pub struct FeatureDataset {
    pub provenance: String,
    pub device_ids: Vec<String>,
    pub records: Vec<FeatureRecord>,
}

impl FeatureDataset {
    pub fn new(provenance: impl Into<String>, device_ids: Vec<String>) -> Self {
        Self { provenance: provenance.into(), device_ids, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Training views: features and integer labels, in record order.
    pub fn features_and_labels(&self) -> (Vec<RffFeature>, Vec<usize>) {
        let features = self.records.iter().map(|r| r.feature()).collect();
        let labels = self.records.iter().map(|r| r.device_label as usize).collect();
        (features, labels)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let header = FeatureHeader {
            version: FEATURE_VERSION,
            record_count: self.records.len() as u64,
            provenance: self.provenance.clone(),
            device_ids: self.device_ids.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for r in &self.records {
            if r.values.len() > u16::MAX as usize {
                return Err(DatasetError::LengthOverflow(r.values.len()));
            }
            buf.extend_from_slice(&r.device_label.to_le_bytes());
            buf.push(r.antenna);
            buf.push(r.kind.code());
            buf.extend_from_slice(&(r.values.len() as u16).to_le_bytes());
            for v in &r.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&r.cfo_hz.to_le_bytes());
            buf.extend_from_slice(&r.frame_id.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader::new(bytes);
        if r.take(FEATURE_MAGIC.len(), "magic")? != FEATURE_MAGIC {
            return Err(DatasetError::BadMagic { expected: "RFFI1" });
        }
        let header_len = r.u32("header length")? as usize;
        let header: FeatureHeader = serde_json::from_slice(r.take(header_len, "header")?)?;
        if header.version != FEATURE_VERSION {
            return Err(DatasetError::UnsupportedVersion(header.version));
        }
        let mut records = Vec::with_capacity(header.record_count as usize);
        for _ in 0..header.record_count {
            let device_label = r.u16("device label")?;
            let antenna = r.u8("antenna")?;
            let kind_code = r.u8("feature kind")?;
            let kind = FeatureKind::from_code(kind_code)
                .ok_or(DatasetError::BadKind(kind_code))?;
            let length = r.u16("length")? as usize;
            let mut values = Vec::with_capacity(length);
            for _ in 0..length {
                values.push(r.f32("values")?);
            }
            let cfo_hz = r.f32("cfo")?;
            let frame_id = r.u32("frame id")?;
            if values.iter().any(|v| !v.is_finite()) || !cfo_hz.is_finite() {
                return Err(DatasetError::NonFiniteValue { frame_id });
            }
            records.push(FeatureRecord { device_label, antenna, kind, values, cfo_hz, frame_id });
        }
        if r.remaining() != 0 {
            return Err(DatasetError::TrailingBytes(r.remaining()));
        }
        Ok(Self { provenance: header.provenance, device_ids: header.device_ids, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    tensors: Vec<TensorMeta>,
}

/// Serializes a trained model: config header plus raw f32 parameter blobs.
pub fn checkpoint_to_bytes(model: &Model<f32>) -> Result<Vec<u8>, DatasetError> {
    let tensors = model.export_tensors();
    let header = CheckpointHeader {
        model: model.config().clone(),
        tensors: tensors
            .iter()
            .map(|(name, values)| TensorMeta { name: name.clone(), len: values.len() as u64 })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, values) in &tensors {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model<f32>, DatasetError> {
    let mut r = Reader::new(bytes);
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(DatasetError::BadMagic { expected: "RFFICKPT" });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let header_len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let mut values = Vec::with_capacity(meta.len as usize);
        for _ in 0..meta.len {
            values.push(r.f32("tensor blob")?);
        }
        tensors.push((meta.name.clone(), values));
    }
    if r.remaining() != 0 {
        return Err(DatasetError::TrailingBytes(r.remaining()));
    }
    let mut model = build_model::<f32>(&header.model)
        .map_err(|e| DatasetError::CheckpointShape(e.to_string()))?;
    model
        .import_tensors(&tensors)
        .map_err(|e| DatasetError::CheckpointShape(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<(), DatasetError> {
    Ok(std::fs::write(path, checkpoint_to_bytes(model)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, DatasetError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// A received frame with its ground-truth provenance labels.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub device_id: String,
    pub antenna: u8,
    pub frame_id: u32,
    pub frame: ComplexFrame,
}

#[derive(Debug, Serialize, Deserialize)]
struct IqFrameMeta {
    file: String,
    device_id: String,
    antenna: u8,
    length: u32,
    frame_id: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct IqManifest {
    version: u32,
    sample_rate_hz: f64,
    frames: Vec<IqFrameMeta>,
}

/// Writes `manifest.json` plus one interleaved-f32 `.iq` file per frame.
/// All frames must share one sample rate; samples are narrowed to f32.
pub fn export_iq_dir(dir: &Path, frames: &[LabeledFrame]) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let sample_rate_hz = frames.first().map_or(crate::preamble::SAMPLE_RATE_HZ, |f| {
        f.frame.sample_rate_hz()
    });
    let mut metas = Vec::with_capacity(frames.len());
    for (i, labeled) in frames.iter().enumerate() {
        let file = format!("frame_{i:06}.iq");
        let samples = labeled.frame.samples();
        let mut buf = Vec::with_capacity(samples.len() * 8);
        for s in samples {
            buf.extend_from_slice(&(s.re as f32).to_le_bytes());
            buf.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        std::fs::write(dir.join(&file), buf)?;
        metas.push(IqFrameMeta {
            file,
            device_id: labeled.device_id.clone(),
            antenna: labeled.antenna,
            length: samples.len() as u32,
            frame_id: labeled.frame_id,
        });
    }
    let manifest =
        IqManifest { version: IQ_MANIFEST_VERSION, sample_rate_hz, frames: metas };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a directory written by [`export_iq_dir`] (or converted external
/// captures following the same manifest shape).
pub fn ingest_iq_dir(dir: &Path) -> Result<Vec<LabeledFrame>, DatasetError> {
    let manifest: IqManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != IQ_MANIFEST_VERSION {
        return Err(DatasetError::UnsupportedVersion(manifest.version));
    }
    let mut out = Vec::with_capacity(manifest.frames.len());
    for meta in &manifest.frames {
        if meta.antenna as usize >= crate::fusion::NUM_ANTENNAS {
            return Err(DatasetError::BadAntenna {
                file: meta.file.clone(),
                antenna: meta.antenna,
            });
        }
        let bytes = std::fs::read(dir.join(&meta.file))?;
        let expected = meta.length as u64 * 8;
        if bytes.len() as u64 != expected {
            return Err(DatasetError::TruncatedIq {
                file: meta.file.clone(),
                expected,
                got: bytes.len() as u64,
            });
        }
        let mut samples = Vec::with_capacity(meta.length as usize);
        for pair in bytes.chunks_exact(8) {
            let re = f32::from_le_bytes(pair[0..4].try_into().unwrap());
            let im = f32::from_le_bytes(pair[4..8].try_into().unwrap());
            samples.push(Complex64::new(re as f64, im as f64));
        }
        out.push(LabeledFrame {
            device_id: meta.device_id.clone(),
            antenna: meta.antenna,
            frame_id: meta.frame_id,
            frame: ComplexFrame::new(samples, manifest.sample_rate_hz)?,
        });
    }
    Ok(out)
}

/// Decision log: CSV with one row per (frame, mode) decision.
pub fn write_decision_log(path: &Path, rows: &[DecisionRow]) -> Result<(), DatasetError> {
    let mut text = String::from(DecisionRow::csv_header());
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_row());
        text.push('\n');
    }
    Ok(std::fs::write(path, text)?)
}
