//! Fingerprint feature extraction from the four analysis symbols.
//!
//! Four competing representations are produced from the same preprocessed
//! symbols:
//!
//! - SR: magnitudes on the inactive (regrowth) bins, the channel-robust
//!   feature. Band order stf1, stf2 (52 bins each), ltf1, ltf2 (12 each),
//!   subcarriers ascending within a band; 128 values total.
//! - AS: magnitudes on the active bins, same band order with the 12/52 split
//!   reversed; 128 values.
//! - DoLoS: difference of base-10 log magnitude spectra of same-field symbol
//!   pairs on active bins, 12 + 52 = 64 values; multiplicative per-bin
//!   channels cancel exactly.
//! - EQ: magnitudes of active bins after least-squares equalization against
//!   the long-symbol channel estimate; 128 values with a deep-fade guard.
//!
//! Values are stored as `f32`, matching the on-disk record format, so a
//! feature written and read back is the same object. Magnitude (not
//! log-magnitude) is the default scale; `FeatureOptions::log_magnitude`
//! switches SR and AS to `log10(max(v, 1e-12))` for sensitivity studies.

use crate::frame::ComplexFrame;
use crate::frontend::{self, FrontendError};
use crate::impairments::apply_cfo;
use crate::preamble::{self, PreambleSymbols};
use crate::spectrum::{bin_of, SpectrumVector};
use std::fmt;
use std::str::FromStr;

/// Floor applied before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Equalizer bins with a channel-estimate magnitude below this are zeroed.
pub const DEEP_FADE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    /// Spectral regrowth on inactive bins.
    Sr,
    /// Active-subcarrier spectrum.
    As,
    /// Difference of log spectra of adjacent symbols.
    DoLoS,
    /// Equalized active-subcarrier spectrum.
    Eq,
}

impl FeatureKind {
    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Sr => 0,
            FeatureKind::As => 1,
            FeatureKind::DoLoS => 2,
            FeatureKind::Eq => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<FeatureKind> {
        match code {
            0 => Some(FeatureKind::Sr),
            1 => Some(FeatureKind::As),
            2 => Some(FeatureKind::DoLoS),
            3 => Some(FeatureKind::Eq),
            _ => None,
        }
    }

    /// Feature vector length for this kind.
    pub fn len(self) -> usize {
        match self {
            FeatureKind::DoLoS => 64,
            _ => 128,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Sr => "sr",
            FeatureKind::As => "as",
            FeatureKind::DoLoS => "dolos",
            FeatureKind::Eq => "eq",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sr" => Ok(FeatureKind::Sr),
            "as" => Ok(FeatureKind::As),
            "dolos" => Ok(FeatureKind::DoLoS),
            "eq" => Ok(FeatureKind::Eq),
            other => Err(format!("unknown feature kind: {other}")),
        }
    }
}

impl serde::Serialize for FeatureKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for FeatureKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One extracted fingerprint vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RffFeature {
    pub kind: FeatureKind,
    pub values: Vec<f32>,
}

impl RffFeature {
    pub fn new(kind: FeatureKind, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), kind.len(), "{kind} feature must have {} values", kind.len());
        assert!(values.iter().all(|v| v.is_finite()), "feature values must be finite");
        Self { kind, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureOptions {
    /// Store `log10(max(v, 1e-12))` instead of raw magnitudes (SR/AS only).
    pub log_magnitude: bool,
}

fn band_magnitudes(spec: &SpectrumVector, subcarriers: &[i32], out: &mut Vec<f64>) {
    for &k in subcarriers {
        out.push(spec.at(k).norm());
    }
}

fn finish(kind: FeatureKind, raw: Vec<f64>, opts: FeatureOptions) -> RffFeature {
    let values = raw
        .into_iter()
        .map(|v| if opts.log_magnitude { v.max(LOG_FLOOR).log10() as f32 } else { v as f32 })
        .collect();
    RffFeature::new(kind, values)
}

/// Spectral-regrowth feature: inactive-bin magnitudes, 52+52+12+12.
pub fn extract_sr(symbols: &PreambleSymbols) -> RffFeature {
    extract_sr_opt(symbols, FeatureOptions::default())
}

pub fn extract_sr_opt(symbols: &PreambleSymbols, opts: FeatureOptions) -> RffFeature {
    let sets = preamble::subcarrier_sets();
    let [stf1, stf2, ltf1, ltf2] = symbols.spectra();
    let mut raw = Vec::with_capacity(128);
    band_magnitudes(&stf1, &sets.omega_stf, &mut raw);
    band_magnitudes(&stf2, &sets.omega_stf, &mut raw);
    band_magnitudes(&ltf1, &sets.omega_ltf, &mut raw);
    band_magnitudes(&ltf2, &sets.omega_ltf, &mut raw);
    finish(FeatureKind::Sr, raw, opts)
}

/// Active-subcarrier feature: active-bin magnitudes, 12+12+52+52.
pub fn extract_as(symbols: &PreambleSymbols) -> RffFeature {
    extract_as_opt(symbols, FeatureOptions::default())
}

pub fn extract_as_opt(symbols: &PreambleSymbols, opts: FeatureOptions) -> RffFeature {
    let sets = preamble::subcarrier_sets();
    let [stf1, stf2, ltf1, ltf2] = symbols.spectra();
    let mut raw = Vec::with_capacity(128);
    band_magnitudes(&stf1, &sets.zeta_stf, &mut raw);
    band_magnitudes(&stf2, &sets.zeta_stf, &mut raw);
    band_magnitudes(&ltf1, &sets.zeta_ltf, &mut raw);
    band_magnitudes(&ltf2, &sets.zeta_ltf, &mut raw);
    finish(FeatureKind::As, raw, opts)
}

/// Log-spectral difference of same-field symbol pairs on active bins:
/// 12 short-field values then 52 long-field values.
pub fn extract_dolos(symbols: &PreambleSymbols) -> RffFeature {
    let sets = preamble::subcarrier_sets();
    let [stf1, stf2, ltf1, ltf2] = symbols.spectra();
    let mut raw = Vec::with_capacity(64);
    let log_diff = |a: &SpectrumVector, b: &SpectrumVector, k: i32| {
        a.at(k).norm().max(LOG_FLOOR).log10() - b.at(k).norm().max(LOG_FLOOR).log10()
    };
    for &k in &sets.zeta_stf {
        raw.push(log_diff(&stf1, &stf2, k));
    }
    for &k in &sets.zeta_ltf {
        raw.push(log_diff(&ltf1, &ltf2, k));
    }
    finish(FeatureKind::DoLoS, raw, FeatureOptions::default())
}

/// Equalized feature plus the per-value deep-fade flags.
#[derive(Debug, Clone)]
pub struct EqExtraction {
    pub feature: RffFeature,
    /// True where the channel estimate was too weak to divide by and the
    /// value was zeroed; same indexing as the feature.
    pub fades: Vec<bool>,
}

/// Equalized active-subcarrier feature, 12+12+52+52.
///
/// The channel is estimated per bin as the mean of the two long symbols
/// divided by the known long training values; short-symbol bins are a subset
/// of the long-symbol bins, so the same estimate equalizes all four symbols.
pub fn extract_eq(symbols: &PreambleSymbols) -> EqExtraction {
    let sets = preamble::subcarrier_sets();
    let lts = preamble::lts_spectrum();
    let [stf1, stf2, ltf1, ltf2] = symbols.spectra();

    let mut h = [num_complex::Complex64::new(0.0, 0.0); crate::spectrum::NUM_BINS];
    for &k in &sets.zeta_ltf {
        let b = bin_of(k);
        h[b] = (ltf1.bins()[b] + ltf2.bins()[b]) / (2.0 * lts.bins()[b]);
    }

    let mut raw = Vec::with_capacity(128);
    let mut fades = Vec::with_capacity(128);
    let bands: [(&SpectrumVector, &[i32]); 4] = [
        (&stf1, &sets.zeta_stf),
        (&stf2, &sets.zeta_stf),
        (&ltf1, &sets.zeta_ltf),
        (&ltf2, &sets.zeta_ltf),
    ];
    for (spec, subcarriers) in bands {
        for &k in subcarriers {
            let b = bin_of(k);
            if h[b].norm() < DEEP_FADE_THRESHOLD {
                raw.push(0.0);
                fades.push(true);
            } else {
                raw.push((spec.bins()[b] / h[b]).norm());
                fades.push(false);
            }
        }
    }
    EqExtraction { feature: finish(FeatureKind::Eq, raw, FeatureOptions::default()), fades }
}

/// Extracts the requested kind; the equalizer's fade flags are dropped.
pub fn extract(kind: FeatureKind, symbols: &PreambleSymbols) -> RffFeature {
    match kind {
        FeatureKind::Sr => extract_sr(symbols),
        FeatureKind::As => extract_as(symbols),
        FeatureKind::DoLoS => extract_dolos(symbols),
        FeatureKind::Eq => extract_eq(symbols).feature,
    }
}

/// Benchmark variant that deliberately leaves the carrier offset in the
/// fingerprint: the stream is preprocessed normally, then the estimated
/// offset is rotated back in before segmentation and regrowth extraction.
pub fn pipeline_ud(stream: &ComplexFrame) -> Result<RffFeature, FrontendError> {
    let pre = frontend::preprocess(stream)?;
    let redone = apply_cfo(&pre.preamble, pre.estimated_cfo_hz);
    let symbols = preamble::segment_symbols(&redone)
        .expect("preprocessed preamble has the full 320 samples");
    Ok(extract_sr(&symbols))
}
