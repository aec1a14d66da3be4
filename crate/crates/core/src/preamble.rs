//! Legacy IEEE 802.11 (20 MHz) preamble synthesis and segmentation.
//!
//! The preamble is 320 samples at 20 MS/s: a 160-sample short training field
//! (ten repetitions of a 16-sample short training symbol) followed by a
//! 160-sample long training field (32-sample guard interval plus two identical
//! 64-sample long training symbols). Four 64-sample analysis symbols are cut
//! from it:
//!
//! - `stf1` = samples `[16, 80)` and `stf2` = samples `[80, 144)`, each
//!   spanning four short-symbol periods;
//! - `ltf1` = samples `[192, 256)` and `ltf2` = samples `[256, 320)`, the two
//!   long training symbols.
//!
//! The module also owns the subcarrier bookkeeping: the active sets of the
//! short and long training symbols and their complements within the full
//! 64-bin grid. Complements include DC and the band edges, which is where
//! power-amplifier distortion products land.

use crate::frame::ComplexFrame;
use crate::spectrum::{dft64, idft64, Symbol, SpectrumVector, NUM_BINS};
use num_complex::Complex64;
use std::sync::OnceLock;
use thiserror::Error;

/// The only sample rate the preamble generator supports.
pub const SAMPLE_RATE_HZ: f64 = 20e6;
/// STF plus LTF length in samples.
pub const PREAMBLE_LEN: usize = 320;
/// Offsets of the four analysis symbols within a start-aligned preamble.
pub const SYMBOL_STARTS: [usize; 4] = [16, 80, 192, 256];

#[derive(Debug, Error, PartialEq)]
pub enum PreambleError {
    #[error("unsupported sample rate {0} Hz (the preamble is defined at 20 MHz)")]
    UnsupportedSampleRate(f64),
    #[error("frame too short: {0} samples, need at least {PREAMBLE_LEN}")]
    FrameTooShort(usize),
}

/// Active subcarriers of the short training symbol, ascending.
pub const ZETA_STF: [i32; 12] = [-24, -20, -16, -12, -8, -4, 4, 8, 12, 16, 20, 24];

/// Frequency-domain short training values on [`ZETA_STF`], before the common
/// sqrt(13/6) scale: each entry is `(1 + j)` times the sign below.
const STS_SIGNS: [f64; 12] = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0];

/// Frequency-domain long training values on subcarriers -26..=26 (DC is 0).
const LTS_VALUES: [f64; 53] = [
    1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0,
    1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0,
    -1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0,
    1.0, 1.0, 1.0,
];

/// The five subcarrier index sets used by feature extraction, all ascending.
#[derive(Debug, Clone)]
pub struct SubcarrierSets {
    /// Active short-training subcarriers (12).
    pub zeta_stf: Vec<i32>,
    /// Active long-training subcarriers (52).
    pub zeta_ltf: Vec<i32>,
    /// Full 64-bin grid, `[-32, 31]`.
    pub zeta_total: Vec<i32>,
    /// Complement of `zeta_stf` in the grid (52), including DC.
    pub omega_stf: Vec<i32>,
    /// Complement of `zeta_ltf` in the grid (12), including DC.
    pub omega_ltf: Vec<i32>,
}

/// Returns the shared subcarrier sets.
pub fn subcarrier_sets() -> &'static SubcarrierSets {
    static SETS: OnceLock<SubcarrierSets> = OnceLock::new();
    SETS.get_or_init(|| {
        let zeta_stf: Vec<i32> = ZETA_STF.to_vec();
        let zeta_ltf: Vec<i32> = (-26..=26).filter(|&k| k != 0).collect();
        let zeta_total: Vec<i32> = (-32..=31).collect();
        let omega_stf: Vec<i32> =
            zeta_total.iter().copied().filter(|k| !zeta_stf.contains(k)).collect();
        let omega_ltf: Vec<i32> =
            zeta_total.iter().copied().filter(|k| !zeta_ltf.contains(k)).collect();
        SubcarrierSets { zeta_stf, zeta_ltf, zeta_total, omega_stf, omega_ltf }
    })
}

/// Frequency-domain short training symbol on the 64-bin grid.
pub fn sts_spectrum() -> SpectrumVector {
    let scale = (13.0f64 / 6.0).sqrt();
    let mut spec = SpectrumVector::zeros();
    for (i, &k) in ZETA_STF.iter().enumerate() {
        let s = STS_SIGNS[i] * scale;
        spec.set(k, Complex64::new(s, s));
    }
    spec
}

/// Frequency-domain long training symbol on the 64-bin grid.
pub fn lts_spectrum() -> SpectrumVector {
    let mut spec = SpectrumVector::zeros();
    for (i, &v) in LTS_VALUES.iter().enumerate() {
        let k = i as i32 - 26;
        spec.set(k, Complex64::new(v, 0.0));
    }
    spec
}

/// Generates the ideal 320-sample preamble, normalized to unit RMS.
///
/// The short training field is built by materializing one 16-sample period of
/// the inverse DFT and tiling it ten times, which makes the repetition
/// structure exact in floating point. The long training field is the 64-sample
/// inverse DFT of the long training values, prefixed by its last 32 samples as
/// guard interval and repeated twice.
pub fn generate_preamble(sample_rate_hz: f64) -> Result<ComplexFrame, PreambleError> {
    if sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(PreambleError::UnsupportedSampleRate(sample_rate_hz));
    }

    // STS active bins are all multiples of 4, so the 64-sample inverse DFT has
    // period 16; take one period and tile it.
    let sts_time = idft64(&sts_spectrum());
    let period = &sts_time[..16];
    let mut samples: Vec<Complex64> = Vec::with_capacity(PREAMBLE_LEN);
    for _ in 0..10 {
        samples.extend_from_slice(period);
    }

    let lts_time = idft64(&lts_spectrum());
    samples.extend_from_slice(&lts_time[32..]);
    samples.extend_from_slice(&lts_time);
    samples.extend_from_slice(&lts_time);
    debug_assert_eq!(samples.len(), PREAMBLE_LEN);

    let power: f64 = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / PREAMBLE_LEN as f64;
    let inv_rms = 1.0 / power.sqrt();
    for s in samples.iter_mut() {
        *s *= inv_rms;
    }
    Ok(ComplexFrame::new(samples, sample_rate_hz).expect("ideal preamble is valid"))
}

/// The four 64-sample analysis symbols of one preamble.
#[derive(Debug, Clone)]
pub struct PreambleSymbols {
    pub stf1: Symbol,
    pub stf2: Symbol,
    pub ltf1: Symbol,
    pub ltf2: Symbol,
}

impl PreambleSymbols {
    /// Symbols in extraction order: stf1, stf2, ltf1, ltf2.
    pub fn all(&self) -> [&Symbol; 4] {
        [&self.stf1, &self.stf2, &self.ltf1, &self.ltf2]
    }

    /// 64-point spectra of the four symbols in extraction order.
    pub fn spectra(&self) -> [SpectrumVector; 4] {
        [dft64(&self.stf1), dft64(&self.stf2), dft64(&self.ltf1), dft64(&self.ltf2)]
    }
}

/// Cuts the four analysis symbols out of a start-aligned preamble.
pub fn segment_symbols(frame: &ComplexFrame) -> Result<PreambleSymbols, PreambleError> {
    let samples = frame.samples();
    if samples.len() < PREAMBLE_LEN {
        return Err(PreambleError::FrameTooShort(samples.len()));
    }
    let grab = |start: usize| -> Symbol {
        let mut sym = [Complex64::new(0.0, 0.0); NUM_BINS];
        sym.copy_from_slice(&samples[start..start + NUM_BINS]);
        sym
    };
    Ok(PreambleSymbols {
        stf1: grab(SYMBOL_STARTS[0]),
        stf2: grab(SYMBOL_STARTS[1]),
        ltf1: grab(SYMBOL_STARTS[2]),
        ltf2: grab(SYMBOL_STARTS[3]),
    })
}
