//! Receiver front end: packet detection, carrier-offset estimation and
//! compensation, and power normalization.
//!
//! Detection is the classic two-step synchronizer: a lag-16 autocorrelation
//! plateau over the short training field flags the packet and yields a coarse
//! frequency estimate, then a cross-correlation against the known long
//! training symbol pins the exact start sample.
//!
//! CFO estimation runs in three stages on a start-aligned preamble:
//!
//! 1. coarse: STF autocorrelation at lag 16, unambiguous to +-625 kHz;
//! 2. fine: LTF autocorrelation at lag 64, unambiguous to +-156.25 kHz,
//!    unwrapped against the coarse value;
//! 3. data-aided refinement: after derotation, the four analysis symbols are
//!    modeled per bin as `X_s(k) = H(k) P_s(k) exp(j w t_s) + noise` with the
//!    training spectra `P_s` known. For a trial offset the channel that
//!    maximizes the likelihood has a closed form, which concentrates the
//!    likelihood into a one-dimensional function of the offset; a few Newton
//!    steps find its peak. This squeezes the remaining information out of
//!    the symbol timing without ever forming an explicit channel estimate.
//!
//! All autocorrelation windows skip the first short symbol and the head of
//! the guard interval, so every product compares channel steady-state
//! samples and the estimates are unbiased under multipath up to 16 taps.

use crate::frame::ComplexFrame;
use crate::impairments::apply_cfo;
use crate::preamble::{self, PREAMBLE_LEN, SYMBOL_STARTS};
use crate::spectrum::{bin_of, dft64, idft64, Symbol, NUM_BINS};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Normalized plateau metric required to declare a packet.
pub const DETECTION_THRESHOLD: f64 = 0.8;

/// Sliding detection window (samples); 112 lag-16 products fit inside it.
const PLATEAU_WINDOW: usize = 128;
const PLATEAU_PRODUCTS: usize = PLATEAU_WINDOW - 16;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("no packet found: detection metric never exceeded {DETECTION_THRESHOLD}")]
    NoPacketFound,
    #[error("stream of {0} samples is shorter than one {PREAMBLE_LEN}-sample preamble")]
    StreamTooShort(usize),
}

/// Estimated CFO attached to one captured frame, as stored for the fusion
/// database. `device_id` is only known for training captures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfoRecord {
    pub device_id: Option<String>,
    pub antenna_index: u8,
    pub estimated_cfo_hz: f64,
    pub frame_id: u32,
}

fn conj(c: Complex64) -> Complex64 {
    c.conj()
}

/// Finds the first sample of the preamble in a stream containing at most one
/// packet.
pub fn detect_packet(stream: &ComplexFrame) -> Result<usize, FrontendError> {
    let x = stream.samples();
    if x.len() < PREAMBLE_LEN {
        return Err(FrontendError::StreamTooShort(x.len()));
    }
    let fs = stream.sample_rate_hz();
    let last_n = x.len() - PLATEAU_WINDOW;

    let metric_at = |n: usize| -> (f64, Complex64) {
        let mut p = Complex64::new(0.0, 0.0);
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for i in 0..PLATEAU_PRODUCTS {
            let a = x[n + i];
            let b = x[n + i + 16];
            p += b * conj(a);
            e1 += a.norm_sqr();
            e2 += b.norm_sqr();
        }
        let denom = (e1 * e2).sqrt();
        if denom <= f64::MIN_POSITIVE {
            (0.0, p)
        } else {
            (p.norm() / denom, p)
        }
    };

    let mut first_hit = None;
    for n in 0..=last_n {
        if metric_at(n).0 > DETECTION_THRESHOLD {
            first_hit = Some(n);
            break;
        }
    }
    let hit = first_hit.ok_or(FrontendError::NoPacketFound)?;

    // Ride the plateau to its best point for the coarse frequency readout.
    let mut best_metric = 0.0;
    let mut best_p = Complex64::new(0.0, 0.0);
    for n in hit..=(hit + 48).min(last_n) {
        let (m, p) = metric_at(n);
        if m > best_metric {
            best_metric = m;
            best_p = p;
        }
    }
    let coarse_hz = best_p.arg() * fs / (2.0 * PI * 16.0);

    // Cross-correlate the coarse-derotated stream against the known long
    // training symbol; the true symbol repeats at lag 64, so score both
    // copies together. The search band generously brackets the plateau hit.
    let lts_ref: Symbol = idft64(&preamble::lts_spectrum());
    let step = -2.0 * PI * coarse_hz / fs;
    let xcorr = |u: usize| -> f64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, r) in lts_ref.iter().enumerate() {
            let y = x[u + i] * Complex64::from_polar(1.0, step * (u + i) as f64);
            acc += y * conj(*r);
        }
        acc.norm()
    };
    let lo = hit + 100;
    let hi = (hit + 280).min(x.len() - 2 * NUM_BINS);
    if lo > hi {
        return Err(FrontendError::NoPacketFound);
    }
    let mut best_u = lo;
    let mut best_score = f64::NEG_INFINITY;
    for u in lo..=hi {
        let score = xcorr(u) + xcorr(u + NUM_BINS);
        if score > best_score {
            best_score = score;
            best_u = u;
        }
    }
    // The long training symbol starts 192 samples into the preamble.
    best_u.checked_sub(192).ok_or(FrontendError::NoPacketFound)
}

/// Three-stage CFO estimate from a start-aligned preamble.
pub fn estimate_cfo(preamble_frame: &ComplexFrame) -> Result<f64, FrontendError> {
    let x = preamble_frame.samples();
    if x.len() < PREAMBLE_LEN {
        return Err(FrontendError::StreamTooShort(x.len()));
    }
    let fs = preamble_frame.sample_rate_hz();

    // Coarse: lag-16 products over the STF steady state, range +-fs/32.
    let mut p1 = Complex64::new(0.0, 0.0);
    for i in 16..144 {
        p1 += x[i + 16] * conj(x[i]);
    }
    let coarse = p1.arg() * fs / (2.0 * PI * 16.0);

    // Fine: lag-64 products over the LTF steady state, range +-fs/128,
    // unwrapped against the coarse estimate.
    let mut p2 = Complex64::new(0.0, 0.0);
    for i in 176..256 {
        p2 += x[i + 64] * conj(x[i]);
    }
    let base = p2.arg() * fs / (2.0 * PI * 64.0);
    let wraps = ((coarse - base) * 64.0 / fs).round();
    let mut estimate = base + wraps * fs / 64.0;

    // Data-aided refinement; a second pass re-linearizes around the
    // corrected value.
    for _ in 0..2 {
        estimate += residual_ml(x, fs, estimate);
    }
    Ok(estimate)
}

/// Residual offset (Hz) left after derotating by `cfo_hz`, from the
/// concentrated likelihood over the four analysis symbols.
///
/// Per bin the model is `X_s(k) = H(k) P_s(k) exp(j w t_s) + noise`. For a
/// trial `w` the maximizing channel is closed-form, which reduces the
/// likelihood to
///
/// ```text
/// L(w) = sum_k |sum_s X_s(k) conj(P_s(k)) exp(-j w t_s)|^2 / sum_s |P_s(k)|^2
/// ```
///
/// maximized here by Newton steps from `w = 0`. The residual left by the
/// fine stage is a few hundred Hz, far inside the likelihood's 62.5 kHz main
/// lobe, so the iteration is safely local.
fn residual_ml(x: &[Complex64], fs: f64, cfo_hz: f64) -> f64 {
    let step = -2.0 * PI * cfo_hz / fs;
    let y: Vec<Complex64> = x
        .iter()
        .take(PREAMBLE_LEN)
        .enumerate()
        .map(|(n, v)| v * Complex64::from_polar(1.0, step * n as f64))
        .collect();

    let sets = preamble::subcarrier_sets();
    let sts = preamble::sts_spectrum();
    let lts = preamble::lts_spectrum();
    let refs: [&crate::spectrum::SpectrumVector; 4] = [&sts, &sts, &lts, &lts];

    let spectra: Vec<_> = SYMBOL_STARTS
        .iter()
        .map(|&s| {
            let mut sym = [Complex64::new(0.0, 0.0); NUM_BINS];
            sym.copy_from_slice(&y[s..s + NUM_BINS]);
            dft64(&sym)
        })
        .collect();

    // Matched terms a[s] = X_s conj(P_s) and the reference energy per bin.
    // Long-symbol bins cover the short-symbol bins, so the union is zeta_ltf.
    struct BinTerms {
        a: [Complex64; 4],
        denom: f64,
    }
    let terms: Vec<BinTerms> = sets
        .zeta_ltf
        .iter()
        .map(|&k| {
            let bin = bin_of(k);
            let mut a = [Complex64::new(0.0, 0.0); 4];
            let mut denom = 0.0;
            for s in 0..4 {
                let p = refs[s].bins()[bin];
                a[s] = spectra[s].bins()[bin] * conj(p);
                denom += p.norm_sqr();
            }
            BinTerms { a, denom }
        })
        .collect();

    let t: [f64; 4] = [16.0, 80.0, 192.0, 256.0];
    debug_assert_eq!(t.map(|v| v as usize), SYMBOL_STARTS);

    // Newton iterations on dL/dw; w in rad/sample.
    let mut w = 0.0f64;
    let cap = 2.0 * PI * 3_000.0 / fs;
    for _ in 0..6 {
        let e: Vec<Complex64> = t.iter().map(|&ts| Complex64::from_polar(1.0, -w * ts)).collect();
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for bt in &terms {
            let mut c = Complex64::new(0.0, 0.0);
            let mut c1 = Complex64::new(0.0, 0.0);
            let mut c2 = Complex64::new(0.0, 0.0);
            for s in 0..4 {
                let term = bt.a[s] * e[s];
                c += term;
                c1 += term * Complex64::new(0.0, -t[s]);
                c2 -= term * (t[s] * t[s]);
            }
            d1 += 2.0 * (conj(c) * c1).re / bt.denom;
            d2 += 2.0 * ((conj(c) * c2).re + c1.norm_sqr()) / bt.denom;
        }
        if d2 >= 0.0 {
            break;
        }
        let mut delta = -d1 / d2;
        delta = delta.clamp(-cap, cap);
        w += delta;
        if delta.abs() < 2.0 * PI * 0.01 / fs {
            break;
        }
    }
    w.clamp(-cap, cap) * fs / (2.0 * PI)
}

/// Derotates the frame by the estimated offset.
pub fn compensate_cfo(frame: &ComplexFrame, cfo_hz: f64) -> ComplexFrame {
    apply_cfo(frame, -cfo_hz)
}

/// Scales the frame to exactly unit RMS. Frames are non-zero by
/// construction, so this cannot fail.
pub fn normalize_power(frame: &ComplexFrame) -> ComplexFrame {
    frame.scaled(Complex64::new(1.0 / frame.rms(), 0.0))
}

/// A fully preprocessed capture: aligned, derotated, unit power.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub preamble: ComplexFrame,
    pub estimated_cfo_hz: f64,
    pub start_index: usize,
}

/// Runs the whole front end on a raw stream.
pub fn preprocess(stream: &ComplexFrame) -> Result<Preprocessed, FrontendError> {
    let start_index = detect_packet(stream)?;
    let aligned = stream.slice(start_index, PREAMBLE_LEN);
    let estimated_cfo_hz = estimate_cfo(&aligned)?;
    let compensated = compensate_cfo(&aligned, estimated_cfo_hz);
    Ok(Preprocessed { preamble: normalize_power(&compensated), estimated_cfo_hz, start_index })
}
