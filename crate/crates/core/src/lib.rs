//! RF fingerprint identification (RFFI) over simulated IEEE 802.11 preambles.
//!
//! The crate implements the full pipeline from waveform synthesis to fused
//! device decisions:
//!
//! - [`preamble`]: legacy 802.11 STF/LTF generation, symbol segmentation, and
//!   the active/inactive subcarrier sets used everywhere else.
//! - [`volterra`]: baseband power-amplifier models as Volterra series, with a
//!   brute-force evaluator, an equivalent 1-D decomposition, and a
//!   frequency-domain path for spectral-regrowth prediction.
//! - [`impairments`]: transmitter CFO, multipath channels, and AWGN; the
//!   received-signal synthesis used by the experiment harness.
//! - [`frontend`]: packet detection, CFO estimation/compensation, power
//!   normalization, and symbol extraction.
//! - [`features`]: spectral-regrowth (SR) fingerprints plus the baseline
//!   feature families (AS, DoLoS, EQ, UD) used for comparison.
//! - [`classifier`]: a from-scratch 1-D CNN with batch normalization, Adam,
//!   and a finite-difference gradient checker.
//! - [`fusion`]: multi-antenna decision fusion, including CFO-weighted hybrid
//!   fusion and CFO-zeroing baselines.
//! - [`dataset`]: binary feature datasets, IQ frame containers, and model
//!   checkpoints with bit-exact round trips.
//! - [`harness`]: scenario synthesis, train/evaluate orchestration, metrics
//!   reports, and spectra dumps backing the CLI.
//!
//! All randomness is seeded explicitly; same seeds give byte-identical
//! outputs on a given platform.

pub mod classifier;
pub mod dataset;
pub mod features;
pub mod frame;
pub mod frontend;
pub mod fusion;
pub mod harness;
pub mod impairments;
pub mod preamble;
pub mod seed;
pub mod spectrum;
pub mod volterra;

pub use frame::ComplexFrame;
pub use spectrum::SpectrumVector;
