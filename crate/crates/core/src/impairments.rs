//! Channel impairments applied to a transmitted preamble.
//!
//! The transmit chain runs in a fixed order: carrier frequency offset is
//! applied to the ideal baseband signal first, the amplifier model distorts
//! the rotated signal, the multipath channel convolves the result, and
//! receiver noise is added last. The CFO-before-amplifier order matters for
//! any kernel with degree 2 or higher because the pure-product nonlinearity
//! multiplies the rotation into higher harmonics; swapping the order changes
//! the output.

use crate::frame::ComplexFrame;
use crate::seed;
use crate::volterra::{volterra_time_1d, VolterraKernel};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Number of taps drawn for a non-line-of-sight channel.
pub const NLOS_TAPS: usize = 8;
/// Exponential power-delay-profile decay constant, in samples.
pub const NLOS_DELAY_SPREAD: f64 = 3.0;
/// Rician K-factor (linear) of the line-of-sight channel.
pub const LOS_K_FACTOR: f64 = 10.0;
/// Hard cap on channel length; keeps the delay spread well inside one
/// 16-sample guard interval.
pub const MAX_TAPS: usize = 16;
/// Per-frame tap phase jitter of a static channel, radians (about 5 degrees).
pub const STATIC_PHASE_JITTER_RAD: f64 = 5.0 * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// Rician fading with a dominant first tap.
    Los,
    /// Rayleigh fading with an exponential power delay profile.
    Nlos,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Los => "los",
            ChannelKind::Nlos => "nlos",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "los" => Ok(ChannelKind::Los),
            "nlos" => Ok(ChannelKind::Nlos),
            other => Err(format!("unknown channel kind: {other}")),
        }
    }
}

impl serde::Serialize for ChannelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ChannelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelFading {
    /// One tap realization per link; frames see only small phase jitter.
    Static,
    /// A fresh independent realization for every frame.
    Dynamic,
}

impl fmt::Display for ChannelFading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelFading::Static => "static",
            ChannelFading::Dynamic => "dynamic",
        })
    }
}

impl FromStr for ChannelFading {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(ChannelFading::Static),
            "dynamic" => Ok(ChannelFading::Dynamic),
            other => Err(format!("unknown fading mode: {other}")),
        }
    }
}

impl serde::Serialize for ChannelFading {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ChannelFading {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn complex_gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> Complex64 {
    let n = Normal::new(0.0, sigma / 2.0f64.sqrt()).unwrap();
    Complex64::new(n.sample(rng), n.sample(rng))
}

/// Draws one channel realization with exactly unit tap energy.
pub fn draw_taps(kind: ChannelKind, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps = match kind {
        ChannelKind::Nlos => {
            let mut t = Vec::with_capacity(NLOS_TAPS);
            for i in 0..NLOS_TAPS {
                let power = (-(i as f64) / NLOS_DELAY_SPREAD).exp();
                t.push(complex_gaussian(&mut rng, power.sqrt()));
            }
            t
        }
        ChannelKind::Los => {
            // Dominant deterministic first tap with random phase, scattered
            // Rayleigh tail carrying 1/(K+1) of the mean energy.
            let k = LOS_K_FACTOR;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut t = vec![Complex64::from_polar((k / (k + 1.0)).sqrt(), phase)];
            let tail_len = NLOS_TAPS - 1;
            let tail_norm: f64 =
                (0..tail_len).map(|i| (-(i as f64) / NLOS_DELAY_SPREAD).exp()).sum();
            for i in 0..tail_len {
                let power = (-(i as f64) / NLOS_DELAY_SPREAD).exp() / tail_norm / (k + 1.0);
                t.push(complex_gaussian(&mut rng, power.sqrt()));
            }
            t
        }
    };
    assert!(taps.len() <= MAX_TAPS);
    let energy: f64 = taps.iter().map(|h| h.norm_sqr()).sum();
    let scale = 1.0 / energy.sqrt();
    for h in &mut taps {
        *h *= scale;
    }
    taps
}

/// A link's channel across the frames of a capture session.
#[derive(Debug, Clone)]
pub struct ChannelInstance {
    kind: ChannelKind,
    fading: ChannelFading,
    seed: u64,
    base: Vec<Complex64>,
}

impl ChannelInstance {
    pub fn new(kind: ChannelKind, fading: ChannelFading, seed: u64) -> Self {
        let base = draw_taps(kind, seed);
        Self { kind, fading, seed, base }
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn fading(&self) -> ChannelFading {
        self.fading
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Taps seen by one frame. Static links keep the base realization up to
    /// a small per-frame, per-tap phase jitter; dynamic links redraw.
    pub fn frame_taps(&self, frame: u64) -> Vec<Complex64> {
        match self.fading {
            ChannelFading::Dynamic => draw_taps(self.kind, seed::mix(self.seed, &[frame])),
            ChannelFading::Static => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed::mix(self.seed, &[frame, 0x7461_7073]));
                self.base
                    .iter()
                    .map(|h| {
                        let jitter =
                            rng.gen_range(-STATIC_PHASE_JITTER_RAD..STATIC_PHASE_JITTER_RAD);
                        h * Complex64::from_polar(1.0, jitter)
                    })
                    .collect()
            }
        }
    }
}

/// Rotates every sample by the carrier frequency offset: sample `n` picks up
/// `exp(j 2 pi f n / fs)`.
pub fn apply_cfo(frame: &ComplexFrame, cfo_hz: f64) -> ComplexFrame {
    let fs = frame.sample_rate_hz();
    let step = 2.0 * PI * cfo_hz / fs;
    let samples: Vec<Complex64> = frame
        .samples()
        .iter()
        .enumerate()
        .map(|(n, x)| x * Complex64::from_polar(1.0, step * n as f64))
        .collect();
    ComplexFrame::new(samples, fs).expect("rotation preserves frame validity")
}

/// Convolves the frame with the channel taps, truncated to the input length.
pub fn apply_channel(taps: &[Complex64], frame: &ComplexFrame) -> ComplexFrame {
    assert!(!taps.is_empty() && taps.len() <= MAX_TAPS, "channel must have 1..=16 taps");
    let x = frame.samples();
    let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
    for (s, &h) in taps.iter().enumerate() {
        if h == Complex64::new(0.0, 0.0) {
            continue;
        }
        for t in s..x.len() {
            y[t] += h * x[t - s];
        }
    }
    ComplexFrame::new(y, frame.sample_rate_hz()).expect("channel output is a valid frame")
}

/// Adds complex white Gaussian noise at the requested SNR, measured against
/// the frame's own mean power at the point of injection.
pub fn add_awgn(frame: &ComplexFrame, snr_db: f64, seed: u64) -> ComplexFrame {
    add_awgn_with_reference(frame, frame.mean_power(), snr_db, seed)
}

/// AWGN whose variance is set against an explicit signal power instead of
/// the frame's own mean. Needed for zero-padded capture streams, where the
/// padding would otherwise dilute the reference and overstate the SNR.
pub fn add_awgn_with_reference(
    frame: &ComplexFrame,
    reference_power: f64,
    snr_db: f64,
    seed: u64,
) -> ComplexFrame {
    let noise_power = reference_power * 10f64.powf(-snr_db / 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Complex64> = frame
        .samples()
        .iter()
        .map(|x| x + complex_gaussian(&mut rng, noise_power.sqrt()))
        .collect();
    ComplexFrame::new(samples, frame.sample_rate_hz()).expect("noisy frame is valid")
}

/// Per-frame impairment settings for [`transmit`].
#[derive(Debug, Clone, Copy)]
pub struct FrameImpairments {
    pub cfo_hz: f64,
    /// `None` disables receiver noise.
    pub snr_db: Option<f64>,
    pub noise_seed: u64,
}

/// Full chain: CFO rotation, amplifier, channel, then noise.
pub fn transmit(
    ideal: &ComplexFrame,
    kernel: &VolterraKernel,
    taps: &[Complex64],
    imp: &FrameImpairments,
) -> ComplexFrame {
    let rotated = apply_cfo(ideal, imp.cfo_hz);
    let amplified = ComplexFrame::new(
        volterra_time_1d(kernel, rotated.samples()),
        ideal.sample_rate_hz(),
    )
    .expect("amplifier output is a valid frame");
    let faded = apply_channel(taps, &amplified);
    match imp.snr_db {
        Some(snr) => add_awgn(&faded, snr, imp.noise_seed),
        None => faded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preamble;

    fn ideal() -> ComplexFrame {
        preamble::generate_preamble(preamble::SAMPLE_RATE_HZ).unwrap()
    }

    fn unit_tap() -> Vec<Complex64> {
        vec![Complex64::new(1.0, 0.0)]
    }

    #[test]
    fn test_cfo_rotation_phase() {
        // At fs = 20 MHz and f = 100 kHz, sample 50 rotates by
        // 2*pi*1e5*50/2e7 = pi/2.
        let frame = ideal();
        let rotated = apply_cfo(&frame, 100e3);
        let expected = frame.samples()[50] * Complex64::new(0.0, 1.0);
        assert!((rotated.samples()[50] - expected).norm() < 1e-12);
        // Sample 0 is untouched.
        assert_eq!(rotated.samples()[0], frame.samples()[0]);
    }

    #[test]
    fn test_cfo_round_trip() {
        let frame = ideal();
        let there = apply_cfo(&frame, 37.5e3);
        let back = apply_cfo(&there, -37.5e3);
        for (a, b) in back.samples().iter().zip(frame.samples()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn test_channel_taps_unit_energy() {
        for seed in 0..50 {
            for kind in [ChannelKind::Los, ChannelKind::Nlos] {
                let taps = draw_taps(kind, seed);
                let energy: f64 = taps.iter().map(|h| h.norm_sqr()).sum();
                assert!((energy - 1.0).abs() < 1e-12, "{kind} seed {seed}: {energy}");
                assert!(taps.len() <= MAX_TAPS);
            }
        }
    }

    #[test]
    fn test_los_first_tap_dominates() {
        for seed in 0..50 {
            let taps = draw_taps(ChannelKind::Los, seed);
            // K = 10 puts about 91% of mean energy in the direct path.
            assert!(taps[0].norm_sqr() > 0.6, "seed {seed}: {}", taps[0].norm_sqr());
        }
    }

    #[test]
    fn test_nlos_profile_decays() {
        // Average energy per tap over many draws should follow the
        // exponential profile; tap 0 carries roughly e^(8/3) ~ 14x tap 8's
        // energy share. A loose factor check keeps the test stable.
        let mut first = 0.0;
        let mut last = 0.0;
        let draws = 2000;
        for seed in 0..draws {
            let taps = draw_taps(ChannelKind::Nlos, seed);
            first += taps[0].norm_sqr();
            last += taps[NLOS_TAPS - 1].norm_sqr();
        }
        assert!(first / last > 5.0, "profile ratio {}", first / last);
    }

    #[test]
    fn test_static_channel_keeps_magnitudes() {
        let inst = ChannelInstance::new(ChannelKind::Los, ChannelFading::Static, 42);
        let f0 = inst.frame_taps(0);
        let f1 = inst.frame_taps(1);
        assert_ne!(f0, f1);
        assert_eq!(f0, inst.frame_taps(0), "frame taps must be frame-deterministic");
        for (a, b) in f0.iter().zip(&f1) {
            // Phase-only jitter: magnitudes are frame-invariant.
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn test_static_jitter_bounded() {
        let inst = ChannelInstance::new(ChannelKind::Nlos, ChannelFading::Static, 7);
        let base = draw_taps(ChannelKind::Nlos, 7);
        for frame in 0..20 {
            for (jittered, orig) in inst.frame_taps(frame).iter().zip(&base) {
                let delta = (jittered / orig).arg().abs();
                assert!(delta <= STATIC_PHASE_JITTER_RAD + 1e-12, "jitter {delta}");
            }
        }
    }

    #[test]
    fn test_dynamic_channel_redraws_per_frame() {
        let inst = ChannelInstance::new(ChannelKind::Nlos, ChannelFading::Dynamic, 9);
        let f0 = inst.frame_taps(0);
        let f1 = inst.frame_taps(1);
        assert_ne!(f0, f1);
        // Same frame index reproduces the same taps.
        assert_eq!(f0, inst.frame_taps(0));
    }

    #[test]
    fn test_awgn_hits_target_snr() {
        // Long frame so the sample estimate of noise power is tight.
        let samples: Vec<Complex64> = (0..40_000)
            .map(|n| Complex64::from_polar(1.0, 0.1 * n as f64))
            .collect();
        let frame = ComplexFrame::new(samples, 20e6).unwrap();
        let noisy = add_awgn(&frame, 20.0, 1234);
        let noise_power: f64 = noisy
            .samples()
            .iter()
            .zip(frame.samples())
            .map(|(y, x)| (y - x).norm_sqr())
            .sum::<f64>()
            / frame.samples().len() as f64;
        let measured_snr = 10.0 * (frame.mean_power() / noise_power).log10();
        assert!((measured_snr - 20.0).abs() < 0.3, "measured {measured_snr} dB");
    }

    #[test]
    fn test_awgn_is_seed_deterministic() {
        let frame = ideal();
        let a = add_awgn(&frame, 15.0, 5);
        let b = add_awgn(&frame, 15.0, 5);
        let c = add_awgn(&frame, 15.0, 6);
        assert_eq!(a.samples(), b.samples());
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn test_awgn_external_reference_ignores_padding() {
        // A frame padded with an equal stretch of zeros halves its mean
        // power; the explicit reference must keep the noise level unchanged.
        let body = ideal();
        let mut samples = body.samples().to_vec();
        samples.extend(vec![Complex64::new(0.0, 0.0); body.len()]);
        let padded = ComplexFrame::new(samples, body.sample_rate_hz()).unwrap();
        let a = add_awgn_with_reference(&padded, body.mean_power(), 20.0, 42);
        let b = add_awgn(&padded, 20.0, 42);
        let na: f64 = a.samples()[body.len()..].iter().map(|v| v.norm_sqr()).sum();
        let nb: f64 = b.samples()[body.len()..].iter().map(|v| v.norm_sqr()).sum();
        // Padded mean power is half the body power, so plain add_awgn puts
        // in 3 dB less noise than the referenced call.
        let ratio = 10.0 * (na / nb).log10();
        assert!((ratio - 3.01).abs() < 0.4, "ratio {ratio} dB");
    }

    #[test]
    fn test_transmit_identity_chain_is_transparent() {
        let frame = ideal();
        let imp = FrameImpairments { cfo_hz: 0.0, snr_db: None, noise_seed: 0 };
        let out = transmit(&frame, &VolterraKernel::identity(), &unit_tap(), &imp);
        assert_eq!(out.samples(), frame.samples());
    }

    #[test]
    fn test_cfo_amplifier_order_matters_for_nonlinear_kernels() {
        // For a degree-3 kernel the rotation does not commute with the
        // amplifier; for the identity kernel it does.
        let frame = ideal();
        let kernel = crate::volterra::table1_kernel(crate::volterra::Table1Setup::Combined);
        let cfo = 30e3;

        let cfo_first = {
            let r = apply_cfo(&frame, cfo);
            volterra_time_1d(&kernel, r.samples())
        };
        let pa_first = {
            let amplified =
                ComplexFrame::new(volterra_time_1d(&kernel, frame.samples()), 20e6).unwrap();
            apply_cfo(&amplified, cfo).samples().to_vec()
        };
        let diff: f64 = cfo_first
            .iter()
            .zip(&pa_first)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let norm: f64 = pa_first.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        assert!(diff / norm > 1e-4, "orders should differ, rel {}", diff / norm);

        let identity = VolterraKernel::identity();
        let a = {
            let r = apply_cfo(&frame, cfo);
            volterra_time_1d(&identity, r.samples())
        };
        let b = {
            let amplified =
                ComplexFrame::new(volterra_time_1d(&identity, frame.samples()), 20e6).unwrap();
            apply_cfo(&amplified, cfo).samples().to_vec()
        };
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        assert!(diff < 1e-9);
    }

    #[test]
    fn test_transmit_noise_changes_with_seed() {
        let frame = ideal();
        let kernel = VolterraKernel::identity();
        let mk = |seed| FrameImpairments { cfo_hz: 1e3, snr_db: Some(25.0), noise_seed: seed };
        let a = transmit(&frame, &kernel, &unit_tap(), &mk(1));
        let b = transmit(&frame, &kernel, &unit_tap(), &mk(1));
        let c = transmit(&frame, &kernel, &unit_tap(), &mk(2));
        assert_eq!(a.samples(), b.samples());
        assert_ne!(a.samples(), c.samples());
    }
}
