//! Complex baseband frames.
//!
//! A [`ComplexFrame`] is a finite, non-empty vector of complex samples tagged
//! with its sample rate. All signal-path operations in the crate consume and
//! produce frames, so the validity checks live in the constructor.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame must contain at least one sample")]
    Empty,
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("sample rate must be positive and finite, got {0}")]
    BadSampleRate(f64),
    #[error("frame has zero power")]
    ZeroPower,
}

/// A complex baseband capture or synthesis product.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrame {
    samples: Vec<Complex64>,
    sample_rate_hz: f64,
}

impl ComplexFrame {
    /// Builds a frame, rejecting empty sample vectors, non-finite samples,
    /// and non-positive sample rates.
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self, FrameError> {
        if samples.is_empty() {
            return Err(FrameError::Empty);
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(FrameError::BadSampleRate(sample_rate_hz));
        }
        for (index, s) in samples.iter().enumerate() {
            if !(s.re.is_finite() && s.im.is_finite()) {
                return Err(FrameError::NonFinite { index });
            }
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean sample power, `mean(|x|^2)`.
    pub fn mean_power(&self) -> f64 {
        let total: f64 = self.samples.iter().map(|s| s.norm_sqr()).sum();
        total / self.samples.len() as f64
    }

    /// Root-mean-square sample amplitude.
    pub fn rms(&self) -> f64 {
        self.mean_power().sqrt()
    }

    /// Returns a copy scaled by a complex constant.
    pub fn scaled(&self, c: Complex64) -> ComplexFrame {
        ComplexFrame {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Returns the sub-frame `[start, start + len)`.
    ///
    /// Panics if the range is out of bounds; callers validate ranges at the
    /// synchronization boundary.
    pub fn slice(&self, start: usize, len: usize) -> ComplexFrame {
        assert!(
            start + len <= self.samples.len(),
            "slice [{start}, {}) out of bounds for frame of {} samples",
            start + len,
            self.samples.len()
        );
        ComplexFrame {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}
