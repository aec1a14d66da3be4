//! 64-point spectra indexed by OFDM subcarrier number.
//!
//! All spectral quantities in the pipeline live on a 64-point DFT grid.
//! Subcarrier index `k` in `[-32, 31]` maps to DFT bin `(k + 64) mod 64`, so
//! negative subcarriers occupy the upper half of the bin array. That
//! convention is fixed here and used everywhere else.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, OnceLock};

/// DFT length shared by every symbol and spectrum in the pipeline.
pub const NUM_BINS: usize = 64;

/// One 64-sample analysis symbol.
pub type Symbol = [Complex64; NUM_BINS];

/// Maps a subcarrier index in `[-32, 31]` to its DFT bin.
pub fn bin_of(subcarrier: i32) -> usize {
    assert!(
        (-32..=31).contains(&subcarrier),
        "subcarrier index {subcarrier} outside [-32, 31]"
    );
    ((subcarrier + NUM_BINS as i32) % NUM_BINS as i32) as usize
}

/// A 64-bin complex spectrum stored in DFT bin order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumVector {
    bins: [Complex64; NUM_BINS],
}

impl SpectrumVector {
    pub fn zeros() -> Self {
        Self { bins: [Complex64::new(0.0, 0.0); NUM_BINS] }
    }

    pub fn from_bins(bins: [Complex64; NUM_BINS]) -> Self {
        Self { bins }
    }

    /// Bins in DFT order (bin 0 = DC).
    pub fn bins(&self) -> &[Complex64; NUM_BINS] {
        &self.bins
    }

    /// Value at a subcarrier index in `[-32, 31]`.
    pub fn at(&self, subcarrier: i32) -> Complex64 {
        self.bins[bin_of(subcarrier)]
    }

    pub fn set(&mut self, subcarrier: i32, value: Complex64) {
        self.bins[bin_of(subcarrier)] = value;
    }

    /// Magnitudes at the given subcarriers, in the order given.
    pub fn magnitudes(&self, subcarriers: &[i32]) -> Vec<f64> {
        subcarriers.iter().map(|&k| self.at(k).norm()).collect()
    }

    /// Largest magnitude over the given subcarriers.
    pub fn max_magnitude(&self, subcarriers: &[i32]) -> f64 {
        subcarriers.iter().map(|&k| self.at(k).norm()).fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &SpectrumVector) {
        for (a, b) in self.bins.iter_mut().zip(other.bins.iter()) {
            *a += b;
        }
    }
}

fn fft_plans() -> &'static (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    static PLANS: OnceLock<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)> = OnceLock::new();
    PLANS.get_or_init(|| {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(NUM_BINS);
        let inverse = planner.plan_fft_inverse(NUM_BINS);
        (forward, inverse)
    })
}

/// Unnormalized 64-point DFT of one symbol.
pub fn dft64(symbol: &Symbol) -> SpectrumVector {
    let mut buf = *symbol;
    fft_plans().0.process(&mut buf);
    SpectrumVector::from_bins(buf)
}

/// Inverse 64-point DFT with 1/64 normalization, so `idft64(dft64(x)) == x`.
pub fn idft64(spectrum: &SpectrumVector) -> Symbol {
    let mut buf = *spectrum.bins();
    fft_plans().1.process(&mut buf);
    let scale = 1.0 / NUM_BINS as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Independent O(N^2) DFT used as the oracle for the FFT-backed path.
    fn naive_dft64(symbol: &Symbol) -> [Complex64; NUM_BINS] {
        let mut out = [Complex64::new(0.0, 0.0); NUM_BINS];
        for (k, bin) in out.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, x) in symbol.iter().enumerate() {
                let phase = -2.0 * PI * (k * n) as f64 / NUM_BINS as f64;
                acc += x * Complex64::new(phase.cos(), phase.sin());
            }
            *bin = acc;
        }
        out
    }

    fn test_symbol() -> Symbol {
        let mut sym = [Complex64::new(0.0, 0.0); NUM_BINS];
        for (n, v) in sym.iter_mut().enumerate() {
            let t = n as f64;
            *v = Complex64::new((0.3 * t).sin() + 0.2, (0.17 * t).cos() - 0.1);
        }
        sym
    }

    #[test]
    fn test_bin_convention() {
        assert_eq!(bin_of(0), 0);
        assert_eq!(bin_of(1), 1);
        assert_eq!(bin_of(31), 31);
        assert_eq!(bin_of(-32), 32);
        assert_eq!(bin_of(-1), 63);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn test_bin_of_rejects_out_of_range() {
        bin_of(32);
    }

    #[test]
    fn test_dft64_matches_naive_oracle() {
        let sym = test_symbol();
        let fast = dft64(&sym);
        let slow = naive_dft64(&sym);
        for k in 0..NUM_BINS {
            let err = (fast.bins()[k] - slow[k]).norm();
            assert!(err < 1e-10, "bin {k}: fft {} vs naive {}", fast.bins()[k], slow[k]);
        }
    }

    #[test]
    fn test_idft64_inverts_dft64() {
        let sym = test_symbol();
        let back = idft64(&dft64(&sym));
        for n in 0..NUM_BINS {
            assert!((back[n] - sym[n]).norm() < 1e-12, "sample {n} not recovered");
        }
    }

    #[test]
    fn test_single_tone_lands_on_its_bin() {
        // x[n] = exp(j 2 pi * 5 n / 64) puts all energy on subcarrier +5.
        let mut sym = [Complex64::new(0.0, 0.0); NUM_BINS];
        for (n, v) in sym.iter_mut().enumerate() {
            let phase = 2.0 * PI * 5.0 * n as f64 / NUM_BINS as f64;
            *v = Complex64::new(phase.cos(), phase.sin());
        }
        let spec = dft64(&sym);
        assert!((spec.at(5).norm() - 64.0).abs() < 1e-9);
        for k in -32..32 {
            if k != 5 {
                assert!(spec.at(k).norm() < 1e-9, "leakage at subcarrier {k}");
            }
        }
    }

    #[test]
    fn test_negative_subcarrier_is_upper_bin() {
        // x[n] = exp(-j 2 pi * 3 n / 64) is subcarrier -3, i.e. DFT bin 61.
        let mut sym = [Complex64::new(0.0, 0.0); NUM_BINS];
        for (n, v) in sym.iter_mut().enumerate() {
            let phase = -2.0 * PI * 3.0 * n as f64 / NUM_BINS as f64;
            *v = Complex64::new(phase.cos(), phase.sin());
        }
        let spec = dft64(&sym);
        assert!((spec.at(-3).norm() - 64.0).abs() < 1e-9);
        assert!((spec.bins()[61].norm() - 64.0).abs() < 1e-9);
    }
}
