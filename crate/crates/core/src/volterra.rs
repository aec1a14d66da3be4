//! Baseband Volterra-series power-amplifier models.
//!
//! An order-`d` term of the series is
//!
//! ```text
//! g_d(t) = sum over (m_1..m_d) in [0, M)^d of
//!          alpha_d(m_1..m_d) * u(t - m_1) * ... * u(t - m_d)
//! ```
//!
//! and the model output is `G(u) = g_1 + g_2 + ... + g_D`. Products are plain
//! (no conjugate terms), which is what makes distortion land on out-of-band
//! bins as spectral regrowth. Kernels are symmetrized at construction, so two
//! coefficient tensors that differ only by index permutation model the same
//! device.
//!
//! Three evaluation paths are provided and tested against each other:
//!
//! - [`volterra_time_bruteforce`]: the defining nested sum, `O(N * M^D)`.
//! - [`volterra_time_1d`]: an exact reduction to a bank of 1-D convolutions.
//!   For each nondecreasing delay tuple `r = (r_1 <= .. <= r_{d-1})` the
//!   auxiliary signal `v_r(t) = u(t) * prod_l u(t - r_l)` is convolved with
//!   `beta_r(s) = C(0, r) * alpha_d(s, s + r_1, .., s + r_{d-1})`, where
//!   `C(0, r)` counts distinct permutations of the multiset `{0, r_1, ..}`.
//! - [`volterra_freq`]: the same decomposition on the 64-point DFT grid with
//!   circular semantics, used to predict symbol spectra directly.

use crate::spectrum::{dft64, Symbol, SpectrumVector, NUM_BINS};
use crate::preamble;
use num_complex::Complex64;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolterraError {
    #[error("kernel must have at least one order")]
    NoOrders,
    #[error("memory depth must be in [1, 64], got {0}")]
    BadMemoryDepth(usize),
    #[error("order {order} expects {expected} coefficients, got {got}")]
    BadOrderLength { order: usize, expected: usize, got: usize },
    #[error("order {order} contains a non-finite coefficient")]
    NonFiniteCoefficient { order: usize },
    #[error("unknown Table-1 setup name: {0}")]
    UnknownSetup(String),
    #[error("kernel bank has no entry for {0}")]
    KernelNotFound(String),
    #[error("kernel for {setup} must have degree {expected_d} and memory {expected_m}, got ({got_d}, {got_m})")]
    SetupShapeMismatch { setup: String, expected_d: usize, expected_m: usize, got_d: usize, got_m: usize },
    #[error("malformed kernel bank: {0}")]
    Malformed(String),
    #[error("kernel bank io error: {0}")]
    Io(String),
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// Number of distinct permutations of the multiset {0, r_1, .., r_{d-1}}
/// for a nondecreasing tuple `r`.
fn permutation_count(r: &[usize]) -> u64 {
    let d = r.len() + 1;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    *counts.entry(0).or_insert(0) += 1;
    for &v in r {
        *counts.entry(v).or_insert(0) += 1;
    }
    let mut denom = 1u64;
    for &c in counts.values() {
        denom *= factorial(c);
    }
    factorial(d) / denom
}

/// Calls `f` for every nondecreasing tuple of the given length with entries
/// in `[0, max)`. A zero-length tuple yields one empty call.
fn for_each_nondecreasing(len: usize, max: usize, mut f: impl FnMut(&[usize])) {
    if len == 0 {
        f(&[]);
        return;
    }
    let mut t = vec![0usize; len];
    loop {
        f(&t);
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if t[i] + 1 < max {
                let v = t[i] + 1;
                for slot in t.iter_mut().skip(i) {
                    *slot = v;
                }
                break;
            }
        }
    }
}

fn encode_index(mi: &[usize], m: usize) -> usize {
    mi.iter().fold(0, |acc, &v| acc * m + v)
}

fn decode_index(mut idx: usize, d: usize, m: usize) -> Vec<usize> {
    let mut mi = vec![0usize; d];
    for slot in mi.iter_mut().rev() {
        *slot = idx % m;
        idx /= m;
    }
    mi
}

/// Truncated causal convolution: `out[t] = sum_s h[s] * x[t - s]`, with the
/// output clipped to the input length.
fn convolve_trunc(h: &[Complex64], x: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (s, &hs) in h.iter().enumerate() {
        if hs == Complex64::new(0.0, 0.0) {
            continue;
        }
        for t in s..x.len() {
            out[t] += hs * x[t - s];
        }
    }
    out
}

/// A symmetrized Volterra kernel of degree `D` and memory depth `M`.
#[derive(Debug, Clone)]
pub struct VolterraKernel {
    memory_depth: usize,
    /// `orders[d - 1]` is the order-`d` coefficient tensor, row-major with
    /// `M^d` entries, symmetric under index permutation.
    orders: Vec<Vec<Complex64>>,
}

impl VolterraKernel {
    /// Validates shapes and symmetrizes every order.
    ///
    /// Symmetrization replaces each coefficient group that shares a multiset
    /// of indices with the group mean; groups that are already uniform are
    /// left untouched so round trips are bit-exact.
    pub fn new(orders: Vec<Vec<Complex64>>, memory_depth: usize) -> Result<Self, VolterraError> {
        if orders.is_empty() {
            return Err(VolterraError::NoOrders);
        }
        if memory_depth == 0 || memory_depth > NUM_BINS {
            return Err(VolterraError::BadMemoryDepth(memory_depth));
        }
        let mut orders = orders;
        for (i, data) in orders.iter_mut().enumerate() {
            let d = i + 1;
            let expected = memory_depth.pow(d as u32);
            if data.len() != expected {
                return Err(VolterraError::BadOrderLength { order: d, expected, got: data.len() });
            }
            if data.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
                return Err(VolterraError::NonFiniteCoefficient { order: d });
            }
            if d >= 2 {
                symmetrize(data, d, memory_depth);
            }
        }
        Ok(Self { memory_depth, orders })
    }

    /// Pass-through device: degree 1, memory 1, unit gain.
    pub fn identity() -> Self {
        Self::new(vec![vec![Complex64::new(1.0, 0.0)]], 1).expect("identity kernel is valid")
    }

    pub fn degree(&self) -> usize {
        self.orders.len()
    }

    pub fn memory_depth(&self) -> usize {
        self.memory_depth
    }

    pub fn order_coefficients(&self, d: usize) -> &[Complex64] {
        &self.orders[d - 1]
    }

    /// Coefficient `alpha_d(m_1, .., m_d)`.
    pub fn alpha(&self, d: usize, indices: &[usize]) -> Complex64 {
        assert_eq!(indices.len(), d, "order-{d} coefficient needs {d} indices");
        assert!(indices.iter().all(|&m| m < self.memory_depth));
        self.orders[d - 1][encode_index(indices, self.memory_depth)]
    }

    /// Brute-force response of the order-`d` term alone, with the input
    /// zero-extended into the past.
    pub fn order_response(&self, d: usize, input: &[Complex64]) -> Vec<Complex64> {
        let m = self.memory_depth;
        let data = &self.orders[d - 1];
        let mut out = vec![Complex64::new(0.0, 0.0); input.len()];
        let mut tuple = vec![0usize; d];
        loop {
            let a = data[encode_index(&tuple, m)];
            if a != Complex64::new(0.0, 0.0) {
                for (t, slot) in out.iter_mut().enumerate() {
                    let mut prod = a;
                    let mut alive = true;
                    for &mm in &tuple {
                        if t < mm {
                            alive = false;
                            break;
                        }
                        prod *= input[t - mm];
                    }
                    if alive {
                        *slot += prod;
                    }
                }
            }
            // Odometer over ordered tuples in [0, M)^d.
            let mut i = d;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                tuple[i] += 1;
                if tuple[i] < m {
                    break;
                }
                tuple[i] = 0;
            }
        }
    }

    /// Circular brute-force response of the order-`d` term on one 64-sample
    /// symbol, indices taken modulo 64.
    fn order_response_circular(&self, d: usize, symbol: &Symbol) -> Symbol {
        let m = self.memory_depth;
        let data = &self.orders[d - 1];
        let mut out = [Complex64::new(0.0, 0.0); NUM_BINS];
        let mut tuple = vec![0usize; d];
        loop {
            let a = data[encode_index(&tuple, m)];
            if a != Complex64::new(0.0, 0.0) {
                for (t, slot) in out.iter_mut().enumerate() {
                    let mut prod = a;
                    for &mm in &tuple {
                        prod *= symbol[(t + NUM_BINS - mm) % NUM_BINS];
                    }
                    *slot += prod;
                }
            }
            let mut i = d;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                tuple[i] += 1;
                if tuple[i] < m {
                    break;
                }
                tuple[i] = 0;
            }
        }
    }
}

fn symmetrize(data: &mut [Complex64], d: usize, m: usize) {
    // Group flat indices by the sorted multi-index they decode to.
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for idx in 0..data.len() {
        let mut mi = decode_index(idx, d, m);
        mi.sort_unstable();
        groups.entry(encode_index(&mi, m)).or_default().push(idx);
    }
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        let first = data[members[0]];
        if members.iter().all(|&i| data[i] == first) {
            continue;
        }
        let sum: Complex64 = members.iter().map(|&i| data[i]).sum();
        let mean = sum / members.len() as f64;
        for &i in members {
            data[i] = mean;
        }
    }
}

/// Defining nested-sum evaluation, `O(N * M^D)`. The reference all other
/// paths are checked against.
pub fn volterra_time_bruteforce(kernel: &VolterraKernel, input: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); input.len()];
    for d in 1..=kernel.degree() {
        let term = kernel.order_response(d, input);
        for (o, v) in out.iter_mut().zip(term) {
            *o += v;
        }
    }
    out
}

/// Brute-force evaluation with circular (mod-64) indexing on one symbol.
pub fn volterra_time_bruteforce_circular(kernel: &VolterraKernel, symbol: &Symbol) -> Symbol {
    let mut out = [Complex64::new(0.0, 0.0); NUM_BINS];
    for d in 1..=kernel.degree() {
        let term = kernel.order_response_circular(d, symbol);
        for (o, v) in out.iter_mut().zip(term) {
            *o += v;
        }
    }
    out
}

/// Evaluation through the 1-D decomposition; equal to the brute force up to
/// floating-point reassociation.
pub fn volterra_time_1d(kernel: &VolterraKernel, input: &[Complex64]) -> Vec<Complex64> {
    let m = kernel.memory_depth;
    let mut out = convolve_trunc(&kernel.orders[0], input);
    for d in 2..=kernel.degree() {
        for_each_nondecreasing(d - 1, m, |r| {
            let c = permutation_count(r) as f64;
            let r_last = r[r.len() - 1];
            let beta: Vec<Complex64> = (0..=(m - 1 - r_last))
                .map(|s| {
                    let mut mi = Vec::with_capacity(d);
                    mi.push(s);
                    mi.extend(r.iter().map(|&rl| s + rl));
                    kernel.alpha(d, &mi) * c
                })
                .collect();
            let v: Vec<Complex64> = (0..input.len())
                .map(|t| {
                    let mut p = input[t];
                    for &rl in r {
                        if t < rl {
                            return Complex64::new(0.0, 0.0);
                        }
                        p *= input[t - rl];
                    }
                    p
                })
                .collect();
            let term = convolve_trunc(&beta, &v);
            for (o, val) in out.iter_mut().zip(term) {
                *o += val;
            }
        });
    }
    out
}

fn padded_spectrum(taps: &[Complex64]) -> SpectrumVector {
    assert!(taps.len() <= NUM_BINS);
    let mut sym = [Complex64::new(0.0, 0.0); NUM_BINS];
    sym[..taps.len()].copy_from_slice(taps);
    dft64(&sym)
}

/// Frequency-domain evaluation on one 64-sample symbol.
///
/// Computes `S = A_1 .* U + sum_{d>=2} sum_r V_r .* B_r` on the 64-point DFT
/// grid, where `V_r` is the DFT of the circularly-formed auxiliary signal and
/// `B_r` the DFT of the zero-padded `beta_r`. Bin-wise products correspond to
/// circular convolution in time, so this matches the DFT of
/// [`volterra_time_bruteforce_circular`].
pub fn volterra_freq(kernel: &VolterraKernel, symbol: &Symbol) -> SpectrumVector {
    let m = kernel.memory_depth;
    let u = dft64(symbol);
    let a1 = padded_spectrum(&kernel.orders[0]);
    let mut bins = [Complex64::new(0.0, 0.0); NUM_BINS];
    for k in 0..NUM_BINS {
        bins[k] = a1.bins()[k] * u.bins()[k];
    }
    let mut out = SpectrumVector::from_bins(bins);

    for d in 2..=kernel.degree() {
        for_each_nondecreasing(d - 1, m, |r| {
            let c = permutation_count(r) as f64;
            let r_last = r[r.len() - 1];
            let beta: Vec<Complex64> = (0..=(m - 1 - r_last))
                .map(|s| {
                    let mut mi = Vec::with_capacity(d);
                    mi.push(s);
                    mi.extend(r.iter().map(|&rl| s + rl));
                    kernel.alpha(d, &mi) * c
                })
                .collect();
            let b = padded_spectrum(&beta);

            let mut v = [Complex64::new(0.0, 0.0); NUM_BINS];
            for (t, slot) in v.iter_mut().enumerate() {
                let mut p = symbol[t];
                for &rl in r {
                    p *= symbol[(t + NUM_BINS - rl) % NUM_BINS];
                }
                *slot = p;
            }
            let vspec = dft64(&v);

            let mut term = [Complex64::new(0.0, 0.0); NUM_BINS];
            for k in 0..NUM_BINS {
                term[k] = vspec.bins()[k] * b.bins()[k];
            }
            out.add_assign(&SpectrumVector::from_bins(term));
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Table-1 setups and the kernel bank
// ---------------------------------------------------------------------------

/// The three amplifier configurations used for regrowth illustration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table1Setup {
    /// Memory only: degree 1, memory depth 2.
    Memory,
    /// Nonlinearity only: degree 3, memory depth 1.
    Nonlinearity,
    /// Memory and nonlinearity: degree 3, memory depth 2.
    Combined,
}

impl Table1Setup {
    pub const ALL: [Table1Setup; 3] =
        [Table1Setup::Memory, Table1Setup::Nonlinearity, Table1Setup::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Table1Setup::Memory => "memory",
            Table1Setup::Nonlinearity => "nonlinearity",
            Table1Setup::Combined => "combined",
        }
    }

    /// Expected (degree, memory depth).
    pub fn shape(self) -> (usize, usize) {
        match self {
            Table1Setup::Memory => (1, 2),
            Table1Setup::Nonlinearity => (3, 1),
            Table1Setup::Combined => (3, 2),
        }
    }
}

impl FromStr for Table1Setup {
    type Err = VolterraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "memory" => Ok(Table1Setup::Memory),
            "nonlinearity" => Ok(Table1Setup::Nonlinearity),
            "combined" => Ok(Table1Setup::Combined),
            other => Err(VolterraError::UnknownSetup(other.to_string())),
        }
    }
}

impl fmt::Display for Table1Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn polar(r: f64, theta: f64) -> Complex64 {
    Complex64::from_polar(r, theta)
}

/// Reference kernel for one Table-1 setup.
///
/// The linear path has unit gain with a 0.1 first memory tap; nonlinear
/// coefficients are scaled so regrowth sits roughly 25-45 dB below the
/// active-bin level of a unit-RMS preamble symbol.
pub fn table1_kernel(setup: Table1Setup) -> VolterraKernel {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    match setup {
        Table1Setup::Memory => {
            VolterraKernel::new(vec![vec![one, Complex64::new(0.1, 0.0)]], 2).unwrap()
        }
        Table1Setup::Nonlinearity => VolterraKernel::new(
            vec![vec![one], vec![polar(0.02, 0.4)], vec![polar(0.01, -0.9)]],
            1,
        )
        .unwrap(),
        Table1Setup::Combined => {
            let a2 = vec![polar(0.02, 0.4), polar(0.008, -0.2), zero, polar(0.005, 1.1)];
            let a3 = vec![
                polar(0.01, -0.9),
                polar(0.004, 0.3),
                zero,
                zero,
                zero,
                zero,
                zero,
                polar(0.002, 2.0),
            ];
            VolterraKernel::new(
                vec![vec![one, Complex64::new(0.1, 0.0)], a2, a3],
                2,
            )
            .unwrap()
        }
    }
}

/// A random per-device kernel: degree 3, memory depth 2, unit linear gain,
/// remaining coefficients i.i.d. complex Gaussian with per-order scales
/// 0.05 (memory tap), 0.01 (order 2), and 0.005 (order 3).
pub fn random_device_kernel(seed: u64) -> VolterraKernel {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |sigma: f64| {
        let n = Normal::new(0.0, sigma / 2.0f64.sqrt()).unwrap();
        Complex64::new(n.sample(&mut rng), n.sample(&mut rng))
    };
    let order1 = vec![Complex64::new(1.0, 0.0), draw(0.05)];
    let order2: Vec<Complex64> = (0..4).map(|_| draw(0.01)).collect();
    let order3: Vec<Complex64> = (0..8).map(|_| draw(0.005)).collect();
    VolterraKernel::new(vec![order1, order2, order3], 2).expect("random kernel is valid")
}

/// A named collection of device kernels with JSON persistence.
#[derive(Debug, Clone, Default)]
pub struct KernelBank {
    entries: Vec<(String, VolterraKernel)>,
}

impl KernelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, device_id: impl Into<String>, kernel: VolterraKernel) {
        self.entries.push((device_id.into(), kernel));
    }

    pub fn get(&self, device_id: &str) -> Option<&VolterraKernel> {
        self.entries.iter().find(|(id, _)| id == device_id).map(|(_, k)| k)
    }

    pub fn entries(&self) -> &[(String, VolterraKernel)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Value {
        let kernels: Vec<Value> = self.entries.iter().map(|(id, k)| kernel_to_json(id, k)).collect();
        Value::Array(kernels)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("bank serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, VolterraError> {
        let value: Value =
            serde_json::from_str(s).map_err(|e| VolterraError::Malformed(e.to_string()))?;
        let arr = value
            .as_array()
            .ok_or_else(|| VolterraError::Malformed("top level must be an array".into()))?;
        let mut bank = KernelBank::new();
        for item in arr {
            let (id, kernel) = kernel_from_json(item)?;
            bank.insert(id, kernel);
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<(), VolterraError> {
        std::fs::write(path, self.to_json_string()).map_err(|e| VolterraError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, VolterraError> {
        let text = std::fs::read_to_string(path).map_err(|e| VolterraError::Io(e.to_string()))?;
        Self::from_json_str(&text)
    }
}

/// The default bank holding the three Table-1 reference kernels.
pub fn table1_bank() -> KernelBank {
    let mut bank = KernelBank::new();
    for setup in Table1Setup::ALL {
        bank.insert(setup.name(), table1_kernel(setup));
    }
    bank
}

fn kernel_to_json(device_id: &str, kernel: &VolterraKernel) -> Value {
    fn order_value(data: &[Complex64], d: usize, m: usize) -> Value {
        if d == 1 {
            Value::Array(data.iter().map(|c| json!([c.re, c.im])).collect())
        } else {
            let stride = data.len() / m;
            Value::Array(
                (0..m)
                    .map(|i| order_value(&data[i * stride..(i + 1) * stride], d - 1, m))
                    .collect(),
            )
        }
    }
    let alpha: Vec<Value> = kernel
        .orders
        .iter()
        .enumerate()
        .map(|(i, data)| order_value(data, i + 1, kernel.memory_depth))
        .collect();
    json!({
        "device_id": device_id,
        "D": kernel.degree(),
        "M": kernel.memory_depth,
        "alpha": alpha,
    })
}

fn kernel_from_json(value: &Value) -> Result<(String, VolterraKernel), VolterraError> {
    let obj = value
        .as_object()
        .ok_or_else(|| VolterraError::Malformed("kernel entry must be an object".into()))?;
    let id = obj
        .get("device_id")
        .and_then(Value::as_str)
        .ok_or_else(|| VolterraError::Malformed("missing device_id".into()))?
        .to_string();
    let d = obj
        .get("D")
        .and_then(Value::as_u64)
        .ok_or_else(|| VolterraError::Malformed("missing D".into()))? as usize;
    let m = obj
        .get("M")
        .and_then(Value::as_u64)
        .ok_or_else(|| VolterraError::Malformed("missing M".into()))? as usize;
    let alpha = obj
        .get("alpha")
        .and_then(Value::as_array)
        .ok_or_else(|| VolterraError::Malformed("missing alpha".into()))?;
    if alpha.len() != d {
        return Err(VolterraError::Malformed(format!(
            "alpha lists {} orders, D = {d}",
            alpha.len()
        )));
    }

    fn flatten(value: &Value, depth: usize, m: usize, out: &mut Vec<Complex64>) -> Result<(), VolterraError> {
        let arr = value
            .as_array()
            .ok_or_else(|| VolterraError::Malformed("alpha levels must be arrays".into()))?;
        if depth == 0 {
            // Leaf: [re, im].
            if arr.len() != 2 {
                return Err(VolterraError::Malformed("leaf must be [re, im]".into()));
            }
            let re = arr[0]
                .as_f64()
                .ok_or_else(|| VolterraError::Malformed("re must be a number".into()))?;
            let im = arr[1]
                .as_f64()
                .ok_or_else(|| VolterraError::Malformed("im must be a number".into()))?;
            out.push(Complex64::new(re, im));
            return Ok(());
        }
        if arr.len() != m {
            return Err(VolterraError::Malformed(format!(
                "dimension must have {m} entries, got {}",
                arr.len()
            )));
        }
        for item in arr {
            flatten(item, depth - 1, m, out)?;
        }
        Ok(())
    }

    let mut orders = Vec::with_capacity(d);
    for (i, order_value) in alpha.iter().enumerate() {
        let mut flat = Vec::new();
        flatten(order_value, i + 1, m, &mut flat)?;
        orders.push(flat);
    }
    let kernel = VolterraKernel::new(orders, m)?;
    Ok((id, kernel))
}

/// Spectra of the first STF and LTF analysis symbols through one Table-1
/// setup's kernel from the bank.
#[derive(Debug, Clone)]
pub struct SetupSpectra {
    pub setup: Table1Setup,
    pub stf: SpectrumVector,
    pub ltf: SpectrumVector,
}

/// Runs the ideal preamble's symbols through the named setup kernel.
pub fn simulate_table1(setup: Table1Setup, bank: &KernelBank) -> Result<SetupSpectra, VolterraError> {
    let kernel = bank
        .get(setup.name())
        .ok_or_else(|| VolterraError::KernelNotFound(setup.name().to_string()))?;
    let (expected_d, expected_m) = setup.shape();
    if kernel.degree() != expected_d || kernel.memory_depth() != expected_m {
        return Err(VolterraError::SetupShapeMismatch {
            setup: setup.name().to_string(),
            expected_d,
            expected_m,
            got_d: kernel.degree(),
            got_m: kernel.memory_depth(),
        });
    }
    let ideal = preamble::generate_preamble(preamble::SAMPLE_RATE_HZ)
        .expect("ideal preamble generates");
    let symbols = preamble::segment_symbols(&ideal).expect("ideal preamble segments");
    Ok(SetupSpectra {
        setup,
        stf: volterra_freq(kernel, &symbols.stf1),
        ltf: volterra_freq(kernel, &symbols.ltf1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn random_kernel(d: usize, m: usize, rng: &mut ChaCha8Rng) -> VolterraKernel {
        let orders = (1..=d)
            .map(|dd| {
                (0..m.pow(dd as u32))
                    .map(|_| Complex64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
                    .collect()
            })
            .collect();
        VolterraKernel::new(orders, m).unwrap()
    }

    fn naive_dft64(symbol: &Symbol) -> Vec<Complex64> {
        (0..NUM_BINS)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (n, x) in symbol.iter().enumerate() {
                    let phase = -2.0 * PI * (k * n) as f64 / NUM_BINS as f64;
                    acc += x * Complex64::new(phase.cos(), phase.sin());
                }
                acc
            })
            .collect()
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn test_permutation_counts() {
        // C(0, 0) = 1: the multiset {0, 0} has one distinct arrangement
        // of two equal entries -> 2!/2! = 1.
        assert_eq!(permutation_count(&[0]), 1);
        // C(0, 1) = 2: {0, 1} -> 2!/1!1! = 2.
        assert_eq!(permutation_count(&[1]), 2);
        // C(0, 1, 1) = 3: {0, 1, 1} -> 3!/(1!2!) = 3.
        assert_eq!(permutation_count(&[1, 1]), 3);
        // C(0, 1, 2) = 6: all distinct -> 3!.
        assert_eq!(permutation_count(&[1, 2]), 6);
        // C(0, 0, 0) = 1.
        assert_eq!(permutation_count(&[0, 0]), 1);
    }

    #[test]
    fn test_linear_memory_kernel_on_ramp() {
        // alpha_1 = (1, 0.1) on the ramp u = 1..5:
        // y[0] = 1, y[1] = 2 + 0.1*1 = 2.1, y[2] = 3 + 0.2, y[3] = 4 + 0.3,
        // y[4] = 5 + 0.4.
        let kernel = table1_kernel(Table1Setup::Memory);
        let input: Vec<Complex64> = (1..=5).map(|v| Complex64::new(v as f64, 0.0)).collect();
        let out = volterra_time_bruteforce(&kernel, &input);
        let expected = [1.0, 2.1, 3.2, 4.3, 5.4];
        for (t, &e) in expected.iter().enumerate() {
            assert!((out[t].re - e).abs() < 1e-12, "t={t}: {} vs {e}", out[t].re);
            assert!(out[t].im.abs() < 1e-12);
        }
    }

    #[test]
    fn test_order2_hand_computed() {
        // D=2, M=2 with symmetric alpha_2 = [[0.5, 0.25], [0.25, 0.1]] and
        // u = (1, 2):
        // y[0] = 0.5*1*1 = 0.5
        // y[1] = 0.5*2*2 + 0.25*2*1 + 0.25*1*2 + 0.1*1*1 = 2 + 1 + 0.1 = 3.1
        let orders = vec![
            vec![Complex64::new(0.0, 0.0); 2],
            vec![
                Complex64::new(0.5, 0.0),
                Complex64::new(0.25, 0.0),
                Complex64::new(0.25, 0.0),
                Complex64::new(0.1, 0.0),
            ],
        ];
        let kernel = VolterraKernel::new(orders, 2).unwrap();
        let input = vec![Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)];
        let out = volterra_time_bruteforce(&kernel, &input);
        assert!((out[0].re - 0.5).abs() < 1e-12);
        assert!((out[1].re - 3.1).abs() < 1e-12);
    }

    #[test]
    fn test_symmetrization_preserves_response() {
        // An asymmetric order-2 tensor and its symmetrized form produce the
        // same output because the product u(t-m1)u(t-m2) is symmetric.
        let asym = vec![
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            vec![
                Complex64::new(0.0, 0.0),
                Complex64::new(0.8, 0.2),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        ];
        let kernel = VolterraKernel::new(asym, 2).unwrap();
        // Symmetrized off-diagonals are both (0.8 + 0.2j) / 2.
        let got = kernel.alpha(2, &[0, 1]);
        assert!((got - Complex64::new(0.4, 0.1)).norm() < 1e-15);
        assert_eq!(kernel.alpha(2, &[0, 1]), kernel.alpha(2, &[1, 0]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_input(16, &mut rng);
        let out = volterra_time_bruteforce(&kernel, &input);
        // Reference: evaluate the asymmetric tensor by the defining sum.
        let mut expected = vec![Complex64::new(0.0, 0.0); 16];
        for (t, e) in expected.iter_mut().enumerate() {
            *e = input[t];
            if t >= 1 {
                *e += Complex64::new(0.8, 0.2) * input[t] * input[t - 1];
            }
        }
        assert!(rel_err(&out, &expected) < 1e-12);
    }

    #[test]
    fn test_symmetrization_idempotent_bitwise() {
        let kernel = random_kernel(3, 3, &mut ChaCha8Rng::seed_from_u64(11));
        let again =
            VolterraKernel::new(kernel.orders.clone(), kernel.memory_depth).unwrap();
        for d in 1..=3 {
            let a = kernel.order_coefficients(d);
            let b = again.order_coefficients(d);
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn test_identity_kernel_passes_through() {
        let kernel = VolterraKernel::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_input(32, &mut rng);
        let out = volterra_time_bruteforce(&kernel, &input);
        assert_eq!(out, input);
        let out1d = volterra_time_1d(&kernel, &input);
        assert_eq!(out1d, input);
    }

    #[test]
    fn test_1d_decomposition_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..60 {
            let d = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=3);
            let kernel = random_kernel(d, m, &mut rng);
            let input = random_input(48, &mut rng);
            let brute = volterra_time_bruteforce(&kernel, &input);
            let oned = volterra_time_1d(&kernel, &input);
            let err = rel_err(&oned, &brute);
            assert!(err < 1e-12, "trial {trial} (D={d}, M={m}): rel err {err}");
        }
    }

    #[test]
    fn test_freq_matches_circular_time_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..40 {
            let d = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=3);
            let kernel = random_kernel(d, m, &mut rng);
            let mut symbol = [Complex64::new(0.0, 0.0); NUM_BINS];
            for s in symbol.iter_mut() {
                *s = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
            let freq = volterra_freq(&kernel, &symbol);
            let circ = volterra_time_bruteforce_circular(&kernel, &symbol);
            let oracle = naive_dft64(&circ);
            let err = rel_err(freq.bins(), &oracle);
            assert!(err < 1e-10, "trial {trial} (D={d}, M={m}): rel err {err}");
        }
    }

    #[test]
    fn test_order_homogeneity() {
        // g_d(c * u) = c^d * g_d(u) for the pure-product series.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let kernel = random_kernel(3, 2, &mut rng);
        let input = random_input(24, &mut rng);
        let c = Complex64::new(0.7, -0.4);
        let scaled: Vec<Complex64> = input.iter().map(|x| x * c).collect();
        for d in 1..=3 {
            let base = kernel.order_response(d, &input);
            let resp = kernel.order_response(d, &scaled);
            let expected: Vec<Complex64> = base.iter().map(|x| x * c.powi(d as i32)).collect();
            assert!(rel_err(&resp, &expected) < 1e-12, "order {d} not homogeneous");
        }
    }

    #[test]
    fn test_kernel_validation_errors() {
        assert_eq!(VolterraKernel::new(vec![], 2).unwrap_err(), VolterraError::NoOrders);
        assert_eq!(
            VolterraKernel::new(vec![vec![Complex64::new(1.0, 0.0)]], 0).unwrap_err(),
            VolterraError::BadMemoryDepth(0)
        );
        let err = VolterraKernel::new(vec![vec![Complex64::new(1.0, 0.0); 3]], 2).unwrap_err();
        assert_eq!(err, VolterraError::BadOrderLength { order: 1, expected: 2, got: 3 });
        let err = VolterraKernel::new(
            vec![vec![Complex64::new(f64::NAN, 0.0), Complex64::new(0.0, 0.0)]],
            2,
        )
        .unwrap_err();
        assert_eq!(err, VolterraError::NonFiniteCoefficient { order: 1 });
    }

    #[test]
    fn test_setup_parsing() {
        assert_eq!("memory".parse::<Table1Setup>().unwrap(), Table1Setup::Memory);
        assert_eq!("Nonlinearity".parse::<Table1Setup>().unwrap(), Table1Setup::Nonlinearity);
        assert!(matches!(
            "linear".parse::<Table1Setup>(),
            Err(VolterraError::UnknownSetup(_))
        ));
    }

    #[test]
    fn test_table1_shapes() {
        for setup in Table1Setup::ALL {
            let kernel = table1_kernel(setup);
            let (d, m) = setup.shape();
            assert_eq!(kernel.degree(), d, "{setup}");
            assert_eq!(kernel.memory_depth(), m, "{setup}");
        }
    }

    #[test]
    fn test_simulate_table1_memory_keeps_inactive_bins_empty() {
        let bank = table1_bank();
        let spectra = simulate_table1(Table1Setup::Memory, &bank).unwrap();
        let sets = preamble::subcarrier_sets();
        assert!(spectra.ltf.max_magnitude(&sets.omega_ltf) <= 1e-10);
        assert!(spectra.stf.max_magnitude(&sets.omega_stf) <= 1e-10);
    }

    #[test]
    fn test_simulate_table1_nonlinearity_produces_regrowth() {
        let bank = table1_bank();
        for setup in [Table1Setup::Nonlinearity, Table1Setup::Combined] {
            let spectra = simulate_table1(setup, &bank).unwrap();
            let edge: Vec<i32> = (-32..=-27).collect();
            let level = spectra.ltf.max_magnitude(&edge);
            assert!(level > 1e-6, "{setup}: edge-bin level {level}");
        }
    }

    #[test]
    fn test_simulate_table1_regrowth_sits_below_active_bins() {
        // The distortion floor should sit tens of dB below the active bins,
        // in the 25-45 dB design window.
        let bank = table1_bank();
        let sets = preamble::subcarrier_sets();
        let spectra = simulate_table1(Table1Setup::Combined, &bank).unwrap();
        let active = spectra.ltf.max_magnitude(&sets.zeta_ltf);
        let regrowth = spectra.ltf.max_magnitude(&sets.omega_ltf);
        let gap_db = 20.0 * (active / regrowth).log10();
        assert!((20.0..50.0).contains(&gap_db), "regrowth gap {gap_db} dB");
    }

    #[test]
    fn test_simulate_table1_missing_kernel() {
        let bank = KernelBank::new();
        assert!(matches!(
            simulate_table1(Table1Setup::Memory, &bank),
            Err(VolterraError::KernelNotFound(_))
        ));
    }

    #[test]
    fn test_simulate_table1_shape_mismatch() {
        let mut bank = KernelBank::new();
        bank.insert("memory", VolterraKernel::identity());
        assert!(matches!(
            simulate_table1(Table1Setup::Memory, &bank),
            Err(VolterraError::SetupShapeMismatch { .. })
        ));
    }

    #[test]
    fn test_bank_json_round_trip_is_bit_exact() {
        let mut bank = table1_bank();
        bank.insert("dev-extra", random_device_kernel(99));
        let text = bank.to_json_string();
        let back = KernelBank::from_json_str(&text).unwrap();
        assert_eq!(bank.len(), back.len());
        for ((id_a, ka), (id_b, kb)) in bank.entries().iter().zip(back.entries()) {
            assert_eq!(id_a, id_b);
            assert_eq!(ka.degree(), kb.degree());
            assert_eq!(ka.memory_depth(), kb.memory_depth());
            for d in 1..=ka.degree() {
                for (x, y) in ka.order_coefficients(d).iter().zip(kb.order_coefficients(d)) {
                    assert_eq!(x.re.to_bits(), y.re.to_bits(), "{id_a} order {d}");
                    assert_eq!(x.im.to_bits(), y.im.to_bits(), "{id_a} order {d}");
                }
            }
        }
    }

    #[test]
    fn test_bank_rejects_malformed_json() {
        assert!(matches!(
            KernelBank::from_json_str("{\"not\": \"an array\"}"),
            Err(VolterraError::Malformed(_))
        ));
        // Wrong inner dimension: M = 2 but order-1 list has 3 entries.
        let bad = r#"[{"device_id": "x", "D": 1, "M": 2, "alpha": [[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]]}]"#;
        assert!(KernelBank::from_json_str(bad).is_err());
    }

    #[test]
    fn test_random_device_kernels_are_seed_stable_and_distinct() {
        let a = random_device_kernel(7);
        let b = random_device_kernel(7);
        let c = random_device_kernel(8);
        assert_eq!(a.order_coefficients(1), b.order_coefficients(1));
        assert_eq!(a.order_coefficients(3), b.order_coefficients(3));
        assert_ne!(a.order_coefficients(2), c.order_coefficients(2));
        assert_eq!(a.alpha(1, &[0]), Complex64::new(1.0, 0.0));
    }
}
