//! Complementary "ring" filter banks applied by pointwise multiplication
//! in the Fourier domain.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::LinearMap;
use crate::error::{Error, Result};
use crate::fft::{fft_in_place, next_pow2};
use rustfft::num_complex::Complex64;

/// Filter shape parameters, in cycles per sample (Nyquist = 0.5).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankParams {
    pub cutoff: f64,
    pub transition_width: f64,
}

impl Default for BankParams {
    fn default() -> Self {
        Self {
            cutoff: 0.2,
            transition_width: 0.05,
        }
    }
}

/// Real, non-negative frequency responses that sum to one at every bin.
#[derive(Clone, Debug, PartialEq)]
pub struct RingFilterBank {
    length: usize,
    params: BankParams,
    responses: Vec<Vec<f64>>,
}

/// Low-band response at normalized frequency `f ∈ [0, 0.5]`.
fn low_band_response(f: f64, cutoff: f64, tw: f64) -> f64 {
    let lo = cutoff - tw / 2.0;
    let hi = cutoff + tw / 2.0;
    if tw == 0.0 {
        return if f <= cutoff { 1.0 } else { 0.0 };
    }
    if f <= lo {
        1.0
    } else if f >= hi {
        0.0
    } else {
        0.5 * (1.0 + (PI * (f - lo) / tw).cos())
    }
}

impl RingFilterBank {
    /// Two-band bank: a raised-cosine low band and its complement.
    pub fn design(length: usize, params: BankParams, num_bands: usize) -> Result<Self> {
        let BankParams {
            cutoff,
            transition_width: tw,
        } = params;
        if num_bands != 2 {
            return Err(Error::Config(format!(
                "only two-band banks can be designed, got {num_bands}"
            )));
        }
        if length == 0 {
            return Err(Error::Config("filter length must be positive".into()));
        }
        if !(tw >= 0.0) || !(cutoff - tw / 2.0 > 0.0) || !(cutoff + tw / 2.0 < 0.5) {
            return Err(Error::Config(format!(
                "cutoff {cutoff} ± {} must lie inside (0, 0.5)",
                tw / 2.0
            )));
        }
        let low: Vec<f64> = (0..length)
            .map(|k| {
                let f = k.min(length - k) as f64 / length as f64;
                low_band_response(f, cutoff, tw)
            })
            .collect();
        let high = low.iter().map(|h| 1.0 - h).collect();
        Ok(Self {
            length,
            params,
            responses: vec![low, high],
        })
    }

    /// Bank sized for signals of length `signal_len`, padded to a power of two.
    pub fn for_signal(signal_len: usize, params: BankParams) -> Result<Self> {
        Self::design(next_pow2(signal_len), params, 2)
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn params(&self) -> BankParams {
        self.params
    }

    pub fn num_bands(&self) -> usize {
        self.responses.len()
    }

    pub fn response(&self, band: usize) -> &[f64] {
        &self.responses[band]
    }

    fn spectrum(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        if x.len() > self.length {
            return Err(Error::shape(
                "ring_filter",
                format!(
                    "signal length {} exceeds bank length {}",
                    x.len(),
                    self.length
                ),
            ));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.length];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        fft_in_place(&mut buf, false);
        Ok(buf)
    }

    /// `crop(ifft(H_band ⊙ fft(pad(x))))`.
    pub fn apply_band(&self, band: usize, x: &[f64]) -> Result<Vec<f64>> {
        if band >= self.num_bands() {
            return Err(Error::Config(format!("band {band} out of range")));
        }
        let mut spec = self.spectrum(x)?;
        for (s, h) in spec.iter_mut().zip(&self.responses[band]) {
            *s *= h;
        }
        fft_in_place(&mut spec, true);
        let inv = 1.0 / self.length as f64;
        Ok(spec[..x.len()].iter().map(|c| c.re * inv).collect())
    }

    /// Energy of each band's output over the padded length, `(1/L)·Σ H²|X|²`.
    pub fn band_energy(&self, x: &[f64]) -> Result<Vec<f64>> {
        let spec = self.spectrum(x)?;
        let inv = 1.0 / self.length as f64;
        Ok(self
            .responses
            .iter()
            .map(|h| {
                spec.iter()
                    .zip(h)
                    .map(|(s, hv)| hv * hv * s.norm_sqr())
                    .sum::<f64>()
                    * inv
            })
            .collect())
    }

    /// Fraction of energy in `band`; zero for an all-zero signal.
    pub fn band_fraction(&self, band: usize, x: &[f64]) -> Result<f64> {
        let e = self.band_energy(x)?;
        let total: f64 = e.iter().sum();
        Ok(if total > 0.0 { e[band] / total } else { 0.0 })
    }
}

/// One band of a bank as a differentiable row map. Its multiplier is real
/// and symmetric, so the map is its own adjoint.
#[derive(Clone, Debug)]
pub struct BandFilter {
    bank: Arc<RingFilterBank>,
    band: usize,
}

impl BandFilter {
    pub fn new(bank: Arc<RingFilterBank>, band: usize) -> Result<Self> {
        if band >= bank.num_bands() {
            return Err(Error::Config(format!("band {band} out of range")));
        }
        Ok(Self { bank, band })
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.bank
            .apply_band(self.band, x)
            .expect("band filter applied to a signal longer than its bank")
    }
}

impl LinearMap for BandFilter {
    fn apply(&self, row: &[f64]) -> Vec<f64> {
        BandFilter::apply(self, row)
    }

    fn adjoint(&self, row: &[f64]) -> Vec<f64> {
        BandFilter::apply(self, row)
    }

    fn name(&self) -> &'static str {
        "band_filter"
    }
}
