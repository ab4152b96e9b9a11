//! Conversion between time-domain HRIRs and the (magnitude, ITD)
//! representation.
//!
//! The phase of an HRTF is discarded apart from the interaural delay: a
//! response is rebuilt from its magnitude with the minimum phase and the ITD
//! is reinstated by delaying the lagging ear by a whole number of samples.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stereo impulse response, `[left, right]`, equal lengths.
pub type Hrir = [Vec<f64>; 2];

/// Relative floor applied before any logarithm: values are clamped to this
/// fraction of the per-channel maximum.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// One-sided magnitude spectrum of a stereo response, `[bin][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSpectrum {
    bins: usize,
    values: Vec<f64>,
}

impl MagnitudeSpectrum {
    /// `values` is `[bin][channel]`, row-major, all entries finite and ≥ 0.
    pub fn new(bins: usize, values: Vec<f64>) -> Result<Self> {
        if bins < 2 || values.len() != bins * 2 {
            return Err(Error::Shape(format!(
                "{} values for {bins} bins x 2 channels",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invariant("non-negative magnitude", format!("value {v}")));
        }
        Ok(Self { bins, values })
    }

    pub fn from_channels(left: &[f64], right: &[f64]) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::Shape("channels differ in length".into()));
        }
        let values = left.iter().zip(right).flat_map(|(&l, &r)| [l, r]).collect();
        Self::new(left.len(), values)
    }

    /// Builds a spectrum from dB values laid out `[bin][channel]`.
    pub fn from_db(bins: usize, db: &[f64]) -> Result<Self> {
        Self::new(bins, db.iter().map(|d| 10f64.powf(d / 20.0)).collect())
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Length of the time-domain response this spectrum describes.
    pub fn fft_len(&self) -> usize {
        2 * (self.bins - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, channel: usize) -> f64 {
        self.values[bin * 2 + channel]
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.values.iter().skip(channel).step_by(2).copied().collect()
    }

    /// Clamps each channel to [`MAGNITUDE_FLOOR`] times its maximum.
    pub fn floored(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for c in 0..2 {
            let max = self.channel(c).into_iter().fold(0.0, f64::max);
            if max <= 0.0 {
                return Err(Error::invariant(
                    "non-zero magnitude",
                    format!("channel {c} is all zeros"),
                ));
            }
            let floor = max * MAGNITUDE_FLOOR;
            for v in values.iter_mut().skip(c).step_by(2) {
                *v = v.max(floor);
            }
        }
        Ok(Self {
            bins: self.bins,
            values,
        })
    }

    /// `20 log10` of the floored magnitudes, `[bin][channel]`.
    pub fn to_db(&self) -> Result<Vec<f64>> {
        Ok(self
            .floored()?
            .values
            .iter()
            .map(|v| 20.0 * v.log10())
            .collect())
    }
}

/// Interaural time difference in samples: onset(left) − onset(right).
/// Negative when the left ear leads.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Itd(pub f64);

impl Itd {
    pub fn samples(self) -> f64 {
        self.0
    }

    pub fn micros(self, sample_rate: u32) -> f64 {
        self.0 * 1e6 / f64::from(sample_rate)
    }
}

/// Parameters of the onset-threshold ITD estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItdConfig {
    /// Onset is the first sample above this fraction of the channel peak.
    pub threshold: f64,
    pub lowpass_hz: f64,
    /// Butterworth order of each pass of the zero-phase low-pass.
    pub lowpass_order: usize,
    /// Largest plausible |ITD| in milliseconds.
    pub max_ms: f64,
}

impl Default for ItdConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            lowpass_hz: 3000.0,
            lowpass_order: 4,
            max_ms: 2.0,
        }
    }
}

impl ItdConfig {
    pub fn max_samples(&self, sample_rate: u32) -> f64 {
        self.max_ms * 1e-3 * f64::from(sample_rate)
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_fft(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_fft(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

fn check_hrir(hrir: &Hrir) -> Result<usize> {
    let len = hrir[0].len();
    if len == 0 {
        return Err(Error::InvalidArgument("empty impulse response".into()));
    }
    if hrir[1].len() != len {
        return Err(Error::Shape(format!(
            "left has {len} samples, right has {}",
            hrir[1].len()
        )));
    }
    Ok(len)
}

/// One-sided DFT magnitude per channel. Responses whose length is not a
/// power of two are zero-padded to the next one; `F = N/2 + 1`.
pub fn magnitude_spectrum(hrir: &Hrir) -> Result<MagnitudeSpectrum> {
    let len = check_hrir(hrir)?;
    let n = len.next_power_of_two().max(2);
    let fft = forward_fft(n);
    let bins = n / 2 + 1;
    let mut values = vec![0.0; bins * 2];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (c, ch) in hrir.iter().enumerate() {
        buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        for (z, &x) in buf.iter_mut().zip(ch) {
            z.re = x;
        }
        fft.process(&mut buf);
        for f in 0..bins {
            values[f * 2 + c] = buf[f].norm();
        }
    }
    MagnitudeSpectrum::new(bins, values)
}

/// Cascade of biquads, `[b0, b1, b2, a1, a2]` per section (a0 = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Biquads {
    sections: Vec<[f64; 5]>,
}

impl Biquads {
    /// Digital Butterworth low-pass by the bilinear transform with
    /// pre-warping.
    pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, sample_rate: f64) -> Result<Self> {
        if order == 0 || !(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "low-pass order {order} at {cutoff_hz} Hz for fs {sample_rate}"
            )));
        }
        let k = (PI * cutoff_hz / sample_rate).tan();
        let mut sections = Vec::new();
        for i in 0..order / 2 {
            let theta = PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.sin());
            let norm = 1.0 / (1.0 + k / q + k * k);
            let b0 = k * k * norm;
            sections.push([
                b0,
                2.0 * b0,
                b0,
                2.0 * (k * k - 1.0) * norm,
                (1.0 - k / q + k * k) * norm,
            ]);
        }
        if order % 2 == 1 {
            let b0 = k / (1.0 + k);
            sections.push([b0, b0, 0.0, (k - 1.0) / (k + 1.0), 0.0]);
        }
        Ok(Self { sections })
    }

    pub fn filter(&self, x: &mut [f64]) {
        for s in &self.sections {
            let [b0, b1, b2, a1, a2] = *s;
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in x.iter_mut() {
                let y = b0 * *v + z1;
                z1 = b1 * *v - a1 * y + z2;
                z2 = b2 * *v - a2 * y;
                *v = y;
            }
        }
    }

    /// Forward-backward filtering with zero padding of `pad` samples on
    /// both ends. The result has zero phase.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let mut buf = vec![0.0; x.len() + 2 * pad];
        buf[pad..pad + x.len()].copy_from_slice(x);
        self.filter(&mut buf);
        buf.reverse();
        self.filter(&mut buf);
        buf.reverse();
        buf[pad..pad + x.len()].to_vec()
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain(&self, freq_hz: f64, sample_rate: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|[b0, b1, b2, a1, a2]| {
                ((*b0 + z1 * *b1 + z2 * *b2) / (1.0 + z1 * *a1 + z2 * *a2)).norm()
            })
            .product()
    }
}

fn onset(signal: &[f64], threshold: f64) -> Option<usize> {
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= 1e-12 {
        return None;
    }
    signal.iter().position(|v| v.abs() > threshold * peak)
}

/// Integer-sample ITD from low-passed onsets.
pub fn estimate_itd(hrir: &Hrir, sample_rate: u32, config: &ItdConfig) -> Result<Itd> {
    let len = check_hrir(hrir)?;
    for (ch, name) in hrir.iter().zip(["left", "right"]) {
        if ch.iter().all(|v| v.abs() <= 1e-12) {
            return Err(Error::SilentChannel(name));
        }
    }
    let lp = Biquads::butterworth_lowpass(config.lowpass_order, config.lowpass_hz, f64::from(sample_rate))?;
    let mut onsets = [0usize; 2];
    for (c, name) in ["left", "right"].into_iter().enumerate() {
        let filtered = lp.filtfilt(&hrir[c], len);
        onsets[c] = onset(&filtered, config.threshold).ok_or(Error::SilentChannel(name))?;
    }
    let itd = onsets[0] as f64 - onsets[1] as f64;
    let max = config.max_samples(sample_rate);
    if itd.abs() > max {
        return Err(Error::invariant(
            "|ITD| within configured maximum",
            format!("{itd} samples exceeds {max:.1}"),
        ));
    }
    Ok(Itd(itd))
}

/// Minimum-phase responses from one-sided magnitudes by folding the real
/// cepstrum. Magnitudes are clamped to [`MAGNITUDE_FLOOR`] of each channel
/// maximum first; the output length is `2(F − 1)`.
pub fn min_phase_reconstruct(mag: &MagnitudeSpectrum) -> Result<Hrir> {
    let mag = mag.floored()?;
    let n = mag.fft_len();
    let half = n / 2;
    let fwd = forward_fft(n);
    let inv = inverse_fft(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let out = [0, 1].map(|c| {
        for f in 0..=half {
            let l = mag.get(f, c).ln();
            buf[f] = Complex::new(l, 0.0);
            if f > 0 && f < half {
                buf[n - f] = Complex::new(l, 0.0);
            }
        }
        inv.process(&mut buf);
        let scale = 1.0 / n as f64;
        // real cepstrum -> causal folding
        for (i, z) in buf.iter_mut().enumerate() {
            let c = z.re * scale;
            let w = if i == 0 || i == half {
                1.0
            } else if i < half {
                2.0
            } else {
                0.0
            };
            *z = Complex::new(c * w, 0.0);
        }
        fwd.process(&mut buf);
        for z in buf.iter_mut() {
            *z = z.exp();
        }
        inv.process(&mut buf);
        buf.iter().map(|z| z.re * scale).collect::<Vec<f64>>()
    });
    Ok(out)
}

fn delay(x: &[f64], by: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    if by < x.len() {
        y[by..].copy_from_slice(&x[..x.len() - by]);
    }
    y
}

/// Delays the lagging ear by `|round(itd)|` samples (zero fill), plus a
/// shared `base_delay` on both ears. Positive ITD delays the left ear.
pub fn apply_itd(hrir: &Hrir, itd: Itd, base_delay: usize) -> Result<Hrir> {
    let len = check_hrir(hrir)?;
    if !itd.0.is_finite() {
        return Err(Error::Numerical(format!("non-finite ITD {}", itd.0)));
    }
    let shift = itd.0.round();
    if shift.abs() >= (len / 2) as f64 {
        return Err(Error::InvalidArgument(format!(
            "ITD shift of {shift} samples exceeds half the response length {len}"
        )));
    }
    let shift_abs = shift.abs() as usize;
    if base_delay + shift_abs >= len {
        return Err(Error::InvalidArgument(format!(
            "base delay {base_delay} plus shift {shift_abs} leaves no samples of {len}"
        )));
    }
    let (dl, dr) = if shift > 0.0 {
        (shift_abs, 0)
    } else {
        (0, shift_abs)
    };
    Ok([delay(&hrir[0], base_delay + dl), delay(&hrir[1], base_delay + dr)])
}
