//! MFCC comparison front end and the band-limiting FIR applied before it.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::framing::{hamming, num_frames};
use crate::frontend::sinc::{hz_to_mel, mel_to_hz, sinc};
use crate::tensor::{Real, Tensor};

pub const LOG_FLOOR: f64 = 1e-10;
pub const BAND_FIR_TAPS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccSpec {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub f_low: f64,
    pub f_high: f64,
}

impl MfccSpec {
    /// 40 ms frames, 20 ms hop, 40 mel bands limited to 40 Hz – 4 kHz.
    pub fn standard(n_mfcc: usize) -> Self {
        Self {
            sample_rate: 16_000,
            frame_len: 640,
            hop: 320,
            n_mels: 40,
            n_mfcc,
            f_low: 40.0,
            f_high: 4000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate as f64 / 2.0;
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "n_mfcc must be in 1..={} (got {})",
                self.n_mels, self.n_mfcc
            )));
        }
        if !(self.f_low > 0.0 && self.f_low < self.f_high && self.f_high <= nyq) {
            return Err(Error::Config(format!(
                "mfcc band must satisfy 0 < f_low < f_high <= fs/2 (got {}..{})",
                self.f_low, self.f_high
            )));
        }
        if self.hop == 0 || self.frame_len < self.hop {
            return Err(Error::Config("mfcc frame_len must be >= hop >= 1".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self, len: usize) -> Result<usize> {
        num_frames(len, self.frame_len, self.hop)
    }
}

pub struct MfccExtractor {
    spec: MfccSpec,
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // Sparse triangular filters: (first bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
    dct: Vec<f64>,
}

impl MfccExtractor {
    pub fn new(spec: MfccSpec) -> Result<Self> {
        spec.validate()?;
        let nfft = spec.frame_len.next_power_of_two();
        let fs = spec.sample_rate as f64;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);

        let (lo, hi) = (hz_to_mel(spec.f_low), hz_to_mel(spec.f_high));
        let edges: Vec<f64> = (0..spec.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (spec.n_mels + 1) as f64))
            .collect();
        let bin_hz = fs / nfft as f64;
        let filters = (0..spec.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let first = (l / bin_hz).ceil() as usize;
                let last = ((r / bin_hz).floor() as usize).min(nfft / 2);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                        .max(0.0)
                    })
                    .collect();
                (first, weights)
            })
            .collect();

        let m = spec.n_mels;
        let mut dct = vec![0.0; spec.n_mfcc * m];
        for k in 0..spec.n_mfcc {
            let s = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for j in 0..m {
                dct[k * m + j] = s * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos();
            }
        }

        Ok(Self {
            spec,
            nfft,
            fft,
            window: hamming(spec.frame_len),
            filters,
            dct,
        })
    }

    pub fn spec(&self) -> &MfccSpec {
        &self.spec
    }

    /// Coefficients `[n_mfcc × frames]`, row-major.
    pub fn extract(&self, wave: &[f64]) -> Result<(Vec<f64>, usize)> {
        let spec = &self.spec;
        let t = spec.num_frames(wave.len())?;
        let m = spec.n_mels;
        let mut out = vec![0.0; spec.n_mfcc * t];
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut logmel = vec![0.0; m];
        for f in 0..t {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let seg = &wave[f * spec.hop..f * spec.hop + spec.frame_len];
            for (i, (&x, &w)) in seg.iter().zip(&self.window).enumerate() {
                buf[i].re = x * w;
            }
            self.fft.process(&mut buf);
            for (j, (first, weights)) in self.filters.iter().enumerate() {
                let e: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * buf[first + i].norm_sqr())
                    .sum();
                logmel[j] = e.max(LOG_FLOOR).ln();
            }
            for k in 0..spec.n_mfcc {
                let row = &self.dct[k * m..(k + 1) * m];
                out[k * t + f] = row.iter().zip(&logmel).map(|(a, b)| a * b).sum();
            }
        }
        Ok((out, t))
    }
}

/// MFCC map `[1, n_mfcc, frames]` of an already band-limited wave.
pub fn mfcc<S: Real>(wave: &[f64], spec: &MfccSpec) -> Result<Tensor<S>> {
    let ex = MfccExtractor::new(*spec)?;
    let (c, t) = ex.extract(wave)?;
    Tensor::new(vec![1, spec.n_mfcc, t], c.into_iter().map(S::lit).collect())
}

fn lowpass_taps(fc: f64, fs: f64, window: &[f64]) -> Vec<f64> {
    let n = window.len();
    let mid = (n - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..n)
        .map(|i| 2.0 * fc / fs * sinc(2.0 * PI * fc / fs * (i as f64 - mid)) * window[i])
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Linear-phase windowed-sinc band-pass taps, difference of two unit-DC-gain
/// low-passes.
pub fn band_fir(f_low: f64, f_high: f64, fs: f64, taps: usize) -> Vec<f64> {
    let w = hamming(taps);
    let hi = lowpass_taps(f_high, fs, &w);
    let lo = lowpass_taps(f_low, fs, &w);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

/// Band-pass the wave to `[f_low, f_high]` with a zero-delay FIR; edges are
/// extended by repeating the end samples.
pub fn preprocess_band(wave: &[f64], f_low: f64, f_high: f64, fs: f64) -> Vec<f64> {
    let h = band_fir(f_low, f_high, fs, BAND_FIR_TAPS);
    let half = BAND_FIR_TAPS / 2;
    let n = wave.len();
    if n == 0 {
        return Vec::new();
    }
    let at = |i: isize| wave[i.clamp(0, n as isize - 1) as usize];
    (0..n)
        .map(|i| {
            h.iter()
                .enumerate()
                .map(|(k, &c)| c * at(i as isize + half as isize - k as isize))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / 16_000.0).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn one_second_gives_49_frames() {
        let spec = MfccSpec::standard(20);
        let out = mfcc::<f64>(&tone(440.0, 16_000), &spec).unwrap();
        assert_eq!(out.shape(), &[1, 20, 49]);
    }

    #[test]
    fn truncation_keeps_leading_coefficients() {
        let wave = preprocess_band(&tone(700.0, 16_000), 40.0, 4000.0, 16_000.0);
        let maps: Vec<Tensor<f64>> = [10, 20, 30]
            .iter()
            .map(|&n| mfcc(&wave, &MfccSpec::standard(n)).unwrap())
            .collect();
        let t = 49;
        for m in &maps[1..] {
            assert_eq!(&m.data()[..10 * t], &maps[0].data()[..10 * t]);
        }
    }

    #[test]
    fn dc_input_leaves_only_c0() {
        let wave = preprocess_band(&vec![0.3; 16_000], 40.0, 4000.0, 16_000.0);
        let out = mfcc::<f64>(&wave, &MfccSpec::standard(13)).unwrap();
        let t = 49;
        for k in 1..13 {
            for f in 0..t {
                assert!(out.data()[k * t + f].abs() < 1e-6, "c{k} frame {f}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = MfccSpec::standard(41);
        assert!(s.validate().is_err());
        s = MfccSpec::standard(10);
        s.f_high = 9000.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn band_filter_passes_speech_band_and_rejects_drift() {
        let mid = preprocess_band(&tone(1000.0, 16_000), 40.0, 4000.0, 16_000.0);
        // ignore the edge transient region
        let r = rms(&mid[200..15_800]) / rms(&tone(1000.0, 16_000)[200..15_800]);
        assert!((r - 1.0).abs() < 0.05, "1 kHz gain {r}");

        let drift = tone(10.0, 16_000);
        let out = preprocess_band(&drift, 40.0, 4000.0, 16_000.0);
        let att = 20.0 * (rms(&out[200..15_800]) / rms(&drift[200..15_800])).log10();
        assert!(att <= -20.0, "10 Hz attenuation {att} dB");

        assert!(preprocess_band(&vec![0.0; 500], 40.0, 4000.0, 16_000.0)
            .iter()
            .all(|&v| v == 0.0));
    }
}
