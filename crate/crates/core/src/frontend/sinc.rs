//! Learnable band-pass front end built from differences of sinc low-pass
//! filters.
//!
//! Each filter is `g[n] = 2 f2 sinc(2π f2 n) - 2 f1 sinc(2π f1 n)` with `n` the
//! symmetric tap offset in seconds, multiplied by a Hamming window. Windowing
//! the kernel is equivalent to windowing every frame, so the window is baked
//! into the cached kernels.
//!
//! Cutoffs are stored through unconstrained trainables `θ = (θ1, θ2)` in units
//! of the sample rate:
//!
//! ```text
//! f1 = min(fs·|θ1|, fs/2 - min_band)
//! f2 = min(f1 + min_band + fs·|θ2|, fs/2)
//! ```
//!
//! so `0 <= f1 < f2 <= fs/2` and `f2 - f1 >= min_band` for any real `θ`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::frontend::framing::{frame_signal, hamming, num_frames, overlap_add};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

pub const MIN_BANDWIDTH_HZ: f64 = 50.0;
/// Lowest cutoff of the mel-spaced initialization.
pub const INIT_LOW_HZ: f64 = 30.0;

#[inline]
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Tap offset of index `i` in seconds; symmetric about the kernel center even
/// for an even number of taps.
#[inline]
fn tap_time(i: usize, n: usize, fs: f64) -> f64 {
    (i as f64 - (n as f64 - 1.0) / 2.0) / fs
}

fn check_cutoffs(f1: f64, f2: f64, fs: f64) -> Result<()> {
    if !(f1.is_finite() && f2.is_finite()) || f1 < 0.0 || f2 < f1 || f2 > fs / 2.0 {
        return Err(Error::Constraint(format!(
            "cutoffs must satisfy 0 <= f1 <= f2 <= fs/2 (f1={f1}, f2={f2}, fs={fs})"
        )));
    }
    Ok(())
}

/// Un-windowed band-pass taps `2 f2 sinc(2π f2 n) - 2 f1 sinc(2π f1 n)`.
pub fn sinc_bandpass(f1: f64, f2: f64, n: usize, fs: f64) -> Result<Vec<f64>> {
    check_cutoffs(f1, f2, fs)?;
    if n == 0 {
        return Err(Error::Constraint("kernel length must be positive".into()));
    }
    let mut g = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let t = tap_time(i, n, fs).abs();
        let v = 2.0 * f2 * sinc(2.0 * PI * f2 * t) - 2.0 * f1 * sinc(2.0 * PI * f1 * t);
        g[i] = v;
        g[n - 1 - i] = v;
    }
    Ok(g)
}

/// Windowed sinc band-pass kernel for cutoffs `f1 < f2` in Hz.
pub fn build_sinc_kernel(f1: f64, f2: f64, n: usize, fs: f64) -> Result<Vec<f64>> {
    let g = sinc_bandpass(f1, f2, n, fs)?;
    let w = hamming(n);
    Ok(g.iter().zip(&w).map(|(a, b)| a * b).collect())
}

/// Cutoff pair and its Jacobian with respect to `(θ1, θ2)`.
#[derive(Clone, Copy, Debug)]
pub struct Cutoffs {
    pub f1: f64,
    pub f2: f64,
    pub df1_dt1: f64,
    pub df2_dt1: f64,
    pub df2_dt2: f64,
}

pub fn reparametrize(theta1: f64, theta2: f64, fs: f64, min_band: f64) -> Cutoffs {
    let nyq = fs / 2.0;
    let f1_raw = fs * theta1.abs();
    let f1_cap = nyq - min_band;
    let (f1, df1_dt1) = if f1_raw <= f1_cap {
        (f1_raw, fs * sign(theta1))
    } else {
        (f1_cap, 0.0)
    };
    let f2_raw = f1 + min_band + fs * theta2.abs();
    let (f2, df2_dt1, df2_dt2) = if f2_raw <= nyq {
        (f2_raw, df1_dt1, fs * sign(theta2))
    } else {
        (nyq, 0.0, 0.0)
    };
    Cutoffs {
        f1,
        f2,
        df1_dt1,
        df2_dt1,
        df2_dt2,
    }
}

/// Inverse of [`reparametrize`] for cutoffs that satisfy its constraints.
pub fn cutoffs_to_theta(f1: f64, f2: f64, fs: f64, min_band: f64) -> (f64, f64) {
    let t1 = f1 / fs;
    let t2 = ((f2 - f1 - min_band) / fs).max(0.0);
    (t1, t2)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Mel-spaced initial cutoffs over `[INIT_LOW_HZ, fs/2]`.
pub fn mel_spaced_cutoffs(filters: usize, fs: f64) -> Vec<(f64, f64)> {
    let lo = hz_to_mel(INIT_LOW_HZ);
    let hi = hz_to_mel(fs / 2.0);
    let pts: Vec<f64> = (0..=filters)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / filters as f64).clamp(0.0, fs / 2.0))
        .collect();
    (0..filters).map(|i| (pts[i], pts[i + 1])).collect()
}

/// Trainable sinc filterbank with cached windowed kernels.
#[derive(Clone, Debug)]
pub struct SincFilterbank<S: Real> {
    sample_rate: f64,
    kernel_len: usize,
    min_band: f64,
    theta: Tensor<S>,
    window: Vec<f64>,
    kernels: Vec<S>,
    kernels_for: Vec<S>,
}

pub struct SincCache<S: Real> {
    frames: Vec<S>,
    batch: usize,
    num_frames: usize,
    wave_len: usize,
    hop: usize,
}

pub struct SincGrads<S: Real> {
    pub wave: Tensor<S>,
    pub f1: Vec<S>,
    pub f2: Vec<S>,
    pub theta: Tensor<S>,
}

impl<S: Real> SincFilterbank<S> {
    pub fn mel_init(filters: usize, kernel_len: usize, sample_rate: f64) -> Result<Self> {
        if filters == 0 {
            return Err(Error::Config("sinc filterbank needs at least one filter".into()));
        }
        Self::from_cutoffs(&mel_spaced_cutoffs(filters, sample_rate), kernel_len, sample_rate)
    }

    pub fn from_cutoffs(cutoffs: &[(f64, f64)], kernel_len: usize, sample_rate: f64) -> Result<Self> {
        let mut theta = Vec::with_capacity(cutoffs.len() * 2);
        for &(f1, f2) in cutoffs {
            check_cutoffs(f1, f2, sample_rate)?;
            let (t1, t2) = cutoffs_to_theta(f1, f2, sample_rate, MIN_BANDWIDTH_HZ);
            theta.push(S::lit(t1));
            theta.push(S::lit(t2));
        }
        Self::from_theta(Tensor::new(vec![cutoffs.len(), 2], theta)?, kernel_len, sample_rate)
    }

    pub fn from_theta(theta: Tensor<S>, kernel_len: usize, sample_rate: f64) -> Result<Self> {
        if theta.shape().len() != 2 || theta.shape()[1] != 2 || theta.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "sinc parameters must be [filters, 2], got {:?}",
                theta.shape()
            )));
        }
        if kernel_len == 0 {
            return Err(Error::Config("kernel length must be positive".into()));
        }
        let mut bank = Self {
            sample_rate,
            kernel_len,
            min_band: MIN_BANDWIDTH_HZ,
            theta,
            window: hamming(kernel_len),
            kernels: Vec::new(),
            kernels_for: Vec::new(),
        };
        bank.refresh();
        Ok(bank)
    }

    pub fn num_filters(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn theta(&self) -> &Tensor<S> {
        &self.theta
    }

    /// Mutable access to the trainables; kernels are rebuilt lazily on the
    /// next use.
    pub fn theta_mut(&mut self) -> &mut Tensor<S> {
        &mut self.theta
    }

    pub fn cutoffs(&self) -> Vec<Cutoffs> {
        self.theta
            .data()
            .chunks(2)
            .map(|t| reparametrize(t[0].as_f64(), t[1].as_f64(), self.sample_rate, self.min_band))
            .collect()
    }

    fn refresh(&mut self) {
        let n = self.kernel_len;
        let mut kernels = Vec::with_capacity(self.num_filters() * n);
        for c in self.cutoffs() {
            let g = sinc_bandpass(c.f1, c.f2, n, self.sample_rate)
                .expect("reparametrized cutoffs are always valid");
            kernels.extend(g.iter().zip(&self.window).map(|(a, w)| S::lit(a * w)));
        }
        self.kernels = kernels;
        self.kernels_for = self.theta.data().to_vec();
    }

    /// Windowed kernels, `[filters × kernel_len]`, rebuilt if the cutoffs moved.
    pub fn kernels(&mut self) -> &[S] {
        if self.kernels_for.as_slice() != self.theta.data() {
            self.refresh();
        }
        &self.kernels
    }

    pub fn cached_kernels(&self) -> Option<&[S]> {
        (self.kernels_for.as_slice() == self.theta.data()).then_some(self.kernels.as_slice())
    }

    /// Filters a batch of waves `[B, 1, 1, L]` frame by frame, giving a
    /// single-channel `[B, 1, filters, frames]` map.
    pub fn forward(&mut self, wave: &Tensor<S>, hop: usize) -> Result<(Tensor<S>, SincCache<S>)> {
        let [b, c, h, len] = wave.dims4();
        if c * h != 1 {
            return Err(Error::Shape(format!(
                "sinc front end expects [B,1,1,L] waves, got {:?}",
                wave.shape()
            )));
        }
        let n = self.kernel_len;
        let t = num_frames(len, n, hop)?;
        let f = self.num_filters();
        self.kernels();
        let mut out = vec![S::zero(); b * f * t];
        let mut frames = Vec::with_capacity(b * t * n);
        for i in 0..b {
            let (fr, _) = frame_signal(wave.example(i), n, hop, None)?;
            gemm_nt(f, n, t, &self.kernels, &fr, &mut out[i * f * t..(i + 1) * f * t]);
            frames.extend(fr);
        }
        let cache = SincCache {
            frames,
            batch: b,
            num_frames: t,
            wave_len: len,
            hop,
        };
        Ok((Tensor::new(vec![b, 1, f, t], out)?, cache))
    }

    /// Gradients with respect to the input wave, each filter's cutoffs and
    /// the unconstrained trainables.
    pub fn backward(&self, cache: &SincCache<S>, grad_out: &Tensor<S>) -> Result<SincGrads<S>> {
        let n = self.kernel_len;
        let f = self.num_filters();
        let t = cache.num_frames;
        let b = cache.batch;
        if grad_out.len() != b * f * t {
            return Err(Error::Usage("sinc gradient does not match the cached forward pass".into()));
        }
        let kernels = self
            .cached_kernels()
            .ok_or_else(|| Error::Usage("sinc parameters changed since the forward pass".into()))?;
        let g = grad_out.data();
        let mut grad_k = vec![S::zero(); f * n];
        let mut grad_wave = vec![S::zero(); b * cache.wave_len];
        let mut grad_frames = vec![S::zero(); t * n];
        for i in 0..b {
            let dy = &g[i * f * t..(i + 1) * f * t];
            let fr = &cache.frames[i * t * n..(i + 1) * t * n];
            gemm_nn(f, t, n, dy, fr, &mut grad_k);
            grad_frames.iter_mut().for_each(|v| *v = S::zero());
            gemm_tn(t, f, n, dy, kernels, &mut grad_frames);
            overlap_add(
                &grad_frames,
                n,
                cache.hop,
                None,
                &mut grad_wave[i * cache.wave_len..(i + 1) * cache.wave_len],
            );
        }

        let mut gf1 = Vec::with_capacity(f);
        let mut gf2 = Vec::with_capacity(f);
        let mut gtheta = Vec::with_capacity(2 * f);
        for (j, c) in self.cutoffs().iter().enumerate() {
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for i in 0..n {
                let dg = grad_k[j * n + i].as_f64() * self.window[i];
                let tt = tap_time(i, n, self.sample_rate);
                // d/df [2f sinc(2πf t)] = 2 cos(2πf t), including t = 0.
                d2 += dg * 2.0 * (2.0 * PI * c.f2 * tt).cos();
                d1 -= dg * 2.0 * (2.0 * PI * c.f1 * tt).cos();
            }
            gf1.push(S::lit(d1));
            gf2.push(S::lit(d2));
            gtheta.push(S::lit(d1 * c.df1_dt1 + d2 * c.df2_dt1));
            gtheta.push(S::lit(d2 * c.df2_dt2));
        }
        Ok(SincGrads {
            wave: Tensor::new(vec![b, 1, 1, cache.wave_len], grad_wave)?,
            f1: gf1,
            f2: gf2,
            theta: Tensor::new(vec![f, 2], gtheta)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_cutoffs_give_zero_kernel() {
        let k = build_sinc_kernel(1000.0, 1000.0, 101, 16_000.0).unwrap();
        assert!(k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_tap_is_twice_the_bandwidth() {
        let k = build_sinc_kernel(300.0, 3000.0, 401, 16_000.0).unwrap();
        assert!((k[200] - 2.0 * (3000.0 - 300.0)).abs() < 1e-9);
    }

    #[test]
    fn invalid_cutoffs_are_constraint_errors() {
        assert!(matches!(build_sinc_kernel(500.0, 100.0, 31, 16_000.0), Err(Error::Constraint(_))));
        assert!(matches!(build_sinc_kernel(-1.0, 100.0, 31, 16_000.0), Err(Error::Constraint(_))));
        assert!(matches!(build_sinc_kernel(10.0, 9000.0, 31, 16_000.0), Err(Error::Constraint(_))));
    }

    #[test]
    fn zero_wave_gives_zero_output() {
        let mut bank = SincFilterbank::<f32>::mel_init(40, 400, 16_000.0).unwrap();
        let wave = Tensor::zeros(&[1, 1, 1, 16_000]);
        let (y, _) = bank.forward(&wave, 160).unwrap();
        assert_eq!(y.shape(), &[1, 1, 40, 98]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_wave_is_an_input_error() {
        let mut bank = SincFilterbank::<f32>::mel_init(4, 400, 16_000.0).unwrap();
        let wave = Tensor::zeros(&[1, 1, 1, 399]);
        assert!(matches!(bank.forward(&wave, 160), Err(Error::Input(_))));
    }

    #[test]
    fn mel_init_covers_the_band_in_order() {
        let cuts = mel_spaced_cutoffs(40, 16_000.0);
        assert!((cuts[0].0 - INIT_LOW_HZ).abs() < 1e-9);
        assert!((cuts[39].1 - 8000.0).abs() < 1e-6);
        for w in cuts.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        let bank = SincFilterbank::<f64>::mel_init(40, 400, 16_000.0).unwrap();
        for c in bank.cutoffs() {
            assert!(c.f2 - c.f1 >= MIN_BANDWIDTH_HZ - 1e-9);
        }
    }

    #[test]
    fn kernels_follow_parameter_changes() {
        let mut bank = SincFilterbank::<f64>::mel_init(3, 31, 16_000.0).unwrap();
        let before = bank.kernels().to_vec();
        bank.theta_mut().data_mut()[0] += 0.01;
        assert!(bank.cached_kernels().is_none());
        assert_ne!(bank.kernels(), before.as_slice());
    }

    #[test]
    fn zero_gradient_gives_zero_cutoff_gradients() {
        let mut bank = SincFilterbank::<f64>::mel_init(3, 31, 16_000.0).unwrap();
        let wave = Tensor::from_fn(&[2, 1, 1, 200], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let (y, cache) = bank.forward(&wave, 16).unwrap();
        let g = bank.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.f1.iter().chain(&g.f2).all(|&v| v == 0.0));
        assert!(g.wave.data().iter().all(|&v| v == 0.0));
    }
}
