//! Fully learnable strided 1-D convolution front end. Same framing and output
//! layout as the sinc front end, but every tap is a free parameter and the
//! Hamming window is applied to the frames.

use crate::error::{Error, Result};
use crate::frontend::framing::{frame_signal, num_frames, overlap_add};
use crate::frontend::sinc::{mel_spaced_cutoffs, sinc_bandpass};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

pub struct Conv1dCache<S: Real> {
    frames: Vec<S>,
    batch: usize,
    num_frames: usize,
    wave_len: usize,
    hop: usize,
}

/// Filters initialized to the mel-spaced sinc band-passes scaled by `1/fs`,
/// so their pass-band gain is near one.
pub fn sinc_initialized_filters<S: Real>(filters: usize, kernel_len: usize, fs: f64) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(filters * kernel_len);
    for (f1, f2) in mel_spaced_cutoffs(filters, fs) {
        data.extend(sinc_bandpass(f1, f2, kernel_len, fs)?.into_iter().map(|v| S::lit(v / fs)));
    }
    Tensor::new(vec![filters, kernel_len], data)
}

pub fn conv1d_frontend_forward<S: Real>(
    wave: &Tensor<S>,
    filters: &Tensor<S>,
    window: &[S],
    hop: usize,
) -> Result<(Tensor<S>, Conv1dCache<S>)> {
    let [b, c, h, len] = wave.dims4();
    if c * h != 1 {
        return Err(Error::Shape(format!(
            "1-D front end expects [B,1,1,L] waves, got {:?}",
            wave.shape()
        )));
    }
    let (f, n) = (filters.shape()[0], filters.shape()[1]);
    if window.len() != n {
        return Err(Error::Shape("window length differs from filter length".into()));
    }
    let t = num_frames(len, n, hop)?;
    let mut out = vec![S::zero(); b * f * t];
    let mut frames = Vec::with_capacity(b * t * n);
    for i in 0..b {
        let (fr, _) = frame_signal(wave.example(i), n, hop, Some(window))?;
        gemm_nt(f, n, t, filters.data(), &fr, &mut out[i * f * t..(i + 1) * f * t]);
        frames.extend(fr);
    }
    let cache = Conv1dCache {
        frames,
        batch: b,
        num_frames: t,
        wave_len: len,
        hop,
    };
    Ok((Tensor::new(vec![b, 1, f, t], out)?, cache))
}

/// Returns `(grad_wave, grad_filters)`.
pub fn conv1d_frontend_backward<S: Real>(
    cache: &Conv1dCache<S>,
    filters: &Tensor<S>,
    window: &[S],
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (f, n) = (filters.shape()[0], filters.shape()[1]);
    let (b, t) = (cache.batch, cache.num_frames);
    if grad_out.len() != b * f * t {
        return Err(Error::Usage("1-D front end gradient does not match the cached forward pass".into()));
    }
    let g = grad_out.data();
    let mut grad_w = vec![S::zero(); f * n];
    let mut grad_wave = vec![S::zero(); b * cache.wave_len];
    let mut grad_frames = vec![S::zero(); t * n];
    for i in 0..b {
        let dy = &g[i * f * t..(i + 1) * f * t];
        gemm_nn(f, t, n, dy, &cache.frames[i * t * n..(i + 1) * t * n], &mut grad_w);
        grad_frames.iter_mut().for_each(|v| *v = S::zero());
        gemm_tn(t, f, n, dy, filters.data(), &mut grad_frames);
        overlap_add(
            &grad_frames,
            n,
            cache.hop,
            Some(window),
            &mut grad_wave[i * cache.wave_len..(i + 1) * cache.wave_len],
        );
    }
    Ok((
        Tensor::new(vec![b, 1, 1, cache.wave_len], grad_wave)?,
        Tensor::new(vec![f, n], grad_w)?,
    ))
}
