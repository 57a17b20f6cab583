use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    Hamming,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowFn,
}

impl FrameSpec {
    pub fn new(window_len: usize, hop: usize, window: WindowFn) -> Result<Self> {
        let spec = Self {
            window_len,
            hop,
            window,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Frame layout for a window and hop given in milliseconds.
    pub fn from_ms(window_ms: f64, hop_ms: f64, sample_rate: u32, window: WindowFn) -> Result<Self> {
        let window_len = (window_ms * sample_rate as f64 / 1000.0).round() as usize;
        let hop = (hop_ms * sample_rate as f64 / 1000.0).round() as usize;
        Self::new(window_len, hop, window)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_len < self.hop {
            return Err(Error::Config(format!(
                "frame spec needs window_len >= hop >= 1 (got window {} hop {})",
                self.window_len, self.hop
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self, len: usize) -> Result<usize> {
        num_frames(len, self.window_len, self.hop)
    }

    pub fn window_coeffs(&self) -> Vec<f64> {
        match self.window {
            WindowFn::Hamming => hamming(self.window_len),
            WindowFn::None => vec![1.0; self.window_len],
        }
    }
}

pub fn num_frames(len: usize, window_len: usize, hop: usize) -> Result<usize> {
    if len < window_len {
        return Err(Error::Input(format!(
            "signal of {len} samples is shorter than one {window_len}-sample window"
        )));
    }
    Ok((len - window_len) / hop + 1)
}

/// Symmetric Hamming window, `0.54 - 0.46 cos(2πi/(N-1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    // Mirrored so the window is exactly symmetric.
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let v = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
        w[i] = v;
        w[n - 1 - i] = v;
    }
    w
}

/// Splits `wave` into overlapping frames, row-major `[frames × window_len]`,
/// multiplying each by `window` when given.
pub fn frame_signal<S: Real>(
    wave: &[S],
    window_len: usize,
    hop: usize,
    window: Option<&[S]>,
) -> Result<(Vec<S>, usize)> {
    let t = num_frames(wave.len(), window_len, hop)?;
    let mut out = Vec::with_capacity(t * window_len);
    for f in 0..t {
        let seg = &wave[f * hop..f * hop + window_len];
        match window {
            Some(w) => out.extend(seg.iter().zip(w).map(|(&x, &c)| x * c)),
            None => out.extend_from_slice(seg),
        }
    }
    Ok((out, t))
}

/// Adjoint of [`frame_signal`]: overlap-adds frame gradients back onto the signal.
pub fn overlap_add<S: Real>(
    frames: &[S],
    window_len: usize,
    hop: usize,
    window: Option<&[S]>,
    out: &mut [S],
) {
    let t = frames.len() / window_len;
    for f in 0..t {
        let src = &frames[f * window_len..(f + 1) * window_len];
        let dst = &mut out[f * hop..f * hop + window_len];
        match window {
            Some(w) => {
                for i in 0..window_len {
                    dst[i] += src[i] * w[i];
                }
            }
            None => {
                for i in 0..window_len {
                    dst[i] += src[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_frame_layout_at_16khz() {
        let spec = FrameSpec::from_ms(25.0, 10.0, 16_000, WindowFn::Hamming).unwrap();
        assert_eq!(spec.window_len, 400);
        assert_eq!(spec.hop, 160);
        assert_eq!(spec.num_frames(16_000).unwrap(), 98);
    }

    #[test]
    fn short_signal_is_an_input_error() {
        assert!(matches!(num_frames(399, 400, 160), Err(Error::Input(_))));
        assert_eq!(num_frames(400, 400, 160).unwrap(), 1);
    }

    #[test]
    fn invalid_hop_rejected() {
        assert!(FrameSpec::new(100, 0, WindowFn::None).is_err());
        assert!(FrameSpec::new(100, 101, WindowFn::None).is_err());
    }

    #[test]
    fn hamming_is_symmetric_with_unit_peak() {
        let w = hamming(401);
        assert!((w[200] - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.08).abs() < 1e-15);
        for i in 0..401 {
            assert_eq!(w[i], w[400 - i]);
        }
    }
}
