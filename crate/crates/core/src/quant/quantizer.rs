//! Uniform fake quantizers with straight-through gradients.
//!
//! Signed (weights, and activations that can go negative):
//! `x_q = α · round(clamp(x/α, -1, 1) · q) / q` with `q = 2^(b-1) - 1`, and
//! `x_q = α · sign(x)` at one bit.
//!
//! Unsigned (post-ReLU activations):
//! `x_q = α · round(clamp(x/α, 0, 1) · q) / q` with `q = 2^b - 1`.
//!
//! The range `α` is the max-abs of the tensor for weights, the constant 1 for
//! one-bit activations, and a trainable scalar otherwise. In trained mode the
//! bit-width is `round(b)` of a continuous trainable `b` clamped to `[2, 8]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TRAINED_MIN_BITS: f64 = 2.0;
pub const MAX_BITS: f64 = 8.0;
pub const FIXED_GRID: [u32; 4] = [1, 2, 4, 8];
const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weight,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitMode {
    Fixed { bits: u32 },
    Trained { init: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    MaxAbs,
    Constant1,
    Trainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub target: QuantTarget,
    pub mode: BitMode,
    pub signed: bool,
    pub range: RangeMode,
}

impl QuantSpec {
    pub fn weight(mode: BitMode) -> Self {
        Self {
            target: QuantTarget::Weight,
            mode,
            signed: true,
            range: RangeMode::MaxAbs,
        }
    }

    pub fn activation(mode: BitMode, signed: bool) -> Self {
        let range = match mode {
            BitMode::Fixed { bits: 1 } => RangeMode::Constant1,
            _ => RangeMode::Trainable,
        };
        Self {
            target: QuantTarget::Activation,
            mode,
            signed,
            range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            BitMode::Fixed { bits } if !FIXED_GRID.contains(&bits) => Err(Error::Config(format!(
                "fixed bit-width must be one of {FIXED_GRID:?}, got {bits}"
            ))),
            BitMode::Trained { init } if !(TRAINED_MIN_BITS..=MAX_BITS).contains(&init) => {
                Err(Error::Config(format!(
                    "trained bit-width init must be in [{TRAINED_MIN_BITS}, {MAX_BITS}], got {init}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Number of positive levels `q` for a bit-width. One-bit signed codes are
/// `±1` and use `q = 1`.
pub fn levels(bits: u32, signed: bool) -> u32 {
    match (signed, bits) {
        (true, 1) => 1,
        (true, b) => (1 << (b - 1)) - 1,
        (false, b) => (1 << b) - 1,
    }
}

fn dlevels_dbits(bits: u32, signed: bool) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    if signed {
        ln2 * 2f64.powi(bits as i32 - 1)
    } else {
        ln2 * 2f64.powi(bits as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Quantizer<S: Real> {
    spec: QuantSpec,
    pub alpha: Tensor<S>,
    pub bits: Tensor<S>,
    /// Elements of the quantized tensor per example (activations) or in
    /// total (weights); the weighting used by bit-width averages.
    pub elements: usize,
}

pub struct QuantCache<S: Real> {
    input: Tensor<S>,
    alpha: S,
    bits: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QuantGrads<S: Real> {
    pub alpha: S,
    pub bits: S,
}

impl<S: Real> Quantizer<S> {
    pub fn new(spec: QuantSpec, elements: usize) -> Result<Self> {
        spec.validate()?;
        let b = match spec.mode {
            BitMode::Fixed { bits } => bits as f64,
            BitMode::Trained { init } => init,
        };
        Ok(Self {
            spec,
            alpha: Tensor::scalar(S::one()),
            bits: Tensor::scalar(S::lit(b)),
            elements,
        })
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn cast<T: Real>(&self) -> Quantizer<T> {
        Quantizer {
            spec: self.spec,
            alpha: self.alpha.cast(),
            bits: self.bits.cast(),
            elements: self.elements,
        }
    }

    pub fn alpha_trainable(&self) -> bool {
        self.spec.range == RangeMode::Trainable
    }

    pub fn bits_trainable(&self) -> bool {
        matches!(self.spec.mode, BitMode::Trained { .. })
    }

    /// Bit-width used in the forward pass.
    pub fn effective_bits(&self) -> u32 {
        match self.spec.mode {
            BitMode::Fixed { bits } => bits,
            BitMode::Trained { .. } => self.continuous_bits().round() as u32,
        }
    }

    /// Differentiable bit-width surrogate (the clamped continuous value).
    pub fn continuous_bits(&self) -> f64 {
        match self.spec.mode {
            BitMode::Fixed { bits } => bits as f64,
            BitMode::Trained { .. } => self.bits.data()[0]
                .as_f64()
                .clamp(TRAINED_MIN_BITS, MAX_BITS),
        }
    }

    /// Range for a given input under this quantizer's rule.
    pub fn range_for(&self, x: &Tensor<S>) -> S {
        match self.spec.range {
            RangeMode::MaxAbs => x.max_abs(),
            RangeMode::Constant1 => S::one(),
            RangeMode::Trainable => self.alpha.data()[0],
        }
    }

    pub fn set_alpha(&mut self, alpha: S) {
        self.alpha.data_mut()[0] = alpha;
    }

    /// Keeps trainable state inside its valid region after an optimizer step.
    pub fn project(&mut self) {
        if self.alpha_trainable() {
            let a = self.alpha.data()[0].max(S::lit(ALPHA_FLOOR));
            self.alpha.data_mut()[0] = a;
        }
        if self.bits_trainable() {
            let b = self.bits.data()[0].max(S::lit(TRAINED_MIN_BITS)).min(S::lit(MAX_BITS));
            self.bits.data_mut()[0] = b;
        }
    }

    /// Integer code of a single value for range `alpha` and `q` levels.
    #[inline]
    fn code(&self, x: S, alpha: S, bits: u32, q: S) -> S {
        if self.spec.signed {
            if bits == 1 {
                if x < S::zero() {
                    -S::one()
                } else {
                    S::one()
                }
            } else {
                // adding +0 turns a rounded -0 into +0
                ((x / alpha).max(-S::one()).min(S::one()) * q).round() + S::zero()
            }
        } else {
            ((x / alpha).max(S::zero()).min(S::one()) * q).round() + S::zero()
        }
    }

    /// Integer codes and the `(α, q)` pair that re-expands them as `α·(n/q)`.
    pub fn codes(&self, x: &Tensor<S>) -> (Vec<i32>, S, u32) {
        let alpha = self.range_for(x);
        let bits = self.effective_bits();
        let q = levels(bits, self.spec.signed);
        if alpha <= S::zero() {
            return (vec![0; x.len()], alpha, q);
        }
        let qs = S::lit(q as f64);
        let codes = x
            .data()
            .iter()
            .map(|&v| self.code(v, alpha, bits, qs).as_f64() as i32)
            .collect();
        (codes, alpha, q)
    }

    pub fn quantize(&self, x: &Tensor<S>) -> (Tensor<S>, QuantCache<S>) {
        let alpha = self.range_for(x);
        let bits = self.effective_bits();
        let out = if alpha <= S::zero() {
            Tensor::zeros(x.shape())
        } else {
            let qs = S::lit(levels(bits, self.spec.signed) as f64);
            x.map(|v| alpha * (self.code(v, alpha, bits, qs) / qs))
        };
        (
            out,
            QuantCache {
                input: x.clone(),
                alpha,
                bits,
            },
        )
    }

    /// Straight-through backward pass. Returns the input gradient and the
    /// gradients of `α` and of the continuous bit-width (zero where the
    /// corresponding state is not trainable).
    pub fn backward(&self, cache: &QuantCache<S>, grad_out: &Tensor<S>) -> (Tensor<S>, QuantGrads<S>) {
        let alpha = cache.alpha;
        if alpha <= S::zero() {
            return (Tensor::zeros(grad_out.shape()), QuantGrads::default());
        }
        let signed = self.spec.signed;
        let q = levels(cache.bits, signed);
        let qs = S::lit(q as f64);
        let lo = if signed { -alpha } else { S::zero() };
        let want_alpha = self.alpha_trainable();
        let want_bits = self.bits_trainable();
        let dq_db = S::lit(dlevels_dbits(cache.bits, signed));

        let mut gx = Vec::with_capacity(grad_out.len());
        let mut ga = S::zero();
        let mut gb = S::zero();
        for (&x, &g) in cache.input.data().iter().zip(grad_out.data()) {
            if x > alpha {
                gx.push(S::zero());
                ga += g;
            } else if x < lo {
                gx.push(S::zero());
                if signed {
                    ga -= g;
                }
            } else {
                gx.push(g);
                if (want_alpha || want_bits) && !(signed && cache.bits == 1) {
                    let z = x * qs / alpha;
                    let n = z.round();
                    ga += g * (n - z) / qs;
                    gb += g * alpha * (z - n) / (qs * qs) * dq_db;
                }
            }
        }
        let grads = QuantGrads {
            alpha: if want_alpha { ga } else { S::zero() },
            bits: if want_bits { gb } else { S::zero() },
        };
        (Tensor::new(grad_out.shape().to_vec(), gx).expect("same shape"), grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn two_bit_signed_weights() {
        let q = Quantizer::<f64>::new(QuantSpec::weight(BitMode::Fixed { bits: 2 }), 3).unwrap();
        let (y, _) = q.quantize(&t(&[-0.5, 0.2, 0.5]));
        assert_eq!(y.data(), &[-0.5, 0.0, 0.5]);
    }

    #[test]
    fn one_bit_activations_use_unit_range() {
        let q = Quantizer::<f64>::new(QuantSpec::activation(BitMode::Fixed { bits: 1 }, false), 3).unwrap();
        assert_eq!(q.spec().range, RangeMode::Constant1);
        let (y, _) = q.quantize(&t(&[-0.3, 0.6, 1.4]));
        assert_eq!(y.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn one_bit_weights_are_plus_minus_alpha() {
        let q = Quantizer::<f64>::new(QuantSpec::weight(BitMode::Fixed { bits: 1 }), 4).unwrap();
        let (y, _) = q.quantize(&t(&[-0.1, 0.0, 0.3, -0.7]));
        assert_eq!(y.data(), &[-0.7, 0.7, 0.7, -0.7]);
    }

    #[test]
    fn all_zero_weights_quantize_to_zero() {
        let q = Quantizer::<f64>::new(QuantSpec::weight(BitMode::Fixed { bits: 4 }), 3).unwrap();
        let x = t(&[0.0, 0.0, 0.0]);
        let (y, cache) = q.quantize(&x);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (g, _) = q.backward(&cache, &t(&[1.0, 1.0, 1.0]));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn on_grid_values_are_fixed_points() {
        let mut q = Quantizer::<f64>::new(QuantSpec::activation(BitMode::Fixed { bits: 4 }, false), 16).unwrap();
        q.set_alpha(2.0);
        let x = Tensor::from_fn(&[16], |i| 2.0 * (i as f64 / 15.0));
        assert_eq!(q.quantize(&x).0, x);
    }

    #[test]
    fn ste_passes_inside_and_blocks_outside() {
        let mut q = Quantizer::<f64>::new(QuantSpec::activation(BitMode::Fixed { bits: 4 }, false), 3).unwrap();
        q.set_alpha(1.0);
        let (_, cache) = q.quantize(&t(&[0.37, 5.0, -2.0]));
        let (g, _) = q.backward(&cache, &t(&[0.25, 0.5, 0.75]));
        assert_eq!(g.data(), &[0.25, 0.0, 0.0]);
    }

    #[test]
    fn invalid_bit_widths_rejected() {
        assert!(Quantizer::<f32>::new(QuantSpec::weight(BitMode::Fixed { bits: 3 }), 1).is_err());
        assert!(Quantizer::<f32>::new(QuantSpec::weight(BitMode::Trained { init: 1.0 }), 1).is_err());
    }

    #[test]
    fn trained_bits_round_and_project() {
        let mut q = Quantizer::<f64>::new(QuantSpec::weight(BitMode::Trained { init: 3.4 }), 1).unwrap();
        assert_eq!(q.effective_bits(), 3);
        q.bits.data_mut()[0] = 0.5;
        q.project();
        assert_eq!(q.bits.data()[0], 2.0);
        assert_eq!(q.effective_bits(), 2);
    }
}
