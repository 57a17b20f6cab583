//! The fixed layer zoo with analytic forward and backward passes.
//!
//! A layer computes `y = op(x)`, optionally adds a residual input, and
//! optionally fake-quantizes the result. Weight quantizers act on the first
//! parameter tensor (the conv/FC kernel) before the op runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::conv1d::{
    conv1d_frontend_backward, conv1d_frontend_forward, sinc_initialized_filters, Conv1dCache,
};
use crate::frontend::framing::{hamming, num_frames};
use crate::frontend::mfcc::{preprocess_band, MfccExtractor, MfccSpec};
use crate::frontend::sinc::{SincCache, SincFilterbank};
use crate::quant::quantizer::{QuantCache, QuantGrads, Quantizer};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    SincConv {
        filters: usize,
        kernel_len: usize,
        hop: usize,
        sample_rate: u32,
    },
    Conv1dFrontend {
        filters: usize,
        kernel_len: usize,
        hop: usize,
        sample_rate: u32,
    },
    Mfcc {
        spec: MfccSpec,
    },
    Conv2d {
        k_h: usize,
        k_w: usize,
        stride_h: usize,
        stride_w: usize,
        pad: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
    },
    DepthwiseConv2d {
        k: usize,
        stride: usize,
        pad: usize,
        c: usize,
    },
    BatchNorm {
        c: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    GlobalAvgPool,
    FullyConnected {
        d_in: usize,
        d_out: usize,
    },
    Identity,
}

fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {input}+2·{pad}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

impl LayerKind {
    pub fn conv(k: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        LayerKind::Conv2d {
            k_h: k,
            k_w: k,
            stride_h: stride,
            stride_w: stride,
            pad: k / 2,
            c_in,
            c_out,
            bias: false,
        }
    }

    pub fn depthwise(k: usize, stride: usize, c: usize) -> Self {
        LayerKind::DepthwiseConv2d {
            k,
            stride,
            pad: k / 2,
            c,
        }
    }

    pub fn batch_norm(c: usize) -> Self {
        LayerKind::BatchNorm {
            c,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::SincConv { .. } => "sinc_conv",
            LayerKind::Conv1dFrontend { .. } => "conv1d_frontend",
            LayerKind::Mfcc { .. } => "mfcc",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Identity => "identity",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Shape(format!("{}: {msg}", self.name())));
        match *self {
            LayerKind::SincConv {
                filters,
                kernel_len,
                hop,
                ..
            }
            | LayerKind::Conv1dFrontend {
                filters,
                kernel_len,
                hop,
                ..
            } => {
                if filters == 0 || kernel_len == 0 || hop == 0 {
                    return bad("filters, kernel length and hop must be >= 1");
                }
            }
            LayerKind::Mfcc { spec } => spec.validate()?,
            LayerKind::Conv2d {
                k_h,
                k_w,
                stride_h,
                stride_w,
                c_in,
                c_out,
                ..
            } => {
                if k_h == 0 || k_w == 0 || stride_h == 0 || stride_w == 0 || c_in == 0 || c_out == 0 {
                    return bad("kernel, stride and channel counts must be >= 1");
                }
            }
            LayerKind::DepthwiseConv2d { k, stride, c, .. } => {
                if k == 0 || stride == 0 || c == 0 {
                    return bad("kernel, stride and channel counts must be >= 1");
                }
            }
            LayerKind::BatchNorm { c, .. } if c == 0 => return bad("needs >= 1 channel"),
            LayerKind::FullyConnected { d_in, d_out } if d_in == 0 || d_out == 0 => {
                return bad("dimensions must be >= 1")
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-example output shape `[C, H, W]` for a per-example input shape.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let [c, h, w] = input;
        let mismatch = |want: String| {
            Err(Error::Shape(format!(
                "{} expects input {want}, got {input:?}",
                self.name()
            )))
        };
        match *self {
            LayerKind::SincConv {
                filters,
                kernel_len,
                hop,
                ..
            }
            | LayerKind::Conv1dFrontend {
                filters,
                kernel_len,
                hop,
                ..
            } => {
                if c != 1 || h != 1 {
                    return mismatch("[1, 1, L]".into());
                }
                Ok([1, filters, num_frames(w, kernel_len, hop)?])
            }
            LayerKind::Mfcc { spec } => {
                if c != 1 || h != 1 {
                    return mismatch("[1, 1, L]".into());
                }
                Ok([1, spec.n_mfcc, spec.num_frames(w)?])
            }
            LayerKind::Conv2d {
                k_h,
                k_w,
                stride_h,
                stride_w,
                pad,
                c_in,
                c_out,
                ..
            } => {
                if c != c_in {
                    return mismatch(format!("{c_in} channels"));
                }
                Ok([c_out, conv_out(h, k_h, stride_h, pad)?, conv_out(w, k_w, stride_w, pad)?])
            }
            LayerKind::DepthwiseConv2d { k, stride, pad, c: cc } => {
                if c != cc {
                    return mismatch(format!("{cc} channels"));
                }
                Ok([c, conv_out(h, k, stride, pad)?, conv_out(w, k, stride, pad)?])
            }
            LayerKind::BatchNorm { c: cc, .. } => {
                if c != cc {
                    return mismatch(format!("{cc} channels"));
                }
                Ok(input)
            }
            LayerKind::Relu | LayerKind::Identity => Ok(input),
            LayerKind::GlobalAvgPool => Ok([c, 1, 1]),
            LayerKind::FullyConnected { d_in, d_out } => {
                if c * h * w != d_in {
                    return mismatch(format!("{d_in} features"));
                }
                Ok([d_out, 1, 1])
            }
        }
    }

    /// Shapes of the trainable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::SincConv { filters, .. } => vec![vec![filters, 2]],
            LayerKind::Conv1dFrontend {
                filters, kernel_len, ..
            } => vec![vec![filters, kernel_len]],
            LayerKind::Conv2d {
                k_h,
                k_w,
                c_in,
                c_out,
                bias,
                ..
            } => {
                let mut v = vec![vec![c_out, c_in, k_h, k_w]];
                if bias {
                    v.push(vec![c_out]);
                }
                v
            }
            LayerKind::DepthwiseConv2d { k, c, .. } => vec![vec![c, 1, k, k]],
            LayerKind::BatchNorm { c, .. } => vec![vec![c], vec![c]],
            LayerKind::FullyConnected { d_in, d_out } => vec![vec![d_out, d_in], vec![d_out]],
            _ => Vec::new(),
        }
    }

    /// Whether the layer has a kernel that a weight quantizer can act on.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::FullyConnected { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics untouched.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
    /// Like `TrainFrozenStats`, with activation quantizers bypassed while
    /// their input magnitudes are recorded.
    Calibrate,
}

impl Mode {
    fn batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Clone, Debug)]
pub struct Layer<S: Real> {
    pub tag: String,
    pub kind: LayerKind,
    pub params: Vec<Tensor<S>>,
    /// Non-trainable buffers (batch-norm running mean and variance).
    pub buffers: Vec<Tensor<S>>,
    /// Activation index whose value is added to this layer's output
    /// (0 = graph input, i + 1 = output of layer i).
    pub skip: Option<usize>,
    pub frozen: bool,
    pub weight_quant: Option<Quantizer<S>>,
    pub act_quant: Option<Quantizer<S>>,
    sinc: Option<SincFilterbank<S>>,
    calibration: (f64, u64),
}

enum OpCache<S: Real> {
    Sinc(SincCache<S>),
    Conv1d(Conv1dCache<S>),
    Mfcc,
    Conv2d { cols: Vec<S>, w: Tensor<S> },
    Depthwise { input: Tensor<S>, w: Tensor<S> },
    BatchNorm { xhat: Vec<S>, inv_std: Vec<S> },
    Relu { output: Tensor<S> },
    Pool,
    Fc { input: Tensor<S>, w: Tensor<S> },
    Identity,
}

pub struct LayerCache<S: Real> {
    kind: LayerKind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    op: OpCache<S>,
    weight_quant: Option<QuantCache<S>>,
    act_quant: Option<QuantCache<S>>,
    residual: bool,
    batch_stats: bool,
}

#[derive(Clone, Debug)]
pub struct LayerGrads<S: Real> {
    pub params: Vec<Tensor<S>>,
    pub weight_quant: QuantGrads<S>,
    pub act_quant: QuantGrads<S>,
}

fn uniform<S: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..bound)))
}

impl<S: Real> Layer<S> {
    /// Layer with freshly initialized parameters: He-uniform convolutions,
    /// unit/zero batch norm, mel-spaced sinc cutoffs.
    pub fn new<R: Rng>(tag: impl Into<String>, kind: LayerKind, rng: &mut R) -> Result<Self> {
        kind.validate()?;
        let mut sinc = None;
        let params = match kind {
            LayerKind::SincConv {
                filters,
                kernel_len,
                sample_rate,
                ..
            } => {
                sinc = Some(SincFilterbank::mel_init(filters, kernel_len, sample_rate as f64)?);
                Vec::new()
            }
            LayerKind::Conv1dFrontend {
                filters,
                kernel_len,
                sample_rate,
                ..
            } => vec![sinc_initialized_filters(filters, kernel_len, sample_rate as f64)?],
            LayerKind::Conv2d {
                k_h,
                k_w,
                c_in,
                c_out,
                bias,
                ..
            } => {
                let fan_in = (c_in * k_h * k_w) as f64;
                let mut v = vec![uniform(&[c_out, c_in, k_h, k_w], (6.0 / fan_in).sqrt(), rng)];
                if bias {
                    v.push(uniform(&[c_out], 1.0 / fan_in.sqrt(), rng));
                }
                v
            }
            LayerKind::DepthwiseConv2d { k, c, .. } => {
                vec![uniform(&[c, 1, k, k], (6.0 / (k * k) as f64).sqrt(), rng)]
            }
            LayerKind::BatchNorm { c, .. } => vec![Tensor::full(&[c], S::one()), Tensor::zeros(&[c])],
            LayerKind::FullyConnected { d_in, d_out } => {
                let b = 1.0 / (d_in as f64).sqrt();
                vec![uniform(&[d_out, d_in], b, rng), uniform(&[d_out], b, rng)]
            }
            _ => Vec::new(),
        };
        let buffers = match kind {
            LayerKind::BatchNorm { c, .. } => vec![Tensor::zeros(&[c]), Tensor::full(&[c], S::one())],
            _ => Vec::new(),
        };
        Ok(Self {
            tag: tag.into(),
            kind,
            params,
            buffers,
            skip: None,
            frozen: false,
            weight_quant: None,
            act_quant: None,
            sinc,
            calibration: (0.0, 0),
        })
    }

    /// Layer with explicit parameter tensors (shapes are checked).
    pub fn with_params(tag: impl Into<String>, kind: LayerKind, params: Vec<Tensor<S>>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut layer = Self::new(tag, kind, &mut rng)?;
        layer.set_params(params)?;
        Ok(layer)
    }

    pub fn cast<T: Real>(&self) -> Result<Layer<T>> {
        let sinc = match &self.sinc {
            Some(b) => Some(SincFilterbank::from_theta(b.theta().cast(), b.kernel_len(), b.sample_rate())?),
            None => None,
        };
        Ok(Layer {
            tag: self.tag.clone(),
            kind: self.kind.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            buffers: self.buffers.iter().map(|p| p.cast()).collect(),
            skip: self.skip,
            frozen: self.frozen,
            weight_quant: self.weight_quant.as_ref().map(|q| q.cast()),
            act_quant: self.act_quant.as_ref().map(|q| q.cast()),
            sinc,
            calibration: (0.0, 0),
        })
    }

    pub fn with_skip(mut self, skip: usize) -> Self {
        self.skip = Some(skip);
        self
    }

    /// Trainable tensors in canonical order, sinc cutoff trainables included.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        match &self.sinc {
            Some(bank) => vec![bank.theta()],
            None => self.params.iter().collect(),
        }
    }

    /// Length of [`Self::trainables_mut`].
    pub fn num_trainables(&self) -> usize {
        let quant = self.weight_quant.is_some() as usize + self.act_quant.is_some() as usize;
        self.params().len() + 2 * quant
    }

    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        let shapes = self.kind.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::Shape(format!(
                "{}: expected parameter shapes {shapes:?}, got {:?}",
                self.tag,
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        match &mut self.sinc {
            Some(bank) => *bank.theta_mut() = params.into_iter().next().expect("one tensor"),
            None => self.params = params,
        }
        Ok(())
    }

    pub fn sinc_bank(&self) -> Option<&SincFilterbank<S>> {
        self.sinc.as_ref()
    }

    /// Trainable tensors and quantizer state in canonical order, paired with
    /// a trainability flag. [`LayerGrads::flatten`] uses the same order.
    pub fn trainables_mut(&mut self) -> Vec<(&mut Tensor<S>, bool)> {
        let frozen = self.frozen;
        let mut out: Vec<(&mut Tensor<S>, bool)> = match &mut self.sinc {
            Some(bank) => vec![(bank.theta_mut(), !frozen)],
            None => self.params.iter_mut().map(|p| (p, !frozen)).collect(),
        };
        for q in [&mut self.weight_quant, &mut self.act_quant].into_iter().flatten() {
            let (at, bt) = (q.alpha_trainable(), q.bits_trainable());
            out.push((&mut q.alpha, at));
            out.push((&mut q.bits, bt));
        }
        out
    }

    pub fn project_quantizers(&mut self) {
        for q in [&mut self.weight_quant, &mut self.act_quant].into_iter().flatten() {
            q.project();
        }
    }

    pub fn take_calibration(&mut self) -> Option<f64> {
        let (sum, n) = std::mem::take(&mut self.calibration);
        (n > 0).then(|| sum / n as f64)
    }

    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        residual: Option<&Tensor<S>>,
        mode: Mode,
    ) -> Result<(Tensor<S>, LayerCache<S>)> {
        let [b, c, h, w] = x.dims4();
        let out3 = self.kind.output_shape([c, h, w])?;
        let out_shape = vec![b, out3[0], out3[1], out3[2]];

        let (w_eff, wq_cache) = match (&self.weight_quant, self.params.first()) {
            (Some(q), Some(p)) if self.kind.has_weights() => {
                let (wq, cache) = q.quantize(p);
                (Some(wq), Some(cache))
            }
            _ => (None, None),
        };
        let weights = w_eff.as_ref().or(self.params.first());

        let (mut y, op) = match self.kind.clone() {
            LayerKind::SincConv { hop, .. } => {
                let bank = self.sinc.as_mut().expect("sinc layer owns a filterbank");
                let (y, cache) = bank.forward(x, hop)?;
                (y, OpCache::Sinc(cache))
            }
            LayerKind::Conv1dFrontend { kernel_len, hop, .. } => {
                let win: Vec<S> = hamming(kernel_len).into_iter().map(S::lit).collect();
                let (y, cache) = conv1d_frontend_forward(x, &self.params[0], &win, hop)?;
                (y, OpCache::Conv1d(cache))
            }
            LayerKind::Mfcc { spec } => {
                let ex = MfccExtractor::new(spec)?;
                let mut data = Vec::with_capacity(out_shape.iter().product());
                for i in 0..b {
                    let wave: Vec<f64> = x.example(i).iter().map(|v| v.as_f64()).collect();
                    let band = preprocess_band(&wave, spec.f_low, spec.f_high, spec.sample_rate as f64);
                    let (coeffs, _) = ex.extract(&band)?;
                    data.extend(coeffs.into_iter().map(S::lit));
                }
                (Tensor::new(out_shape.clone(), data)?, OpCache::Mfcc)
            }
            LayerKind::Conv2d {
                k_h,
                k_w,
                stride_h,
                stride_w,
                pad,
                c_in,
                c_out,
                bias,
            } => {
                let wt = weights.expect("conv weights").clone();
                let geo = ConvGeometry {
                    c: c_in,
                    h,
                    w,
                    k_h,
                    k_w,
                    stride_h,
                    stride_w,
                    pad,
                    oh: out3[1],
                    ow: out3[2],
                };
                let kk = c_in * k_h * k_w;
                let p = geo.oh * geo.ow;
                let mut out = vec![S::zero(); b * c_out * p];
                let mut cols = Vec::with_capacity(b * kk * p);
                for i in 0..b {
                    let col = geo.im2col(x.example(i));
                    gemm_nn(c_out, kk, p, wt.data(), &col, &mut out[i * c_out * p..(i + 1) * c_out * p]);
                    cols.extend(col);
                }
                if bias {
                    let bv = self.params[1].data();
                    for (j, chunk) in out.chunks_mut(p).enumerate() {
                        let bj = bv[j % c_out];
                        chunk.iter_mut().for_each(|v| *v += bj);
                    }
                }
                (Tensor::new(out_shape.clone(), out)?, OpCache::Conv2d { cols, w: wt })
            }
            LayerKind::DepthwiseConv2d { k, stride, pad, c: ch } => {
                let wt = weights.expect("depthwise weights").clone();
                let out = depthwise_forward(x, wt.data(), ch, k, stride, pad, out3[1], out3[2]);
                (
                    Tensor::new(out_shape.clone(), out)?,
                    OpCache::Depthwise {
                        input: x.clone(),
                        w: wt,
                    },
                )
            }
            LayerKind::BatchNorm { c: ch, eps, momentum } => {
                let hw = h * w;
                let n = (b * hw) as f64;
                let gamma = self.params[0].data();
                let beta = self.params[1].data();
                let mut out = vec![S::zero(); x.len()];
                let mut xhat = vec![S::zero(); x.len()];
                let mut inv_std = vec![S::zero(); ch];
                for j in 0..ch {
                    let (mean, var) = if mode.batch_stats() {
                        let mut s = S::zero();
                        for i in 0..b {
                            s += x.data()[(i * ch + j) * hw..(i * ch + j + 1) * hw].iter().copied().sum::<S>();
                        }
                        let mean = s / S::lit(n);
                        let mut v = S::zero();
                        for i in 0..b {
                            for &xv in &x.data()[(i * ch + j) * hw..(i * ch + j + 1) * hw] {
                                v += (xv - mean) * (xv - mean);
                            }
                        }
                        let var = v / S::lit(n);
                        if mode == Mode::Train {
                            let m = S::lit(momentum);
                            let unbiased = if n > 1.0 { var * S::lit(n / (n - 1.0)) } else { var };
                            let rm = &mut self.buffers[0].data_mut()[j];
                            *rm = (S::one() - m) * *rm + m * mean;
                            let rv = &mut self.buffers[1].data_mut()[j];
                            *rv = (S::one() - m) * *rv + m * unbiased;
                        }
                        (mean, var)
                    } else {
                        (self.buffers[0].data()[j], self.buffers[1].data()[j])
                    };
                    let is = S::one() / (var + S::lit(eps)).sqrt();
                    inv_std[j] = is;
                    for i in 0..b {
                        let base = (i * ch + j) * hw;
                        for t in base..base + hw {
                            let xh = (x.data()[t] - mean) * is;
                            xhat[t] = xh;
                            out[t] = gamma[j] * xh + beta[j];
                        }
                    }
                }
                (Tensor::new(out_shape.clone(), out)?, OpCache::BatchNorm { xhat, inv_std })
            }
            LayerKind::Relu => {
                let y = x.map(|v| v.max(S::zero()));
                (y.clone(), OpCache::Relu { output: y })
            }
            LayerKind::GlobalAvgPool => {
                let hw = h * w;
                let inv = S::one() / S::lit(hw as f64);
                let out: Vec<S> = x
                    .data()
                    .chunks(hw)
                    .map(|chunk| chunk.iter().copied().sum::<S>() * inv)
                    .collect();
                (Tensor::new(out_shape.clone(), out)?, OpCache::Pool)
            }
            LayerKind::FullyConnected { d_in, d_out } => {
                let wt = weights.expect("fc weights").clone();
                let mut out = vec![S::zero(); b * d_out];
                gemm_nt(b, d_in, d_out, x.data(), wt.data(), &mut out);
                let bv = self.params[1].data();
                for row in out.chunks_mut(d_out) {
                    for (o, &bb) in row.iter_mut().zip(bv) {
                        *o += bb;
                    }
                }
                (
                    Tensor::new(out_shape.clone(), out)?,
                    OpCache::Fc {
                        input: x.clone(),
                        w: wt,
                    },
                )
            }
            LayerKind::Identity => (x.clone(), OpCache::Identity),
        };

        if let Some(r) = residual {
            y.add_assign(r).map_err(|_| {
                Error::Shape(format!(
                    "{}: residual shape {:?} differs from output {:?}",
                    self.tag,
                    r.shape(),
                    y.shape()
                ))
            })?;
        }

        let act_cache = match &self.act_quant {
            Some(_) if mode == Mode::Calibrate => {
                let s: f64 = y.data().iter().map(|v| v.abs().as_f64()).sum();
                self.calibration.0 += s;
                self.calibration.1 += y.len() as u64;
                None
            }
            Some(q) => {
                let (yq, cache) = q.quantize(&y);
                y = yq;
                Some(cache)
            }
            None => None,
        };

        y.ensure_finite(&self.tag)?;
        Ok((
            y,
            LayerCache {
                kind: self.kind.clone(),
                in_shape: x.shape().to_vec(),
                out_shape,
                op,
                weight_quant: wq_cache,
                act_quant: act_cache,
                residual: residual.is_some(),
                batch_stats: mode.batch_stats(),
            },
        ))
    }

    /// Returns `(grad_input, grad_residual, parameter gradients)`.
    pub fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>, LayerGrads<S>)> {
        if cache.kind != self.kind {
            return Err(Error::Usage(format!("{}: cache from a different layer", self.tag)));
        }
        if grad_out.len() != cache.out_shape.iter().product::<usize>() {
            return Err(Error::Usage(format!(
                "{}: gradient {:?} does not match output {:?}",
                self.tag,
                grad_out.shape(),
                cache.out_shape
            )));
        }
        let mut act_grads = QuantGrads::default();
        let g = match (&self.act_quant, &cache.act_quant) {
            (Some(q), Some(qc)) => {
                let (gx, qg) = q.backward(qc, grad_out);
                act_grads = qg;
                gx
            }
            _ => grad_out.clone(),
        };
        let g = g.reshape(&cache.out_shape)?;
        let grad_residual = cache.residual.then(|| g.clone());

        let [b, c, h, w] = pad4(&cache.in_shape);

        let mut param_grads: Vec<Tensor<S>> = Vec::new();
        let grad_in = match (&self.kind, &cache.op) {
            (LayerKind::SincConv { .. }, OpCache::Sinc(sc)) => {
                let bank = self.sinc.as_ref().expect("sinc layer owns a filterbank");
                let sg = bank.backward(sc, &g)?;
                param_grads.push(sg.theta);
                sg.wave
            }
            (LayerKind::Conv1dFrontend { kernel_len, .. }, OpCache::Conv1d(cc)) => {
                let win: Vec<S> = hamming(*kernel_len).into_iter().map(S::lit).collect();
                let (gw, gf) = conv1d_frontend_backward(cc, &self.params[0], &win, &g)?;
                param_grads.push(gf);
                gw
            }
            (LayerKind::Mfcc { .. }, OpCache::Mfcc) => Tensor::zeros(&cache.in_shape),
            (
                &LayerKind::Conv2d {
                    k_h,
                    k_w,
                    stride_h,
                    stride_w,
                    pad,
                    c_in,
                    c_out,
                    bias,
                },
                OpCache::Conv2d { cols, w: wt },
            ) => {
                let geo = ConvGeometry {
                    c: c_in,
                    h,
                    w,
                    k_h,
                    k_w,
                    stride_h,
                    stride_w,
                    pad,
                    oh: cache.out_shape[2],
                    ow: cache.out_shape[3],
                };
                let kk = c_in * k_h * k_w;
                let p = geo.oh * geo.ow;
                let mut gw = vec![S::zero(); c_out * kk];
                let mut gx = vec![S::zero(); b * c * h * w];
                let mut dcols = vec![S::zero(); kk * p];
                for i in 0..b {
                    let dy = &g.data()[i * c_out * p..(i + 1) * c_out * p];
                    gemm_nt(c_out, p, kk, dy, &cols[i * kk * p..(i + 1) * kk * p], &mut gw);
                    dcols.iter_mut().for_each(|v| *v = S::zero());
                    gemm_tn(kk, c_out, p, wt.data(), dy, &mut dcols);
                    geo.col2im(&dcols, &mut gx[i * c * h * w..(i + 1) * c * h * w]);
                }
                param_grads.push(Tensor::new(vec![c_out, c_in, k_h, k_w], gw)?);
                if bias {
                    let mut gb = vec![S::zero(); c_out];
                    for (j, chunk) in g.data().chunks(p).enumerate() {
                        gb[j % c_out] += chunk.iter().copied().sum::<S>();
                    }
                    param_grads.push(Tensor::new(vec![c_out], gb)?);
                }
                Tensor::new(cache.in_shape.clone(), gx)?
            }
            (&LayerKind::DepthwiseConv2d { k, stride, pad, c: ch }, OpCache::Depthwise { input, w: wt }) => {
                let (gx, gw) = depthwise_backward(
                    input,
                    wt.data(),
                    &g,
                    ch,
                    k,
                    stride,
                    pad,
                    cache.out_shape[2],
                    cache.out_shape[3],
                );
                param_grads.push(Tensor::new(vec![ch, 1, k, k], gw)?);
                Tensor::new(cache.in_shape.clone(), gx)?
            }
            (&LayerKind::BatchNorm { c: ch, .. }, OpCache::BatchNorm { xhat, inv_std }) => {
                let hw = h * w;
                let n = S::lit((b * hw) as f64);
                let gamma = self.params[0].data();
                let mut gg = vec![S::zero(); ch];
                let mut gbeta = vec![S::zero(); ch];
                let mut gx = vec![S::zero(); g.len()];
                for j in 0..ch {
                    let mut sdy = S::zero();
                    let mut sdyx = S::zero();
                    for i in 0..b {
                        let base = (i * ch + j) * hw;
                        for t in base..base + hw {
                            sdy += g.data()[t];
                            sdyx += g.data()[t] * xhat[t];
                        }
                    }
                    gg[j] = sdyx;
                    gbeta[j] = sdy;
                    let scale = gamma[j] * inv_std[j];
                    for i in 0..b {
                        let base = (i * ch + j) * hw;
                        for t in base..base + hw {
                            gx[t] = if cache.batch_stats {
                                scale * (g.data()[t] - sdy / n - xhat[t] * sdyx / n)
                            } else {
                                scale * g.data()[t]
                            };
                        }
                    }
                }
                param_grads.push(Tensor::new(vec![ch], gg)?);
                param_grads.push(Tensor::new(vec![ch], gbeta)?);
                Tensor::new(cache.in_shape.clone(), gx)?
            }
            (LayerKind::Relu, OpCache::Relu { output }) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(output.data())
                    .map(|(&gv, &y)| if y > S::zero() { gv } else { S::zero() })
                    .collect();
                Tensor::new(cache.in_shape.clone(), gx)?
            }
            (LayerKind::GlobalAvgPool, OpCache::Pool) => {
                let hw = h * w;
                let inv = S::one() / S::lit(hw as f64);
                let mut gx = Vec::with_capacity(b * c * hw);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                Tensor::new(cache.in_shape.clone(), gx)?
            }
            (&LayerKind::FullyConnected { d_in, d_out }, OpCache::Fc { input, w: wt }) => {
                let mut gw = vec![S::zero(); d_out * d_in];
                gemm_tn(d_out, b, d_in, g.data(), input.data(), &mut gw);
                let mut gb = vec![S::zero(); d_out];
                for row in g.data().chunks(d_out) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let mut gx = vec![S::zero(); b * d_in];
                gemm_nn(b, d_out, d_in, g.data(), wt.data(), &mut gx);
                param_grads.push(Tensor::new(vec![d_out, d_in], gw)?);
                param_grads.push(Tensor::new(vec![d_out], gb)?);
                Tensor::new(cache.in_shape.clone(), gx)?
            }
            (LayerKind::Identity, OpCache::Identity) => g.clone().reshape(&cache.in_shape)?,
            _ => return Err(Error::Usage(format!("{}: mismatched layer cache", self.tag))),
        };

        let mut weight_grads = QuantGrads::default();
        if let (Some(q), Some(qc)) = (&self.weight_quant, &cache.weight_quant) {
            let (gw, qg) = q.backward(qc, &param_grads[0]);
            param_grads[0] = gw;
            weight_grads = qg;
        }

        Ok((
            grad_in,
            grad_residual,
            LayerGrads {
                params: param_grads,
                weight_quant: weight_grads,
                act_quant: act_grads,
            },
        ))
    }
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut d = [1usize; 4];
    for (i, &s) in shape.iter().enumerate().take(4) {
        d[i] = s;
    }
    d
}

impl<S: Real> LayerGrads<S> {
    /// Gradients in the order of [`Layer::trainables_mut`].
    pub fn flatten(&self, layer: &Layer<S>) -> Vec<Tensor<S>> {
        let mut out = self.params.clone();
        if layer.weight_quant.is_some() {
            out.push(Tensor::scalar(self.weight_quant.alpha));
            out.push(Tensor::scalar(self.weight_quant.bits));
        }
        if layer.act_quant.is_some() {
            out.push(Tensor::scalar(self.act_quant.alpha));
            out.push(Tensor::scalar(self.act_quant.bits));
        }
        out
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    stride_h: usize,
    stride_w: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn im2col<S: Real>(&self, x: &[S]) -> Vec<S> {
        let p = self.oh * self.ow;
        if self.k_h == 1 && self.k_w == 1 && self.stride_h == 1 && self.stride_w == 1 && self.pad == 0 {
            return x.to_vec();
        }
        let mut cols = vec![S::zero(); self.c * self.k_h * self.k_w * p];
        for ci in 0..self.c {
            for ki in 0..self.k_h {
                for kj in 0..self.k_w {
                    let row = ((ci * self.k_h + ki) * self.k_w + kj) * p;
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride_h + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(ci * self.h + ii as usize) * self.w..];
                        let dst = &mut cols[row + oi * self.ow..row + (oi + 1) * self.ow];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * self.stride_w + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Real>(&self, cols: &[S], out: &mut [S]) {
        let p = self.oh * self.ow;
        if self.k_h == 1 && self.k_w == 1 && self.stride_h == 1 && self.stride_w == 1 && self.pad == 0 {
            for (o, &v) in out.iter_mut().zip(cols) {
                *o += v;
            }
            return;
        }
        for ci in 0..self.c {
            for ki in 0..self.k_h {
                for kj in 0..self.k_w {
                    let row = ((ci * self.k_h + ki) * self.k_w + kj) * p;
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride_h + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + ii as usize) * self.w;
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride_w + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                out[base + jj as usize] += cols[row + oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward<S: Real>(
    x: &Tensor<S>,
    wt: &[S],
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [b, _, h, w] = x.dims4();
    let mut out = vec![S::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        let kern = &wt[ch * k * k..(ch + 1) * k * k];
        for ki in 0..k {
            for kj in 0..k {
                let kv = kern[ki * k + kj];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let row = &src[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * ow + oj] += kv * row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<S: Real>(
    x: &Tensor<S>,
    wt: &[S],
    g: &Tensor<S>,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<S>, Vec<S>) {
    let [b, _, h, w] = x.dims4();
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); c * k * k];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dy = &g.data()[bc * oh * ow..(bc + 1) * oh * ow];
        let gxs = &mut gx[bc * h * w..(bc + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let kv = wt[ch * k * k + ki * k + kj];
                let mut acc = S::zero();
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            let d = dy[oi * ow + oj];
                            acc += d * src[base + jj as usize];
                            gxs[base + jj as usize] += d * kv;
                        }
                    }
                }
                gw[ch * k * k + ki * k + kj] += acc;
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{gradient_check, DEFAULT_STEP};
    use crate::nn::graph::ModelGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check(input: [usize; 3], batch: usize, kinds: Vec<LayerKind>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = kinds
            .into_iter()
            .map(|k| Layer::new(k.name(), k, &mut rng).unwrap())
            .collect();
        let mut g = ModelGraph::new(input, layers).unwrap();
        let x = random(&[batch, input[0], input[1], input[2]], 11);
        gradient_check(&mut g, &x, 1e-4, DEFAULT_STEP).unwrap().max_rel_err()
    }

    #[test]
    fn identity_pointwise_conv_reproduces_input() {
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let mut l = Layer::with_params("c", LayerKind::conv(1, 1, 3, 3), vec![w]).unwrap();
        let x = random(&[2, 3, 4, 5], 1);
        assert_eq!(l.forward(&x, None, Mode::Eval).unwrap().0, x);
    }

    #[test]
    fn delta_kernel_reproduces_input() {
        let mut w = Tensor::zeros(&[1, 1, 5, 5]);
        w.data_mut()[12] = 1.0;
        let mut l = Layer::with_params("c", LayerKind::conv(5, 1, 1, 1), vec![w]).unwrap();
        let x = random(&[1, 1, 6, 7], 2);
        assert_eq!(l.forward(&x, None, Mode::Eval).unwrap().0, x);
    }

    #[test]
    fn stride_two_conv_shape() {
        let kind = LayerKind::conv(3, 2, 1, 10);
        assert_eq!(kind.output_shape([1, 40, 98]).unwrap(), [10, 20, 49]);
    }

    #[test]
    fn relu_values() {
        let mut l = Layer::<f64>::with_params("r", LayerKind::Relu, vec![]).unwrap();
        let x = Tensor::new(vec![1, 3, 1, 1], vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(l.forward(&x, None, Mode::Eval).unwrap().0.data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [
            LayerKind::conv(3, 2, 2, 3),
            LayerKind::depthwise(3, 1, 2),
            LayerKind::batch_norm(2),
        ] {
            let mut l = Layer::<f64>::new("l", kind, &mut rng).unwrap();
            let x = random(&[2, 2, 5, 5], 4);
            let (y, cache) = l.forward(&x, None, Mode::Train).unwrap();
            let (gx, _, grads) = l.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
            assert!(gx.data().iter().all(|&v| v == 0.0));
            assert!(grads.params.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn mismatched_cache_is_a_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = Layer::<f64>::new("a", LayerKind::conv(3, 1, 1, 1), &mut rng).unwrap();
        let b = Layer::<f64>::new("b", LayerKind::depthwise(3, 1, 1), &mut rng).unwrap();
        let x = random(&[1, 1, 4, 4], 1);
        let (y, cache) = a.forward(&x, None, Mode::Eval).unwrap();
        assert!(matches!(b.backward(&cache, &y), Err(Error::Usage(_))));
        assert!(matches!(
            a.backward(&cache, &Tensor::zeros(&[1, 1, 2, 2])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn conv_gradients() {
        assert!(check([3, 5, 5], 2, vec![LayerKind::conv(3, 1, 3, 4)]) < 1e-4);
        assert!(check([2, 7, 6], 2, vec![LayerKind::conv(3, 2, 2, 3)]) < 1e-4);
        let biased = LayerKind::Conv2d {
            k_h: 1,
            k_w: 3,
            stride_h: 1,
            stride_w: 2,
            pad: 1,
            c_in: 2,
            c_out: 2,
            bias: true,
        };
        assert!(check([2, 4, 6], 2, vec![biased]) < 1e-4);
    }

    #[test]
    fn depthwise_bn_pool_fc_gradients() {
        assert!(check([3, 6, 5], 2, vec![LayerKind::depthwise(5, 2, 3)]) < 1e-4);
        assert!(check([3, 4, 4], 3, vec![LayerKind::batch_norm(3)]) < 1e-4);
        assert!(check([3, 4, 4], 2, vec![LayerKind::GlobalAvgPool]) < 1e-4);
        assert!(check([4, 1, 1], 3, vec![LayerKind::FullyConnected { d_in: 4, d_out: 4 }]) < 1e-6);
        assert!(check([2, 3, 3], 2, vec![LayerKind::Relu, LayerKind::Identity]) < 1e-4);
    }

    #[test]
    fn front_end_gradients() {
        let sinc = LayerKind::SincConv {
            filters: 3,
            kernel_len: 31,
            hop: 8,
            sample_rate: 16_000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Layer::<f64>::new("sinc", sinc, &mut rng).unwrap();
        // interior cutoffs, away from the clamp at fs/2
        let theta = Tensor::new(vec![3, 2], vec![0.01, 0.05, 0.12, 0.02, 0.2, 0.1]).unwrap();
        layer.set_params(vec![theta]).unwrap();
        let mut g = ModelGraph::new([1, 1, 80], vec![layer]).unwrap();
        let report = gradient_check(&mut g, &random(&[2, 1, 1, 80], 11), 1e-4, DEFAULT_STEP).unwrap();
        assert!(report.passed(), "{report:?}");
        let conv1d = LayerKind::Conv1dFrontend {
            filters: 2,
            kernel_len: 16,
            hop: 5,
            sample_rate: 16_000,
        };
        assert!(check([1, 1, 41], 2, vec![conv1d]) < 1e-4);
    }

    #[test]
    fn batch_norm_on_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = Layer::<f64>::new("bn", LayerKind::batch_norm(2), &mut rng).unwrap();
        let x = Tensor::full(&[2, 2, 3, 3], 0.7);
        let (y, cache) = l.forward(&x, None, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let (_, _, grads) = l.backward(&cache, &random(&[2, 2, 3, 3], 9)).unwrap();
        assert!(grads.params[0].data().iter().all(|v| v.abs() < 1e-12));

        let mut g = ModelGraph::new([2, 3, 3], vec![l]).unwrap();
        let report = gradient_check(&mut g, &x, 1e-4, DEFAULT_STEP).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = Layer::<f32>::new("c", LayerKind::conv(3, 1, 2, 2), &mut rng).unwrap();
        let x = random(&[2, 2, 4, 4], 1).cast::<f32>();
        assert_eq!(l.forward(&x, None, Mode::Eval).unwrap().0, l.forward(&x, None, Mode::Eval).unwrap().0);
    }

    #[test]
    fn non_finite_output_names_layer() {
        let w = Tensor::full(&[1, 1, 1, 1], f64::INFINITY);
        let mut l = Layer::with_params("bad_conv", LayerKind::conv(1, 1, 1, 1), vec![w]).unwrap();
        let err = l.forward(&random(&[1, 1, 2, 2], 1), None, Mode::Eval).err().unwrap();
        assert!(err.to_string().contains("bad_conv"));
    }
}
