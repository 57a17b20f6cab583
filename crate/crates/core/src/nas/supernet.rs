//! The over-parameterized model: a fixed stem, two searchable stages of
//! three layers each, and a fixed head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::mfcc::MfccSpec;
use crate::frontend::wav::SAMPLE_RATE;
use crate::nas::mbc::{mbc_block, MbcConfig, EXPANSIONS, KERNELS};
use crate::nn::{count_ops, count_params, GraphCache, GraphGrads, Layer, LayerKind, Mode, ModelGraph};
use crate::tensor::{Real, Tensor};

pub const SINC_KERNEL: usize = 400;
pub const SINC_HOP: usize = 160;
pub const STAGE_BASE_CHANNELS: [usize; 4] = [10, 20, 40, 80];
pub const LAYERS_PER_STAGE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrontEnd {
    Sinc {
        filters: usize,
        #[serde(default = "default_kernel")]
        kernel_len: usize,
        #[serde(default = "default_hop")]
        hop: usize,
    },
    Conv1d {
        filters: usize,
        #[serde(default = "default_kernel")]
        kernel_len: usize,
        #[serde(default = "default_hop")]
        hop: usize,
    },
    Mfcc {
        n_mfcc: usize,
    },
}

fn default_kernel() -> usize {
    SINC_KERNEL
}
fn default_hop() -> usize {
    SINC_HOP
}

impl FrontEnd {
    pub fn sinc(filters: usize) -> Self {
        FrontEnd::Sinc {
            filters,
            kernel_len: SINC_KERNEL,
            hop: SINC_HOP,
        }
    }

    pub fn layer_kind(&self) -> LayerKind {
        match *self {
            FrontEnd::Sinc {
                filters,
                kernel_len,
                hop,
            } => LayerKind::SincConv {
                filters,
                kernel_len,
                hop,
                sample_rate: SAMPLE_RATE,
            },
            FrontEnd::Conv1d {
                filters,
                kernel_len,
                hop,
            } => LayerKind::Conv1dFrontend {
                filters,
                kernel_len,
                hop,
                sample_rate: SAMPLE_RATE,
            },
            FrontEnd::Mfcc { n_mfcc } => LayerKind::Mfcc {
                spec: MfccSpec::standard(n_mfcc),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetSpec {
    /// Width multiplier applied to every stage's channel count.
    pub width: f64,
    pub frontend: FrontEnd,
    pub num_classes: usize,
    #[serde(default = "default_clip_len")]
    pub clip_len: usize,
}

fn default_clip_len() -> usize {
    crate::data::CLIP_LEN
}

impl SupernetSpec {
    pub fn new(width: f64, frontend: FrontEnd, num_classes: usize) -> Self {
        Self {
            width,
            frontend,
            num_classes,
            clip_len: default_clip_len(),
        }
    }

    /// Scaled channel counts of stages (ii) through (v).
    pub fn channels(&self) -> Result<[usize; 4]> {
        let mut out = [0; 4];
        for (o, &base) in out.iter_mut().zip(&STAGE_BASE_CHANNELS) {
            let c = self.width * base as f64;
            if !(c >= 1.0 && (c - c.round()).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "width {} gives non-integral channel count {c} for base {base}",
                    self.width
                )));
            }
            *o = c.round() as usize;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.channels()?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        self.frontend.layer_kind().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, 1, self.clip_len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CandidateOp {
    Mbc(MbcConfig),
    Identity,
}

impl CandidateOp {
    pub fn label(&self) -> String {
        match self {
            CandidateOp::Mbc(c) => c.label(),
            CandidateOp::Identity => "identity".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Candidate<S: Real> {
    pub op: CandidateOp,
    pub block: ModelGraph<S>,
    /// Per-example ops of the block on its input.
    pub ops: u64,
}

#[derive(Clone, Debug)]
pub struct SearchLayer<S: Real> {
    pub name: String,
    pub input_shape: [usize; 3],
    pub candidates: Vec<Candidate<S>>,
}

impl<S: Real> SearchLayer<S> {
    pub fn ops_table(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.ops).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Supernet<S: Real = f32> {
    pub spec: SupernetSpec,
    pub stem: ModelGraph<S>,
    pub layers: Vec<SearchLayer<S>>,
    pub head: ModelGraph<S>,
}

pub struct PathCache<S: Real> {
    choices: Vec<usize>,
    stem: GraphCache<S>,
    blocks: Vec<GraphCache<S>>,
    /// Input of each searchable layer along the path.
    pub inputs: Vec<Tensor<S>>,
    head: GraphCache<S>,
}

pub struct PathGrads<S: Real> {
    pub stem: GraphGrads<S>,
    pub blocks: Vec<GraphGrads<S>>,
    pub head: GraphGrads<S>,
    /// Loss gradient at the output of each searchable layer.
    pub block_outputs: Vec<Tensor<S>>,
}

/// Candidate list of one searchable layer: 18 MBC configurations in
/// (expansion, kernel) order, followed by identity unless `first`.
pub fn candidate_ops(c_in: usize, c_out: usize, stride: usize, first: bool) -> Vec<CandidateOp> {
    let mut v: Vec<CandidateOp> = EXPANSIONS
        .iter()
        .flat_map(|&e| {
            KERNELS.iter().map(move |&k| {
                CandidateOp::Mbc(MbcConfig {
                    e,
                    k,
                    c_in,
                    c_out,
                    stride,
                })
            })
        })
        .collect();
    if !first {
        v.push(CandidateOp::Identity);
    }
    v
}

impl<S: Real> Supernet<S> {
    pub fn new<R: Rng>(spec: SupernetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let [c2, c3, c4, c5] = spec.channels()?;

        let stem_layers = vec![
            Layer::new("frontend", spec.frontend.layer_kind(), rng)?,
            Layer::new("stem.conv", LayerKind::conv(3, 2, 1, c2), rng)?,
            Layer::new("stem.bn", LayerKind::batch_norm(c2), rng)?,
            Layer::new("stem.relu", LayerKind::Relu, rng)?,
        ];
        let stem = ModelGraph::new(spec.input_shape(), stem_layers)?;

        let mut shape = stem.output_shape()?;
        let mut layers = Vec::new();
        for (stage, (c_in_stage, c_out)) in [(c2, c3), (c3, c4)].into_iter().enumerate() {
            for li in 0..LAYERS_PER_STAGE {
                let first = li == 0;
                let (c_in, stride) = if first { (c_in_stage, 2) } else { (c_out, 1) };
                let name = format!("stage{}.layer{}", stage + 3, li + 1);
                let mut candidates = Vec::new();
                for op in candidate_ops(c_in, c_out, stride, first) {
                    let block = match op {
                        CandidateOp::Mbc(cfg) => {
                            mbc_block(&cfg, shape, !first, &format!("{name}.{}", cfg.label()), rng)?
                        }
                        CandidateOp::Identity => ModelGraph::new(shape, Vec::new())?,
                    };
                    let ops = count_ops(&block)?;
                    candidates.push(Candidate { op, block, ops });
                }
                let out = candidates[0].block.output_shape()?;
                layers.push(SearchLayer {
                    name,
                    input_shape: shape,
                    candidates,
                });
                shape = out;
            }
        }

        let head_layers = vec![
            Layer::new("head.conv", LayerKind::conv(1, 1, c4, c5), rng)?,
            Layer::new("head.bn", LayerKind::batch_norm(c5), rng)?,
            Layer::new("head.relu", LayerKind::Relu, rng)?,
            Layer::new("head.pool", LayerKind::GlobalAvgPool, rng)?,
            Layer::new(
                "head.fc",
                LayerKind::FullyConnected {
                    d_in: c5,
                    d_out: spec.num_classes,
                },
                rng,
            )?,
        ];
        let head = ModelGraph::new(shape, head_layers)?;
        Ok(Self {
            spec,
            stem,
            layers,
            head,
        })
    }

    /// Spatial shapes `[C, H, W]` at the stem output and after each stage.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut v = vec![self.stem.shapes()?[1], self.stem.output_shape()?];
        for (i, l) in self.layers.iter().enumerate() {
            if i % LAYERS_PER_STAGE == LAYERS_PER_STAGE - 1 {
                v.push(l.candidates[0].block.output_shape()?);
            }
        }
        v.push(self.head.shapes()?[1]);
        Ok(v)
    }

    pub fn count_params(&self) -> u64 {
        count_params(&self.stem)
            + self
                .layers
                .iter()
                .flat_map(|l| &l.candidates)
                .map(|c| count_params(&c.block))
                .sum::<u64>()
            + count_params(&self.head)
    }

    /// Ops of the fixed stem and head.
    pub fn fixed_ops(&self) -> Result<u64> {
        Ok(count_ops(&self.stem)? + count_ops(&self.head)?)
    }

    pub fn ops_tables(&self) -> Vec<Vec<u64>> {
        self.layers.iter().map(|l| l.ops_table()).collect()
    }

    fn check_choices(&self, choices: &[usize]) -> Result<()> {
        if choices.len() != self.layers.len()
            || choices.iter().zip(&self.layers).any(|(&c, l)| c >= l.candidates.len())
        {
            return Err(Error::Usage(format!("invalid path {choices:?}")));
        }
        Ok(())
    }

    pub fn forward_path(&mut self, x: &Tensor<S>, choices: &[usize], mode: Mode) -> Result<(Tensor<S>, PathCache<S>)> {
        self.check_choices(choices)?;
        let (mut h, stem) = self.stem.forward(x, mode)?;
        let mut blocks = Vec::with_capacity(choices.len());
        let mut inputs = Vec::with_capacity(choices.len());
        for (layer, &c) in self.layers.iter_mut().zip(choices) {
            let (y, cache) = layer.candidates[c].block.forward(&h, mode)?;
            inputs.push(std::mem::replace(&mut h, y));
            blocks.push(cache);
        }
        let (logits, head) = self.head.forward(&h, mode)?;
        Ok((
            logits,
            PathCache {
                choices: choices.to_vec(),
                stem,
                blocks,
                inputs,
                head,
            },
        ))
    }

    pub fn backward_path(&self, cache: &PathCache<S>, grad: &Tensor<S>) -> Result<PathGrads<S>> {
        let head = self.head.backward(&cache.head, grad)?;
        let mut g = head.input.clone();
        let n = self.layers.len();
        let mut blocks = Vec::with_capacity(n);
        let mut block_outputs = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let c = cache.choices[i];
            block_outputs.push(g.clone());
            let bg = self.layers[i].candidates[c].block.backward(&cache.blocks[i], &g)?;
            g = bg.input.clone();
            blocks.push(bg);
        }
        blocks.reverse();
        block_outputs.reverse();
        let stem = self.stem.backward(&cache.stem, &g)?;
        Ok(PathGrads {
            stem,
            blocks,
            head,
            block_outputs,
        })
    }

    /// Every weight tensor in a fixed order: stem, all candidates of all
    /// layers, head.
    pub fn trainables_mut(&mut self) -> Vec<(&mut Tensor<S>, bool)> {
        let mut v = self.stem.trainables_mut();
        for l in &mut self.layers {
            for c in &mut l.candidates {
                v.extend(c.block.trainables_mut());
            }
        }
        v.extend(self.head.trainables_mut());
        v
    }

    /// Gradients aligned with [`Self::trainables_mut`]; candidates off the
    /// path get `None`.
    pub fn path_gradients(&self, cache: &PathCache<S>, grads: &PathGrads<S>) -> Vec<Option<Tensor<S>>> {
        let mut v: Vec<Option<Tensor<S>>> = grads.stem.flatten(&self.stem).into_iter().map(Some).collect();
        for (i, l) in self.layers.iter().enumerate() {
            for (k, c) in l.candidates.iter().enumerate() {
                if k == cache.choices[i] {
                    v.extend(grads.blocks[i].flatten(&c.block).into_iter().map(Some));
                } else {
                    let n: usize = c.block.layers.iter().map(|x| x.num_trainables()).sum();
                    v.extend(std::iter::repeat_n(None, n));
                }
            }
        }
        v.extend(grads.head.flatten(&self.head).into_iter().map(Some));
        v
    }

    /// Concrete model of the given path: stem, the chosen blocks (identity
    /// choices vanish) and head, with weights copied.
    pub fn derive(&self, choices: &[usize]) -> Result<ModelGraph<S>> {
        self.check_choices(choices)?;
        let mut layers: Vec<Layer<S>> = self.stem.layers.clone();
        for (l, &c) in self.layers.iter().zip(choices) {
            let base = layers.len();
            for layer in &l.candidates[c].block.layers {
                let mut layer = layer.clone();
                layer.skip = layer.skip.map(|s| s + base);
                layers.push(layer);
            }
        }
        layers.extend(self.head.layers.iter().cloned());
        ModelGraph::new(self.spec.input_shape(), layers)
    }
}

/// Per-layer architecture logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub logits: Vec<Vec<f64>>,
}

impl ArchParams {
    pub fn zeros<S: Real>(net: &Supernet<S>) -> Self {
        Self {
            logits: net.layers.iter().map(|l| vec![0.0; l.candidates.len()]).collect(),
        }
    }

    pub fn probs(&self, layer: usize) -> Vec<f64> {
        crate::train::softmax(&self.logits[layer])
    }

    /// Most probable candidate per layer; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.logits
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|v| v.is_finite())
    }
}

/// Expected ops of the searchable part: `Σ_layers Σ_k p_k · ops_k`.
pub fn expected_ops(arch: &ArchParams, ops: &[Vec<u64>]) -> f64 {
    ops.iter()
        .enumerate()
        .map(|(l, row)| {
            arch.probs(l)
                .iter()
                .zip(row)
                .map(|(p, &o)| p * o as f64)
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of `E[ops]` with respect to the logits:
/// `∂E/∂a_m = p_m (ops_m - E_layer)`.
pub fn expected_ops_grad(arch: &ArchParams, ops: &[Vec<u64>]) -> Vec<Vec<f64>> {
    ops.iter()
        .enumerate()
        .map(|(l, row)| {
            let p = arch.probs(l);
            let e: f64 = p.iter().zip(row).map(|(p, &o)| p * o as f64).sum();
            p.iter().zip(row).map(|(p, &o)| p * (o as f64 - e)).collect()
        })
        .collect()
}

/// Draws one candidate from `probs`.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples the active candidate of `layer` and returns it with the binary
/// gate vector.
pub fn sample_path<R: Rng>(arch: &ArchParams, layer: usize, rng: &mut R) -> (usize, Vec<u8>) {
    let p = arch.probs(layer);
    let k = sample_index(&p, rng);
    let mut gates = vec![0; p.len()];
    gates[k] = 1;
    (k, gates)
}

/// Two distinct candidates drawn from `probs` without replacement.
pub fn sample_pair<R: Rng>(probs: &[f64], rng: &mut R) -> (usize, usize) {
    let a = sample_index(probs, rng);
    let rest: f64 = 1.0 - probs[a];
    let mut q: Vec<f64> = probs.to_vec();
    q[a] = 0.0;
    let b = if rest > 0.0 {
        q.iter_mut().for_each(|v| *v /= rest);
        sample_index(&q, rng)
    } else {
        (a + 1) % probs.len()
    };
    (a, if b == a { (a + 1) % probs.len() } else { b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(width: f64, filters: usize) -> Supernet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Supernet::new(SupernetSpec::new(width, FrontEnd::sinc(filters), 12), &mut rng).unwrap()
    }

    #[test]
    fn stage_shapes_at_unit_width() {
        let n = net(1.0, 40);
        let s = n.stage_shapes().unwrap();
        let spatial: Vec<[usize; 2]> = s.iter().map(|v| [v[1], v[2]]).collect();
        assert_eq!(spatial, vec![[40, 98], [20, 49], [10, 25], [5, 13], [5, 13]]);
        assert_eq!(s[4][0], 80);
    }

    #[test]
    fn half_width_channels() {
        let spec = SupernetSpec::new(0.5, FrontEnd::sinc(40), 12);
        assert_eq!(spec.channels().unwrap(), [5, 10, 20, 40]);
        assert!(SupernetSpec::new(0.25, FrontEnd::sinc(40), 12).validate().is_err());
    }

    #[test]
    fn candidate_counts() {
        let n = net(0.5, 40);
        let counts: Vec<usize> = n.layers.iter().map(|l| l.candidates.len()).collect();
        assert_eq!(counts, vec![18, 19, 19, 18, 19, 19]);
    }

    #[test]
    fn saturated_logit_always_sampled() {
        let mut arch = ArchParams { logits: vec![vec![0.0; 19]] };
        arch.logits[0][0] = 20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..1000).filter(|_| sample_path(&arch, 0, &mut rng).0 == 0).count();
        assert!(hits >= 999);
    }

    #[test]
    fn pair_is_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = vec![0.0; 5];
        p[2] = 1.0;
        for _ in 0..100 {
            let (a, b) = sample_pair(&p, &mut rng);
            assert_eq!(a, 2);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn derive_drops_identity_layers() {
        let n = net(0.5, 40);
        let g = n.derive(&[0, 18, 18, 0, 18, 18]).unwrap();
        assert_eq!(g.layers.len(), 4 + 8 + 8 + 5);
    }
}
