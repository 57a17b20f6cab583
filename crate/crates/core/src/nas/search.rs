//! Alternating weight and architecture updates with binary path gates.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::frontend::augment::AugmentConfig;
use crate::nas::supernet::{expected_ops, expected_ops_grad, sample_index, sample_pair, ArchParams, Supernet};
use crate::nn::{ModelGraph, Mode};
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::train::batch::{make_batch, shuffled_batches};
use crate::train::eval::evaluate_with;
use crate::train::{cross_entropy, Optimizer, OptimizerConfig};

/// The ops regularizer is `β · E[ops] / OPS_SCALE`.
pub const OPS_SCALE: f64 = 1e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_optimizer: OptimizerConfig,
    #[serde(default = "default_arch_lr")]
    pub arch_lr: f64,
    /// Set from the experiment's top-level `beta`.
    #[serde(skip)]
    pub beta: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Architecture update after every `arch_every`-th weight step.
    #[serde(default = "default_arch_every")]
    pub arch_every: usize,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

fn default_arch_lr() -> f64 {
    1e-3
}
fn default_warmup() -> f64 {
    0.2
}
fn default_arch_every() -> usize {
    2
}

impl SearchConfig {
    pub fn new(epochs: usize, batch_size: usize, beta: f64) -> Self {
        Self {
            epochs,
            batch_size,
            weight_optimizer: OptimizerConfig::default(),
            arch_lr: default_arch_lr(),
            beta,
            warmup_fraction: default_warmup(),
            arch_every: default_arch_every(),
            augment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weight_optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.arch_every == 0 {
            return Err(Error::Config("epochs, batch_size and arch_every must be >= 1".into()));
        }
        if !(self.arch_lr > 0.0) || !(self.beta >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(
                "need arch_lr > 0, beta >= 0 and warmup_fraction in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn warmup_epochs(&self) -> usize {
        (self.warmup_fraction * self.epochs as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
    /// Expected ops of the searchable layers.
    pub expected_ops: f64,
    /// Expected ops of the whole network.
    pub expected_total_ops: f64,
    pub argmax: Vec<usize>,
    pub argmax_ops: Vec<String>,
    pub wall_time_s: f64,
}

pub struct SearchOutcome<S: Real> {
    pub arch: ArchParams,
    pub choices: Vec<usize>,
    pub derived: ModelGraph<S>,
    pub log: Vec<SearchEpoch>,
}

#[derive(Clone, Debug)]
pub struct ArchGradient {
    pub logits: Vec<Vec<f64>>,
    pub task_loss: f64,
    pub expected_ops: f64,
}

/// One weight update on `choices` with cross-entropy; returns the loss.
pub fn weight_step<S: Real>(
    net: &mut Supernet<S>,
    x: &Tensor<S>,
    labels: &[usize],
    choices: &[usize],
    opt: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    let (logits, cache) = net.forward_path(x, choices, Mode::Train)?;
    let (loss, grad) = cross_entropy(&logits, labels)?;
    let grads = net.backward_path(&cache, &grad)?;
    let flat = net.path_gradients(&cache, &grads);
    opt.step(lr, net.trainables_mut(), &flat)?;
    Ok(loss)
}

/// Gradient of `L_CE + β·E[ops]/OPS_SCALE` with respect to the logits.
///
/// Per layer two candidates are drawn, their probabilities renormalized over
/// the pair and one of them activated. The task term uses
/// `∂L/∂a_m = Σ_k ∂L/∂g_k · p'_k (δ_km - p'_m)` over the pair, with
/// `∂L/∂g_k = <∂L/∂out, o_k>`.
pub fn arch_gradient<S: Real, R: Rng>(
    net: &mut Supernet<S>,
    arch: &ArchParams,
    x: &Tensor<S>,
    labels: &[usize],
    beta: f64,
    rng: &mut R,
) -> Result<ArchGradient> {
    let ops = net.ops_tables();
    if ops.iter().any(|r| r.is_empty()) {
        return Err(Error::Config("empty candidate ops table".into()));
    }
    let n = net.layers.len();
    let mut pairs = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for l in 0..n {
        let p = arch.probs(l);
        let (a, b) = sample_pair(&p, rng);
        let pa = p[a] / (p[a] + p[b]);
        let pick = if sample_index(&[pa, 1.0 - pa], rng) == 0 { a } else { b };
        pairs.push(((a, b), (pa, 1.0 - pa)));
        active.push(pick);
    }

    let (logits, cache) = net.forward_path(x, &active, Mode::TrainFrozenStats)?;
    let (task_loss, grad) = cross_entropy(&logits, labels)?;
    let grads = net.backward_path(&cache, &grad)?;

    let reg = expected_ops_grad(arch, &ops);
    let scale = beta / OPS_SCALE;
    let mut out: Vec<Vec<f64>> = reg.iter().map(|r| r.iter().map(|v| scale * v).collect()).collect();
    for l in 0..n {
        let ((a, b), (pa, pb)) = pairs[l];
        let g_out = &grads.block_outputs[l];
        let mut dg = [0.0; 2];
        for (slot, k) in [a, b].into_iter().enumerate() {
            let (o, _) = net.layers[l].candidates[k]
                .block
                .forward(&cache.inputs[l], Mode::TrainFrozenStats)?;
            dg[slot] = o.data().iter().zip(g_out.data()).map(|(u, v)| u.as_f64() * v.as_f64()).sum();
        }
        let pp = [pa, pb];
        for (mi, m) in [a, b].into_iter().enumerate() {
            let mut s = 0.0;
            for ki in 0..2 {
                let delta = if ki == mi { 1.0 } else { 0.0 };
                s += dg[ki] * pp[ki] * (delta - pp[mi]);
            }
            out[l][m] += s;
        }
    }
    Ok(ArchGradient {
        logits: out,
        task_loss,
        expected_ops: expected_ops(arch, &ops),
    })
}

/// Applies an optimizer step to the architecture logits.
pub fn apply_arch_gradient(arch: &mut ArchParams, grad: &[Vec<f64>], opt: &mut Optimizer, lr: f64) -> Result<()> {
    let mut tensors: Vec<Tensor<f64>> = arch
        .logits
        .iter()
        .map(|r| Tensor::new(vec![r.len()], r.clone()))
        .collect::<Result<_>>()?;
    let grads: Vec<Option<Tensor<f64>>> = grad
        .iter()
        .map(|r| Tensor::new(vec![r.len()], r.clone()).map(Some))
        .collect::<Result<_>>()?;
    opt.step(lr, tensors.iter_mut().map(|t| (t, true)).collect(), &grads)?;
    for (row, t) in arch.logits.iter_mut().zip(tensors) {
        *row = t.into_data();
    }
    if !arch.is_finite() {
        return Err(Error::NonFinite {
            layer: "architecture logits".into(),
        });
    }
    Ok(())
}

/// One weight step on the train batch along a sampled path, then one
/// architecture step on the validation batch. Returns `(train loss, arch
/// gradient)`.
#[allow(clippy::too_many_arguments)]
pub fn nas_step<S: Real, R: Rng>(
    net: &mut Supernet<S>,
    arch: &mut ArchParams,
    train: (&Tensor<S>, &[usize]),
    valid: (&Tensor<S>, &[usize]),
    beta: f64,
    weight_opt: &mut Optimizer,
    arch_opt: &mut Optimizer,
    rng: &mut R,
) -> Result<(f64, ArchGradient)> {
    let choices: Vec<usize> = (0..net.layers.len())
        .map(|l| sample_index(&arch.probs(l), rng))
        .collect();
    let lr = weight_opt.config.lr();
    let loss = weight_step(net, train.0, train.1, &choices, weight_opt, lr)?;
    let g = arch_gradient(net, arch, valid.0, valid.1, beta, rng)?;
    let arch_lr = arch_opt.config.lr();
    apply_arch_gradient(arch, &g.logits, arch_opt, arch_lr)?;
    Ok((loss, g))
}

/// Full search: uniform-path warm-up, then alternating updates. The derived
/// model takes the most probable candidate of every layer.
pub fn search<S: Real>(
    net: &mut Supernet<S>,
    data: &Splits,
    cfg: &SearchConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&SearchEpoch) -> Result<()>,
) -> Result<SearchOutcome<S>> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Input("search needs non-empty train and validation sets".into()));
    }
    let mut arch = ArchParams::zeros(net);
    let mut weight_opt = Optimizer::new(cfg.weight_optimizer);
    let mut arch_opt = Optimizer::new(OptimizerConfig::adam(cfg.arch_lr));
    let ops = net.ops_tables();
    let fixed = net.fixed_ops()? as f64;
    let warmup = cfg.warmup_epochs();
    let mut log = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut data_rng = seed::stream(seed, seed::EPOCH, epoch as u64);
        let mut path_rng = seed::stream(seed, seed::PATHS, epoch as u64);
        let mut arch_rng = seed::stream(seed, seed::ARCH, epoch as u64);
        let batches = shuffled_batches(data.train.len(), cfg.batch_size, &mut data_rng);
        let valid_batches = shuffled_batches(data.valid.len(), cfg.batch_size, &mut data_rng);
        let mut vi = 0;
        let mut loss_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = make_batch::<S, _>(&data.train, idx, cfg.augment.as_ref(), &data.noise, &mut data_rng)?;
            let choices: Vec<usize> = (0..net.layers.len())
                .map(|l| {
                    let n = net.layers[l].candidates.len();
                    if epoch < warmup {
                        path_rng.gen_range(0..n)
                    } else {
                        sample_index(&arch.probs(l), &mut path_rng)
                    }
                })
                .collect();
            let lr = cfg.weight_optimizer.lr();
            let loss = weight_step(net, &x, &y, &choices, &mut weight_opt, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * idx.len() as f64;

            if epoch >= warmup && bi % cfg.arch_every == cfg.arch_every - 1 {
                let vidx = &valid_batches[vi % valid_batches.len()];
                vi += 1;
                let (vx, vy) = make_batch::<S, _>(&data.valid, vidx, None, &data.noise, &mut data_rng)?;
                let g = arch_gradient(net, &arch, &vx, &vy, cfg.beta, &mut arch_rng)?;
                apply_arch_gradient(&mut arch, &g.logits, &mut arch_opt, cfg.arch_lr)?;
            }
        }

        let choices = arch.argmax();
        let eval = evaluate_with(&data.valid, data.num_classes(), |x| {
            Ok(net.forward_path(x, &choices, Mode::Eval)?.0)
        })?;
        let e_ops = expected_ops(&arch, &ops);
        let entry = SearchEpoch {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            valid_accuracy: eval.accuracy,
            expected_ops: e_ops,
            expected_total_ops: e_ops + fixed,
            argmax_ops: choices
                .iter()
                .zip(&net.layers)
                .map(|(&c, l)| l.candidates[c].op.label())
                .collect(),
            argmax: choices,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry)?;
        log.push(entry);
    }

    let choices = arch.argmax();
    let derived = net.derive(&choices)?;
    Ok(SearchOutcome {
        arch,
        choices,
        derived,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::nas::supernet::{FrontEnd, SupernetSpec};
    use crate::nn::count_ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> Supernet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Supernet::new(SupernetSpec::new(0.5, FrontEnd::sinc(8), 3), &mut rng).unwrap()
    }

    #[test]
    fn ops_penalty_favours_cheaper_candidate() {
        let arch = ArchParams { logits: vec![vec![0.0, 0.0]] };
        let g = expected_ops_grad(&arch, &[vec![1_000_000, 2_000_000]]);
        assert!(g[0][0] < 0.0 && g[0][1] > 0.0);
        // descending the gradient raises the cheap candidate's probability
        let stepped = ArchParams {
            logits: vec![vec![-g[0][0] * 1e-6, -g[0][1] * 1e-6]],
        };
        assert!(stepped.probs(0)[0] > 0.5);
    }

    #[test]
    fn one_hot_expectation_matches_derived_count() {
        let net = small_net();
        let choices = [3, 18, 7, 17, 0, 18];
        let mut arch = ArchParams::zeros(&net);
        for (row, &c) in arch.logits.iter_mut().zip(&choices) {
            row[c] = 1e3;
        }
        let derived = net.derive(&choices).unwrap();
        let searchable = count_ops(&derived).unwrap() - net.fixed_ops().unwrap();
        assert_eq!(expected_ops(&arch, &net.ops_tables()), searchable as f64);
    }

    #[test]
    fn expected_ops_is_bounded_by_candidate_extremes() {
        let net = small_net();
        let ops = net.ops_tables();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = ArchParams {
            logits: ops.iter().map(|r| r.iter().map(|_| rng.gen_range(-3.0..3.0)).collect()).collect(),
        };
        let lo: u64 = ops.iter().map(|r| *r.iter().min().unwrap()).sum();
        let hi: u64 = ops.iter().map(|r| *r.iter().max().unwrap()).sum();
        let e = expected_ops(&arch, &ops);
        assert!(lo as f64 <= e && e <= hi as f64);
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let probs = vec![1.0 / 19.0; 19];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut counts = vec![0usize; 19];
        for _ in 0..n {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        let p = 1.0 / 19.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let draw = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..50).map(|_| sample_index(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn zero_beta_leaves_only_task_gradient() {
        let data = synth_dataset(3, 3, 0).unwrap();
        let clips: Vec<_> = data.train.iter().take(2).collect();
        let (x, y) = crate::data::to_batch::<f32>(&clips).unwrap();
        let mut net = small_net();
        let arch = ArchParams::zeros(&net);
        let g0 = arch_gradient(&mut net, &arch, &x, &y, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g16 = arch_gradient(&mut net, &arch, &x, &y, 16.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let reg = expected_ops_grad(&arch, &net.ops_tables());
        for l in 0..reg.len() {
            for k in 0..reg[l].len() {
                let want = g0.logits[l][k] + 16.0 / OPS_SCALE * reg[l][k];
                assert!((g16.logits[l][k] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            // the task term touches exactly two candidates and sums to zero
            let touched = g0.logits[l].iter().filter(|v| **v != 0.0).count();
            assert!(touched <= 2);
            assert!(g0.logits[l].iter().sum::<f64>().abs() < 1e-9);
        }
        assert_eq!(g0.task_loss, g16.task_loss);
    }

    #[test]
    fn short_search_runs_and_logs_each_epoch() {
        let data = synth_dataset(3, 6, 1).unwrap();
        let mut net = small_net();
        let mut cfg = SearchConfig::new(2, 4, 4.0);
        cfg.warmup_fraction = 0.5;
        cfg.arch_every = 1;
        let mut seen = 0;
        let out = search(&mut net, &data, &cfg, 11, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 2);
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.choices, out.arch.argmax());
        assert!(out.log.iter().all(|e| (0.0..=1.0).contains(&e.valid_accuracy)));
        assert!(out.arch.logits.iter().flatten().any(|v| *v != 0.0));
        assert!(count_params_ok(&net, &out.derived));
    }

    fn count_params_ok(net: &Supernet<f32>, g: &ModelGraph<f32>) -> bool {
        crate::nn::count_params(g) <= net.count_params()
    }
}
