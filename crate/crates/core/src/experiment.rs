//! End-to-end steps shared by the command line and the tests: search,
//! architecture files, training and quantization-aware training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::io::model::LayerRecord;
use crate::nas::{search, SearchEpoch, SearchOutcome, Supernet, SupernetSpec};
use crate::nn::{count_ops, count_params, layer_table, Layer, LayerCount, ModelGraph, OPS_CONVENTION};
use crate::quant::{attach_quantizers, QuantPolicy};
use crate::seed;
use crate::train::{train, Checkpoint, EpochMetrics, TrainConfig, TrainOutcome};

pub const ARCH_VERSION: u32 = 1;

/// A derived architecture without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchFile {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub supernet: Option<SupernetSpec>,
    /// Selected candidate index per searchable layer.
    #[serde(default)]
    pub choices: Vec<usize>,
    #[serde(default)]
    pub choice_labels: Vec<String>,
    #[serde(default)]
    pub beta: Option<f64>,
}

impl ArchFile {
    pub fn from_graph(graph: &ModelGraph<f32>) -> Self {
        Self {
            format_version: ARCH_VERSION,
            input_shape: graph.input_shape(),
            layers: crate::io::model::layer_records(graph)
                .into_iter()
                .map(|r| LayerRecord {
                    weight_quant: None,
                    act_quant: None,
                    ..r
                })
                .collect(),
            supernet: None,
            choices: Vec::new(),
            choice_labels: Vec::new(),
            beta: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let arch: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid arch file: {e}")))?;
        if arch.format_version != ARCH_VERSION {
            return Err(Error::Config(format!("unsupported arch format_version {}", arch.format_version)));
        }
        arch.build(0)
            .map_err(|e| Error::Config(format!("invalid arch file {}: {e}", path.display())))?;
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Freshly initialized model of this architecture.
    pub fn build(&self, seed: u64) -> Result<ModelGraph<f32>> {
        let mut rng = seed::stream(seed, seed::INIT, 1);
        let mut layers = Vec::with_capacity(self.layers.len());
        for r in &self.layers {
            let mut l = Layer::new(r.tag.clone(), r.kind.clone(), &mut rng)?;
            l.skip = r.skip;
            l.frozen = r.frozen;
            layers.push(l);
        }
        ModelGraph::new(self.input_shape, layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountReport {
    pub params: u64,
    pub ops: u64,
    pub ops_convention: String,
    pub layers: Vec<LayerCount>,
}

pub fn count_report(graph: &ModelGraph<f32>) -> Result<CountReport> {
    Ok(CountReport {
        params: count_params(graph),
        ops: count_ops(graph)?,
        ops_convention: OPS_CONVENTION.to_string(),
        layers: layer_table(graph)?,
    })
}

impl CountReport {
    /// Stable plain-text rendering.
    pub fn render(&self) -> String {
        let mut s = format!("convention {}\n", self.ops_convention);
        s.push_str(&format!("{:<40} {:<20} {:>12} {:>14}\n", "layer", "kind", "params", "ops"));
        for l in &self.layers {
            s.push_str(&format!("{:<40} {:<20} {:>12} {:>14}\n", l.tag, l.kind, l.params, l.ops));
        }
        s.push_str(&format!("{:<40} {:<20} {:>12} {:>14}\n", "total", "", self.params, self.ops));
        s
    }
}

pub struct SearchResult {
    pub outcome: SearchOutcome<f32>,
    pub arch: ArchFile,
    pub supernet_params: u64,
}

/// Builds the supernet and runs the search.
pub fn run_search(
    cfg: &ExperimentConfig,
    data: &Splits,
    seed: u64,
    on_epoch: impl FnMut(&SearchEpoch) -> Result<()>,
) -> Result<SearchResult> {
    let spec = SupernetSpec {
        num_classes: data.num_classes(),
        ..cfg.supernet_spec()
    };
    let mut rng = seed::stream(seed, seed::INIT, 0);
    let mut net: Supernet<f32> = Supernet::new(spec, &mut rng)?;
    let supernet_params = net.count_params();
    let outcome = search(&mut net, data, &cfg.search_config(), seed, on_epoch)?;
    let mut arch = ArchFile::from_graph(&outcome.derived);
    arch.supernet = Some(spec);
    arch.choices = outcome.choices.clone();
    arch.choice_labels = outcome
        .choices
        .iter()
        .zip(&net.layers)
        .map(|(&c, l)| l.candidates[c].op.label())
        .collect();
    arch.beta = Some(cfg.beta);
    Ok(SearchResult {
        outcome,
        arch,
        supernet_params,
    })
}

/// Training settings for a policy: trained bit-widths switch on the penalty.
pub fn train_config_for(base: &TrainConfig, policy: Option<QuantPolicy>, lambda: (f64, f64), seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if let Some(QuantPolicy::Trained { .. }) = policy {
        cfg.lambda_w = lambda.0;
        cfg.lambda_a = lambda.1;
    } else {
        cfg.lambda_w = 0.0;
        cfg.lambda_a = 0.0;
    }
    cfg
}

/// Trains a fresh instance of `arch`, quantized when `policy` is given.
pub fn train_arch(
    arch: &ArchFile,
    data: &Splits,
    cfg: &TrainConfig,
    policy: Option<QuantPolicy>,
    tag: &str,
    on_epoch: impl FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut model = arch.build(cfg.seed)?;
    if let Some(p) = policy {
        attach_quantizers(&mut model, p)?;
    }
    train(Checkpoint::fresh(&model, cfg), data, cfg, tag, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_file_round_trip_rebuilds_same_graph() {
        let mut cfg = ExperimentConfig::desk(3, 6);
        cfg.frontend = crate::nas::FrontEnd::sinc(8);
        cfg.search.epochs = 1;
        let data = cfg.dataset.load(None, 0).unwrap();
        let r = run_search(&cfg, &data, 0, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("arch.json");
        r.arch.save(&p).unwrap();
        let back = ArchFile::load(&p).unwrap();
        assert_eq!(back, r.arch);
        let g = back.build(0).unwrap();
        assert_eq!(count_params(&g), count_params(&r.outcome.derived));
        assert_eq!(count_ops(&g).unwrap(), count_ops(&r.outcome.derived).unwrap());
        assert!(count_params(&g) <= r.supernet_params);
    }
}
