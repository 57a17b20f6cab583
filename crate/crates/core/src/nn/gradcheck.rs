//! Central-difference gradient checking in wide precision.

use serde::Serialize;

use crate::error::Result;
use crate::nn::graph::ModelGraph;
use crate::nn::layer::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    /// Layer index, or `None` for the graph input.
    pub layer: Option<usize>,
    pub tag: String,
    pub tensor: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Max elementwise error normalized by the larger of the two inf-norms, so
/// near-zero entries do not dominate. Both gradients vanishing counts as a
/// match.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Fixed pseudo-random projection weights for the scalar test loss.
pub fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect()
}

fn loss(graph: &mut ModelGraph<f64>, x: &Tensor<f64>, w: &[f64]) -> Result<f64> {
    let (y, _) = graph.forward(x, Mode::TrainFrozenStats)?;
    Ok(y.data().iter().zip(w).map(|(a, b)| a * b).sum())
}

/// Compares analytic gradients of `L = Σ wᵢ·yᵢ` with central differences for
/// every parameter tensor and the input. Batch norm runs on batch statistics
/// without touching running statistics. Quantizer state is not checked.
pub fn gradient_check(
    graph: &mut ModelGraph<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let (y, cache) = graph.forward(input, Mode::TrainFrozenStats)?;
    let w = projection(y.len());
    let grad_out = Tensor::new(y.shape().to_vec(), w.clone())?;
    let grads = graph.backward(&cache, &grad_out)?;

    let mut checks = Vec::new();
    let mut x = input.clone();
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let lp = loss(graph, &x, &w)?;
        x.data_mut()[i] = orig - step;
        let lm = loss(graph, &x, &w)?;
        x.data_mut()[i] = orig;
        *slot = (lp - lm) / (2.0 * step);
    }
    checks.push(TensorCheck {
        layer: None,
        tag: "input".into(),
        tensor: 0,
        max_rel_err: relative_error(grads.input.data(), &numeric),
    });

    for li in 0..graph.layers.len() {
        let n_params = graph.layers[li].params().len();
        for pi in 0..n_params {
            let analytic = grads.layers[li].params[pi].data().to_vec();
            let mut numeric = vec![0.0; analytic.len()];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let orig = graph.layers[li].trainables_mut()[pi].0.data()[k];
                graph.layers[li].trainables_mut()[pi].0.data_mut()[k] = orig + step;
                let lp = loss(graph, input, &w)?;
                graph.layers[li].trainables_mut()[pi].0.data_mut()[k] = orig - step;
                let lm = loss(graph, input, &w)?;
                graph.layers[li].trainables_mut()[pi].0.data_mut()[k] = orig;
                *slot = (lp - lm) / (2.0 * step);
            }
            checks.push(TensorCheck {
                layer: Some(li),
                tag: graph.layers[li].tag.clone(),
                tensor: pi,
                max_rel_err: relative_error(&analytic, &numeric),
            });
        }
    }
    Ok(GradCheckReport { tolerance, checks })
}
