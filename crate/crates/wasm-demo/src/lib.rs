//! Browser bindings: sinc band-pass responses, quantizer transfer curves and
//! supernet path counts.

use kwsnas::frontend::sinc::build_sinc_kernel;
use kwsnas::nas::{FrontEnd, Supernet, SupernetSpec};
use kwsnas::nn::{count_ops, count_params};
use kwsnas::quant::{BitMode, QuantSpec, Quantizer};
use kwsnas::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SAMPLE_RATE: f64 = 16_000.0;

/// Magnitude response in dB at `points` frequencies spanning 0..fs/2,
/// normalized so the ideal pass band reads 0 dB.
pub fn sinc_response_db(f1: f64, f2: f64, kernel_len: usize, points: usize) -> Result<Vec<f64>, String> {
    let taps = build_sinc_kernel(f1, f2, kernel_len, SAMPLE_RATE).map_err(|e| e.to_string())?;
    let points = points.max(2);
    Ok((0..points)
        .map(|i| {
            let w = std::f64::consts::PI * i as f64 / (points - 1) as f64;
            let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &h)| {
                let a = w * n as f64;
                (re + h * a.cos(), im - h * a.sin())
            });
            let mag = (re * re + im * im).sqrt() / SAMPLE_RATE;
            20.0 * mag.max(1e-6).log10()
        })
        .collect())
}

/// Quantized value of each input in `xs` for an activation quantizer with a
/// fixed range `alpha`.
pub fn quantizer_curve(bits: u32, signed: bool, alpha: f64, xs: &[f64]) -> Result<Vec<f64>, String> {
    let mut q = Quantizer::<f64>::new(QuantSpec::activation(BitMode::Fixed { bits }, signed), xs.len())
        .map_err(|e| e.to_string())?;
    q.set_alpha(alpha);
    let x = Tensor::new(vec![xs.len()], xs.to_vec()).map_err(|e| e.to_string())?;
    Ok(q.quantize(&x).0.data().to_vec())
}

#[derive(Debug, PartialEq)]
pub struct PathCounts {
    pub params: u64,
    pub ops: u64,
    pub labels: Vec<String>,
}

/// Parameters and operations of the model derived from one candidate index
/// per searchable layer (indices wrap around the candidate list).
pub fn path_counts(width: f64, filters: usize, num_classes: usize, choices: &[usize]) -> Result<PathCounts, String> {
    let spec = SupernetSpec::new(width, FrontEnd::sinc(filters), num_classes);
    let net: Supernet<f32> = Supernet::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    if choices.len() != net.layers.len() {
        return Err(format!("expected {} choices, got {}", net.layers.len(), choices.len()));
    }
    let choices: Vec<usize> = net
        .layers
        .iter()
        .zip(choices)
        .map(|(l, &c)| c % l.candidates.len())
        .collect();
    let labels = net
        .layers
        .iter()
        .zip(&choices)
        .map(|(l, &c)| l.candidates[c].op.label())
        .collect();
    let model = net.derive(&choices).map_err(|e| e.to_string())?;
    Ok(PathCounts {
        params: count_params(&model),
        ops: count_ops(&model).map_err(|e| e.to_string())?,
        labels,
    })
}

/// Candidate labels of every searchable layer, one comma-separated line per
/// layer.
pub fn candidate_labels(width: f64, filters: usize) -> Result<String, String> {
    let spec = SupernetSpec::new(width, FrontEnd::sinc(filters), 12);
    let net: Supernet<f32> = Supernet::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    Ok(net
        .layers
        .iter()
        .map(|l| {
            let labels: Vec<String> = l.candidates.iter().map(|c| c.op.label()).collect();
            format!("{}:{}", l.name, labels.join(","))
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[wasm_bindgen(js_name = sincResponseDb)]
pub fn sinc_response_db_js(f1: f64, f2: f64, kernel_len: usize, points: usize) -> Result<Vec<f64>, JsValue> {
    sinc_response_db(f1, f2, kernel_len, points).map_err(js)
}

#[wasm_bindgen(js_name = quantizerCurve)]
pub fn quantizer_curve_js(bits: u32, signed: bool, alpha: f64, xs: Vec<f64>) -> Result<Vec<f64>, JsValue> {
    quantizer_curve(bits, signed, alpha, &xs).map_err(js)
}

/// `[params, ops]` of the derived path.
#[wasm_bindgen(js_name = pathCounts)]
pub fn path_counts_js(width: f64, filters: usize, choices: Vec<usize>) -> Result<Vec<f64>, JsValue> {
    let c = path_counts(width, filters, 12, &choices).map_err(js)?;
    Ok(vec![c.params as f64, c.ops as f64])
}

#[wasm_bindgen(js_name = candidateLabels)]
pub fn candidate_labels_js(width: f64, filters: usize) -> Result<String, JsValue> {
    candidate_labels(width, filters).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_band_reads_near_zero_db() {
        let db = sinc_response_db(1000.0, 3000.0, 401, 801).unwrap();
        // bin i sits at i·10 Hz
        assert!(db[200].abs() < 0.1, "{}", db[200]);
        assert!(db[600] < -30.0, "{}", db[600]);
    }

    #[test]
    fn two_bit_unsigned_curve_has_four_levels() {
        let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 50.0 - 0.5).collect();
        let ys = quantizer_curve(2, false, 1.0, &xs).unwrap();
        let mut levels: Vec<u64> = ys.iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels.len(), 4);
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn smallest_candidates_give_a_smaller_path() {
        let small = path_counts(0.5, 40, 12, &[0, 0, 0, 0, 0, 0]).unwrap();
        let big = path_counts(0.5, 40, 12, &[17, 17, 17, 17, 17, 17]).unwrap();
        assert!(small.params < big.params && small.ops < big.ops);
        assert_eq!(small.labels.len(), 6);
        assert!(path_counts(0.5, 40, 12, &[0]).is_err());
    }
}
