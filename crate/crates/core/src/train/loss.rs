use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits (`(softmax - one_hot) / B`).
pub fn cross_entropy<S: Real>(logits: &Tensor<S>, labels: &[usize]) -> Result<(f64, Tensor<S>)> {
    let b = logits.batch();
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b} logits",
            labels.len()
        )));
    }
    let c = logits.len() / b;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("label {y} out of range for {c} classes")));
        }
        let row: Vec<f64> = logits.example(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, p) in softmax(&row).into_iter().enumerate() {
            let t = if j == y { 1.0 } else { 0.0 };
            grad.push(S::lit((p - t) / b as f64));
        }
    }
    Ok((loss / b as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Index of the largest logit per example; ties go to the lowest index.
pub fn argmax_rows<S: Real>(logits: &Tensor<S>) -> Vec<usize> {
    let b = logits.batch();
    (0..b)
        .map(|i| {
            let row = logits.example(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[1, 12]);
        let (l, _) = cross_entropy(&logits, &[3]).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_gives_near_zero_loss() {
        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.data_mut()[2] = 100.0;
        assert!(cross_entropy(&logits, &[2]).unwrap().0 < 1e-30);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::new(vec![2, 5], (0..10).map(|i| (i as f64 * 0.77).sin() * 3.0).collect()).unwrap();
        let labels = [1, 4];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for k in 0..10 {
            let mut p = logits.clone();
            p.data_mut()[k] += h;
            let mut m = logits.clone();
            m.data_mut()[k] -= h;
            let num = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            assert!((num - g.data()[k]).abs() <= 1e-6 * g.data()[k].abs().max(1e-3), "{k}");
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(cross_entropy(&Tensor::<f32>::zeros(&[1, 3]), &[3]).is_err());
    }
}
