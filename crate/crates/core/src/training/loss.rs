use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Mean next-token cross-entropy of `[n, vocab]` logits, evaluated in f64.
pub fn lm_loss<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<f64> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::shape("lm_loss", logits.shape(), &[targets.len()]));
    }
    if n == 0 {
        return Err(Error::EmptyInput("lm_loss"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        let t = t as usize;
        if t >= v {
            return Err(Error::Input(format!("target id {t} out of range for vocab {v}")));
        }
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[t].as_f64();
    }
    Ok(total / n as f64)
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}
