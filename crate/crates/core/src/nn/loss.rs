use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Row-wise log-softmax, max-shifted for stability.
pub fn log_softmax_row(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|v| v - lse)
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let ls = log_softmax_row(row.view());
        row.assign(&ls.mapv(f64::exp));
    }
    out
}

/// `log p(y_i)` for every node.
pub fn log_prob_of_label(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row[y] - lse
        })
        .collect()
}

/// Per-node cross-entropy `−log softmax(logits_i)[y_i]`.
pub fn per_node_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    log_prob_of_label(logits, labels)
        .into_iter()
        .map(|lp| (-lp).max(0.0))
        .collect()
}

/// Mean cross-entropy over masked nodes.
pub fn masked_cross_entropy(logits: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let ce = per_node_cross_entropy(logits, labels);
    Ok(ce.iter().zip(mask).filter(|(_, &b)| b).map(|(l, _)| l).sum::<f64>() / m as f64)
}

/// Gradient of [`masked_cross_entropy`] with respect to the logits.
pub fn cross_entropy_logit_grad(
    logits: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
) -> Result<Array2<f64>> {
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let mut g = Array2::zeros(logits.raw_dim());
    for (i, &selected) in mask.iter().enumerate() {
        if !selected {
            continue;
        }
        let p = log_softmax_row(logits.row(i)).mapv(f64::exp);
        let mut row = g.row_mut(i);
        row.assign(&(p / m as f64));
        row[labels[i]] -= 1.0 / m as f64;
    }
    Ok(g)
}

/// Argmax per row; ties resolve to the lowest class.
pub fn predictions(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
