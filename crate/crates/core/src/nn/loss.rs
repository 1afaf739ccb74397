use crate::error::{Error, Result};

/// Row-wise softmax of a `(batch, classes)` matrix.
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

fn check_logits(logits: &[f64], classes: usize) -> Result<usize> {
    if classes == 0 || logits.is_empty() || logits.len() % classes != 0 {
        return Err(Error::config(format!(
            "{} logits do not form rows of {classes} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::numeric("loss", "non-finite logits"));
    }
    Ok(logits.len() / classes)
}

/// Mean of `-log softmax(logits)[label]` and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy_loss(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let batch = check_logits(logits, classes)?;
    if labels.len() != batch {
        return Err(Error::config(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::config(format!("label {bad} outside [0, {classes})")));
    }
    let mut grad = softmax(logits, classes);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        loss -= log_softmax_row(row)[label];
        grad[b * classes + label] -= 1.0;
    }
    let inv = 1.0 / batch as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Cross entropy between teacher probability rows and the student softmax,
/// averaged over the batch; gradient `(softmax(student) - teacher) / batch`.
pub fn soft_target_loss(logits: &[f64], classes: usize, teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    let batch = check_logits(logits, classes)?;
    if teacher.len() != logits.len() {
        return Err(Error::config(format!(
            "{} teacher probabilities for {} logits",
            teacher.len(),
            logits.len()
        )));
    }
    for (b, row) in teacher.chunks_exact(classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Data {
                offset: b as u64,
                detail: format!("teacher row {b} is not a probability distribution (sum {sum})"),
            });
        }
    }
    let mut grad = softmax(logits, classes);
    let mut loss = 0.0;
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let t = &teacher[b * classes..(b + 1) * classes];
        loss -= log_softmax_row(row)
            .iter()
            .zip(t)
            .filter(|(_, &p)| p > 0.0)
            .map(|(lp, p)| p * lp)
            .sum::<f64>();
    }
    let inv = 1.0 / batch as f64;
    grad.iter_mut().zip(teacher).for_each(|(g, p)| *g = (*g - p) * inv);
    Ok((loss * inv, grad))
}
