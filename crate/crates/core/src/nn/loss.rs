pub fn softmax(logits: &[f32]) -> Vec<f32> {
    softmax_t(logits, 1.0)
}

/// Softmax of `logits / temperature`, computed in f64 and max-shifted.
pub fn softmax_t(logits: &[f32], temperature: f32) -> Vec<f32> {
    let t = temperature as f64;
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64 - m) / t).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / s) as f32).collect()
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + logits.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z as f64 - lse).collect()
}

pub fn cross_entropy(logits: &[f32], label: usize) -> f32 {
    (-log_softmax(logits)[label]) as f32
}

/// `KL(target || softmax(logits))`. Reduces to cross-entropy when the target
/// is one-hot.
pub fn kl_to_target(logits: &[f32], target: &[f32]) -> f32 {
    let lq = log_softmax(logits);
    target
        .iter()
        .zip(&lq)
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &l)| p as f64 * ((p as f64).ln() - l))
        .sum::<f64>() as f32
}

/// Gradient of `KL(target || softmax(logits))` (and of soft-target CE) with
/// respect to the logits.
pub fn soft_target_grad(logits: &[f32], target: &[f32]) -> Vec<f32> {
    softmax(logits)
        .iter()
        .zip(target)
        .map(|(q, p)| q - p)
        .collect()
}

pub fn one_hot(k: usize, classes: usize) -> Vec<f32> {
    let mut v = vec![0.0; classes];
    v[k] = 1.0;
    v
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
