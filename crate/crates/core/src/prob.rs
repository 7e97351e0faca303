//! Small numeric helpers over probability vectors.

/// Smallest probability stored in a floored world, and the floor applied
/// before taking the log of a teacher probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln(max(p, PROB_FLOOR))`.
pub fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Clamp every entry to at least [`PROB_FLOOR`] and renormalize.
pub fn floor_and_renormalize(row: &mut [f64]) {
    for p in row.iter_mut() {
        *p = p.max(PROB_FLOOR);
    }
    let total: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= total;
    }
}

/// `KL(p ‖ q) = Σ_{p>0} p ln(p / max(q, floor))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - floored_ln(qi)))
        .sum()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&pi| pi > 0.0).map(|&pi| pi * pi.ln()).sum::<f64>()
}

/// `E_p[f]`, skipping zero-weight terms so `0 · (-inf)` never appears.
pub fn expectation(p: &[f64], f: &[f64]) -> f64 {
    p.iter().zip(f).filter(|(&w, _)| w > 0.0).map(|(&w, &v)| w * v).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    // Lowest index wins ties.
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn row_sum_error(row: &[f64]) -> f64 {
    (row.iter().sum::<f64>() - 1.0).abs()
}
