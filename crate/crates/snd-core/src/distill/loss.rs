//! Distillation objectives: prototype cross-entropy, cosine, and direct
//! feature regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FeatureMap;

use super::net::Logits;

/// Which objective supervises the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy between teacher and student prototype distributions.
    Distill,
    /// One minus mean per-token cosine similarity on raw features (no head).
    Cosine,
    /// Mean squared error against the rendered teacher map (no head).
    FeatureMse,
}

/// softmax(row / tau), log-sum-exp stabilized.
pub(crate) fn softmax_scaled(row: &[f64], tau: f64, out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x / tau - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log softmax(row / tau).
pub(crate) fn log_softmax_scaled(row: &[f64], tau: f64, out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let mut sum = 0.0;
    for &x in row {
        sum += (x / tau - m).exp();
    }
    let lse = m + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x / tau - lse;
    }
}

/// Per-token cross-entropy between the teacher distribution (temperature
/// tau_t) and the student log-distribution (temperature tau_s), averaged over
/// tokens. The teacher side is a constant with respect to parameters.
pub fn distill_loss(
    student_logits: &Logits,
    teacher_logits: &Logits,
    tau_s: f64,
    tau_t: f64,
) -> Result<f64> {
    if student_logits.tokens != teacher_logits.tokens
        || student_logits.prototypes != teacher_logits.prototypes
    {
        return Err(Error::ShapeMismatch("logit shapes differ".into()));
    }
    if !(tau_s > 0.0 && tau_t > 0.0) {
        return Err(Error::InvalidConfig("temperatures must be positive".into()));
    }
    let k = student_logits.prototypes;
    let mut p = vec![0.0; k];
    let mut logq = vec![0.0; k];
    let mut total = 0.0;
    for t in 0..student_logits.tokens {
        softmax_scaled(teacher_logits.row(t), tau_t, &mut p);
        log_softmax_scaled(student_logits.row(t), tau_s, &mut logq);
        let ce: f64 = p.iter().zip(&logq).map(|(pi, lq)| -pi * lq).sum();
        total += ce;
    }
    Ok(total / student_logits.tokens as f64)
}

pub(crate) fn cosine_token(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0; // zero-norm tokens contribute 0 similarity
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// 1 - mean per-token cosine similarity. Zero-norm tokens contribute 0.
pub fn cosine_loss(student_feats: &FeatureMap, target_feats: &FeatureMap) -> Result<f64> {
    check_same_shape(student_feats, target_feats)?;
    let tokens = student_feats.height() * student_feats.width();
    let mut sim = 0.0;
    for t in 0..tokens {
        let y = t / student_feats.width();
        let x = t % student_feats.width();
        sim += cosine_token(student_feats.at(y, x), target_feats.at(y, x));
    }
    Ok(1.0 - sim / tokens as f64)
}

/// Mean squared error over all token features.
pub fn feature_mse_loss(student_feats: &FeatureMap, target_feats: &FeatureMap) -> Result<f64> {
    check_same_shape(student_feats, target_feats)?;
    let n = student_feats.data().len();
    let sum: f64 = student_feats
        .data()
        .iter()
        .zip(target_feats.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_from(data: Vec<f64>, tokens: usize, prototypes: usize) -> Logits {
        Logits {
            tokens,
            prototypes,
            data,
        }
    }

    #[test]
    fn matching_distributions_give_entropy() {
        let l = logits_from(vec![0.5, -1.0, 2.0, 0.0], 1, 4);
        let loss = distill_loss(&l, &l, 0.3, 0.3).unwrap();
        let mut p = vec![0.0; 4];
        softmax_scaled(&l.data, 0.3, &mut p);
        let entropy: f64 = p.iter().map(|&pi| -pi * pi.ln()).sum();
        assert!((loss - entropy).abs() < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn sharp_teacher_uniform_student_approaches_log_k() {
        let k = 16;
        let mut teacher = vec![0.0; k];
        teacher[3] = 50.0; // logit gap 50 at tau 1 is effectively one-hot
        let teacher = logits_from(teacher, 1, k);
        let student = logits_from(vec![0.0; k], 1, k);
        let loss = distill_loss(&student, &teacher, 1.0, 1.0).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn gibbs_inequality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let k = 8;
            let s: Vec<f64> = (0..k).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let t: Vec<f64> = (0..k).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let student = logits_from(s, 1, k);
            let teacher = logits_from(t, 1, k);
            let tau_t = 0.5;
            let loss = distill_loss(&student, &teacher, 0.7, tau_t).unwrap();
            let mut p = vec![0.0; k];
            softmax_scaled(teacher.row(0), tau_t, &mut p);
            let teacher_entropy: f64 = p.iter().map(|&pi| -pi * pi.ln()).sum();
            assert!(loss >= teacher_entropy - 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let row: Vec<f64> = (0..32).map(|_| 100.0 * rng.random::<f64>() - 50.0).collect();
            let mut p = vec![0.0; 32];
            softmax_scaled(&row, 0.07, &mut p);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_identical_maps_is_zero() {
        let m = FeatureMap::from_fn(2, 2, 3, |y, x, c| (y * 9 + x * 2 + c) as f64 + 1.0);
        assert!(cosine_loss(&m, &m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_tokens_is_one() {
        let a = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = FeatureMap::new(1, 2, 2, vec![0.0, 3.0, 4.0, 0.0]).unwrap();
        assert!((cosine_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = FeatureMap::from_fn(2, 3, 4, |_, _, _| rng.random::<f64>() - 0.5);
        let b = FeatureMap::from_fn(2, 3, 4, |_, _, _| rng.random::<f64>() - 0.5);
        let scaled =
            FeatureMap::new(2, 3, 4, b.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let l1 = cosine_loss(&a, &b).unwrap();
        let l2 = cosine_loss(&a, &scaled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_tokens_contribute_zero() {
        let a = FeatureMap::new(1, 2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = FeatureMap::new(1, 2, 2, vec![5.0, 1.0, 1.0, 0.0]).unwrap();
        // First token similarity 0 (zero student), second 1.
        assert!((cosine_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn feature_mse_basic() {
        let a = FeatureMap::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let b = FeatureMap::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert!((feature_mse_loss(&a, &b).unwrap() - (1.0 + 4.0) / 2.0).abs() < 1e-12);
    }
}
