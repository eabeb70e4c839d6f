//! Hand-written reverse-mode gradients for the fixed encoder + head
//! architecture. The teacher branch is a constant (stop-gradient): gradients
//! depend on the teacher only through the supervision signal.

use crate::error::{Error, Result};
use crate::geometry::FeatureMap;

use super::loss::{cosine_token, log_softmax_scaled, softmax_scaled, LossKind};
use super::net::{
    accumulate_outer, backprop_input, encode_cached, gelu_prime, head_cached,
};
use super::params::{ModelConfig, ModelParams, SegmentMap};

/// The frozen supervision the student is trained against.
#[derive(Debug, Clone)]
pub enum Supervision {
    /// Teacher prototype distributions, row-major (tokens x prototypes).
    Probs { probs: Vec<f64>, prototypes: usize },
    /// Raw target feature map (cosine / feature regression losses).
    Features(FeatureMap),
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    /// Gradient aligned with the student's flat parameter vector.
    pub grad: Vec<f64>,
    /// Entropy of mean teacher prototype usage (distillation loss only).
    pub proto_usage_entropy: Option<f64>,
}

/// Runs the (stop-gradient) teacher branch: target features through the head,
/// then a temperature softmax per token.
pub fn teacher_supervision(
    head_params: &ModelParams,
    cfg: &ModelConfig,
    target: &FeatureMap,
    tau_t: f64,
) -> Result<Supervision> {
    let tokens = target.height() * target.width();
    let cache = head_cached(head_params, cfg, target.data(), tokens)?;
    let k = cfg.head.prototypes;
    let mut probs = vec![0.0; tokens * k];
    for t in 0..tokens {
        softmax_scaled(cache.logits.row(t), tau_t, &mut probs[t * k..(t + 1) * k]);
    }
    Ok(Supervision::Probs {
        probs,
        prototypes: k,
    })
}

fn check_target_shape(cfg: &ModelConfig, target: &FeatureMap) -> Result<()> {
    let side = cfg.encoder.tokens_per_side();
    if target.height() != side
        || target.width() != side
        || target.channels() != cfg.encoder.embed_dim
    {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{}x{} does not match token grid {}x{}x{}",
            target.height(),
            target.width(),
            target.channels(),
            side,
            side,
            cfg.encoder.embed_dim
        )));
    }
    Ok(())
}

/// Loss value only (used by the finite-difference oracle). The supervision is
/// held fixed, matching the stop-gradient semantics of the objective.
pub fn student_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &FeatureMap,
    supervision: &Supervision,
    kind: LossKind,
    tau_s: f64,
) -> Result<f64> {
    let enc = encode_cached(params, cfg, image)?;
    let tokens = cfg.encoder.tokens();
    let c = cfg.encoder.embed_dim;
    match (kind, supervision) {
        (LossKind::Distill, Supervision::Probs { probs, prototypes }) => {
            let head = head_cached(params, cfg, &enc.feats, tokens)?;
            let k = *prototypes;
            let mut logq = vec![0.0; k];
            let mut total = 0.0;
            for t in 0..tokens {
                log_softmax_scaled(head.logits.row(t), tau_s, &mut logq);
                let p = &probs[t * k..(t + 1) * k];
                total -= p.iter().zip(&logq).map(|(pi, lq)| pi * lq).sum::<f64>();
            }
            Ok(total / tokens as f64)
        }
        (LossKind::Cosine, Supervision::Features(target)) => {
            check_target_shape(cfg, target)?;
            let mut sim = 0.0;
            for t in 0..tokens {
                sim += cosine_token(&enc.feats[t * c..(t + 1) * c], target_row(target, t));
            }
            Ok(1.0 - sim / tokens as f64)
        }
        (LossKind::FeatureMse, Supervision::Features(target)) => {
            check_target_shape(cfg, target)?;
            let n = tokens * c;
            let sum: f64 = enc
                .feats
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(sum / n as f64)
        }
        _ => Err(Error::InvalidConfig(
            "supervision kind does not match loss kind".into(),
        )),
    }
}

#[inline]
fn target_row(target: &FeatureMap, t: usize) -> &[f64] {
    target.at(t / target.width(), t % target.width())
}

/// Disjoint mutable views of a weight segment and its bias segment, which is
/// laid out immediately after it.
fn weight_bias_mut<'a>(
    grad: &'a mut [f64],
    layout: &SegmentMap,
    weight: &str,
    bias: &str,
) -> (&'a mut [f64], &'a mut [f64]) {
    let sw = layout.find(weight).expect("weight segment");
    let sb = layout.find(bias).expect("bias segment");
    debug_assert_eq!(sw.offset + sw.len, sb.offset);
    let (left, right) = grad.split_at_mut(sb.offset);
    (&mut left[sw.offset..sw.offset + sw.len], &mut right[..sb.len])
}

fn segment_mut<'a>(grad: &'a mut [f64], layout: &SegmentMap, name: &str) -> &'a mut [f64] {
    let s = layout.find(name).expect("segment");
    &mut grad[s.offset..s.offset + s.len]
}

/// Exact reverse-mode gradient of the chosen loss with respect to the student
/// parameter vector. Aborts with the offending segment name if any gradient
/// entry is non-finite.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &FeatureMap,
    supervision: &Supervision,
    kind: LossKind,
    tau_s: f64,
) -> Result<BackwardOutput> {
    let enc = encode_cached(params, cfg, image)?;
    let tokens = cfg.encoder.tokens();
    let c = cfg.encoder.embed_dim;
    let layout = params.layout().clone();
    let mut grad = vec![0.0; layout.total_len()];

    // Per-token feature gradients, filled by the loss-specific stage.
    let mut dfeats = vec![0.0; tokens * c];
    let mut loss = 0.0;
    let mut proto_usage_entropy = None;

    match (kind, supervision) {
        (LossKind::Distill, Supervision::Probs { probs, prototypes }) => {
            let head = head_cached(params, cfg, &enc.feats, tokens)?;
            let k = *prototypes;
            if probs.len() != tokens * k || k != cfg.head.prototypes {
                return Err(Error::ShapeMismatch("supervision shape mismatch".into()));
            }
            let (hh, b) = (cfg.head.hidden, cfg.head.bottleneck);
            let mut logq = vec![0.0; k];
            let mut q = vec![0.0; k];
            let mut dlogits = vec![0.0; k];
            let mut dn = vec![0.0; b];
            let mut dv = vec![0.0; b];
            let mut dg2 = vec![0.0; hh];
            let mut dh2 = vec![0.0; hh];
            let mut dg1 = vec![0.0; hh];
            let mut dh1 = vec![0.0; hh];
            let mut usage = vec![0.0; k];

            let proto = params.seg("proto.w");
            let wh3 = params.seg("head3.w");
            let wh2 = params.seg("head2.w");
            let wh1 = params.seg("head1.w");
            let inv_t = 1.0 / tokens as f64;

            for t in 0..tokens {
                let p = &probs[t * k..(t + 1) * k];
                log_softmax_scaled(head.logits.row(t), tau_s, &mut logq);
                softmax_scaled(head.logits.row(t), tau_s, &mut q);
                loss -= p.iter().zip(&logq).map(|(pi, lq)| pi * lq).sum::<f64>() * inv_t;
                for (u, pi) in usage.iter_mut().zip(p) {
                    *u += pi * inv_t;
                }
                for i in 0..k {
                    dlogits[i] = (q[i] - p[i]) / tau_s * inv_t;
                }

                // logits = P n
                let nt = &head.n[t * b..(t + 1) * b];
                {
                    let dproto = segment_mut(&mut grad, &layout, "proto.w");
                    for (kk, dl) in dlogits.iter().enumerate() {
                        let row = &mut dproto[kk * b..(kk + 1) * b];
                        for (dpj, nj) in row.iter_mut().zip(nt) {
                            *dpj += dl * nj;
                        }
                    }
                }
                dn.iter_mut().for_each(|v| *v = 0.0);
                for (kk, dl) in dlogits.iter().enumerate() {
                    let row = &proto[kk * b..(kk + 1) * b];
                    for (dnj, pj) in dn.iter_mut().zip(row) {
                        *dnj += dl * pj;
                    }
                }

                // n = v / s, s = sqrt(|v|^2 + eps)
                let vt = &head.v[t * b..(t + 1) * b];
                let s = head.s[t];
                let vdn: f64 = vt.iter().zip(&dn).map(|(v, d)| v * d).sum();
                for i in 0..b {
                    dv[i] = dn[i] / s - vt[i] * vdn / (s * s * s);
                }

                // v = Wh3 g2 + bh3
                let g2t = &head.g2[t * hh..(t + 1) * hh];
                {
                    let (dw, db) = weight_bias_mut(&mut grad, &layout, "head3.w", "head3.b");
                    accumulate_outer(dw, db, &dv, g2t);
                }
                backprop_input(wh3, &dv, &mut dg2);

                // g2 = gelu(h2), h2 = Wh2 g1 + bh2
                for i in 0..hh {
                    dh2[i] = dg2[i] * gelu_prime(head.h2[t * hh + i]);
                }
                let g1t = &head.g1[t * hh..(t + 1) * hh];
                {
                    let (dw, db) = weight_bias_mut(&mut grad, &layout, "head2.w", "head2.b");
                    accumulate_outer(dw, db, &dh2, g1t);
                }
                backprop_input(wh2, &dh2, &mut dg1);

                // g1 = gelu(h1), h1 = Wh1 f + bh1
                for i in 0..hh {
                    dh1[i] = dg1[i] * gelu_prime(head.h1[t * hh + i]);
                }
                let ft = &head.input[t * c..(t + 1) * c];
                {
                    let (dw, db) = weight_bias_mut(&mut grad, &layout, "head1.w", "head1.b");
                    accumulate_outer(dw, db, &dh1, ft);
                }
                backprop_input(wh1, &dh1, &mut dfeats[t * c..(t + 1) * c]);
            }
            let entropy: f64 = usage
                .iter()
                .filter(|&&u| u > 0.0)
                .map(|&u| -u * u.ln())
                .sum();
            proto_usage_entropy = Some(entropy);
        }
        (LossKind::Cosine, Supervision::Features(target)) => {
            check_target_shape(cfg, target)?;
            let inv_t = 1.0 / tokens as f64;
            for t in 0..tokens {
                let a = &enc.feats[t * c..(t + 1) * c];
                let y = target_row(target, t);
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let ny = y.iter().map(|x| x * x).sum::<f64>().sqrt();
                loss += inv_t; // the "1" of (1 - cos); cos term added below
                if na == 0.0 || ny == 0.0 {
                    continue; // contributes 0 similarity and 0 gradient
                }
                let dot: f64 = a.iter().zip(y).map(|(x, v)| x * v).sum();
                loss -= dot / (na * ny) * inv_t;
                let df = &mut dfeats[t * c..(t + 1) * c];
                for i in 0..c {
                    // d(1 - cos)/da_i = -(y_i/(na ny) - a_i dot/(na^3 ny))
                    df[i] = -(y[i] / (na * ny) - a[i] * dot / (na * na * na * ny)) * inv_t;
                }
            }
        }
        (LossKind::FeatureMse, Supervision::Features(target)) => {
            check_target_shape(cfg, target)?;
            let n = (tokens * c) as f64;
            for (i, (a, y)) in enc.feats.iter().zip(target.data()).enumerate() {
                let d = a - y;
                loss += d * d / n;
                dfeats[i] = 2.0 * d / n;
            }
        }
        _ => {
            return Err(Error::InvalidConfig(
                "supervision kind does not match loss kind".into(),
            ))
        }
    }

    // Encoder backward, shared by all losses.
    {
        let e = &cfg.encoder;
        let (dh, pd) = (e.hidden_dim, e.patch_dim());
        let w2 = params.seg("enc2.w");
        let w1 = params.seg("enc1.w");
        let mut da1 = vec![0.0; dh];
        let mut dz1 = vec![0.0; dh];
        let mut de = vec![0.0; c];
        for t in 0..tokens {
            let df = &dfeats[t * c..(t + 1) * c];
            let a1t = &enc.a1[t * dh..(t + 1) * dh];
            {
                let (dw, db) = weight_bias_mut(&mut grad, &layout, "enc2.w", "enc2.b");
                accumulate_outer(dw, db, df, a1t);
            }
            backprop_input(w2, df, &mut da1);
            for i in 0..dh {
                dz1[i] = da1[i] * gelu_prime(enc.z1[t * dh + i]);
            }
            let et = &enc.embed[t * c..(t + 1) * c];
            {
                let (dw, db) = weight_bias_mut(&mut grad, &layout, "enc1.w", "enc1.b");
                accumulate_outer(dw, db, &dz1, et);
            }
            backprop_input(w1, &dz1, &mut de);
            let xt = &enc.patches[t * pd..(t + 1) * pd];
            {
                let (dw, db) = weight_bias_mut(&mut grad, &layout, "embed.w", "embed.b");
                accumulate_outer(dw, db, &de, xt);
            }
        }
    }

    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            segment: layout.segment_of(i).name.clone(),
        });
    }

    Ok(BackwardOutput {
        loss,
        grad,
        proto_usage_entropy,
    })
}

/// Full backward step: builds the frozen supervision from the target map
/// (through `head_for_teacher` for the distillation loss), then computes the
/// student gradient.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &FeatureMap,
    target: &FeatureMap,
    kind: LossKind,
    head_for_teacher: &ModelParams,
    tau_s: f64,
    tau_t: f64,
) -> Result<BackwardOutput> {
    let supervision = match kind {
        LossKind::Distill => {
            check_target_shape(cfg, target)?;
            teacher_supervision(head_for_teacher, cfg, target, tau_t)?
        }
        LossKind::Cosine | LossKind::FeatureMse => Supervision::Features(target.clone()),
    };
    loss_and_grad(params, cfg, image, &supervision, kind, tau_s)
}
