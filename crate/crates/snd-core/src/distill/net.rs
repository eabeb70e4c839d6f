//! Forward passes for the toy patch encoder and the prototype head, with
//! cached activations for the hand-written reverse pass.

use crate::error::{Error, Result};
use crate::geometry::FeatureMap;

use super::params::{ModelConfig, ModelParams};

/// Guard added under the square root of the L2 normalization; far below f64
/// resolution for unit-scale vectors, so it only matters at exactly zero.
pub(crate) const NORM_EPS: f64 = 1e-24;

/// Smooth GELU (tanh form).
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_prime(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// y = W x + b with W row-major (rows x cols).
#[inline]
pub(crate) fn matvec(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = b[i];
        for (wj, xj) in row.iter().zip(x) {
            acc += wj * xj;
        }
        *yi = acc;
    }
}

/// dW += dy (x)outer, db += dy.
#[inline]
pub(crate) fn accumulate_outer(dw: &mut [f64], db: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, dyi) in dy.iter().enumerate() {
        db[i] += dyi;
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (dwj, xj) in row.iter_mut().zip(x) {
            *dwj += dyi * xj;
        }
    }
}

/// dx = W^T dy.
#[inline]
pub(crate) fn backprop_input(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    dx.iter_mut().for_each(|v| *v = 0.0);
    for (i, dyi) in dy.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (dxj, wj) in dx.iter_mut().zip(row) {
            *dxj += dyi * wj;
        }
    }
}

/// Token-major activation storage for the encoder forward pass.
#[derive(Debug, Clone)]
pub(crate) struct EncodeCache {
    pub patches: Vec<f64>, // T x Pd
    pub embed: Vec<f64>,   // T x C
    pub z1: Vec<f64>,      // T x Dh
    pub a1: Vec<f64>,      // T x Dh
    pub feats: Vec<f64>,   // T x C
}

/// Extracts non-overlapping patches in row-major token order; each patch is
/// flattened (row, col, channel).
pub(crate) fn extract_patches(cfg: &ModelConfig, image: &FeatureMap) -> Result<Vec<f64>> {
    let e = &cfg.encoder;
    if image.height() != e.image_size
        || image.width() != e.image_size
        || image.channels() != e.channels_in
    {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{}x{} does not match encoder input {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            e.image_size,
            e.image_size,
            e.channels_in
        )));
    }
    let side = e.tokens_per_side();
    let p = e.patch_size;
    let mut patches = Vec::with_capacity(e.tokens() * e.patch_dim());
    for ty in 0..side {
        for tx in 0..side {
            for py in 0..p {
                for px in 0..p {
                    let row = image.at(ty * p + py, tx * p + px);
                    patches.extend_from_slice(row);
                }
            }
        }
    }
    Ok(patches)
}

pub(crate) fn encode_cached(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &FeatureMap,
) -> Result<EncodeCache> {
    let e = &cfg.encoder;
    let (t, c, dh, pd) = (e.tokens(), e.embed_dim, e.hidden_dim, e.patch_dim());
    let patches = extract_patches(cfg, image)?;
    let (we, be) = (params.seg("embed.w"), params.seg("embed.b"));
    let (w1, b1) = (params.seg("enc1.w"), params.seg("enc1.b"));
    let (w2, b2) = (params.seg("enc2.w"), params.seg("enc2.b"));

    let mut embed = vec![0.0; t * c];
    let mut z1 = vec![0.0; t * dh];
    let mut a1 = vec![0.0; t * dh];
    let mut feats = vec![0.0; t * c];
    for tok in 0..t {
        let x = &patches[tok * pd..(tok + 1) * pd];
        matvec(we, be, x, &mut embed[tok * c..(tok + 1) * c]);
        matvec(w1, b1, &embed[tok * c..(tok + 1) * c], &mut z1[tok * dh..(tok + 1) * dh]);
        for i in 0..dh {
            a1[tok * dh + i] = gelu(z1[tok * dh + i]);
        }
        matvec(w2, b2, &a1[tok * dh..(tok + 1) * dh], &mut feats[tok * c..(tok + 1) * c]);
    }
    Ok(EncodeCache {
        patches,
        embed,
        z1,
        a1,
        feats,
    })
}

/// Patch encoder: non-overlapping patches -> linear embed -> per-token
/// two-layer GELU MLP -> h x w x C feature map.
pub fn encode(params: &ModelParams, cfg: &ModelConfig, image: &FeatureMap) -> Result<FeatureMap> {
    let cache = encode_cached(params, cfg, image)?;
    let side = cfg.encoder.tokens_per_side();
    let c = cfg.encoder.embed_dim;
    FeatureMap::new(side, side, c, cache.feats)
}

/// Per-token prototype logits, row-major (tokens x prototypes).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub tokens: usize,
    pub prototypes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.prototypes..(t + 1) * self.prototypes]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub input: Vec<f64>, // T x C
    pub h1: Vec<f64>,    // T x Hh
    pub g1: Vec<f64>,
    pub h2: Vec<f64>,
    pub g2: Vec<f64>,
    pub v: Vec<f64>,    // T x B
    pub s: Vec<f64>,    // T (norms)
    pub n: Vec<f64>,    // T x B
    pub logits: Logits,
}

pub(crate) fn head_cached(
    params: &ModelParams,
    cfg: &ModelConfig,
    feats: &[f64],
    tokens: usize,
) -> Result<HeadCache> {
    let c = cfg.encoder.embed_dim;
    if feats.len() != tokens * c {
        return Err(Error::ShapeMismatch(format!(
            "feature rows {} x {} do not match head input dim {}",
            tokens,
            feats.len() / tokens.max(1),
            c
        )));
    }
    let (hh, b, k) = (cfg.head.hidden, cfg.head.bottleneck, cfg.head.prototypes);
    let (wh1, bh1) = (params.seg("head1.w"), params.seg("head1.b"));
    let (wh2, bh2) = (params.seg("head2.w"), params.seg("head2.b"));
    let (wh3, bh3) = (params.seg("head3.w"), params.seg("head3.b"));
    let proto = params.seg("proto.w");

    let mut h1 = vec![0.0; tokens * hh];
    let mut g1 = vec![0.0; tokens * hh];
    let mut h2 = vec![0.0; tokens * hh];
    let mut g2 = vec![0.0; tokens * hh];
    let mut v = vec![0.0; tokens * b];
    let mut s = vec![0.0; tokens];
    let mut n = vec![0.0; tokens * b];
    let mut logits = vec![0.0; tokens * k];
    for t in 0..tokens {
        let x = &feats[t * c..(t + 1) * c];
        matvec(wh1, bh1, x, &mut h1[t * hh..(t + 1) * hh]);
        for i in 0..hh {
            g1[t * hh + i] = gelu(h1[t * hh + i]);
        }
        matvec(wh2, bh2, &g1[t * hh..(t + 1) * hh], &mut h2[t * hh..(t + 1) * hh]);
        for i in 0..hh {
            g2[t * hh + i] = gelu(h2[t * hh + i]);
        }
        matvec(wh3, bh3, &g2[t * hh..(t + 1) * hh], &mut v[t * b..(t + 1) * b]);
        let vt = &v[t * b..(t + 1) * b];
        let norm = (vt.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
        s[t] = norm;
        for i in 0..b {
            n[t * b + i] = vt[i] / norm;
        }
        // Prototype inner products (no bias).
        let nt = &n[t * b..(t + 1) * b];
        for kk in 0..k {
            let row = &proto[kk * b..(kk + 1) * b];
            logits[t * k + kk] = row.iter().zip(nt).map(|(p, x)| p * x).sum();
        }
    }
    Ok(HeadCache {
        input: feats.to_vec(),
        h1,
        g1,
        h2,
        g2,
        v,
        s,
        n,
        logits: Logits {
            tokens,
            prototypes: k,
            data: logits,
        },
    })
}

/// Prototype head: 3-layer GELU MLP to a bottleneck, L2-normalize, then
/// inner products against the prototype matrix.
pub fn head_logits(params: &ModelParams, cfg: &ModelConfig, feats: &FeatureMap) -> Result<Logits> {
    if feats.channels() != cfg.encoder.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "feature channels {} != embed dim {}",
            feats.channels(),
            cfg.encoder.embed_dim
        )));
    }
    let tokens = feats.height() * feats.width();
    Ok(head_cached(params, cfg, feats.data(), tokens)?.logits)
}
