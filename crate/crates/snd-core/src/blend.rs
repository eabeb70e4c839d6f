//! Semantic blending: convex mixing of each rendered feature with the mean
//! feature of its mask region.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{FeatureMap, SemanticMask};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

fn check_dims(rendered: &FeatureMap, mask: &SemanticMask, alpha_blend: f64) -> Result<()> {
    if rendered.height() != mask.height() || rendered.width() != mask.width() {
        return Err(Error::ShapeMismatch(format!(
            "rendered {}x{} vs mask {}x{}",
            rendered.height(),
            rendered.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha_blend) {
        return Err(Error::InvalidConfig(format!(
            "blend alpha {alpha_blend} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Per-label mean features, accumulated in row-major order so the result is
/// bit-reproducible for any worker count.
fn label_means(
    rendered: &FeatureMap,
    mask: &SemanticMask,
    weights: Option<&FeatureMap>,
) -> HashMap<u32, Vec<f64>> {
    let c = rendered.channels();
    let mut sums: HashMap<u32, (Vec<f64>, f64)> = HashMap::new();
    for y in 0..rendered.height() {
        for x in 0..rendered.width() {
            let w = weights.map_or(1.0, |a| a.get(y, x, 0));
            let entry = sums
                .entry(mask.label(y, x))
                .or_insert_with(|| (vec![0.0; c], 0.0));
            let f = rendered.at(y, x);
            for ch in 0..c {
                entry.0[ch] += w * f[ch];
            }
            entry.1 += w;
        }
    }
    sums.into_iter()
        .map(|(label, (mut sum, count))| {
            if count > 0.0 {
                for v in &mut sum {
                    *v /= count;
                }
            } else {
                // All-zero weights leave the mean undefined; fall back to zero
                // so the blend degenerates to pure attenuation of nothing.
                sum.iter_mut().for_each(|v| *v = 0.0);
            }
            (label, sum)
        })
        .collect()
}

fn apply_blend(
    rendered: &FeatureMap,
    mask: &SemanticMask,
    alpha_blend: f64,
    means: &HashMap<u32, Vec<f64>>,
) -> FeatureMap {
    let (h, w, c) = (rendered.height(), rendered.width(), rendered.channels());
    let mut out = FeatureMap::zeros(h, w, c);
    let blend_row = |(y, row): (usize, &mut [f64])| {
        for x in 0..w {
            let mean = &means[&mask.label(y, x)];
            let f = rendered.at(y, x);
            let dst = &mut row[x * c..(x + 1) * c];
            for ch in 0..c {
                dst[ch] = alpha_blend * f[ch] + (1.0 - alpha_blend) * mean[ch];
            }
        }
    };
    #[cfg(feature = "parallel")]
    out.data_mut()
        .par_chunks_mut(w * c.max(1))
        .enumerate()
        .for_each(blend_row);
    #[cfg(not(feature = "parallel"))]
    out.data_mut()
        .chunks_mut(w * c.max(1))
        .enumerate()
        .for_each(blend_row);
    out
}

/// Blends each pixel with its mask-region mean:
/// `out(u) = alpha * F(u) + (1 - alpha) * mean over the label region of u`.
/// Region means run over the full mask, including zero-alpha holes.
pub fn semantic_blend(
    rendered: &FeatureMap,
    mask: &SemanticMask,
    alpha_blend: f64,
) -> Result<FeatureMap> {
    check_dims(rendered, mask, alpha_blend)?;
    let means = label_means(rendered, mask, None);
    Ok(apply_blend(rendered, mask, alpha_blend, &means))
}

/// Variant weighting each region mean by the rendered alpha map, so holes
/// (alpha near 0) do not dilute the mean.
pub fn semantic_blend_alpha_weighted(
    rendered: &FeatureMap,
    alpha_map: &FeatureMap,
    mask: &SemanticMask,
    alpha_blend: f64,
) -> Result<FeatureMap> {
    check_dims(rendered, mask, alpha_blend)?;
    if alpha_map.height() != rendered.height()
        || alpha_map.width() != rendered.width()
        || alpha_map.channels() != 1
    {
        return Err(Error::ShapeMismatch("alpha map does not match rendered".into()));
    }
    let means = label_means(rendered, mask, Some(alpha_map));
    Ok(apply_blend(rendered, mask, alpha_blend, &means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.random::<f64>() * 4.0 - 2.0)
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: u32) -> SemanticMask {
        let mut m = SemanticMask::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                m.set_label(y, x, rng.random_range(0..labels));
            }
        }
        m
    }

    /// O(N^2) oracle: for every pixel, scan the whole image for same-label
    /// pixels and average them directly.
    fn blend_oracle(rendered: &FeatureMap, mask: &SemanticMask, alpha: f64) -> FeatureMap {
        let (h, w, c) = (rendered.height(), rendered.width(), rendered.channels());
        FeatureMap::from_fn(h, w, c, |y, x, ch| {
            let label = mask.label(y, x);
            let mut sum = 0.0;
            let mut count = 0usize;
            for yy in 0..h {
                for xx in 0..w {
                    if mask.label(yy, xx) == label {
                        sum += rendered.get(yy, xx, ch);
                        count += 1;
                    }
                }
            }
            alpha * rendered.get(y, x, ch) + (1.0 - alpha) * sum / count as f64
        })
    }

    #[test]
    fn alpha_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 8, 8, 5);
        let mask = random_mask(&mut rng, 8, 8, 4);
        let out = semantic_blend(&map, &mask, 1.0).unwrap();
        assert_eq!(out.data(), map.data());
    }

    #[test]
    fn two_pixel_region_hand_case() {
        // f1, f2 with alpha 0.5: pixel 1 becomes 0.5 f1 + 0.5 (f1+f2)/2
        // = 0.75 f1 + 0.25 f2.
        let map = FeatureMap::new(1, 2, 1, vec![4.0, 8.0]).unwrap();
        let mask = SemanticMask::filled(1, 2, 3);
        let out = semantic_blend(&map, &mask, 0.5).unwrap();
        assert!((out.get(0, 0, 0) - (0.75 * 4.0 + 0.25 * 8.0)).abs() < 1e-12);
        assert!((out.get(0, 1, 0) - (0.25 * 4.0 + 0.75 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 32, 32, 4);
        let mask = random_mask(&mut rng, 32, 32, 3);
        let out = semantic_blend(&map, &mask, 0.5).unwrap();
        let oracle = blend_oracle(&map, &mask, 0.5);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn region_means_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(&mut rng, 16, 16, 3);
        let mask = random_mask(&mut rng, 16, 16, 4);
        let out = semantic_blend(&map, &mask, 0.3).unwrap();
        for label in 0..4u32 {
            for ch in 0..3 {
                let (mut sum_in, mut sum_out, mut n) = (0.0, 0.0, 0usize);
                for y in 0..16 {
                    for x in 0..16 {
                        if mask.label(y, x) == label {
                            sum_in += map.get(y, x, ch);
                            sum_out += out.get(y, x, ch);
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    assert!((sum_in / n as f64 - sum_out / n as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn variance_contracts_by_alpha_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 16, 16, 2);
        let mask = random_mask(&mut rng, 16, 16, 3);
        for &alpha in &[0.0, 0.25, 0.5, 0.9] {
            let out = semantic_blend(&map, &mask, alpha).unwrap();
            for label in 0..3u32 {
                for ch in 0..2 {
                    let var = |m: &FeatureMap| {
                        let mut vals = Vec::new();
                        for y in 0..16 {
                            for x in 0..16 {
                                if mask.label(y, x) == label {
                                    vals.push(m.get(y, x, ch));
                                }
                            }
                        }
                        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
                    };
                    let vin = var(&map);
                    let vout = var(&out);
                    assert!(
                        (vout - alpha * alpha * vin).abs() < 1e-9,
                        "label {label} ch {ch}: {vout} vs {}",
                        alpha * alpha * vin
                    );
                }
            }
        }
    }

    #[test]
    fn constant_regions_unchanged() {
        let mask = SemanticMask::filled(4, 4, 9);
        let map = FeatureMap::from_fn(4, 4, 2, |_, _, c| c as f64 - 0.5);
        for &alpha in &[0.0, 0.3, 1.0] {
            let out = semantic_blend(&map, &mask, alpha).unwrap();
            for (a, b) in out.data().iter().zip(map.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = random_map(&mut rng, 12, 12, 3);
        let mask = random_mask(&mut rng, 12, 12, 5);
        let mut permuted = mask.clone();
        for y in 0..12 {
            for x in 0..12 {
                permuted.set_label(y, x, 100 - mask.label(y, x) * 7);
            }
        }
        let a = semantic_blend(&map, &mask, 0.4).unwrap();
        let b = semantic_blend(&map, &permuted, 0.4).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_pixel_region_is_identity() {
        let map = FeatureMap::new(1, 2, 1, vec![2.0, -7.0]).unwrap();
        let mut mask = SemanticMask::filled(1, 2, 0);
        mask.set_label(0, 1, 1);
        let out = semantic_blend(&map, &mask, 0.3).unwrap();
        for (a, b) in out.data().iter().zip(map.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_weighted_mean_ignores_holes() {
        // Two pixels share a label; the second has zero rendered alpha, so the
        // weighted mean equals the first pixel's feature.
        let map = FeatureMap::new(1, 2, 1, vec![6.0, 0.0]).unwrap();
        let alpha_map = FeatureMap::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        let mask = SemanticMask::filled(1, 2, 2);
        let out = semantic_blend_alpha_weighted(&map, &alpha_map, &mask, 0.5).unwrap();
        assert!((out.get(0, 0, 0) - 6.0).abs() < 1e-12);
        assert!((out.get(0, 1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let map = FeatureMap::zeros(2, 2, 1);
        let mask = SemanticMask::filled(3, 2, 0);
        assert!(semantic_blend(&map, &mask, 0.5).is_err());
        let mask = SemanticMask::filled(2, 2, 0);
        assert!(semantic_blend(&map, &mask, 1.5).is_err());
    }
}
