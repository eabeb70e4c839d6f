//! Building the 3D feature scene from context views: depth-based geometric
//! scaffold, mask-aware feature upscaling, and feature attachment via
//! pixel-to-Gaussian correspondence.

use crate::error::{Error, Result};
use crate::geometry::{clamped_lerp_indices, Camera, FeatureMap, Gaussian, SemanticMask};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Default isotropic splat size: sigma = footprint_factor * depth / fx,
/// roughly one pixel's world footprint at the source view.
pub const DEFAULT_FOOTPRINT_FACTOR: f64 = 1.0;
/// Default opacity of lifted Gaussians; below 1 so a few overlapping splats
/// saturate the pixel.
pub const DEFAULT_OPACITY: f64 = 0.8;
/// Fallback search limit (Chebyshev radius over low-res points) when no
/// bilinear neighbor shares the query label.
const FALLBACK_MAX_RADIUS: i64 = 4;

/// One calibrated input view: rendered color, ground-truth depth (0 marks
/// background), and a semantic mask, all at the camera's resolution.
#[derive(Debug, Clone)]
pub struct ContextView {
    pub image: FeatureMap,
    pub camera: Camera,
    pub depth: FeatureMap,
    pub mask: SemanticMask,
}

impl ContextView {
    pub fn new(
        image: FeatureMap,
        camera: Camera,
        depth: FeatureMap,
        mask: SemanticMask,
    ) -> Result<Self> {
        let (h, w) = (camera.height, camera.width);
        if image.height() != h || image.width() != w || image.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} does not match camera {}x{}x3",
                image.height(),
                image.width(),
                image.channels(),
                h,
                w
            )));
        }
        if depth.height() != h || depth.width() != w || depth.channels() != 1 {
            return Err(Error::ShapeMismatch("depth map does not match camera".into()));
        }
        if mask.height() != h || mask.width() != w {
            return Err(Error::ShapeMismatch("mask does not match camera".into()));
        }
        if depth.data().iter().any(|&d| d < 0.0) {
            return Err(Error::ShapeMismatch("negative depth entry".into()));
        }
        Ok(Self {
            image,
            camera,
            depth,
            mask,
        })
    }
}

/// Context-view pixel a Gaussian was lifted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourcePixel {
    pub view: usize,
    pub y: usize,
    pub x: usize,
}

/// Geometry-only lift output: Gaussians with empty features plus their
/// per-Gaussian source records.
#[derive(Debug, Clone)]
pub struct LiftedGeometry {
    pub gaussians: Vec<Gaussian>,
    pub sources: Vec<SourcePixel>,
}

/// Feature-augmented Gaussian scene. Every Gaussian traces to exactly one
/// context pixel.
#[derive(Debug, Clone)]
pub struct FeatureScene {
    pub gaussians: Vec<Gaussian>,
    pub sources: Vec<SourcePixel>,
    channels: usize,
}

impl FeatureScene {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Options for `lift_geometry`.
#[derive(Debug, Clone, Copy)]
pub struct LiftOptions {
    pub stride: usize,
    pub footprint_factor: f64,
    pub opacity: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            footprint_factor: DEFAULT_FOOTPRINT_FACTOR,
            opacity: DEFAULT_OPACITY,
        }
    }
}

/// Unprojects every sampled foreground pixel of every context view into an
/// isotropic Gaussian (features left empty). Background pixels (depth 0) are
/// skipped; an all-background input yields an empty output.
pub fn lift_geometry(views: &[ContextView], opts: &LiftOptions) -> Result<LiftedGeometry> {
    if views.is_empty() {
        return Err(Error::ShapeMismatch("no context views".into()));
    }
    if opts.stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let mut gaussians = Vec::new();
    let mut sources = Vec::new();
    for (view_idx, view) in views.iter().enumerate() {
        let (h, w) = (view.camera.height, view.camera.width);
        if h % opts.stride != 0 || w % opts.stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "stride {} does not divide {}x{}",
                opts.stride, h, w
            )));
        }
        for y in (0..h).step_by(opts.stride) {
            for x in (0..w).step_by(opts.stride) {
                let depth = view.depth.get(y, x, 0);
                if depth <= 0.0 {
                    continue;
                }
                let center = Camera::pixel_center(y, x);
                let mean = view.camera.unproject_pixel(&center, depth)?;
                let sigma = opts.footprint_factor * depth / view.camera.fx;
                gaussians.push(Gaussian::isotropic(
                    mean,
                    sigma,
                    opts.opacity,
                    Vec::new(),
                    view.mask.label(y, x),
                )?);
                sources.push(SourcePixel {
                    view: view_idx,
                    y,
                    x,
                });
            }
        }
    }
    Ok(LiftedGeometry { gaussians, sources })
}

/// Label of a low-res grid point: the high-res mask sampled at the point's
/// corresponding pixel center (scaled by s, offset by s/2).
fn low_res_labels(mask_high: &SemanticMask, h: usize, w: usize, s: usize) -> Vec<u32> {
    let mut labels = vec![0u32; h * w];
    for i in 0..h {
        let hy = (2 * i + 1) * s / 2;
        for j in 0..w {
            let hx = (2 * j + 1) * s / 2;
            labels[i * w + j] = mask_high.label(hy, hx);
        }
    }
    labels
}

/// Upscales a low-resolution feature map to the mask's resolution,
/// interpolating only from bilinear neighbors that share the query pixel's
/// semantic label, with bilinear weights renormalized over that subset.
///
/// When no bilinear neighbor matches, the nearest same-label low-res point
/// within Chebyshev radius 4 is copied; failing that, plain bilinear is used.
pub fn mask_aware_upscale(low: &FeatureMap, mask_high: &SemanticMask) -> Result<FeatureMap> {
    let (h, w, c) = (low.height(), low.width(), low.channels());
    let (hh, hw) = (mask_high.height(), mask_high.width());
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty low-res map".into()));
    }
    if hh % h != 0 || hw % w != 0 || hh / h != hw / w || hh / h < 1 {
        return Err(Error::ShapeMismatch(format!(
            "high res {hh}x{hw} is not an integer multiple of low res {h}x{w}"
        )));
    }
    let s = hh / h;
    let labels_low = low_res_labels(mask_high, h, w, s);

    let mut out = FeatureMap::zeros(hh, hw, c);
    let process_row = |(i, row): (usize, &mut [f64])| {
        let gy = (i as f64 + 0.5) / s as f64 - 0.5;
        let (y0, y1, fy) = clamped_lerp_indices(gy, h);
        for j in 0..hw {
            let gx = (j as f64 + 0.5) / s as f64 - 0.5;
            let (x0, x1, fx) = clamped_lerp_indices(gx, w);
            let neighbors = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let label = mask_high.label(i, j);
            let mut weight_sum = 0.0;
            for &(ny, nx, wgt) in &neighbors {
                if labels_low[ny * w + nx] == label {
                    weight_sum += wgt;
                }
            }
            let dst = &mut row[j * c..(j + 1) * c];
            if weight_sum > 0.0 {
                for &(ny, nx, wgt) in &neighbors {
                    if labels_low[ny * w + nx] != label {
                        continue;
                    }
                    let src = low.at(ny, nx);
                    let wn = wgt / weight_sum;
                    for ch in 0..c {
                        dst[ch] += wn * src[ch];
                    }
                }
            } else if let Some((ny, nx)) = nearest_same_label(&labels_low, h, w, i, j, s, label) {
                dst.copy_from_slice(low.at(ny, nx));
            } else {
                for &(ny, nx, wgt) in &neighbors {
                    let src = low.at(ny, nx);
                    for ch in 0..c {
                        dst[ch] += wgt * src[ch];
                    }
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    out.data_mut()
        .par_chunks_mut(hw * c.max(1))
        .enumerate()
        .for_each(process_row);
    #[cfg(not(feature = "parallel"))]
    out.data_mut()
        .chunks_mut(hw * c.max(1))
        .enumerate()
        .for_each(process_row);

    Ok(out)
}

/// Scans rings of increasing Chebyshev radius around the low-res cell that
/// contains the query pixel, returning the first same-label point
/// (row-major within each ring).
fn nearest_same_label(
    labels_low: &[u32],
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    s: usize,
    label: u32,
) -> Option<(usize, usize)> {
    let cy = (i / s) as i64;
    let cx = (j / s) as i64;
    for r in 1..=FALLBACK_MAX_RADIUS {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy.abs() != r && dx.abs() != r {
                    continue; // interior of the ring was already scanned
                }
                let ny = cy + dy;
                let nx = cx + dx;
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if labels_low[ny * w + nx] == label {
                    return Some((ny, nx));
                }
            }
        }
    }
    None
}

/// Attaches each Gaussian's feature from the upscaled map of its source view,
/// leaving geometry untouched. Out-of-bounds source records are construction
/// bugs and rejected loudly.
pub fn attach_features(
    mut gaussians: Vec<Gaussian>,
    sources: Vec<SourcePixel>,
    high_maps: &[FeatureMap],
) -> Result<FeatureScene> {
    if gaussians.len() != sources.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gaussians but {} source records",
            gaussians.len(),
            sources.len()
        )));
    }
    let channels = high_maps.first().map_or(0, |m| m.channels());
    if high_maps.iter().any(|m| m.channels() != channels) {
        return Err(Error::ShapeMismatch(
            "high-res maps disagree on channel count".into(),
        ));
    }
    for (g, src) in gaussians.iter_mut().zip(&sources) {
        let map = high_maps.get(src.view).ok_or(Error::SourceOutOfBounds {
            view: src.view,
            y: src.y,
            x: src.x,
        })?;
        if src.y >= map.height() || src.x >= map.width() {
            return Err(Error::SourceOutOfBounds {
                view: src.view,
                y: src.y,
                x: src.x,
            });
        }
        g.feature = map.at(src.y, src.x).to_vec();
    }
    Ok(FeatureScene {
        gaussians,
        sources,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RigidTransform, Vec3};

    fn flat_view(size: usize, depth_val: f64) -> ContextView {
        let pose = RigidTransform::identity();
        let cam = Camera::new(
            size as f64,
            size as f64,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            pose,
        )
        .unwrap();
        ContextView::new(
            FeatureMap::zeros(size, size, 3),
            cam,
            FeatureMap::from_fn(size, size, 1, |_, _, _| depth_val),
            SemanticMask::filled(size, size, 1),
        )
        .unwrap()
    }

    #[test]
    fn lift_counts_one_gaussian_per_foreground_pixel() {
        let views = vec![flat_view(64, 2.0), flat_view(64, 2.0)];
        let lifted = lift_geometry(&views, &LiftOptions::default()).unwrap();
        assert_eq!(lifted.gaussians.len(), 2 * 64 * 64);
        assert_eq!(lifted.sources.len(), lifted.gaussians.len());
    }

    #[test]
    fn lift_skips_background() {
        let mut view = flat_view(8, 2.0);
        view.depth = FeatureMap::zeros(8, 8, 1);
        let lifted = lift_geometry(&[view], &LiftOptions::default()).unwrap();
        assert!(lifted.gaussians.is_empty());
    }

    #[test]
    fn lift_center_pixel_lands_on_optical_axis() {
        // 1x1 image whose single pixel center coincides with the principal point.
        let cam = Camera::new(10.0, 10.0, 0.5, 0.5, 1, 1, RigidTransform::identity()).unwrap();
        let view = ContextView::new(
            FeatureMap::zeros(1, 1, 3),
            cam,
            FeatureMap::from_fn(1, 1, 1, |_, _, _| 2.0),
            SemanticMask::filled(1, 1, 3),
        )
        .unwrap();
        let lifted = lift_geometry(&[view], &LiftOptions::default()).unwrap();
        assert_eq!(lifted.gaussians.len(), 1);
        let g = &lifted.gaussians[0];
        assert!((g.mean - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert_eq!(g.label, 3);
        assert!((g.scale.x - 2.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn lift_means_reproject_to_source_pixels() {
        let views = vec![flat_view(16, 1.7)];
        let lifted = lift_geometry(&views, &LiftOptions::default()).unwrap();
        for (g, src) in lifted.gaussians.iter().zip(&lifted.sources) {
            let (u, d) = views[0].camera.project_point(&g.mean).unwrap();
            let center = Camera::pixel_center(src.y, src.x);
            assert!((u - center).norm() < 1e-9);
            assert!((d - 1.7).abs() < 1e-9);
        }
    }

    #[test]
    fn lift_planar_wall_is_coplanar() {
        // Constant-depth map through an identity pose is the plane z = d.
        let views = vec![flat_view(32, 3.0)];
        let lifted = lift_geometry(&views, &LiftOptions::default()).unwrap();
        for g in &lifted.gaussians {
            assert!((g.mean.z - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lift_respects_stride() {
        let views = vec![flat_view(16, 2.0)];
        let opts = LiftOptions {
            stride: 4,
            ..LiftOptions::default()
        };
        let lifted = lift_geometry(&views, &opts).unwrap();
        assert_eq!(lifted.gaussians.len(), 16);
        assert!(lift_geometry(
            &views,
            &LiftOptions {
                stride: 5,
                ..LiftOptions::default()
            }
        )
        .is_err());
    }

    #[test]
    fn uniform_mask_equals_plain_bilinear() {
        let low = FeatureMap::from_fn(4, 4, 3, |y, x, c| (y * 31 + x * 17 + c * 5) as f64 * 0.1);
        let mask = SemanticMask::filled(16, 16, 7);
        let up = mask_aware_upscale(&low, &mask).unwrap();
        let plain = low.resize_bilinear(16, 16);
        for (a, b) in up.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_grid_point_copies_exactly() {
        // At s = 1 every query pixel coincides with a grid point, so the
        // matching neighbor carries bilinear weight 1 and the feature is
        // copied exactly.
        let low = FeatureMap::from_fn(4, 4, 2, |y, x, c| (y * 11 + x * 3 + c) as f64);
        let mask = SemanticMask::filled(4, 4, 1);
        let up = mask_aware_upscale(&low, &mask).unwrap();
        assert_eq!(up, low);
    }

    #[test]
    fn renormalizes_over_same_label_subset() {
        // Two low-res columns with different labels; query pixels near the
        // boundary must draw only from their own side, renormalized.
        let low = FeatureMap::from_fn(1, 2, 1, |_, x, _| if x == 0 { 10.0 } else { 20.0 });
        let s = 4;
        let mut mask = SemanticMask::filled(s, 2 * s, 1);
        for y in 0..s {
            for j in s..2 * s {
                mask.set_label(y, j, 2); // right half label 2
            }
        }
        // Low point 0 samples the mask at (2, 2) -> label 1, low point 1 at
        // (2, 6) -> label 2.
        let up = mask_aware_upscale(&low, &mask).unwrap();
        for y in 0..s {
            for j in 0..s {
                assert!((up.get(y, j, 0) - 10.0).abs() < 1e-12, "({y},{j}) impure");
            }
            for j in s..2 * s {
                assert!((up.get(y, j, 0) - 20.0).abs() < 1e-12, "({y},{j}) impure");
            }
        }
    }

    #[test]
    fn renormalization_matches_scalar_reference() {
        // Query pixel (1, 1) at scale 2 over a 2x2 low grid has bilinear
        // weights (0.5625, 0.1875, 0.1875, 0.0625). With only the first and
        // last neighbor sharing the query label they renormalize to
        // (0.9, 0, 0, 0.1); checked against a from-scratch evaluation.
        let vals = [8.0, -3.0, 5.0, -8.0];
        let low = FeatureMap::from_fn(2, 2, 1, |y, x, _| vals[y * 2 + x]);
        let mut mask = SemanticMask::filled(4, 4, 2);
        mask.set_label(1, 1, 1); // low point (0,0) samples here; also the query
        mask.set_label(3, 3, 1); // low point (1,1)
        let up = mask_aware_upscale(&low, &mask).unwrap();

        // Independent scalar route.
        let g = (1.0f64 + 0.5) / 2.0 - 0.5; // 0.25 in both axes
        let f = g - g.floor();
        let w = [
            (1.0 - f) * (1.0 - f),
            (1.0 - f) * f,
            f * (1.0 - f),
            f * f,
        ];
        let keep = [true, false, false, true];
        let wsum: f64 = w.iter().zip(keep).filter(|(_, k)| *k).map(|(w, _)| *w).sum();
        let expect: f64 = w
            .iter()
            .zip(keep)
            .zip(vals)
            .filter(|((_, k), _)| *k)
            .map(|((w, _), v)| w / wsum * v)
            .sum();
        assert!((w[0] / wsum - 0.9).abs() < 1e-12);
        assert!((w[3] / wsum - 0.1).abs() < 1e-12);
        assert!((up.get(1, 1, 0) - expect).abs() < 1e-12);
        assert!((up.get(1, 1, 0) - (0.9 * 8.0 + 0.1 * -8.0)).abs() < 1e-12);
    }

    #[test]
    fn fallback_copies_nearest_same_label_feature() {
        // A single high-res pixel whose label exists nowhere among its
        // bilinear neighbors but does exist two cells away.
        let low = FeatureMap::from_fn(1, 4, 1, |_, x, _| x as f64 * 100.0);
        let s = 2;
        let mut mask = SemanticMask::filled(1 * s, 4 * s, 1);
        // Low-res labels are sampled at columns 1, 3, 5, 7 of the mask.
        // Give low point 3 label 9, and paint one query pixel (0, 0) label 9.
        mask.set_label(0, 7, 9);
        mask.set_label(1, 7, 9);
        mask.set_label(0, 0, 9);
        let up = mask_aware_upscale(&low, &mask).unwrap();
        // Query (0,0) has bilinear neighbors at low cols 0 and 0/1 (labels 1),
        // so it falls back to the nearest label-9 point: low point (0, 3).
        assert_eq!(up.get(0, 0, 0), 300.0);
    }

    #[test]
    fn label_permutation_equivariance() {
        let low = FeatureMap::from_fn(3, 3, 2, |y, x, c| (y * 7 + x * 3 + c) as f64);
        let mut mask = SemanticMask::filled(9, 9, 0);
        for y in 0..9 {
            for x in 0..9 {
                mask.set_label(y, x, ((y / 3) * 2 + x / 4) as u32);
            }
        }
        let up = mask_aware_upscale(&low, &mask).unwrap();
        // Relabel by a bijection: l -> 7 - l.
        let mut permuted = SemanticMask::filled(9, 9, 0);
        for y in 0..9 {
            for x in 0..9 {
                permuted.set_label(y, x, 7 - mask.label(y, x));
            }
        }
        let up2 = mask_aware_upscale(&low, &permuted).unwrap();
        assert_eq!(up, up2);
    }

    #[test]
    fn attach_reads_back_source_pixels() {
        let size = 16;
        let view = flat_view(size, 2.0);
        let lifted = lift_geometry(&[view], &LiftOptions::default()).unwrap();
        let high = FeatureMap::from_fn(size, size, 4, |y, x, c| (y * 64 + x * 4 + c) as f64);
        let scene = attach_features(lifted.gaussians, lifted.sources, &[high.clone()]).unwrap();
        assert_eq!(scene.channels(), 4);
        for (g, src) in scene.gaussians.iter().zip(&scene.sources) {
            assert_eq!(g.feature.as_slice(), high.at(src.y, src.x));
        }
    }

    #[test]
    fn attach_constant_map_gives_constant_features() {
        let view = flat_view(8, 1.0);
        let lifted = lift_geometry(&[view], &LiftOptions::default()).unwrap();
        let high = FeatureMap::from_fn(8, 8, 2, |_, _, c| if c == 0 { 3.5 } else { -1.0 });
        let scene = attach_features(lifted.gaussians, lifted.sources, &[high]).unwrap();
        for g in &scene.gaussians {
            assert_eq!(g.feature, vec![3.5, -1.0]);
        }
    }

    #[test]
    fn attach_rejects_out_of_bounds_sources() {
        let view = flat_view(4, 1.0);
        let lifted = lift_geometry(&[view], &LiftOptions::default()).unwrap();
        let mut sources = lifted.sources.clone();
        sources[0].x = 99;
        let high = FeatureMap::zeros(4, 4, 1);
        assert!(matches!(
            attach_features(lifted.gaussians.clone(), sources, &[high.clone()]),
            Err(Error::SourceOutOfBounds { .. })
        ));
        let mut sources = lifted.sources;
        sources[0].view = 5;
        assert!(attach_features(lifted.gaussians, sources, &[high]).is_err());
    }
}
