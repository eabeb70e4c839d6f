//! Splatting a feature scene to a camera: project Gaussians to screen space,
//! depth-sort, and alpha-composite arbitrary-channel features front to back.
//!
//! Two implementations share identical per-pixel semantics: a tiled fast path
//! (`render`) and a brute-force per-pixel oracle (`render_reference`). Both
//! composite, for every pixel, exactly the splats whose 3-sigma pixel
//! bounding box contains that pixel, in (depth, gaussian_index) order, so
//! their outputs are bit-identical.

use crate::error::{Error, Result};
use crate::geometry::{Camera, FeatureMap, Gaussian, Vec2, DEPTH_EPSILON};
use crate::lifting::FeatureScene;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const TILE_SIZE: usize = 16;
/// Anti-aliasing dilation added to the 2D covariance diagonal (pixels^2);
/// keeps sub-pixel splats from vanishing.
pub const LOWPASS_FLOOR: f64 = 0.3;
/// Per-splat alpha ceiling; keeps transmittance strictly positive.
pub const ALPHA_CLAMP: f64 = 0.999;
/// Front-to-back compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;

/// Inclusive pixel-index bounds of a splat's 3-sigma extent, pre-clamped to
/// the viewport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBounds {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelBounds {
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Screen-space form of a Gaussian.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub center: Vec2,
    /// 2D covariance (a, b, c) for [[a, b], [b, c]], lowpass floor included.
    pub cov2d: [f64; 3],
    /// Inverse covariance in the same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub feature: Vec<f64>,
    pub gaussian_index: usize,
    pub bounds: PixelBounds,
}

/// Rendered feature map plus accumulated opacity.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub features: FeatureMap,
    pub alpha: FeatureMap,
}

/// Perspective-flattens a Gaussian to a screen-space splat, or returns `None`
/// when it is behind the camera or its 3-sigma extent misses the viewport.
pub fn project_gaussian(g: &Gaussian, gaussian_index: usize, cam: &Camera) -> Option<Splat2D> {
    let pc = cam.pose.apply(&g.mean);
    let z = pc.z;
    if z <= DEPTH_EPSILON {
        return None;
    }
    let center = Vec2::new(cam.fx * pc.x / z + cam.cx, cam.fy * pc.y / z + cam.cy);

    // cov2d = J * W * Sigma * W^T * J^T with W the camera rotation and J the
    // projection Jacobian at the mean.
    let w = cam.pose.rotation;
    let sigma = g.covariance();
    let m = w * sigma * w.transpose();
    let z2 = z * z;
    // J rows: (fx/z, 0, -fx x / z^2), (0, fy/z, -fy y / z^2)
    let j0 = [cam.fx / z, 0.0, -cam.fx * pc.x / z2];
    let j1 = [0.0, cam.fy / z, -cam.fy * pc.y / z2];
    let mj = |r: &[f64; 3], c: &[f64; 3]| {
        let mut acc = 0.0;
        for (i, ri) in r.iter().enumerate() {
            for (k, ck) in c.iter().enumerate() {
                acc += ri * m[(i, k)] * ck;
            }
        }
        acc
    };
    let a = mj(&j0, &j0) + LOWPASS_FLOOR;
    let b = mj(&j0, &j1);
    let c = mj(&j1, &j1) + LOWPASS_FLOOR;

    // 3-sigma radius from the larger eigenvalue of [[a, b], [b, c]].
    let mid = 0.5 * (a + c);
    let disc = (0.5 * (a - c)).powi(2) + b * b;
    let lambda_max = mid + disc.sqrt();
    let radius = 3.0 * lambda_max.sqrt();

    // Pixels whose center lies within the radius box around the splat center.
    let x0 = (center.x - radius - 0.5).ceil() as i64;
    let x1 = (center.x + radius - 0.5).floor() as i64;
    let y0 = (center.y - radius - 0.5).ceil() as i64;
    let y1 = (center.y + radius - 0.5).floor() as i64;
    if x1 < 0 || y1 < 0 || x0 >= cam.width as i64 || y0 >= cam.height as i64 || x0 > x1 || y0 > y1
    {
        return None;
    }
    let bounds = PixelBounds {
        x0: x0.max(0) as usize,
        x1: x1.min(cam.width as i64 - 1) as usize,
        y0: y0.max(0) as usize,
        y1: y1.min(cam.height as i64 - 1) as usize,
    };

    let det = a * c - b * b;
    let conic = [c / det, -b / det, a / det];

    Some(Splat2D {
        center,
        cov2d: [a, b, c],
        conic,
        depth: z,
        opacity: g.opacity,
        feature: g.feature.clone(),
        gaussian_index,
        bounds,
    })
}

/// Front-to-back alpha compositing of a depth-ascending splat list at one
/// pixel center. `out_feature` must be zeroed by the caller; returns the
/// accumulated alpha (1 - final transmittance).
pub fn composite_pixel<'a, I>(splats: I, pixel_center: Vec2, out_feature: &mut [f64]) -> f64
where
    I: IntoIterator<Item = &'a Splat2D>,
{
    let mut transmittance = 1.0;
    for splat in splats {
        let dx = pixel_center.x - splat.center.x;
        let dy = pixel_center.y - splat.center.y;
        let q = splat.conic[0] * dx * dx
            + 2.0 * splat.conic[1] * dx * dy
            + splat.conic[2] * dy * dy;
        let alpha = (splat.opacity * (-0.5 * q).exp()).min(ALPHA_CLAMP);
        let contrib = alpha * transmittance;
        for (o, f) in out_feature.iter_mut().zip(&splat.feature) {
            *o += f * contrib;
        }
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    1.0 - transmittance
}

fn sorted_splats(gaussians: &[Gaussian], cam: &Camera) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, cam))
        .collect();
    splats.sort_unstable_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    splats
}

fn check_channels(gaussians: &[Gaussian], channels: usize) -> Result<()> {
    if let Some(g) = gaussians.iter().find(|g| g.feature.len() != channels) {
        return Err(Error::ShapeMismatch(format!(
            "gaussian {} has {} feature channels, expected {}",
            g.label,
            g.feature.len(),
            channels
        )));
    }
    Ok(())
}

/// Tiled fast path over a raw Gaussian list. Splats are binned to the 16x16
/// pixel tiles their bounding box touches; each tile composites its pixels in
/// global (depth, gaussian_index) order. Bit-identical to
/// `render_reference_gaussians` for any worker count.
pub fn render_gaussians(
    gaussians: &[Gaussian],
    channels: usize,
    cam: &Camera,
) -> Result<RenderOutput> {
    check_channels(gaussians, channels)?;
    if channels == 0 {
        return Err(Error::ShapeMismatch("channel count must be >= 1".into()));
    }
    let (h, w) = (cam.height, cam.width);
    let mut features = FeatureMap::zeros(h, w, channels);
    let mut alpha = FeatureMap::zeros(h, w, 1);
    let splats = sorted_splats(gaussians, cam);

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, splat) in splats.iter().enumerate() {
        let tx0 = splat.bounds.x0 / TILE_SIZE;
        let tx1 = splat.bounds.x1 / TILE_SIZE;
        let ty0 = splat.bounds.y0 / TILE_SIZE;
        let ty1 = splat.bounds.y1 / TILE_SIZE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    // Each image row belongs to one tile row; rows are independent, so the
    // result does not depend on the worker count.
    let render_row = |(y, (feat_row, alpha_row)): (usize, (&mut [f64], &mut [f64]))| {
        let ty = y / TILE_SIZE;
        for x in 0..w {
            let tx = x / TILE_SIZE;
            let bin = &bins[ty * tiles_x + tx];
            let center = Camera::pixel_center(y, x);
            let out = &mut feat_row[x * channels..(x + 1) * channels];
            let a = composite_pixel(
                bin.iter()
                    .map(|&si| &splats[si as usize])
                    .filter(|s| s.bounds.contains(x, y)),
                center,
                out,
            );
            alpha_row[x] = a;
        }
    };

    #[cfg(feature = "parallel")]
    features
        .data_mut()
        .par_chunks_mut(w * channels)
        .zip(alpha.data_mut().par_chunks_mut(w))
        .enumerate()
        .for_each(render_row);
    #[cfg(not(feature = "parallel"))]
    features
        .data_mut()
        .chunks_mut(w * channels)
        .zip(alpha.data_mut().chunks_mut(w))
        .enumerate()
        .for_each(render_row);

    Ok(RenderOutput { features, alpha })
}

/// O(pixels x gaussians) oracle with semantics identical to
/// `render_gaussians`: same splat set, same per-pixel bounding-box predicate,
/// same compositing order and cutoff.
pub fn render_reference_gaussians(
    gaussians: &[Gaussian],
    channels: usize,
    cam: &Camera,
) -> Result<RenderOutput> {
    check_channels(gaussians, channels)?;
    let (h, w) = (cam.height, cam.width);
    let mut features = FeatureMap::zeros(h, w, channels);
    let mut alpha = FeatureMap::zeros(h, w, 1);
    let splats = sorted_splats(gaussians, cam);
    for y in 0..h {
        for x in 0..w {
            let center = Camera::pixel_center(y, x);
            let out = features.at_mut(y, x);
            let a = composite_pixel(
                splats.iter().filter(|s| s.bounds.contains(x, y)),
                center,
                out,
            );
            alpha.at_mut(y, x)[0] = a;
        }
    }
    Ok(RenderOutput { features, alpha })
}

/// Splats a feature scene to the target camera (tiled fast path).
pub fn render(scene: &FeatureScene, cam: &Camera) -> Result<RenderOutput> {
    render_gaussians(&scene.gaussians, scene.channels(), cam)
}

/// Brute-force oracle for `render`.
pub fn render_reference(scene: &FeatureScene, cam: &Camera) -> Result<RenderOutput> {
    render_reference_gaussians(&scene.gaussians, scene.channels(), cam)
}
