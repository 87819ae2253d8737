//! Differentiable multi-view silhouette rendering of point clouds.
//!
//! A cloud is turned into one camera-facing triangle per point
//! ([`build_tangent_triangles`]) and each view is soft-rasterized
//! ([`rasterize_silhouette`]). Gradients flow back to the point positions
//! through [`rasterize_gradient`].

mod camera;
mod raster;
mod surfel;

pub use camera::{
    make_view_ring, make_view_ring_with_extent, Camera, CameraRig, DEFAULT_ELEVATION_DEG, DEFAULT_HALF_EXTENT,
    DEFAULT_IMAGE_SIZE, DEFAULT_RADIUS, DEFAULT_VIEWS,
};
pub use raster::{
    coverage_pattern, kink_clearance, logistic, rasterize_gradient, rasterize_silhouette, CoverageKey,
    SilhouetteImage,
};
pub use surfel::{
    build_tangent_triangles, triangle_frame, FrameMode, SurfelSoup, TriangleFrame, TriangleScale, FALLBACK_SCALE,
};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Result};

pub const DEFAULT_GAMMA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    /// Rasterizer sharpness γ.
    pub gamma: f64,
    pub scale: TriangleScale,
    pub mode: FrameMode,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            scale: TriangleScale::Auto,
            mode: FrameMode::Tangent,
        }
    }
}

/// Tangent triangles of `cloud` for every camera of the rig. The triangle
/// scale is resolved once for the whole cloud.
pub fn view_soups(cloud: &PointCloud, rig: &CameraRig, params: &RenderParams) -> Result<Vec<SurfelSoup>> {
    let scale = if cloud.is_empty() {
        params.scale
    } else {
        TriangleScale::Fixed(params.scale.resolve(cloud)?)
    };
    rig.cameras()
        .par_iter()
        .map(|cam| build_tangent_triangles(cloud, cam, scale, params.mode))
        .collect()
}

/// Rasterizes one soup per camera.
pub fn render_soups(soups: &[SurfelSoup], rig: &CameraRig, gamma: f64) -> Result<Vec<SilhouetteImage>> {
    if soups.len() != rig.len() {
        return Err(invalid_arg!("{} soups for {} cameras", soups.len(), rig.len()));
    }
    let size = (rig.width(), rig.height());
    soups
        .par_iter()
        .zip(rig.cameras().par_iter())
        .enumerate()
        .map(|(j, (soup, cam))| {
            let mut img = rasterize_silhouette(soup, cam, size, gamma)?;
            img.view_index = j;
            Ok(img)
        })
        .collect()
}

/// Renders `cloud` from every camera of the rig.
pub fn render_views(cloud: &PointCloud, rig: &CameraRig, params: &RenderParams) -> Result<Vec<SilhouetteImage>> {
    render_soups(&view_soups(cloud, rig, params)?, rig, params.gamma)
}

/// Sums the per-view renderer gradients for upstream images `upstream[j]`.
/// Views are reduced in order, so the result does not depend on scheduling.
pub fn render_soups_gradient(
    soups: &[SurfelSoup],
    rig: &CameraRig,
    gamma: f64,
    upstream: &[Vec<f64>],
) -> Result<Vec<Vector3<f64>>> {
    if soups.len() != rig.len() || upstream.len() != rig.len() {
        return Err(invalid_arg!(
            "{} soups and {} upstream images for {} cameras",
            soups.len(),
            upstream.len(),
            rig.len()
        ));
    }
    let size = (rig.width(), rig.height());
    let per_view = soups
        .par_iter()
        .zip(rig.cameras().par_iter())
        .zip(upstream.par_iter())
        .map(|((soup, cam), up)| rasterize_gradient(soup, cam, size, gamma, up))
        .collect::<Result<Vec<_>>>()?;
    let n = soups.first().map_or(0, |s| s.len());
    let mut total = vec![Vector3::zeros(); n];
    for grads in per_view {
        for (t, g) in total.iter_mut().zip(grads) {
            *t += g;
        }
    }
    Ok(total)
}
