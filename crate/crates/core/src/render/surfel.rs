//! Per-point tangent triangles.
//!
//! Each point `p` seen from a camera centre `o` gets a small equilateral
//! triangle with vertices `p + t·v_k`. The three directions are unit length
//! and mutually at 120°. The first one is `v1 = normalize(x × s)` where
//! `x = p − o` and `s` is the camera's image x axis (its image y axis when `x`
//! is parallel to `s`). The other two are `v2, v3 = ±(√3/2)·v̂ − v1/2` around
//! an auxiliary direction `v̂` that depends on [`FrameMode`].

use nalgebra::Vector3;

use super::camera::Camera;
use crate::cloud::{mean_knn_distance, Point, PointCloud};
use crate::error::{invalid_arg, Error, Result};

const SQRT3_2: f64 = 0.866_025_403_784_438_6;
const PARALLEL_EPS: f64 = 1e-9;

/// How the auxiliary direction `v̂` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameMode {
    /// `v̂ = x̂ × v1`: the triangle lies in the plane orthogonal to the view ray.
    #[default]
    Tangent,
    /// `v̂ = s × v1`, built from the fixed auxiliary axis `s`.
    Literal,
}

/// Triangle size policy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TriangleScale {
    /// Mean distance to the four nearest neighbours of the cloud.
    #[default]
    Auto,
    Fixed(f64),
}

/// Triangle size used by [`TriangleScale::Auto`] when the cloud has no
/// neighbour distances to average (a single point, or all points coincident).
pub const FALLBACK_SCALE: f64 = 0.05;

impl TriangleScale {
    pub fn resolve(&self, cloud: &PointCloud) -> Result<f64> {
        match *self {
            TriangleScale::Fixed(t) if t > 0.0 && t.is_finite() => Ok(t),
            TriangleScale::Fixed(t) => Err(invalid_arg!("triangle scale must be positive, got {t}")),
            TriangleScale::Auto => Ok(mean_knn_distance(cloud, 4)
                .filter(|&t| t > 0.0)
                .unwrap_or(FALLBACK_SCALE)),
        }
    }
}

/// The three unit directions of one tangent triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFrame {
    pub dirs: [Vector3<f64>; 3],
    /// True when `x` was parallel to the camera x axis and the y axis was used.
    pub used_fallback: bool,
}

/// Builds the frame for a point at `p` seen from `camera`.
pub fn triangle_frame(p: &Point, camera: &Camera, mode: FrameMode) -> Result<TriangleFrame> {
    let x = p - camera.position();
    let x_norm = x.norm();
    if !(x_norm > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "point ({}, {}, {}) coincides with the camera centre",
            p.x, p.y, p.z
        )));
    }
    let mut s = camera.right();
    let mut cross = x.cross(&s);
    let used_fallback = cross.norm() < PARALLEL_EPS;
    if used_fallback {
        s = camera.down();
        cross = x.cross(&s);
    }
    let v1 = cross.normalize();
    let aux = match mode {
        FrameMode::Tangent => (x / x_norm).cross(&v1).normalize(),
        FrameMode::Literal => s.cross(&v1).normalize(),
    };
    let v2 = aux * SQRT3_2 - v1 * 0.5;
    let v3 = -aux * SQRT3_2 - v1 * 0.5;
    Ok(TriangleFrame {
        dirs: [v1, v2, v3],
        used_fallback,
    })
}

/// One tangent triangle per source point.
///
/// Frames are stored separately from the centres so a soup can be re-centred
/// with its frames held fixed, which is the function the analytic renderer
/// gradient differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelSoup {
    centers: Vec<Point>,
    frames: Vec<[Vector3<f64>; 3]>,
    scale: f64,
}

impl SurfelSoup {
    pub fn empty() -> Self {
        Self {
            centers: Vec::new(),
            frames: Vec::new(),
            scale: 1.0,
        }
    }

    pub fn from_parts(centers: Vec<Point>, frames: Vec<[Vector3<f64>; 3]>, scale: f64) -> Result<Self> {
        if centers.len() != frames.len() {
            return Err(invalid_arg!(
                "{} centres but {} frames",
                centers.len(),
                frames.len()
            ));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid_arg!("triangle scale must be positive, got {scale}"));
        }
        Ok(Self {
            centers,
            frames,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn frames(&self) -> &[[Vector3<f64>; 3]] {
        &self.frames
    }

    /// Source point index of triangle `i`. Triangles are stored in point order.
    pub fn source_index(&self, i: usize) -> usize {
        i
    }

    pub fn vertices(&self, i: usize) -> [Point; 3] {
        let c = self.centers[i];
        let t = self.scale;
        self.frames[i].map(|v| c + v * t)
    }

    /// Same frames and scale, new centres.
    pub fn with_centers(&self, centers: &[Point]) -> Result<Self> {
        if centers.len() != self.centers.len() {
            return Err(invalid_arg!(
                "expected {} centres, got {}",
                self.centers.len(),
                centers.len()
            ));
        }
        Ok(Self {
            centers: centers.to_vec(),
            frames: self.frames.clone(),
            scale: self.scale,
        })
    }

    /// Adds another soup's triangles after this one's.
    pub fn extend(&mut self, other: &SurfelSoup) {
        self.centers.extend_from_slice(&other.centers);
        self.frames.extend_from_slice(&other.frames);
    }

    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        Self {
            centers: self.centers.iter().map(|c| c + offset).collect(),
            ..self.clone()
        }
    }
}

/// Builds the camera-dependent tangent triangle of every point.
pub fn build_tangent_triangles(
    cloud: &PointCloud,
    camera: &Camera,
    scale: TriangleScale,
    mode: FrameMode,
) -> Result<SurfelSoup> {
    if cloud.is_empty() {
        return Ok(SurfelSoup::empty());
    }
    let t = scale.resolve(cloud)?;
    let frames = cloud
        .points()
        .iter()
        .map(|p| triangle_frame(p, camera, mode).map(|f| f.dirs))
        .collect::<Result<Vec<_>>>()?;
    SurfelSoup::from_parts(cloud.points().to_vec(), frames, t)
}
