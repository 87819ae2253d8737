use nalgebra::Vector3;

use crate::cloud::Point;
use crate::error::{invalid_arg, Error, Result};

/// An orthographic view: a look-at pose plus the half-width of the visible
/// square in model units.
///
/// The camera frame follows the usual computer-vision convention: `right` is
/// the image x axis, `down` the image y axis and `forward` the viewing
/// direction. Screen coordinates are normalized to `[-1, 1]²` with `+v` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    position: Point,
    target: Point,
    up: Vector3<f64>,
    half_extent: f64,
    right: Vector3<f64>,
    down: Vector3<f64>,
    forward: Vector3<f64>,
}

impl Camera {
    pub fn look_at(position: Point, target: Point, up: Vector3<f64>, half_extent: f64) -> Result<Self> {
        if !(half_extent > 0.0 && half_extent.is_finite()) {
            return Err(invalid_arg!("half extent must be positive, got {half_extent}"));
        }
        let view = target - position;
        if !(view.norm() > 0.0) || !view.iter().all(|c| c.is_finite()) {
            return Err(Error::DegenerateGeometry(
                "camera position and target coincide".into(),
            ));
        }
        let forward = view.normalize();
        let side = forward.cross(&up);
        if side.norm() < 1e-12 * up.norm().max(1.0) {
            return Err(Error::DegenerateGeometry(
                "camera up vector is zero or parallel to the view direction".into(),
            ));
        }
        let right = side.normalize();
        let down = forward.cross(&right);
        Ok(Self {
            position,
            target,
            up,
            half_extent,
            right,
            down,
            forward,
        })
    }

    pub fn position(&self) -> Point {
        self.position
    }

    pub fn target(&self) -> Point {
        self.target
    }

    pub fn up(&self) -> Vector3<f64> {
        self.up
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn right(&self) -> Vector3<f64> {
        self.right
    }

    pub fn down(&self) -> Vector3<f64> {
        self.down
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.forward
    }

    /// Normalized screen coordinates `(u, v)` of a world point.
    pub fn project(&self, p: &Point) -> [f64; 2] {
        let rel = p - self.position;
        [
            rel.dot(&self.right) / self.half_extent,
            -rel.dot(&self.down) / self.half_extent,
        ]
    }

    /// Lifts a screen-space gradient `(du, dv)` back to a world-space gradient.
    pub(crate) fn unproject_gradient(&self, g: [f64; 2]) -> Vector3<f64> {
        (self.right * g[0] - self.down * g[1]) / self.half_extent
    }

    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        Self {
            position: self.position + offset,
            target: self.target + offset,
            ..*self
        }
    }
}

/// A set of views rendered at a shared image size.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    width: usize,
    height: usize,
}

pub const DEFAULT_VIEWS: usize = 8;
pub const DEFAULT_RADIUS: f64 = 2.5;
pub const DEFAULT_ELEVATION_DEG: f64 = 20.0;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_HALF_EXTENT: f64 = 1.3;

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, width: usize, height: usize) -> Result<Self> {
        if cameras.is_empty() {
            return Err(invalid_arg!("a rig needs at least one camera"));
        }
        if width == 0 || height == 0 {
            return Err(invalid_arg!("image size must be non-zero, got {width}x{height}"));
        }
        Ok(Self {
            cameras,
            width,
            height,
        })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

impl Default for CameraRig {
    fn default() -> Self {
        make_view_ring(
            DEFAULT_VIEWS,
            DEFAULT_RADIUS,
            DEFAULT_ELEVATION_DEG,
            (DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE),
        )
        .expect("default rig parameters are valid")
    }
}

/// `m` cameras evenly spaced in azimuth on a ring of radius `radius`, all
/// looking at the origin with +z up and the default half extent.
pub fn make_view_ring(m: usize, radius: f64, elevation_deg: f64, image_size: (usize, usize)) -> Result<CameraRig> {
    make_view_ring_with_extent(m, radius, elevation_deg, image_size, DEFAULT_HALF_EXTENT)
}

pub fn make_view_ring_with_extent(
    m: usize,
    radius: f64,
    elevation_deg: f64,
    (width, height): (usize, usize),
    half_extent: f64,
) -> Result<CameraRig> {
    if m == 0 {
        return Err(invalid_arg!("view count must be at least 1"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid_arg!("ring radius must be positive, got {radius}"));
    }
    if width == 0 || height == 0 {
        return Err(invalid_arg!("image size must be non-zero, got {width}x{height}"));
    }
    let elevation = elevation_deg.clamp(-89.0, 89.0).to_radians();
    let up = Vector3::z();
    let cameras = (0..m)
        .map(|j| {
            let azimuth = std::f64::consts::TAU * j as f64 / m as f64;
            let position = Point::new(
                radius * elevation.cos() * azimuth.cos(),
                radius * elevation.cos() * azimuth.sin(),
                radius * elevation.sin(),
            );
            Camera::look_at(position, Point::origin(), up, half_extent)
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cameras, width, height)
}
