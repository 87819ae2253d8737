//! Soft silhouette rasterization and its analytic gradient.
//!
//! For pixel `i` and triangle `j` the coverage is
//! `D_ij = σ(δ_ij · d²(i, j) / γ)`, where `d` is the screen-space distance from
//! the pixel centre to the triangle boundary and `δ_ij` is `+1` inside and `-1`
//! outside. Pixels aggregate coverage as a probabilistic union,
//! `I_i = 1 − ∏_j (1 − D_ij)`, multiplied in triangle order.
//!
//! Pairs whose logit falls below `-CULL_LOGIT` contribute less than `σ(-50)`
//! and are skipped.

use nalgebra::Vector3;

use super::camera::Camera;
use super::surfel::SurfelSoup;
use crate::error::{invalid_arg, Error, Result};

const CULL_LOGIT: f64 = 50.0;

/// Grayscale soft render of one view, row-major with the top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    pub width: usize,
    pub height: usize,
    pub view_index: usize,
    pub pixels: Vec<f64>,
}

impl SilhouetteImage {
    pub fn zeros(width: usize, height: usize, view_index: usize) -> Self {
        Self {
            width,
            height,
            view_index,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalized screen coordinate of pixel column `col`.
fn pixel_u(col: usize, width: usize) -> f64 {
    -1.0 + (2 * col + 1) as f64 / width as f64
}

fn pixel_v(row: usize, height: usize) -> f64 {
    1.0 - (2 * row + 1) as f64 / height as f64
}

type P2 = [f64; 2];

fn sub(a: P2, b: P2) -> P2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: P2, b: P2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: P2, b: P2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Closest point on segment `ab` to `p`: returns the parameter `t` and `p − q`.
fn segment_closest(p: P2, a: P2, b: P2) -> (f64, P2) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (t, sub(p, q))
}

/// Coverage of one pixel by one projected triangle.
#[derive(Debug, Clone, Copy)]
struct Hit {
    /// `δ · d² / γ`
    logit: f64,
    inside: bool,
    /// Edge `k` runs from vertex `k` to vertex `(k + 1) % 3`.
    edge: u8,
    t: f64,
    diff: P2,
}

fn pixel_hit(p: P2, tri: &[P2; 3], gamma: f64) -> Hit {
    let mut best = (f64::INFINITY, 0u8, 0.0, [0.0, 0.0]);
    for k in 0..3 {
        let (t, diff) = segment_closest(p, tri[k], tri[(k + 1) % 3]);
        let d2 = dot(diff, diff);
        if d2 < best.0 {
            best = (d2, k as u8, t, diff);
        }
    }
    let area2 = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
    let inside = area2 != 0.0 && {
        let s = area2.signum();
        (0..3).all(|k| s * cross(sub(tri[(k + 1) % 3], tri[k]), sub(p, tri[k])) > 0.0)
    };
    let sign = if inside { 1.0 } else { -1.0 };
    Hit {
        logit: sign * best.0 / gamma,
        inside,
        edge: best.1,
        t: best.2,
        diff: best.3,
    }
}

struct Projected {
    tris: Vec<[P2; 3]>,
}

fn project_soup(soup: &SurfelSoup, camera: &Camera) -> Result<Projected> {
    let mut tris = Vec::with_capacity(soup.len());
    for i in 0..soup.len() {
        let verts = soup.vertices(i);
        if !verts.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("triangle {i} has a non-finite vertex")));
        }
        tris.push(verts.map(|v| camera.project(&v)));
    }
    Ok(Projected { tris })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid_arg!("sharpness must be positive, got {gamma}"));
    }
    Ok(())
}

/// Inclusive pixel range whose centres may lie within `margin` of `[lo, hi]`
/// along one axis.
fn col_range(lo: f64, hi: f64, margin: f64, width: usize) -> Option<(usize, usize)> {
    let w = width as f64;
    let first = (((lo - margin) + 1.0) * w / 2.0 - 0.5).ceil().max(0.0);
    let last = (((hi + margin) + 1.0) * w / 2.0 - 0.5).floor().min(w - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

fn row_range(lo: f64, hi: f64, margin: f64, height: usize) -> Option<(usize, usize)> {
    let h = height as f64;
    let first = ((1.0 - (hi + margin)) * h / 2.0 - 0.5).ceil().max(0.0);
    let last = ((1.0 - (lo - margin)) * h / 2.0 - 0.5).floor().min(h - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

/// Calls `f(pixel_index, hit)` for every non-culled pixel of triangle `tri`.
fn for_each_hit(tri: &[P2; 3], width: usize, height: usize, gamma: f64, mut f: impl FnMut(usize, Hit)) {
    let margin = (CULL_LOGIT * gamma).sqrt();
    let (umin, umax) = (
        tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
        tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
    );
    let (vmin, vmax) = (
        tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
        tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
    );
    let (Some((c0, c1)), Some((r0, r1))) = (
        col_range(umin, umax, margin, width),
        row_range(vmin, vmax, margin, height),
    ) else {
        return;
    };
    for row in r0..=r1 {
        let v = pixel_v(row, height);
        for col in c0..=c1 {
            let hit = pixel_hit([pixel_u(col, width), v], tri, gamma);
            if hit.inside || hit.logit > -CULL_LOGIT {
                f(row * width + col, hit);
            }
        }
    }
}

/// Soft silhouette of `soup` seen through `camera` at `size = (width, height)`.
pub fn rasterize_silhouette(
    soup: &SurfelSoup,
    camera: &Camera,
    size: (usize, usize),
    gamma: f64,
) -> Result<SilhouetteImage> {
    check_gamma(gamma)?;
    let (width, height) = size;
    let projected = project_soup(soup, camera)?;
    let mut transmit = vec![1.0; width * height];
    for tri in &projected.tris {
        for_each_hit(tri, width, height, gamma, |px, hit| {
            // 1 − σ(x) = σ(−x) avoids cancellation when coverage saturates
            transmit[px] *= logistic(-hit.logit);
        });
    }
    Ok(SilhouetteImage {
        width,
        height,
        view_index: 0,
        pixels: transmit.into_iter().map(|t| 1.0 - t).collect(),
    })
}

/// Gradient of `Σ_i upstream_i · I_i` with respect to every surfel centre,
/// with frames and triangle scale held fixed.
pub fn rasterize_gradient(
    soup: &SurfelSoup,
    camera: &Camera,
    size: (usize, usize),
    gamma: f64,
    upstream: &[f64],
) -> Result<Vec<Vector3<f64>>> {
    check_gamma(gamma)?;
    let (width, height) = size;
    if upstream.len() != width * height {
        return Err(invalid_arg!(
            "upstream gradient has {} entries, image has {}",
            upstream.len(),
            width * height
        ));
    }
    let projected = project_soup(soup, camera)?;

    let mut per_pixel: Vec<Vec<(u32, Hit)>> = vec![Vec::new(); width * height];
    for (j, tri) in projected.tris.iter().enumerate() {
        for_each_hit(tri, width, height, gamma, |px, hit| {
            if upstream[px] != 0.0 {
                per_pixel[px].push((j as u32, hit));
            }
        });
    }

    let mut vertex_grads = vec![[[0.0f64; 2]; 3]; projected.tris.len()];
    let mut suffix = Vec::new();
    for (px, hits) in per_pixel.iter().enumerate() {
        if hits.is_empty() {
            continue;
        }
        // dI/dD_k = ∏_{l≠k} (1 − D_l), from prefix and suffix products
        suffix.clear();
        suffix.resize(hits.len() + 1, 1.0);
        for k in (0..hits.len()).rev() {
            suffix[k] = suffix[k + 1] * logistic(-hits[k].1.logit);
        }
        let mut prefix = 1.0;
        for (k, &(j, hit)) in hits.iter().enumerate() {
            let d_out = upstream[px] * prefix * suffix[k + 1];
            let cover = logistic(hit.logit);
            let miss = logistic(-hit.logit);
            prefix *= miss;
            let sign = if hit.inside { 1.0 } else { -1.0 };
            // dD/d(d²) = σ'(x) · δ / γ; d(d²)/da = −2(p−q)(1−t), d(d²)/db = −2(p−q)t
            let g = d_out * cover * miss * sign / gamma;
            if g == 0.0 {
                continue;
            }
            let a = hit.edge as usize;
            let b = (a + 1) % 3;
            let tri_grad = &mut vertex_grads[j as usize];
            for axis in 0..2 {
                tri_grad[a][axis] += g * -2.0 * hit.diff[axis] * (1.0 - hit.t);
                tri_grad[b][axis] += g * -2.0 * hit.diff[axis] * hit.t;
            }
        }
    }

    Ok(vertex_grads
        .iter()
        .map(|vg| {
            let screen = [
                vg[0][0] + vg[1][0] + vg[2][0],
                vg[0][1] + vg[1][1] + vg[2][1],
            ];
            camera.unproject_gradient(screen)
        })
        .collect())
}

/// A pixel/triangle pair that contributes a non-negligible amount of coverage,
/// with the discrete choices the gradient holds fixed. Used to detect switching
/// points when comparing against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoverageKey {
    pub pixel: u32,
    pub triangle: u32,
    pub inside: bool,
    /// Nearest edge, reported only for interior pixels where it is a kink.
    pub edge: Option<u8>,
}

/// Pixel/triangle pairs with `|logit| < band`.
pub fn coverage_pattern(
    soup: &SurfelSoup,
    camera: &Camera,
    size: (usize, usize),
    gamma: f64,
    band: f64,
) -> Result<Vec<CoverageKey>> {
    check_gamma(gamma)?;
    let (width, height) = size;
    let projected = project_soup(soup, camera)?;
    let mut keys = Vec::new();
    for (j, tri) in projected.tris.iter().enumerate() {
        for_each_hit(tri, width, height, gamma, |px, hit| {
            if hit.logit.abs() < band {
                keys.push(CoverageKey {
                    pixel: px as u32,
                    triangle: j as u32,
                    inside: hit.inside,
                    edge: hit.inside.then_some(hit.edge),
                });
            }
        });
    }
    Ok(keys)
}

/// Smallest screen-space margin, over contributing pixel/triangle pairs, by
/// which a pixel centre clears the non-smooth loci of the coverage function:
/// the triangle boundary, and for interior pixels the switch between nearest
/// edges. Pairs with `|logit| ≥ band` are ignored.
pub fn kink_clearance(
    soup: &SurfelSoup,
    camera: &Camera,
    size: (usize, usize),
    gamma: f64,
    band: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let (width, height) = size;
    let projected = project_soup(soup, camera)?;
    let mut clearance = f64::INFINITY;
    for tri in &projected.tris {
        for_each_hit(tri, width, height, gamma, |px, hit| {
            if hit.logit.abs() >= band {
                return;
            }
            let p = [pixel_u(px % width, width), pixel_v(px / width, height)];
            let mut d: Vec<f64> = (0..3)
                .map(|k| {
                    let (_, diff) = segment_closest(p, tri[k], tri[(k + 1) % 3]);
                    dot(diff, diff).sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            clearance = clearance.min(d[0]);
            if hit.inside {
                clearance = clearance.min(d[1] - d[0]);
            }
        });
    }
    Ok(clearance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Point, PointCloud};
    use crate::render::surfel::{build_tangent_triangles, FrameMode, TriangleScale};

    fn front_camera() -> Camera {
        Camera::look_at(Point::new(0.0, 0.0, -3.0), Point::origin(), -Vector3::y(), 1.0).unwrap()
    }

    fn soup_of(points: &[[f64; 3]], t: f64) -> SurfelSoup {
        let cloud = PointCloud::from_xyz(points).unwrap();
        build_tangent_triangles(&cloud, &front_camera(), TriangleScale::Fixed(t), FrameMode::Tangent).unwrap()
    }

    #[test]
    fn empty_soup_renders_black() {
        let img = rasterize_silhouette(&SurfelSoup::empty(), &front_camera(), (8, 8), 1e-4).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn saturated_inside_and_outside() {
        // a single pixel at the screen centre, deep inside a big triangle
        let soup = soup_of(&[[0.0, 0.0, 0.0]], 1.0);
        let img = rasterize_silhouette(&soup, &front_camera(), (1, 1), 1e-4).unwrap();
        assert!(img.pixels[0] >= 1.0 - 1e-6);

        let far = soup_of(&[[0.9, 0.9, 0.0]], 0.05);
        let img = rasterize_silhouette(&far, &front_camera(), (1, 1), 1e-4).unwrap();
        assert!(img.pixels[0] <= 1e-6);
    }

    #[test]
    fn interior_distance_half_is_saturated() {
        // inscribed radius of an equilateral triangle with circumradius t is t/2
        let soup = soup_of(&[[0.0, 0.0, 0.0]], 1.0);
        let cam = front_camera();
        let tri = soup.vertices(0).map(|v| cam.project(&v));
        let hit = pixel_hit([0.0, 0.0], &tri, 1e-4);
        assert!(hit.inside);
        assert!((hit.logit - 0.25 / 1e-4).abs() < 1e-6);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert_eq!(logistic(-1e6), 0.0);
        assert_eq!(logistic(1e6), 1.0);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adding_a_triangle_never_darkens() {
        let a = soup_of(&[[0.1, 0.0, 0.0], [-0.3, 0.2, 0.1]], 0.3);
        let b = soup_of(&[[0.1, 0.0, 0.0], [-0.3, 0.2, 0.1], [0.2, -0.25, 0.0]], 0.3);
        let cam = front_camera();
        let ia = rasterize_silhouette(&a, &cam, (32, 32), 1e-3).unwrap();
        let ib = rasterize_silhouette(&b, &cam, (32, 32), 1e-3).unwrap();
        for (x, y) in ia.pixels.iter().zip(&ib.pixels) {
            assert!(y >= x);
            assert!((0.0..=1.0).contains(y));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let soup = soup_of(&[[0.1, 0.0, 0.0], [-0.3, 0.2, 0.1]], 0.3);
        let g = rasterize_gradient(&soup, &front_camera(), (16, 16), 1e-3, &[0.0; 256]).unwrap();
        assert!(g.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn degenerate_projection_counts_as_outside() {
        let tri = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]];
        let hit = pixel_hit([0.5, 0.1], &tri, 1e-2);
        assert!(!hit.inside);
        assert!((hit.logit + 0.01 / 1e-2).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let soup = soup_of(&[[0.0, 0.0, 0.0]], 0.1);
        assert!(rasterize_silhouette(&soup, &front_camera(), (4, 4), 0.0).is_err());
        assert!(rasterize_gradient(&soup, &front_camera(), (4, 4), 1e-3, &[1.0; 3]).is_err());
        let bad = SurfelSoup::from_parts(
            vec![Point::new(f64::INFINITY, 0.0, 0.0)],
            vec![[Vector3::x(), Vector3::y(), Vector3::z()]],
            0.1,
        )
        .unwrap();
        let err = rasterize_silhouette(&bad, &front_camera(), (4, 4), 1e-3).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
