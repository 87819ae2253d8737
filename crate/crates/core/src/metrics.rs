//! Evaluation metrics: Chamfer, symmetric Hausdorff and point-to-surface
//! distance. [`evaluate`] reports them multiplied by 10³.

use std::fmt;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cloud::{Point, PointCloud};
use crate::error::{invalid_arg, Error, Result};

pub const METRIC_SCALE: f64 = 1e3;

/// Triangle mesh used as the reference surface for point-to-surface distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
}

impl ReferenceMesh {
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().find(|v| !v.coords.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite mesh vertex {v:?}")));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&i) = tri.iter().find(|&&i| i >= vertices.len()) {
                return Err(invalid_arg!(
                    "triangle {t} references vertex {i}, mesh has {}",
                    vertices.len()
                ));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(invalid_arg!("triangle {t} repeats a vertex: {tri:?}"));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }
}

fn nearest_sq(p: &Point, cloud: &PointCloud) -> f64 {
    cloud
        .points()
        .iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

fn nearest_all(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points().par_iter().map(|p| nearest_sq(p, b)).collect()
}

fn require_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid_arg!("metric inputs must be non-empty ({} and {} points)", a.len(), b.len()));
    }
    Ok(())
}

/// Squared nearest-neighbour distances averaged per side, sides summed.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_pair(a, b)?;
    let ab: f64 = nearest_all(a, b).iter().sum();
    let ba: f64 = nearest_all(b, a).iter().sum();
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

/// Largest distance from a point of `a` to its nearest point in `b`.
pub fn directed_hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_pair(a, b)?;
    Ok(nearest_all(a, b).into_iter().fold(0.0, f64::max).sqrt())
}

/// Symmetric Hausdorff distance.
pub fn hausdorff_metric(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

fn closest_on_segment(p: &Point, a: &Point, b: &Point) -> Point {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Closest point to `p` on the triangle `abc` by Voronoi region tests.
/// Degenerate triangles fall back to the nearest of their three edges.
pub fn closest_point_on_triangle(p: &Point, [a, b, c]: &[Point; 3]) -> Point {
    let ab: Vector3<f64> = b - a;
    let ac: Vector3<f64> = c - a;
    if ab.cross(&ac).norm_squared() <= f64::EPSILON * ab.norm_squared() * ac.norm_squared() {
        return [closest_on_segment(p, a, b), closest_on_segment(p, b, c), closest_on_segment(p, a, c)]
            .into_iter()
            .min_by(|x, y| (p - x).norm_squared().total_cmp(&(p - y).norm_squared()))
            .unwrap_or(*a);
    }

    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance(p: &Point, tri: &[Point; 3]) -> f64 {
    (p - closest_point_on_triangle(p, tri)).norm()
}

/// Distance from `p` to the nearest triangle of `mesh`.
pub fn point_mesh_distance(p: &Point, mesh: &ReferenceMesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| point_triangle_distance(p, &mesh.triangle(t)))
        .fold(f64::INFINITY, f64::min)
}

/// Population mean and standard deviation of point-to-surface distances.
pub fn p2f(pred: &PointCloud, mesh: &ReferenceMesh) -> Result<(f64, f64)> {
    if mesh.is_empty() {
        return Err(invalid_arg!("reference mesh has no triangles"));
    }
    pred.require_non_empty("predicted cloud")?;
    let d: Vec<f64> = pred.points().par_iter().map(|p| point_mesh_distance(p, mesh)).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Metric values multiplied by 10³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub cd: f64,
    pub hd: f64,
    pub p2f_mean: Option<f64>,
    pub p2f_std: Option<f64>,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "cd,hd,p2f_mean,p2f_std"
    }

    /// One CSV row; absent point-to-surface values are left empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.cd, self.hd, opt(self.p2f_mean), opt(self.p2f_std))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} = {}", "cd", self.cd)?;
        write!(f, "{:<8} = {}", "hd", self.hd)?;
        if let (Some(m), Some(s)) = (self.p2f_mean, self.p2f_std) {
            write!(f, "\n{:<8} = {m}\n{:<8} = {s}", "p2f_mean", "p2f_std")?;
        }
        Ok(())
    }
}

pub fn evaluate(pred: &PointCloud, reference: &PointCloud, mesh: Option<&ReferenceMesh>) -> Result<MetricReport> {
    let cd = chamfer(pred, reference)? * METRIC_SCALE;
    let hd = hausdorff_metric(pred, reference)? * METRIC_SCALE;
    let (p2f_mean, p2f_std) = match mesh {
        Some(m) => {
            let (mean, std) = p2f(pred, m)?;
            (Some(mean * METRIC_SCALE), Some(std * METRIC_SCALE))
        }
        None => (None, None),
    };
    Ok(MetricReport {
        cd,
        hd,
        p2f_mean,
        p2f_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(pts).unwrap()
    }

    fn unit_triangle() -> ReferenceMesh {
        ReferenceMesh::new(
            vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &PointCloud::empty()).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(hausdorff_metric(&a, &b).unwrap(), 2.0);
        assert_eq!(hausdorff_metric(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn p2f_examples() {
        let mesh = unit_triangle();
        let (m, s) = p2f(&cloud(&[[0.25, 0.25, 2.0]]), &mesh).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && s == 0.0);
        let (m, _) = p2f(&cloud(&[[2.0, 0.0, 1.0]]), &mesh).unwrap();
        assert!((m - 2f64.sqrt()).abs() < 1e-12);
        let (m, s) = p2f(&cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), &mesh).unwrap();
        assert_eq!((m, s), (0.0, 0.0));
        let empty = ReferenceMesh::new(vec![], vec![]).unwrap();
        assert!(p2f(&cloud(&[[0.0, 0.0, 0.0]]), &empty).is_err());
    }

    #[test]
    fn mesh_validation() {
        let v = vec![Point::origin(); 3];
        assert!(ReferenceMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(ReferenceMesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn degenerate_triangle_uses_edges() {
        let tri = [Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0), Point::new(2.0, 0.0, 0.0)];
        assert!((point_triangle_distance(&Point::new(1.5, 1.0, 0.0), &tri) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_formats() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        let r = evaluate(&a, &b, None).unwrap();
        assert_eq!((r.cd, r.hd), (2000.0, 1000.0));
        assert_eq!(r.csv_row(), "2000,1000,,");
        assert_eq!(r.to_string(), "cd       = 2000\nhd       = 1000");
    }
}
