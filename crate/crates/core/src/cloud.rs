//! Point clouds and the geometric primitives shared by every other module:
//! nearest neighbours, farthest point sampling, normalization, patching and
//! augmentation.
//!
//! Everything here is brute force. The contracts are defined by exhaustive
//! distance comparisons, so there is no spatial index to get out of sync with
//! them. Ties are always resolved towards the lower point index.

use std::cmp::Ordering;

use nalgebra::{Point3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid_arg, Error, Result};

pub type Point = Point3<f64>;

/// An ordered list of 3D positions.
///
/// Coordinates are always finite. Index `i` names the same point for the
/// lifetime of the value. A cloud may be empty; operations that need points
/// reject empty clouds themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    /// Builds a cloud from `[x0, y0, z0, x1, ...]`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(invalid_arg!(
                "flat coordinate buffer length {} is not a multiple of 3",
                coords.len()
            ));
        }
        Self::new(
            coords
                .chunks_exact(3)
                .map(|c| Point::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|&[x, y, z]| Point::new(x, y, z)).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Point> {
        self.points.get(i)
    }

    /// The points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Point {
        if self.points.is_empty() {
            return Point::origin();
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point::from(sum / self.points.len() as f64)
    }

    /// Applies `f` to every point. Fails if `f` produces a non-finite point.
    pub fn map(&self, f: impl Fn(&Point) -> Point) -> Result<PointCloud> {
        PointCloud::new(self.points.iter().map(f).collect())
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.points.is_empty() {
            Err(invalid_arg!("{what} must contain at least one point"))
        } else {
            Ok(())
        }
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Point;

    fn index(&self, i: usize) -> &Point {
        &self.points[i]
    }
}

/// The `r` nearest points to `center`, ascending by distance, ties by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub center: usize,
    pub neighbors: Vec<usize>,
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn nearest_to(points: &[Point], query: &Point, r: usize, skip: Option<usize>) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != skip)
        .map(|(j, p)| ((p - query).norm_squared(), j))
        .collect();
    if r < dists.len() {
        dists.select_nth_unstable_by(r, by_distance_then_index);
        dists.truncate(r);
    }
    dists.sort_unstable_by(by_distance_then_index);
    dists.into_iter().map(|(_, j)| j).collect()
}

fn check_neighbor_count(n: usize, r: usize, include_self: bool) -> Result<()> {
    let max = if include_self { n } else { n.saturating_sub(1) };
    if r == 0 || r > max {
        return Err(invalid_arg!(
            "neighbour count {r} out of range 1..={max} for a cloud of {n} points{}",
            if include_self { "" } else { " (self excluded)" }
        ));
    }
    Ok(())
}

/// The `r` nearest points to point `center`.
pub fn knn(cloud: &PointCloud, center: usize, r: usize, include_self: bool) -> Result<NeighborIndex> {
    let n = cloud.len();
    if center >= n {
        return Err(invalid_arg!("center index {center} out of range for {n} points"));
    }
    check_neighbor_count(n, r, include_self)?;
    let skip = if include_self { None } else { Some(center) };
    Ok(NeighborIndex {
        center,
        neighbors: nearest_to(cloud.points(), &cloud[center], r, skip),
    })
}

/// `knn` for every point of the cloud; row `i` holds the neighbours of point `i`.
pub fn knn_all(cloud: &PointCloud, r: usize, include_self: bool) -> Result<Vec<Vec<usize>>> {
    check_neighbor_count(cloud.len(), r, include_self)?;
    let points = cloud.points();
    Ok((0..points.len())
        .into_par_iter()
        .map(|i| {
            let skip = if include_self { None } else { Some(i) };
            nearest_to(points, &points[i], r, skip)
        })
        .collect())
}

/// Greedy max-min subset selection starting at `start`.
pub fn farthest_point_sampling(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(invalid_arg!("sample count {k} out of range 1..={n}"));
    }
    if start >= n {
        return Err(invalid_arg!("start index {start} out of range for {n} points"));
    }
    let points = cloud.points();
    let mut selected = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    for _ in 0..k {
        selected.push(current);
        taken[current] = true;
        let anchor = points[current];
        let mut best: Option<(f64, usize)> = None;
        for (j, p) in points.iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if taken[j] {
                continue;
            }
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(bd, _)| min_dist[j] > bd) {
                best = Some((min_dist[j], j));
            }
        }
        match best {
            Some((_, j)) => current = j,
            None => break,
        }
    }
    Ok(selected)
}

/// Centroid/scale pair used to move a cloud into and out of the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| Point::from((p - self.centroid) / self.scale))
    }

    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| self.centroid + p.coords * self.scale)
    }
}

/// Centers the cloud at the origin and scales it so the farthest point has
/// norm one. A cloud with zero extent keeps scale 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    cloud.require_non_empty("cloud")?;
    let centroid = cloud.centroid();
    let radius = cloud
        .points()
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let norm = Normalization { centroid, scale };
    Ok((norm.apply(cloud)?, norm))
}

/// A fixed-size local neighbourhood of a larger cloud, normalized to the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub cloud: PointCloud,
    pub seed_index: usize,
    /// Source indices of the patch points, nearest to the seed first.
    pub source_indices: Vec<usize>,
    pub normalization: Normalization,
}

impl Patch {
    /// Wraps an already prepared cloud as a single patch.
    pub fn whole(cloud: &PointCloud) -> Result<Patch> {
        let (normalized, normalization) = normalize_unit_sphere(cloud)?;
        Ok(Patch {
            cloud: normalized,
            seed_index: 0,
            source_indices: (0..cloud.len()).collect(),
            normalization,
        })
    }
}

pub const DEFAULT_PATCH_COUNT: usize = 195;
pub const DEFAULT_PATCH_SIZE: usize = 256;

/// Seeds `patch_count` patches by farthest point sampling and grows each to
/// the `patch_size` nearest points of its seed.
pub fn extract_patches(cloud: &PointCloud, patch_count: usize, patch_size: usize) -> Result<Vec<Patch>> {
    let n = cloud.len();
    if patch_size == 0 || patch_size > n {
        return Err(invalid_arg!("patch size {patch_size} out of range 1..={n}"));
    }
    let seeds = farthest_point_sampling(cloud, patch_count, 0)?;
    seeds
        .into_par_iter()
        .map(|seed| {
            let idx = nearest_to(cloud.points(), &cloud[seed], patch_size, None);
            let (normalized, normalization) = normalize_unit_sphere(&cloud.select(&idx))?;
            Ok(Patch {
                cloud: normalized,
                seed_index: seed,
                source_indices: idx,
                normalization,
            })
        })
        .collect()
}

/// Random rigid-plus-scale perturbation with per-point jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Apply a rotation drawn uniformly from SO(3).
    pub rotate: bool,
    pub scale_range: (f64, f64),
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotate: true,
            scale_range: (0.8, 1.2),
            jitter_sigma: 0.01,
            jitter_clip: 0.03,
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        Self {
            rotate: false,
            scale_range: (1.0, 1.0),
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }
}

fn uniform_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    // a normalized 4D gaussian is a uniformly distributed unit quaternion
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    UnitQuaternion::from_quaternion(quat).to_rotation_matrix()
}

pub fn augment(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    augment_with(cloud, seed, &AugmentParams::default())
}

pub fn augment_with(cloud: &PointCloud, seed: u64, params: &AugmentParams) -> Result<PointCloud> {
    cloud.require_non_empty("cloud")?;
    let (lo, hi) = params.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(invalid_arg!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
    }
    if params.jitter_sigma < 0.0 || params.jitter_clip < 0.0 {
        return Err(invalid_arg!("jitter parameters must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = if params.rotate {
        uniform_rotation(&mut rng)
    } else {
        Rotation3::identity()
    };
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let jitter = (params.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, params.jitter_sigma).expect("sigma checked above"));
    let clip = params.jitter_clip;

    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = if params.rotate { rotation * p } else { *p };
            q.coords *= scale;
            if let Some(normal) = &jitter {
                for c in q.coords.iter_mut() {
                    *c += normal.sample(&mut rng).clamp(-clip, clip);
                }
            }
            q
        })
        .collect();
    PointCloud::new(points)
}

/// Mean distance from each point to its `k` nearest other points, averaged
/// over the cloud. `k` shrinks to `N - 1` on small clouds. Returns `None`
/// when the cloud has fewer than two points.
pub fn mean_knn_distance(cloud: &PointCloud, k: usize) -> Option<f64> {
    let n = cloud.len();
    if n < 2 || k == 0 {
        return None;
    }
    let k = k.min(n - 1);
    let points = cloud.points();
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            nearest_to(points, &points[i], k, Some(i))
                .iter()
                .map(|&j| (points[j] - points[i]).norm())
                .sum::<f64>()
                / k as f64
        })
        .collect();
    Some(per_point.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(pts).unwrap()
    }

    #[test]
    fn rejects_non_finite() {
        let err = PointCloud::from_xyz(&[[0.0, f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn knn_unique_nearest() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(knn(&c, 0, 1, false).unwrap().neighbors, vec![1]);
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(knn(&c, 0, 1, false).unwrap().neighbors, vec![1]);
        assert_eq!(knn(&c, 0, 2, false).unwrap().neighbors, vec![1, 2]);
    }

    #[test]
    fn knn_range_errors() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(knn(&c, 0, 2, false).is_err());
        assert!(knn(&c, 0, 0, true).is_err());
        assert_eq!(knn(&c, 0, 2, true).unwrap().neighbors, vec![0, 1]);
        assert!(knn(&c, 5, 1, true).is_err());
    }

    #[test]
    fn knn_degenerate_cloud_returns_by_index() {
        let c = cloud(&[[1.0, 1.0, 1.0]; 4]);
        assert_eq!(knn(&c, 2, 3, false).unwrap().neighbors, vec![0, 1, 3]);
    }

    #[test]
    fn fps_examples() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]);
        assert_eq!(farthest_point_sampling(&c, 2, 0).unwrap(), vec![0, 3]);
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sampling(&c, 3, 0).unwrap(), vec![0, 1, 2]);
        assert!(farthest_point_sampling(&c, 4, 0).is_err());
        assert!(farthest_point_sampling(&c, 1, 3).is_err());
    }

    #[test]
    fn fps_all_points_is_a_permutation() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.5, 0.1, 0.0], [2.0, 0.0, 0.3], [1.0, 1.0, 1.0], [0.2, 0.2, 0.2]]);
        let mut sel = farthest_point_sampling(&c, 5, 0).unwrap();
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn normalize_examples() {
        let (out, norm) = normalize_unit_sphere(&cloud(&[[1.0, 1.0, 1.0]])).unwrap();
        assert_eq!(out[0], Point::origin());
        assert_eq!(norm.centroid, Point::new(1.0, 1.0, 1.0));
        assert_eq!(norm.scale, 1.0);

        let (out, norm) = normalize_unit_sphere(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points(), &[Point::new(-1.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0)]);
        assert_eq!(norm.centroid, Point::new(1.0, 0.0, 0.0));
        assert_eq!(norm.scale, 1.0);

        let (again, _) = normalize_unit_sphere(&out).unwrap();
        assert_eq!(again, out);
        assert!(normalize_unit_sphere(&PointCloud::empty()).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let c = cloud(&[[3.0, -1.0, 2.0], [5.0, 0.5, 2.5], [4.0, 4.0, 1.0]]);
        let (out, norm) = normalize_unit_sphere(&c).unwrap();
        let back = norm.invert(&out).unwrap();
        for (a, b) in back.points().iter().zip(c.points()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn patches_degenerate_and_collinear() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let patches = extract_patches(&c, 1, 3).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].cloud, normalize_unit_sphere(&c).unwrap().0);

        let patches = extract_patches(&c, 1, 2).unwrap();
        assert_eq!(patches[0].seed_index, 0);
        assert_eq!(patches[0].source_indices, vec![0, 1]);
        assert!(extract_patches(&c, 1, 4).is_err());
    }

    #[test]
    fn augment_disabled_is_identity() {
        let c = cloud(&[[0.3, -0.2, 0.9], [0.1, 0.4, -0.5]]);
        let out = augment_with(&c, 7, &AugmentParams::disabled()).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn augment_jitter_is_clipped() {
        let c = cloud(&[[0.0, 0.0, 0.0]; 200]);
        let params = AugmentParams {
            rotate: false,
            scale_range: (1.0, 1.0),
            jitter_sigma: 0.05,
            jitter_clip: 0.03,
        };
        let out = augment_with(&c, 1, &params).unwrap();
        assert!(out.points().iter().all(|p| p.iter().all(|c| c.abs() <= 0.03)));
    }

    #[test]
    fn mean_knn_distance_small_clouds() {
        assert_eq!(mean_knn_distance(&cloud(&[[0.0, 0.0, 0.0]]), 4), None);
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(mean_knn_distance(&c, 4), Some(2.0));
    }
}
