//! Uniformity loss over farthest-point-seeded disks.
//!
//! Each seed owns the disk of points within `r_q = √p` of it. A disk is
//! penalized by the product of a count imbalance term `(|S_j| − n̂)² / n̂` and a
//! spacing clutter term `Σ_k (d_{j,k} − d̂)² / d̂`, where `n̂ = |D|·p`,
//! `d̂ = √(2π r_q² / (√3 n̂))` and `d_{j,k}` is the distance from member `k` to
//! its nearest other member of the same disk. Coordinates are expected in
//! normalized (unit sphere) units.

use nalgebra::Vector3;

use crate::cloud::{farthest_point_sampling, PointCloud};
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformParams {
    /// Disk area fraction `p`.
    pub fraction: f64,
    /// Seed count `M`; `None` means `max(1, ⌊|D| / 16⌋)`.
    pub seeds: Option<usize>,
}

impl Default for UniformParams {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            seeds: None,
        }
    }
}

impl UniformParams {
    pub fn seed_count(&self, n: usize) -> usize {
        self.seeds.unwrap_or((n / 16).max(1))
    }
}

/// One seeded disk with its members (ascending index) and, per member, the
/// nearest other member if there is one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disk {
    pub seed: usize,
    pub members: Vec<usize>,
    pub nearest: Vec<Option<usize>>,
}

struct Targets {
    expected_count: f64,
    expected_spacing: f64,
}

fn targets(n: usize, fraction: f64) -> Targets {
    let radius = fraction.sqrt();
    let expected_count = n as f64 * fraction;
    let expected_spacing =
        (2.0 * std::f64::consts::PI * radius * radius / (3f64.sqrt() * expected_count)).sqrt();
    Targets {
        expected_count,
        expected_spacing,
    }
}

fn check(cloud: &PointCloud, fraction: f64, seeds: usize) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid_arg!("disk fraction must lie in (0, 1), got {fraction}"));
    }
    if seeds == 0 || seeds > cloud.len() {
        return Err(invalid_arg!(
            "seed count {seeds} out of range 1..={}",
            cloud.len()
        ));
    }
    Ok(())
}

/// The disks the loss is evaluated on. These are the discrete choices the
/// gradient holds fixed.
pub fn uniform_disks(cloud: &PointCloud, fraction: f64, seeds: usize) -> Result<Vec<Disk>> {
    check(cloud, fraction, seeds)?;
    let radius2 = fraction;
    let pts = cloud.points();
    let seed_idx = farthest_point_sampling(cloud, seeds, 0)?;
    Ok(seed_idx
        .into_iter()
        .map(|seed| {
            let members: Vec<usize> = (0..pts.len())
                .filter(|&j| (pts[j] - pts[seed]).norm_squared() <= radius2)
                .collect();
            let nearest = members
                .iter()
                .map(|&k| {
                    members
                        .iter()
                        .filter(|&&l| l != k)
                        .map(|&l| ((pts[l] - pts[k]).norm_squared(), l))
                        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                        .map(|(_, l)| l)
                })
                .collect();
            Disk {
                seed,
                members,
                nearest,
            }
        })
        .collect())
}

fn disk_terms(cloud: &PointCloud, disk: &Disk, t: &Targets) -> (f64, f64) {
    let pts = cloud.points();
    let count = disk.members.len() as f64;
    let imbalance = (count - t.expected_count).powi(2) / t.expected_count;
    let clutter = disk
        .members
        .iter()
        .zip(&disk.nearest)
        .filter_map(|(&k, nn)| nn.map(|l| (pts[k] - pts[l]).norm()))
        .map(|d| (d - t.expected_spacing).powi(2) / t.expected_spacing)
        .sum();
    (imbalance, clutter)
}

/// Value of the uniformity loss on precomputed disks.
pub fn uniform_loss_on(cloud: &PointCloud, disks: &[Disk], fraction: f64) -> f64 {
    let t = targets(cloud.len(), fraction);
    disks
        .iter()
        .map(|disk| {
            let (imb, clu) = disk_terms(cloud, disk, &t);
            imb * clu
        })
        .sum::<f64>()
        / disks.len() as f64
}

pub fn uniform_loss(cloud: &PointCloud, fraction: f64, seeds: usize) -> Result<f64> {
    let disks = uniform_disks(cloud, fraction, seeds)?;
    Ok(uniform_loss_on(cloud, &disks, fraction))
}

/// Gradient with disk memberships and nearest-member choices held fixed.
pub fn uniform_loss_gradient(cloud: &PointCloud, disks: &[Disk], fraction: f64) -> Vec<Vector3<f64>> {
    let t = targets(cloud.len(), fraction);
    let pts = cloud.points();
    let mut grad = vec![Vector3::zeros(); pts.len()];
    let per_disk = 1.0 / disks.len() as f64;
    for disk in disks {
        let (imbalance, _) = disk_terms(cloud, disk, &t);
        if imbalance == 0.0 {
            continue;
        }
        for (&k, nn) in disk.members.iter().zip(&disk.nearest) {
            let Some(l) = *nn else { continue };
            let diff = pts[k] - pts[l];
            let d = diff.norm();
            if d == 0.0 {
                continue;
            }
            let g = per_disk * imbalance * 2.0 * (d - t.expected_spacing) / t.expected_spacing / d;
            grad[k] += diff * g;
            grad[l] -= diff * g;
        }
    }
    grad
}
