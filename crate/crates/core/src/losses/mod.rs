//! Training losses for self-supervised upsampling.
//!
//! Four terms compare a sparse input `S` with a dense candidate `D`:
//!
//! * shape consistency: EMD between `S` and a farthest-point downsampling of `D`
//! * image consistency: mean squared difference of multi-view silhouettes
//! * Hausdorff: the largest distance from a dense point to the sparse cloud
//! * uniformity: penalizes uneven local density in `D`
//!
//! [`JointObjective`] combines them with [`LossWeights`] and provides the
//! gradient with respect to the dense coordinates.

mod emd;
mod uniform;

pub use emd::{emd, emd_matching, solve_assignment};
pub use uniform::{uniform_disks, uniform_loss, uniform_loss_gradient, uniform_loss_on, Disk, UniformParams};

use std::borrow::Cow;
use std::fmt;
use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::cloud::{farthest_point_sampling, PointCloud};
use crate::error::{invalid_arg, Result};
use crate::render::{
    coverage_pattern, render_soups, render_soups_gradient, render_views, view_soups, CameraRig, CoverageKey,
    RenderParams, SilhouetteImage, SurfelSoup, TriangleScale,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sc: f64,
    pub ic: f64,
    pub hd: f64,
    pub un: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sc: 100.0,
            ic: 30.0,
            hd: 10.0,
            un: 25.0,
        }
    }
}

impl LossWeights {
    pub fn new(sc: f64, ic: f64, hd: f64, un: f64) -> Result<Self> {
        let w = Self { sc, ic, hd, un };
        if [sc, ic, hd, un].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(invalid_arg!("loss weights must be finite and non-negative: {w:?}"));
        }
        Ok(w)
    }

    pub fn zero() -> Self {
        Self {
            sc: 0.0,
            ic: 0.0,
            hd: 0.0,
            un: 0.0,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sc: self.sc * c,
            ic: self.ic * c,
            hd: self.hd * c,
            un: self.un * c,
        }
    }

    pub fn combine(&self, sc: f64, ic: f64, hd: f64, un: f64) -> f64 {
        self.sc * sc + self.ic * ic + self.hd * hd + self.un * un
    }
}

/// Per-term loss values and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub sc: f64,
    pub ic: f64,
    pub hd: f64,
    pub un: f64,
    pub joint: f64,
}

impl LossReport {
    pub fn new(weights: &LossWeights, sc: f64, ic: f64, hd: f64, un: f64) -> Self {
        Self {
            sc,
            ic,
            hd,
            un,
            joint: weights.combine(sc, ic, hd, un),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.sc, self.ic, self.hd, self.un, self.joint]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Flat `key=value` block, one term per line.
impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sc={}", self.sc)?;
        writeln!(f, "ic={}", self.ic)?;
        writeln!(f, "hd={}", self.hd)?;
        writeln!(f, "un={}", self.un)?;
        write!(f, "joint={}", self.joint)
    }
}

/// The farthest point subset of `dense` used by the shape term, and the EMD
/// matching `sparse[i] ↔ dense[subset[matching[i]]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMatch {
    pub subset: Vec<usize>,
    pub matching: Vec<usize>,
}

pub fn shape_consistent_match(sparse: &PointCloud, dense: &PointCloud) -> Result<(f64, ShapeMatch)> {
    sparse.require_non_empty("sparse cloud")?;
    if dense.len() < sparse.len() {
        return Err(invalid_arg!(
            "dense cloud ({} points) is smaller than the sparse cloud ({} points)",
            dense.len(),
            sparse.len()
        ));
    }
    let subset = farthest_point_sampling(dense, sparse.len(), 0)?;
    let (value, matching) = emd_matching(sparse, &dense.select(&subset))?;
    Ok((value, ShapeMatch { subset, matching }))
}

/// EMD between `sparse` and the farthest point downsampling of `dense`.
pub fn shape_consistent_loss(sparse: &PointCloud, dense: &PointCloud) -> Result<f64> {
    shape_consistent_match(sparse, dense).map(|(v, _)| v)
}

fn shape_consistent_gradient(sparse: &PointCloud, dense: &PointCloud, m: &ShapeMatch) -> Vec<Vector3<f64>> {
    let mut grad = vec![Vector3::zeros(); dense.len()];
    let scale = 2.0 / sparse.len() as f64;
    for (i, &j) in m.matching.iter().enumerate() {
        let d = m.subset[j];
        grad[d] += (dense[d] - sparse[i]) * scale;
    }
    grad
}

fn check_stacks(a: &[SilhouetteImage], b: &[SilhouetteImage]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid_arg!("view counts differ or are zero: {} vs {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if (x.width, x.height) != (y.width, y.height) || x.pixels.len() != y.pixels.len() {
            return Err(invalid_arg!(
                "image sizes differ: {}x{} vs {}x{}",
                x.width,
                x.height,
                y.width,
                y.height
            ));
        }
    }
    Ok(())
}

/// Mean over views of the squared Frobenius distance between image pairs.
pub fn image_consistent_loss(sparse_views: &[SilhouetteImage], dense_views: &[SilhouetteImage]) -> Result<f64> {
    check_stacks(sparse_views, dense_views)?;
    let total: f64 = sparse_views
        .iter()
        .zip(dense_views)
        .map(|(s, d)| {
            s.pixels
                .iter()
                .zip(&d.pixels)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / sparse_views.len() as f64)
}

/// One-sided Hausdorff distance from `dense` to `sparse` with the attaining
/// pair `(dense index, sparse index)`. Ties go to the lowest indices.
pub fn hausdorff_argmax(dense: &PointCloud, sparse: &PointCloud) -> Result<(f64, usize, usize)> {
    dense.require_non_empty("dense cloud")?;
    sparse.require_non_empty("sparse cloud")?;
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for (i, d) in dense.points().iter().enumerate() {
        let (dist2, j) = sparse
            .points()
            .iter()
            .enumerate()
            .map(|(j, s)| ((d - s).norm_squared(), j))
            .fold((f64::INFINITY, 0), |acc, x| if x.0 < acc.0 { x } else { acc });
        if dist2 > best.0 {
            best = (dist2, i, j);
        }
    }
    Ok((best.0.sqrt(), best.1, best.2))
}

/// `max_{d ∈ D} min_{s ∈ S} ‖d − s‖`.
pub fn hausdorff_loss(dense: &PointCloud, sparse: &PointCloud) -> Result<f64> {
    hausdorff_argmax(dense, sparse).map(|(v, _, _)| v)
}

/// Discrete choices that the joint gradient holds fixed. Two dense clouds with
/// equal active sets lie on the same smooth piece of the joint loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    pub shape: ShapeMatch,
    pub hausdorff: (usize, usize),
    pub disks: Vec<Disk>,
    pub coverage: Vec<Vec<CoverageKey>>,
}

/// The weighted joint loss for a fixed sparse cloud and camera rig.
///
/// Both clouds are drawn with triangles of one size, see
/// [`JointObjective::triangle_scale`].
#[derive(Debug, Clone)]
pub struct JointObjective<'a> {
    sparse: &'a PointCloud,
    rig: &'a CameraRig,
    weights: LossWeights,
    render: RenderParams,
    uniform: UniformParams,
    sparse_scale: f64,
    sparse_views: OnceLock<(usize, Vec<SilhouetteImage>)>,
}

impl<'a> JointObjective<'a> {
    pub fn new(
        sparse: &'a PointCloud,
        rig: &'a CameraRig,
        weights: LossWeights,
        render: RenderParams,
        uniform: UniformParams,
    ) -> Result<Self> {
        sparse.require_non_empty("sparse cloud")?;
        Ok(Self {
            sparse,
            rig,
            weights,
            render,
            uniform,
            sparse_scale: render.scale.resolve(sparse)?,
            sparse_views: OnceLock::new(),
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Triangle size shared by both clouds when the dense cloud has `n`
    /// points. An automatic scale is the sparse neighbour spacing shrunk by
    /// `sqrt(|S| / n)`, the expected spacing of the dense cloud.
    pub fn triangle_scale(&self, n: usize) -> f64 {
        match self.render.scale {
            TriangleScale::Fixed(t) => t,
            TriangleScale::Auto => self.sparse_scale * (self.sparse.len() as f64 / n.max(1) as f64).sqrt(),
        }
    }

    fn params_for(&self, n: usize) -> RenderParams {
        RenderParams {
            scale: TriangleScale::Fixed(self.triangle_scale(n)),
            ..self.render
        }
    }

    /// Renders of the sparse cloud to compare with a dense cloud of `n`
    /// points. The first size asked for is cached.
    pub fn sparse_views(&self, n: usize) -> Result<Cow<'_, [SilhouetteImage]>> {
        if let Some((m, views)) = self.sparse_views.get() {
            if *m == n {
                return Ok(Cow::Borrowed(views));
            }
            return Ok(Cow::Owned(render_views(self.sparse, self.rig, &self.params_for(n))?));
        }
        let views = render_views(self.sparse, self.rig, &self.params_for(n))?;
        let (m, cached) = self.sparse_views.get_or_init(|| (n, views.clone()));
        Ok(if *m == n { Cow::Borrowed(cached) } else { Cow::Owned(views) })
    }

    /// Tangent triangles of `dense` for every view. Passing these to
    /// [`JointObjective::evaluate_frozen`] evaluates the loss with the
    /// triangle frames and scale fixed, the function the gradient differentiates.
    pub fn dense_soups(&self, dense: &PointCloud) -> Result<Vec<SurfelSoup>> {
        view_soups(dense, self.rig, &self.params_for(dense.len()))
    }

    fn uniform_seeds(&self, dense: &PointCloud) -> usize {
        self.uniform.seed_count(dense.len())
    }

    fn terms(&self, dense: &PointCloud, soups: &[SurfelSoup]) -> Result<LossReport> {
        let sc = shape_consistent_loss(self.sparse, dense)?;
        let dense_views = render_soups(soups, self.rig, self.render.gamma)?;
        let ic = image_consistent_loss(&self.sparse_views(dense.len())?, &dense_views)?;
        let hd = hausdorff_loss(dense, self.sparse)?;
        let un = uniform_loss(dense, self.uniform.fraction, self.uniform_seeds(dense))?;
        Ok(LossReport::new(&self.weights, sc, ic, hd, un))
    }

    pub fn evaluate(&self, dense: &PointCloud) -> Result<LossReport> {
        self.terms(dense, &self.dense_soups(dense)?)
    }

    /// Loss with the dense triangles re-centred on `dense` but keeping the
    /// frames and scale of `frozen`.
    pub fn evaluate_frozen(&self, dense: &PointCloud, frozen: &[SurfelSoup]) -> Result<LossReport> {
        let soups = frozen
            .iter()
            .map(|s| s.with_centers(dense.points()))
            .collect::<Result<Vec<_>>>()?;
        self.terms(dense, &soups)
    }

    /// Loss report and gradient with respect to every dense coordinate.
    ///
    /// Discrete choices (EMD matching, farthest point subset, Hausdorff
    /// argmax, uniformity disks, surfel frames) are held at their current
    /// values, which gives a subgradient at switching points.
    pub fn gradient(&self, dense: &PointCloud) -> Result<(LossReport, Vec<Vector3<f64>>)> {
        let w = &self.weights;
        let n = dense.len();
        let mut grad = vec![Vector3::zeros(); n];
        let mut add = |g: Vec<Vector3<f64>>, weight: f64| {
            if weight != 0.0 {
                for (t, x) in grad.iter_mut().zip(g) {
                    *t += x * weight;
                }
            }
        };

        let (sc, shape) = shape_consistent_match(self.sparse, dense)?;
        add(shape_consistent_gradient(self.sparse, dense, &shape), w.sc);

        let soups = self.dense_soups(dense)?;
        let dense_views = render_soups(&soups, self.rig, self.render.gamma)?;
        let sparse_views = self.sparse_views(n)?;
        let ic = image_consistent_loss(&sparse_views, &dense_views)?;
        if w.ic != 0.0 {
            let m = self.rig.len() as f64;
            let upstream: Vec<Vec<f64>> = sparse_views
                .iter()
                .zip(&dense_views)
                .map(|(s, d)| {
                    s.pixels
                        .iter()
                        .zip(&d.pixels)
                        .map(|(a, b)| 2.0 * (b - a) / m)
                        .collect()
                })
                .collect();
            add(render_soups_gradient(&soups, self.rig, self.render.gamma, &upstream)?, w.ic);
        }

        let (hd, di, si) = hausdorff_argmax(dense, self.sparse)?;
        let mut hd_grad = vec![Vector3::zeros(); n];
        if hd > 0.0 {
            hd_grad[di] = (dense[di] - self.sparse[si]) / hd;
        }
        add(hd_grad, w.hd);

        let disks = uniform_disks(dense, self.uniform.fraction, self.uniform_seeds(dense))?;
        let un = uniform_loss_on(dense, &disks, self.uniform.fraction);
        add(uniform_loss_gradient(dense, &disks, self.uniform.fraction), w.un);

        Ok((LossReport::new(w, sc, ic, hd, un), grad))
    }

    /// Discrete state of every term at `dense`. Coverage pairs are reported
    /// for pixel/triangle logits inside `(-band, band)`.
    pub fn active_set(&self, dense: &PointCloud, frozen: &[SurfelSoup], band: f64) -> Result<ActiveSet> {
        let (_, shape) = shape_consistent_match(self.sparse, dense)?;
        let (_, di, si) = hausdorff_argmax(dense, self.sparse)?;
        let disks = uniform_disks(dense, self.uniform.fraction, self.uniform_seeds(dense))?;
        let size = (self.rig.width(), self.rig.height());
        let coverage = frozen
            .iter()
            .zip(self.rig.cameras())
            .map(|(soup, cam)| {
                coverage_pattern(&soup.with_centers(dense.points())?, cam, size, self.render.gamma, band)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ActiveSet {
            shape,
            hausdorff: (di, si),
            disks,
            coverage,
        })
    }
}

/// Evaluates every term on `sparse` and `dense` and their weighted sum.
pub fn joint_loss(
    sparse: &PointCloud,
    dense: &PointCloud,
    rig: &CameraRig,
    weights: &LossWeights,
    render: &RenderParams,
) -> Result<LossReport> {
    JointObjective::new(sparse, rig, *weights, *render, UniformParams::default())?.evaluate(dense)
}

/// Gradient of [`joint_loss`] with respect to the dense coordinates.
pub fn joint_loss_gradient(
    sparse: &PointCloud,
    dense: &PointCloud,
    rig: &CameraRig,
    weights: &LossWeights,
    render: &RenderParams,
) -> Result<Vec<Vector3<f64>>> {
    JointObjective::new(sparse, rig, *weights, *render, UniformParams::default())?
        .gradient(dense)
        .map(|(_, g)| g)
}
