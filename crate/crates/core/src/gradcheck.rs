//! Central finite-difference checks of the analytic gradients.
//!
//! A coordinate passes when `|a − n| ≤ atol` or
//! `|a − n| / max(|a|, |n|) < rtol`. The absolute floor is raised to the
//! rounding noise of the difference quotient, `64·ε·max(|f(x)|, 1) / h`. The suites below build seeded random
//! instances for the renderer, the joint loss and the upsampler, and are
//! shared by the `gradcheck` command and the test suite.

use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point, PointCloud};
use crate::error::{invalid_arg, Result};
use crate::losses::{JointObjective, LossWeights, UniformParams};
use crate::neu::{init_params, upsampler_backward, upsampler_forward, upsampler_forward_cached, NeuDims};
use crate::optim::initial_dense;
use crate::render::{
    build_tangent_triangles, kink_clearance, make_view_ring, rasterize_gradient, rasterize_silhouette, Camera,
    FrameMode, RenderParams, TriangleScale,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

pub fn relative_error(analytic: f64, numeric: f64, atol: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= atol {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// The worst coordinate seen so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offender {
    pub instance: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub excluded: usize,
    pub worst: Option<Offender>,
    /// Largest `|analytic − numeric|` over checked coordinates.
    pub max_abs_diff: f64,
}

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        self.worst.map_or(0.0, |w| w.error)
    }

    pub fn excluded_fraction(&self) -> f64 {
        let total = self.checked + self.excluded;
        if total == 0 {
            0.0
        } else {
            self.excluded as f64 / total as f64
        }
    }

    fn record(&mut self, o: Offender) {
        self.checked += 1;
        self.max_abs_diff = self.max_abs_diff.max((o.analytic - o.numeric).abs());
        if self.worst.is_none_or(|w| o.error > w.error) {
            self.worst = Some(o);
        }
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.max_abs_diff = self.max_abs_diff.max(other.max_abs_diff);
        if let Some(o) = other.worst {
            if self.worst.is_none_or(|w| o.error > w.error) {
                self.worst = Some(o);
            }
        }
    }
}

pub fn central_difference<F>(f: &F, x: &[f64], i: usize, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut y = x.to_vec();
    y[i] = x[i] + h;
    let plus = f(&y)?;
    y[i] = x[i] - h;
    let minus = f(&y)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares `analytic` against central differences of `f` at `x`, skipping
/// the coordinates for which `exclude` returns true.
pub fn check_gradient<F, E>(f: &F, x: &[f64], analytic: &[f64], tol: &Tolerance, instance: usize, exclude: E) -> Result<CheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
    E: Fn(usize) -> Result<bool>,
{
    if x.len() != analytic.len() {
        return Err(invalid_arg!("{} coordinates but {} gradient entries", x.len(), analytic.len()));
    }
    let noise = 64.0 * f64::EPSILON * f(x)?.abs().max(1.0) / tol.step;
    let atol = tol.atol.max(noise);
    let mut report = CheckReport::default();
    for i in 0..x.len() {
        if exclude(i)? {
            report.excluded += 1;
            continue;
        }
        let numeric = central_difference(f, x, i, tol.step)?;
        report.record(Offender {
            instance,
            index: i,
            analytic: analytic[i],
            numeric,
            error: relative_error(analytic[i], numeric, atol),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    /// Perturbs the first analytic entry of every instance, to exercise the
    /// failure path.
    pub corrupt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub tolerance: Tolerance,
    pub max_excluded_fraction: f64,
    pub report: CheckReport,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.report.checked > 0
            && self.report.max_error() < self.tolerance.rtol
            && self.report.excluded_fraction() < self.max_excluded_fraction
    }
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{} {}: {} instances, {} coordinates, {} excluded, max relative error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            r.checked,
            r.excluded,
            r.max_error(),
            self.tolerance.rtol
        )?;
        if let (false, Some(w)) = (self.passed(), r.worst) {
            let place = if self.name == "upsampler" {
                format!("parameter {}", w.index)
            } else {
                format!("coordinate {} (point {}, axis {})", w.index, w.index / 3, ["x", "y", "z"][w.index % 3])
            };
            write!(
                f,
                "\n  worst: instance {} {place}: analytic {:e}, numeric {:e}",
                w.instance, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn corrupt(grad: &mut [f64], on: bool) {
    if on {
        if let Some(g) = grad.first_mut() {
            *g += 0.1 * (1.0 + g.abs());
        }
    }
}

fn to_points(x: &[f64]) -> Vec<Point> {
    x.chunks_exact(3).map(|c| Point::new(c[0], c[1], c[2])).collect()
}

fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|g| [g.x, g.y, g.z]).collect()
}

fn random_point(rng: &mut ChaCha8Rng, r: f64) -> Point {
    Point::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

pub const RENDER_TOLERANCE: Tolerance = Tolerance {
    step: 1e-6,
    rtol: 1e-4,
    atol: 1e-8,
};

pub const RENDER_IMAGE_SIZE: usize = 16;
pub const RENDER_GAMMA: f64 = 1e-4;
/// Coverage pairs with `|logit|` at or above this contribute below `e^-40`
/// and are ignored by the kink filter.
const KINK_BAND: f64 = 40.0;

/// Renderer gradient against finite differences on random soups of at most
/// ten points seen by a random camera at 16×16, frames held fixed.
///
/// Configurations with a pixel centre within a few steps of a coverage kink
/// (a triangle edge, or the switch between nearest edges inside a triangle)
/// are redrawn, since there the function is not differentiable on the
/// finite-difference stencil.
pub fn renderer_suite(opts: &SuiteOptions) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let size = (RENDER_IMAGE_SIZE, RENDER_IMAGE_SIZE);
    let tol = RENDER_TOLERANCE;
    let mut report = CheckReport::default();
    let mut accepted = 0;
    while accepted < opts.instances {
        let n = rng.random_range(1..=10);
        let cloud = PointCloud::new((0..n).map(|_| random_point(&mut rng, 0.6)).collect())?;
        let dir: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if dir.norm() < 0.2 || dir.normalize().z.abs() > 0.95 {
            continue;
        }
        let half_extent = rng.random_range(0.8..1.2);
        let camera = Camera::look_at(Point::from(dir.normalize() * 2.5), Point::origin(), Vector3::z(), half_extent)?;
        let scale = TriangleScale::Fixed(rng.random_range(0.08..0.3));
        let soup = build_tangent_triangles(&cloud, &camera, scale, FrameMode::Tangent)?;
        if kink_clearance(&soup, &camera, size, RENDER_GAMMA, KINK_BAND)? < 20.0 * tol.step / half_extent {
            continue;
        }
        let upstream: Vec<f64> = (0..size.0 * size.1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| -> Result<f64> {
            let img = rasterize_silhouette(&soup.with_centers(&to_points(x))?, &camera, size, RENDER_GAMMA)?;
            Ok(img.pixels.iter().zip(&upstream).map(|(p, w)| p * w).sum())
        };
        let mut analytic = flatten(&rasterize_gradient(&soup, &camera, size, RENDER_GAMMA, &upstream)?);
        corrupt(&mut analytic, opts.corrupt);
        let r = check_gradient(&f, &cloud.to_flat(), &analytic, &tol, accepted, |_| Ok(false))?;
        report.merge(&r);
        accepted += 1;
    }
    Ok(SuiteOutcome {
        name: "renderer",
        instances: accepted,
        tolerance: tol,
        max_excluded_fraction: 1.0,
        report,
    })
}

pub const JOINT_TOLERANCE: Tolerance = Tolerance {
    step: 1e-6,
    rtol: 1e-3,
    atol: 1e-7,
};

/// Logit band used to detect coverage switches within the stencil.
const SWITCH_BAND: f64 = 30.0;

/// Joint loss gradient against finite differences with |S| = 8, |D| = 32,
/// two views at 16×16. Coordinates whose ±step perturbation changes any
/// discrete choice of the loss (matching, subset, argmax, disks or coverage
/// pattern) are excluded.
pub fn joint_suite(opts: &SuiteOptions) -> Result<SuiteOutcome> {
    let tol = JOINT_TOLERANCE;
    let rig = make_view_ring(2, 2.5, 20.0, (16, 16))?;
    let mut report = CheckReport::default();
    for instance in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(instance as u64));
        let sparse = PointCloud::new((0..8).map(|_| random_point(&mut rng, 0.6)).collect())?;
        let dense = initial_dense(&sparse, 4, 0.03, rng.random())?;
        let objective = JointObjective::new(&sparse, &rig, LossWeights::default(), RenderParams::default(), UniformParams::default())?;
        let frozen = objective.dense_soups(&dense)?;
        let (_, grad) = objective.gradient(&dense)?;
        let mut analytic = flatten(&grad);
        corrupt(&mut analytic, opts.corrupt);
        let base = objective.active_set(&dense, &frozen, SWITCH_BAND)?;
        let x = dense.to_flat();
        let f = |x: &[f64]| -> Result<f64> {
            Ok(objective.evaluate_frozen(&PointCloud::new(to_points(x))?, &frozen)?.joint)
        };
        let switches = |i: usize| -> Result<bool> {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] += sign * tol.step;
                if objective.active_set(&PointCloud::new(to_points(&y))?, &frozen, SWITCH_BAND)? != base {
                    return Ok(true);
                }
            }
            Ok(false)
        };
        report.merge(&check_gradient(&f, &x, &analytic, &tol, instance, switches)?);
    }
    Ok(SuiteOutcome {
        name: "joint loss",
        instances: opts.instances,
        tolerance: tol,
        max_excluded_fraction: 0.1,
        report,
    })
}

pub const NEU_TOLERANCE: Tolerance = Tolerance {
    step: 1e-4,
    rtol: 1e-4,
    atol: 1e-8,
};

/// Smallest accepted rectifier margin, in steps.
const RELU_MARGIN_STEPS: f64 = 50.0;

/// Upsampler parameter gradient against finite differences with N = 8,
/// r = 2, c = 4, through a smooth cubic tail on the output points.
///
/// Instances with a rectifier input within a few steps of zero are redrawn,
/// since the stencil would straddle the kink.
pub fn neu_suite(opts: &SuiteOptions) -> Result<SuiteOutcome> {
    let tol = NEU_TOLERANCE;
    let dims = NeuDims { feature_width: 4, rate: 2 };
    let mut report = CheckReport::default();
    let mut accepted = 0;
    let mut attempt = 0u64;
    while accepted < opts.instances {
        let seed = opts.seed.wrapping_add(attempt);
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = PointCloud::new((0..8).map(|_| random_point(&mut rng, 1.0)).collect())?;
        let params = init_params(seed, dims)?;
        let fwd = upsampler_forward_cached(&cloud, 2, &params)?;
        if fwd.relu_margin() < RELU_MARGIN_STEPS * tol.step {
            continue;
        }
        let targets: Vec<Point> = (0..16).map(|_| random_point(&mut rng, 1.0)).collect();
        let tail = |out: &PointCloud| -> (f64, Vec<Vector3<f64>>) {
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(out.len());
            for (p, t) in out.points().iter().zip(&targets) {
                let d = p - t;
                value += 0.5 * d.norm_squared() + d.x * d.y * d.z;
                grad.push(d + Vector3::new(d.y * d.z, d.x * d.z, d.x * d.y));
            }
            (value, grad)
        };
        let grad = upsampler_backward(&fwd, &params, &tail(&fwd.output).1)?;
        let mut analytic = grad.to_flat();
        corrupt(&mut analytic, opts.corrupt);
        let x = params.to_flat();
        let f = |theta: &[f64]| -> Result<f64> {
            let mut p = params.clone();
            p.set_flat(theta)?;
            Ok(tail(&upsampler_forward(&cloud, 2, &p)?).0)
        };
        report.merge(&check_gradient(&f, &x, &analytic, &tol, accepted, |_| Ok(false))?);
        accepted += 1;
    }
    Ok(SuiteOutcome {
        name: "upsampler",
        instances: accepted,
        tolerance: tol,
        max_excluded_fraction: 1.0,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_rules() {
        assert_eq!(relative_error(1.0, 1.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-12, 0.0, 1e-8), 0.0);
        assert!((relative_error(1.0, 1.1, 0.0) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_passes() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let x = [0.3, -1.2, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let tol = Tolerance { step: 1e-5, rtol: 1e-8, atol: 0.0 };
        let r = check_gradient(&f, &x, &g, &tol, 0, |_| Ok(false)).unwrap();
        assert!(r.max_error() < 1e-8);
        let r = check_gradient(&f, &x, &g, &tol, 0, |i| Ok(i == 1)).unwrap();
        assert_eq!((r.checked, r.excluded), (2, 1));
    }

    #[test]
    fn corrupted_suite_fails() {
        let opts = SuiteOptions { seed: 1, instances: 1, corrupt: true };
        let out = neu_suite(&opts).unwrap();
        assert!(!out.passed());
        assert!(out.to_string().contains("worst"));
    }
}
