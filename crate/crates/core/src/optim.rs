//! Adam, direct coordinate optimization and upsampler training.

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cloud::{augment_with, knn_all, AugmentParams, Patch, PointCloud};
use crate::error::{invalid_arg, Error, Result};
use crate::losses::{JointObjective, LossReport, LossWeights, UniformParams};
use crate::neu::{init_params, upsampler_gradient, NeuDims, NeuParams, DEFAULT_FEATURE_WIDTH};
use crate::render::{CameraRig, RenderParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_arg!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(invalid_arg!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid_arg!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// First and second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn step(&mut self, values: &mut [f64], grads: &[f64], config: &AdamConfig) -> Result<()> {
        if values.len() != grads.len() || values.len() != self.m.len() || self.m.len() != self.v.len() {
            return Err(invalid_arg!(
                "shape mismatch: {} values, {} gradients, state of {}",
                values.len(),
                grads.len(),
                self.m.len()
            ));
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = *config;
        self.t += 1;
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (((x, &g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(values: &[f64], grads: &[f64], state: &AdamState, config: &AdamConfig) -> Result<(Vec<f64>, AdamState)> {
    let mut values = values.to_vec();
    let mut state = state.clone();
    state.step(&mut values, grads, config)?;
    Ok((values, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    /// Update count for direct optimization.
    pub iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub rate: usize,
    pub weights: LossWeights,
    pub render: RenderParams,
    pub uniform: UniformParams,
    pub seed: u64,
    /// Standard deviation of the Gaussian jitter added to the initial dense cloud.
    pub init_jitter: f64,
    pub feature_width: usize,
    pub augment: AugmentParams,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            iterations: 500,
            epochs: 30,
            batch_size: 28,
            rate: 4,
            weights: LossWeights::default(),
            render: RenderParams::default(),
            uniform: UniformParams::default(),
            seed: 0,
            init_jitter: 0.01,
            feature_width: DEFAULT_FEATURE_WIDTH,
            augment: AugmentParams::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.rate == 0 {
            return Err(invalid_arg!("rate must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch size must be at least 1"));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(invalid_arg!("jitter must be finite and non-negative, got {}", self.init_jitter));
        }
        Ok(())
    }
}

/// Per-iteration losses and timings. For direct optimization each entry is
/// the loss at the iterate before the update; for training it is the mean
/// over the batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimTrace {
    pub reports: Vec<LossReport>,
    pub millis: Vec<f64>,
    /// Mean per-patch joint loss of every completed epoch (training only).
    pub epoch_means: Vec<f64>,
    /// Loss of the returned cloud (direct optimization only).
    pub final_report: Option<LossReport>,
}

impl OptimTrace {
    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    fn push(&mut self, report: LossReport, started: Instant) {
        self.reports.push(report);
        self.millis.push(started.elapsed().as_secs_f64() * 1e3);
    }

    /// `iteration,sc,ic,hd,un,joint,millis` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,sc,ic,hd,un,joint,millis\n");
        for (i, (r, ms)) in self.reports.iter().zip(&self.millis).enumerate() {
            out.push_str(&format!("{i},{},{},{},{},{},{ms:.3}\n", r.sc, r.ic, r.hd, r.un, r.joint));
        }
        out
    }
}

fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|g| [g.x, g.y, g.z]).collect()
}

/// Starting dense cloud: replica `j` of point `i` sits at fraction
/// `(j+1)/(r+1)` of the way from `s_i` to its `j`-th nearest point (the
/// point itself first), plus Gaussian jitter.
pub fn initial_dense(sparse: &PointCloud, r: usize, jitter: f64, seed: u64) -> Result<PointCloud> {
    let neighbors = knn_all(sparse, r, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, jitter).map_err(|e| invalid_arg!("jitter: {e}"))?;
    let mut points = Vec::with_capacity(sparse.len() * r);
    for (i, nbrs) in neighbors.iter().enumerate() {
        let s = sparse[i];
        for (j, &n) in nbrs.iter().enumerate() {
            let t = (j + 1) as f64 / (r + 1) as f64;
            let mut p = s + (sparse[n] - s) * t;
            if jitter > 0.0 {
                p += Vector3::from_fn(|_, _| normal.sample(&mut rng));
            }
            points.push(p);
        }
    }
    PointCloud::new(points)
}

/// Optimizes the dense coordinates directly against the joint loss.
///
/// The renderer's default camera ring frames the unit sphere, so `sparse`
/// should be normalized first.
pub fn upsample_direct(sparse: &PointCloud, r: usize, rig: &CameraRig, config: &OptimConfig) -> Result<(PointCloud, OptimTrace)> {
    config.validate()?;
    if sparse.len() < 2 {
        return Err(invalid_arg!("direct upsampling needs at least 2 points, got {}", sparse.len()));
    }
    if r == 0 || r > sparse.len() {
        return Err(invalid_arg!("rate {r} out of range 1..={}", sparse.len()));
    }
    let objective = JointObjective::new(sparse, rig, config.weights, config.render, config.uniform)?;
    let mut dense = initial_dense(sparse, r, config.init_jitter, config.seed)?;
    let mut coords = dense.to_flat();
    let mut adam = AdamState::new(coords.len());
    let mut trace = OptimTrace::default();

    for iteration in 0..config.iterations {
        let started = Instant::now();
        let (report, grad) = objective.gradient(&dense)?;
        let grad = flatten(&grad);
        if !report.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            trace.push(report, started);
            return Err(Error::Diverged {
                iteration,
                trace: Box::new(trace),
            });
        }
        adam.step(&mut coords, &grad, &config.adam)?;
        dense = PointCloud::from_flat(&coords).map_err(|_| Error::Diverged {
            iteration,
            trace: Box::new(trace.clone()),
        })?;
        trace.push(report, started);
    }
    trace.final_report = Some(objective.evaluate(&dense)?);
    Ok((dense, trace))
}

fn augment_seed(seed: u64, epoch: usize, patch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(patch as u64)
}

struct PatchStep {
    report: LossReport,
    grad: Vec<f64>,
}

fn patch_step(
    patch: &Patch,
    seed: u64,
    r: usize,
    rig: &CameraRig,
    params: &NeuParams,
    config: &OptimConfig,
) -> Result<PatchStep> {
    let sparse = augment_with(&patch.cloud, seed, &config.augment)?;
    let objective = JointObjective::new(&sparse, rig, config.weights, config.render, config.uniform)?;
    let mut report = LossReport::default();
    let (_, grad) = upsampler_gradient(&sparse, r, params, |dense| {
        let (rep, g) = objective.gradient(dense)?;
        report = rep;
        Ok((rep.joint, g))
    })?;
    Ok(PatchStep {
        report,
        grad: grad.to_flat(),
    })
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.sc += r.sc / n;
        m.ic += r.ic / n;
        m.hd += r.hd / n;
        m.un += r.un / n;
        m.joint += r.joint / n;
    }
    m
}

/// Trains the upsampler on `patches`. Each step processes one minibatch:
/// every patch is augmented, upsampled and scored against itself, and the
/// per-patch gradients are averaged in batch order.
pub fn train_neu(patches: &[Patch], r: usize, rig: &CameraRig, config: &OptimConfig) -> Result<(NeuParams, OptimTrace)> {
    config.validate()?;
    if patches.is_empty() {
        return Err(invalid_arg!("training needs at least one patch"));
    }
    if let Some(p) = patches.iter().find(|p| p.cloud.len() < r) {
        return Err(invalid_arg!("patch of {} points is smaller than rate {r}", p.cloud.len()));
    }
    let dims = NeuDims {
        feature_width: config.feature_width,
        rate: r,
    };
    let mut params = init_params(config.seed, dims)?;
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut trace = OptimTrace::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let batch = config.batch_size.min(patches.len());
    let mut iteration = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            let started = Instant::now();
            let steps = chunk
                .par_iter()
                .map(|&p| patch_step(&patches[p], augment_seed(config.seed, epoch, p), r, rig, &params, config))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; flat.len()];
            for s in &steps {
                for (g, x) in grad.iter_mut().zip(&s.grad) {
                    *g += x;
                }
            }
            let scale = 1.0 / steps.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let reports: Vec<LossReport> = steps.iter().map(|s| s.report).collect();
            let report = mean_report(&reports);
            epoch_total += reports.iter().map(|r| r.joint).sum::<f64>();
            if !report.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                trace.push(report, started);
                return Err(Error::Diverged {
                    iteration,
                    trace: Box::new(trace),
                });
            }
            adam.step(&mut flat, &grad, &config.adam)?;
            params.set_flat(&flat)?;
            trace.push(report, started);
            iteration += 1;
        }
        trace.epoch_means.push(epoch_total / patches.len() as f64);
    }
    Ok((params, trace))
}
