//! Neighbour expansion upsampler.
//!
//! A per-point lifter turns coordinates into an `N × c` feature map. A
//! neighbour expansion block then produces `r` features per point: for point
//! `i` and each of its `r` nearest neighbours `j` (itself included), a small
//! MLP reads `[x_j, x_i]` and emits two logits `(α, β)`, and the new feature is
//!
//! ```text
//! h = σ(α)·x_i + σ(β)·x_j
//! ```
//!
//! Each of the `r` replicas gets a distinct 2D grid code, a fusion layer maps
//! back to width `c` and residual self-attention mixes all `rN` rows.
//!
//! Two blocks are stacked. Between them the `rN × c` map is regrouped to
//! `N × rc`, compressed back to `N × c`, and the lifted features are
//! subtracted. A coordinate head regresses a 3D offset for every output row,
//! which is added to its source point.

mod layers;

pub use layers::{glorot_bound, Attention, Dense, Matrix};

use layers::{relu, relu_backward, sigmoid, AttentionCache};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{knn_all, Point, PointCloud};
use crate::error::{invalid_arg, Error, Result};

/// Half-width of the square the grid codes are laid out on.
pub const GRID_EXTENT: f64 = 0.2;
pub const DEFAULT_FEATURE_WIDTH: usize = 32;

/// A `rows × c` matrix of finite per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Matrix);

impl FeatureMap {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(invalid_arg!(
                "feature map must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("feature map has a non-finite entry".into()));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(invalid_arg!("{} values for a {rows}x{cols} map", values.len()));
        }
        Self::new(Matrix::from_row_slice(rows, cols, values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Weights of one neighbour expansion block.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuBlock {
    /// `2c → c`, rectified
    pub interp_hidden: Dense,
    /// `c → 2`, the `(α, β)` logits
    pub interp_out: Dense,
    /// `c + 2 → c`, rectified
    pub fuse: Dense,
    pub attention: Attention,
}

impl NeuBlock {
    fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            interp_hidden: Dense::init(2 * c, c, rng),
            interp_out: Dense::init(c, 2, rng),
            fuse: Dense::init(c + 2, c, rng),
            attention: Attention::init(c, rng),
        }
    }

    fn zeros(c: usize) -> Self {
        Self {
            interp_hidden: Dense::zeros(2 * c, c),
            interp_out: Dense::zeros(c, 2),
            fuse: Dense::zeros(c + 2, c),
            attention: Attention::zeros(c),
        }
    }

    fn tensors(&self) -> [&Matrix; 9] {
        [
            &self.interp_hidden.weight,
            &self.interp_hidden.bias,
            &self.interp_out.weight,
            &self.interp_out.bias,
            &self.fuse.weight,
            &self.fuse.bias,
            &self.attention.query,
            &self.attention.key,
            &self.attention.value,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.interp_hidden.weight,
            &mut self.interp_hidden.bias,
            &mut self.interp_out.weight,
            &mut self.interp_out.bias,
            &mut self.fuse.weight,
            &mut self.fuse.bias,
            &mut self.attention.query,
            &mut self.attention.key,
            &mut self.attention.value,
        ]
    }
}

/// Sizes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuDims {
    pub feature_width: usize,
    pub rate: usize,
}

impl Default for NeuDims {
    fn default() -> Self {
        Self {
            feature_width: DEFAULT_FEATURE_WIDTH,
            rate: 4,
        }
    }
}

/// All learnable weights of the two-block upsampler. Also used to hold
/// gradients, which share its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuParams {
    pub lift_hidden: Dense,
    pub lift_out: Dense,
    pub first: NeuBlock,
    /// `r·c → c`, rectified
    pub compress: Dense,
    pub second: NeuBlock,
    pub head_hidden: Dense,
    pub head_out: Dense,
}

pub const TENSOR_COUNT: usize = 28;

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(seed: u64, dims: NeuDims) -> Result<NeuParams> {
    let NeuDims { feature_width: c, rate: r } = dims;
    if c == 0 || r == 0 {
        return Err(invalid_arg!("layer widths must be non-zero, got c={c}, r={r}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NeuParams {
        lift_hidden: Dense::init(3, c, &mut rng),
        lift_out: Dense::init(c, c, &mut rng),
        first: NeuBlock::init(c, &mut rng),
        compress: Dense::init(r * c, c, &mut rng),
        second: NeuBlock::init(c, &mut rng),
        head_hidden: Dense::init(c, c, &mut rng),
        head_out: Dense::init(c, 3, &mut rng),
    })
}

impl NeuParams {
    pub fn dims(&self) -> NeuDims {
        let c = self.lift_out.fan_out();
        NeuDims {
            feature_width: c,
            rate: self.compress.fan_in() / c,
        }
    }

    pub fn zeros(dims: NeuDims) -> Self {
        let NeuDims { feature_width: c, rate: r } = dims;
        Self {
            lift_hidden: Dense::zeros(3, c),
            lift_out: Dense::zeros(c, c),
            first: NeuBlock::zeros(c),
            compress: Dense::zeros(r * c, c),
            second: NeuBlock::zeros(c),
            head_hidden: Dense::zeros(c, c),
            head_out: Dense::zeros(c, 3),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    /// Every weight and bias tensor in serialization order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.lift_hidden.weight,
            &self.lift_hidden.bias,
            &self.lift_out.weight,
            &self.lift_out.bias,
        ];
        out.extend(self.first.tensors());
        out.extend([&self.compress.weight, &self.compress.bias]);
        out.extend(self.second.tensors());
        out.extend([
            &self.head_hidden.weight,
            &self.head_hidden.bias,
            &self.head_out.weight,
            &self.head_out.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.lift_hidden.weight,
            &mut self.lift_hidden.bias,
            &mut self.lift_out.weight,
            &mut self.lift_out.bias,
        ];
        out.extend(self.first.tensors_mut());
        out.extend([&mut self.compress.weight, &mut self.compress.bias]);
        out.extend(self.second.tensors_mut());
        out.extend([
            &mut self.head_hidden.weight,
            &mut self.head_hidden.bias,
            &mut self.head_out.weight,
            &mut self.head_out.bias,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All entries, tensor by tensor, each tensor row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in self.tensors() {
            for r in 0..t.nrows() {
                out.extend(t.row(r).iter());
            }
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(invalid_arg!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                values.len()
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let cols = t.ncols();
            for r in 0..t.nrows() {
                for c in 0..cols {
                    t[(r, c)] = values[offset + r * cols + c];
                }
            }
            offset += t.len();
        }
        Ok(())
    }

    /// Checks that every layer composes with its neighbours.
    pub fn validate(&self) -> Result<()> {
        let c = self.lift_out.fan_out();
        let bad = |what: &str| Err(invalid_arg!("inconsistent layer shapes: {what}"));
        if c == 0 || self.compress.fan_in() == 0 || self.compress.fan_in() % c != 0 {
            return bad("compress input is not a multiple of the feature width");
        }
        let expect = |d: &Dense, i: usize, o: usize| {
            d.weight.shape() == (i, o) && d.bias.shape() == (1, o)
        };
        let block_ok = |b: &NeuBlock| {
            expect(&b.interp_hidden, 2 * c, c)
                && expect(&b.interp_out, c, 2)
                && expect(&b.fuse, c + 2, c)
                && [&b.attention.query, &b.attention.key, &b.attention.value]
                    .iter()
                    .all(|m| m.shape() == (c, c))
        };
        let ok = expect(&self.lift_hidden, 3, self.lift_hidden.fan_out())
            && expect(&self.lift_out, self.lift_hidden.fan_out(), c)
            && block_ok(&self.first)
            && expect(&self.compress, self.compress.fan_in(), c)
            && block_ok(&self.second)
            && expect(&self.head_hidden, c, self.head_hidden.fan_out())
            && expect(&self.head_out, self.head_hidden.fan_out(), 3);
        if !ok {
            return bad("a layer does not match the feature width");
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("parameters contain a non-finite value".into()));
        }
        Ok(())
    }

    /// `self += other * scale`
    pub fn add_scaled(&mut self, other: &NeuParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b * scale;
        }
    }
}

fn points_matrix(cloud: &PointCloud) -> Matrix {
    Matrix::from_fn(cloud.len(), 3, |i, k| cloud[i][k])
}

struct LiftCache {
    input: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
}

fn lift_cached(cloud: &PointCloud, params: &NeuParams) -> (Matrix, LiftCache) {
    let input = points_matrix(cloud);
    let hidden_pre = params.lift_hidden.forward(&input);
    let hidden = relu(&hidden_pre);
    let out = params.lift_out.forward(&hidden);
    (
        out,
        LiftCache {
            input,
            hidden_pre,
            hidden,
        },
    )
}

/// Per-point feature lifter: `N × 3 → N × c`.
pub fn lift_features(cloud: &PointCloud, params: &NeuParams) -> Result<FeatureMap> {
    cloud.require_non_empty("cloud")?;
    FeatureMap::new(lift_cached(cloud, params).0)
}

/// Interpolation gates `(α, β)` given explicitly, one pair per output row.
/// Row `i·r + j` of the result is `σ(α)·x_i + σ(β)·x_{n_ij}`.
pub fn interpolate_with_gates(x: &Matrix, neighbors: &[Vec<usize>], gates: &Matrix) -> Matrix {
    let r = neighbors.first().map_or(0, |n| n.len());
    let c = x.ncols();
    let mut out = Matrix::zeros(neighbors.len() * r, c);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for (j, &n) in nbrs.iter().enumerate() {
            let row = i * r + j;
            let (a, b) = (sigmoid(gates[(row, 0)]), sigmoid(gates[(row, 1)]));
            for k in 0..c {
                out[(row, k)] = a * x[(i, k)] + b * x[(n, k)];
            }
        }
    }
    out
}

/// The `r` grid codes appended to the replicas of each point: a row-major
/// `√r × √r` lattice over `[-0.2, 0.2]²` for square `r`, `r` evenly spaced
/// points on `[-0.2, 0.2] × {0}` otherwise, and `(0, 0)` for `r = 1`.
pub fn grid_codes(r: usize) -> Vec<[f64; 2]> {
    let spread = |k: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -GRID_EXTENT + 2.0 * GRID_EXTENT * k as f64 / (n - 1) as f64
        }
    };
    let side = (r as f64).sqrt().round() as usize;
    if side * side == r {
        (0..r).map(|k| [spread(k / side, side), spread(k % side, side)]).collect()
    } else {
        (0..r).map(|k| [spread(k, r), 0.0]).collect()
    }
}

fn append_codes(y: &Matrix, r: usize) -> Matrix {
    let codes = grid_codes(r);
    let c = y.ncols();
    let mut out = Matrix::zeros(y.nrows(), c + 2);
    out.columns_mut(0, c).copy_from(y);
    for row in 0..y.nrows() {
        let [a, b] = codes[row % r];
        out[(row, c)] = a;
        out[(row, c + 1)] = b;
    }
    out
}

/// Appends the replica's grid code to every row; rows are grouped by point,
/// `r` at a time.
pub fn grid_code_append(y: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || y.rows() % r != 0 {
        return Err(invalid_arg!("{} rows are not divisible by r={r}", y.rows()));
    }
    FeatureMap::new(append_codes(y.matrix(), r))
}

/// Residual self-attention over all rows.
pub fn self_attention(y: &FeatureMap, attention: &Attention) -> Result<FeatureMap> {
    if attention.width() != y.width() {
        return Err(invalid_arg!(
            "attention width {} does not match feature width {}",
            attention.width(),
            y.width()
        ));
    }
    FeatureMap::new(attention.forward(y.matrix()))
}

struct BlockCache {
    x: Matrix,
    pairs: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    gates: Matrix,
    with_codes: Matrix,
    fuse_pre: Matrix,
    attention: AttentionCache,
}

fn gather_pairs(x: &Matrix, neighbors: &[Vec<usize>]) -> Matrix {
    let r = neighbors.first().map_or(0, |n| n.len());
    let c = x.ncols();
    let mut pairs = Matrix::zeros(neighbors.len() * r, 2 * c);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for (j, &n) in nbrs.iter().enumerate() {
            let row = i * r + j;
            pairs.view_mut((row, 0), (1, c)).copy_from(&x.row(n));
            pairs.view_mut((row, c), (1, c)).copy_from(&x.row(i));
        }
    }
    pairs
}

fn block_forward(block: &NeuBlock, x: &Matrix, neighbors: &[Vec<usize>]) -> (Matrix, BlockCache) {
    let r = neighbors.first().map_or(0, |n| n.len());
    let pairs = gather_pairs(x, neighbors);
    let hidden_pre = block.interp_hidden.forward(&pairs);
    let hidden = relu(&hidden_pre);
    let gates = block.interp_out.forward(&hidden);
    let interpolated = interpolate_with_gates(x, neighbors, &gates);
    let with_codes = append_codes(&interpolated, r);
    let fuse_pre = block.fuse.forward(&with_codes);
    let fused = relu(&fuse_pre);
    let (out, attention) = block.attention.forward_cached(&fused);
    (
        out,
        BlockCache {
            x: x.clone(),
            pairs,
            hidden_pre,
            hidden,
            gates,
            with_codes,
            fuse_pre,
            attention,
        },
    )
}

fn block_backward(
    block: &NeuBlock,
    cache: &BlockCache,
    neighbors: &[Vec<usize>],
    d_out: &Matrix,
    grad: &mut NeuBlock,
) -> Matrix {
    let x = &cache.x;
    let c = x.ncols();
    let r = neighbors.first().map_or(0, |n| n.len());

    let d_fused = block.attention.backward(&cache.attention, d_out, &mut grad.attention);
    let d_fuse_pre = relu_backward(&cache.fuse_pre, &d_fused);
    let d_codes = block.fuse.backward(&cache.with_codes, &d_fuse_pre, &mut grad.fuse);

    let mut d_x = Matrix::zeros(x.nrows(), c);
    let mut d_gates = Matrix::zeros(cache.gates.nrows(), 2);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for (j, &n) in nbrs.iter().enumerate() {
            let row = i * r + j;
            let a = sigmoid(cache.gates[(row, 0)]);
            let b = sigmoid(cache.gates[(row, 1)]);
            let (mut dot_center, mut dot_neighbor) = (0.0, 0.0);
            for k in 0..c {
                let dh = d_codes[(row, k)];
                d_x[(i, k)] += a * dh;
                d_x[(n, k)] += b * dh;
                dot_center += dh * x[(i, k)];
                dot_neighbor += dh * x[(n, k)];
            }
            d_gates[(row, 0)] = a * (1.0 - a) * dot_center;
            d_gates[(row, 1)] = b * (1.0 - b) * dot_neighbor;
        }
    }

    let d_hidden = block.interp_out.backward(&cache.hidden, &d_gates, &mut grad.interp_out);
    let d_hidden_pre = relu_backward(&cache.hidden_pre, &d_hidden);
    let d_pairs = block.interp_hidden.backward(&cache.pairs, &d_hidden_pre, &mut grad.interp_hidden);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for (j, &n) in nbrs.iter().enumerate() {
            let row = i * r + j;
            for k in 0..c {
                d_x[(n, k)] += d_pairs[(row, k)];
                d_x[(i, k)] += d_pairs[(row, c + k)];
            }
        }
    }
    d_x
}

fn check_rate(cloud: &PointCloud, r: usize, params: &NeuParams) -> Result<()> {
    cloud.require_non_empty("cloud")?;
    params.validate()?;
    let dims = params.dims();
    if r == 0 || r > cloud.len() {
        return Err(invalid_arg!("rate {r} out of range 1..={}", cloud.len()));
    }
    if dims.rate != r {
        return Err(invalid_arg!("parameters were built for rate {}, got {r}", dims.rate));
    }
    Ok(())
}

/// One expansion block applied to `x`: interpolation, grid codes, fusion and
/// attention. `neighbors[i]` lists the `r` nearest points of point `i`.
pub fn neu_block(x: &FeatureMap, neighbors: &[Vec<usize>], block: &NeuBlock) -> Result<FeatureMap> {
    if neighbors.len() != x.rows() {
        return Err(invalid_arg!("{} neighbour lists for {} rows", neighbors.len(), x.rows()));
    }
    FeatureMap::new(block_forward(block, x.matrix(), neighbors).0)
}

/// The interpolation step alone: `(rN) × c`, rows ordered by point then
/// neighbour rank.
pub fn neu_interpolate(x: &FeatureMap, cloud: &PointCloud, r: usize, block: &NeuBlock) -> Result<FeatureMap> {
    if x.rows() != cloud.len() {
        return Err(invalid_arg!("{} feature rows for {} points", x.rows(), cloud.len()));
    }
    if block.interp_hidden.fan_in() != 2 * x.width() {
        return Err(invalid_arg!("interpolation MLP does not match feature width {}", x.width()));
    }
    let neighbors = knn_all(cloud, r, true)?;
    let pairs = gather_pairs(x.matrix(), &neighbors);
    let gates = block.interp_out.forward(&relu(&block.interp_hidden.forward(&pairs)));
    FeatureMap::new(interpolate_with_gates(x.matrix(), &neighbors, &gates))
}

/// Cached intermediate values of a full forward pass.
pub struct Forward {
    pub output: PointCloud,
    neighbors: Vec<Vec<usize>>,
    lift: LiftCache,
    first: BlockCache,
    regrouped: Matrix,
    compress_pre: Matrix,
    second: BlockCache,
    second_out: Matrix,
    head_pre: Matrix,
    head_hidden: Matrix,
}

impl Forward {
    /// Smallest magnitude of any rectifier input in the pass. Finite
    /// differences with a step well below this margin stay on one linear
    /// piece of every rectifier.
    pub fn relu_margin(&self) -> f64 {
        [
            &self.lift.hidden_pre,
            &self.first.hidden_pre,
            &self.first.fuse_pre,
            &self.compress_pre,
            &self.second.hidden_pre,
            &self.second.fuse_pre,
            &self.head_pre,
        ]
        .iter()
        .flat_map(|m| m.iter())
        .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

fn regroup(y: &Matrix, n: usize, r: usize) -> Matrix {
    let c = y.ncols();
    Matrix::from_fn(n, r * c, |i, col| y[(i * r + col / c, col % c)])
}

fn ungroup(d: &Matrix, r: usize) -> Matrix {
    let c = d.ncols() / r;
    Matrix::from_fn(d.nrows() * r, c, |row, k| d[(row / r, (row % r) * c + k)])
}

fn forward_cached(cloud: &PointCloud, r: usize, params: &NeuParams) -> Result<Forward> {
    check_rate(cloud, r, params)?;
    let n = cloud.len();
    let neighbors = knn_all(cloud, r, true)?;
    let (lifted, lift) = lift_cached(cloud, params);
    let (first_out, first) = block_forward(&params.first, &lifted, &neighbors);
    let regrouped = regroup(&first_out, n, r);
    let compress_pre = params.compress.forward(&regrouped);
    let residual = relu(&compress_pre) - &lifted;
    let (second_out, second) = block_forward(&params.second, &residual, &neighbors);
    let head_pre = params.head_hidden.forward(&second_out);
    let head_hidden = relu(&head_pre);
    let offsets = params.head_out.forward(&head_hidden);

    let points = (0..n * r)
        .map(|row| {
            let src = cloud[row / r];
            Point::new(
                src.x + offsets[(row, 0)],
                src.y + offsets[(row, 1)],
                src.z + offsets[(row, 2)],
            )
        })
        .collect();
    let output = PointCloud::new(points)?;
    Ok(Forward {
        output,
        neighbors,
        lift,
        first,
        regrouped,
        compress_pre,
        second,
        second_out,
        head_pre,
        head_hidden,
    })
}

/// Upsamples `cloud` by `r`: output row `i·r + j` is the `j`-th point grown
/// from input point `i`.
pub fn upsampler_forward(cloud: &PointCloud, r: usize, params: &NeuParams) -> Result<PointCloud> {
    forward_cached(cloud, r, params).map(|f| f.output)
}

/// Runs the forward pass and keeps what the backward pass needs.
pub fn upsampler_forward_cached(cloud: &PointCloud, r: usize, params: &NeuParams) -> Result<Forward> {
    forward_cached(cloud, r, params)
}

/// Backpropagates `d_points` (gradient of the loss with respect to each
/// output point) into parameter gradients. Neighbour selection is held fixed.
pub fn upsampler_backward(fwd: &Forward, params: &NeuParams, d_points: &[Vector3<f64>]) -> Result<NeuParams> {
    let rows = fwd.output.len();
    if d_points.len() != rows {
        return Err(invalid_arg!("{} point gradients for {rows} output points", d_points.len()));
    }
    let r = params.dims().rate;
    let mut grad = params.zeros_like();
    let d_offsets = Matrix::from_fn(rows, 3, |row, k| d_points[row][k]);

    let d_head_hidden = params.head_out.backward(&fwd.head_hidden, &d_offsets, &mut grad.head_out);
    let d_head_pre = relu_backward(&fwd.head_pre, &d_head_hidden);
    let d_second_out = params.head_hidden.backward(&fwd.second_out, &d_head_pre, &mut grad.head_hidden);
    let d_residual = block_backward(&params.second, &fwd.second, &fwd.neighbors, &d_second_out, &mut grad.second);

    let d_compress_pre = relu_backward(&fwd.compress_pre, &d_residual);
    let d_regrouped = params.compress.backward(&fwd.regrouped, &d_compress_pre, &mut grad.compress);
    let d_first_out = ungroup(&d_regrouped, r);
    let mut d_lifted = block_backward(&params.first, &fwd.first, &fwd.neighbors, &d_first_out, &mut grad.first);
    d_lifted -= &d_residual;

    let d_hidden = params.lift_out.backward(&fwd.lift.hidden, &d_lifted, &mut grad.lift_out);
    let d_hidden_pre = relu_backward(&fwd.lift.hidden_pre, &d_hidden);
    params.lift_hidden.backward(&fwd.lift.input, &d_hidden_pre, &mut grad.lift_hidden);
    Ok(grad)
}

/// Gradient of `tail(upsampler_forward(cloud))` with respect to every
/// parameter. `tail` returns its value and its gradient with respect to the
/// output points.
pub fn upsampler_gradient<F>(cloud: &PointCloud, r: usize, params: &NeuParams, tail: F) -> Result<(f64, NeuParams)>
where
    F: FnOnce(&PointCloud) -> Result<(f64, Vec<Vector3<f64>>)>,
{
    let fwd = forward_cached(cloud, r, params)?;
    let (value, d_points) = tail(&fwd.output)?;
    Ok((value, upsampler_backward(&fwd, params, &d_points)?))
}
