use nalgebra::DMatrix;
use rand::Rng;

pub type Matrix = DMatrix<f64>;

/// Affine map `y = x·W + b` over row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Dense {
    /// Glorot-uniform weights and zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        grad.weight += x.tr_mul(dy);
        for row in dy.row_iter() {
            grad.bias += row;
        }
        dy * self.weight.transpose()
    }
}

pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = glorot_bound(fan_in, fan_out);
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// `dy` masked by the positive entries of the pre-activation.
pub(crate) fn relu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    dy.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    crate::render::logistic(x)
}

/// Residual scaled dot-product self-attention,
/// `out = Y + softmax((Y·Wq)(Y·Wk)ᵀ / √c)·(Y·Wv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

pub(crate) struct AttentionCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
}

impl Attention {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: glorot(width, width, rng),
            key: glorot(width, width, rng),
            value: glorot(width, width, rng),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            query: Matrix::zeros(width, width),
            key: Matrix::zeros(width, width),
            value: Matrix::zeros(width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.query.nrows()
    }

    /// Row-stochastic attention matrix for input `y`.
    pub fn attention_weights(&self, y: &Matrix) -> Matrix {
        let q = y * &self.query;
        let k = y * &self.key;
        softmax_rows(&(q * k.transpose() / (self.width() as f64).sqrt()))
    }

    pub(crate) fn forward_cached(&self, y: &Matrix) -> (Matrix, AttentionCache) {
        let q = y * &self.query;
        let k = y * &self.key;
        let v = y * &self.value;
        let weights = softmax_rows(&(&q * k.transpose() / (self.width() as f64).sqrt()));
        let out = y + &weights * &v;
        (
            out,
            AttentionCache {
                input: y.clone(),
                q,
                k,
                v,
                weights,
            },
        )
    }

    pub fn forward(&self, y: &Matrix) -> Matrix {
        self.forward_cached(y).0
    }

    pub(crate) fn backward(&self, cache: &AttentionCache, d_out: &Matrix, grad: &mut Attention) -> Matrix {
        let scale = 1.0 / (self.width() as f64).sqrt();
        let a = &cache.weights;
        let d_a = d_out * cache.v.transpose();
        let d_v = a.tr_mul(d_out);
        // softmax backward, row by row: dS = A ⊙ (dA − rowsum(dA ⊙ A))
        let mut d_s = a.component_mul(&d_a);
        for (mut row, a_row) in d_s.row_iter_mut().zip(a.row_iter()) {
            let s: f64 = row.iter().sum();
            row -= a_row * s;
        }
        d_s *= scale;
        let d_q = &d_s * &cache.k;
        let d_k = d_s.tr_mul(&cache.q);
        let y = &cache.input;
        grad.query += y.tr_mul(&d_q);
        grad.key += y.tr_mul(&d_k);
        grad.value += y.tr_mul(&d_v);
        d_out + d_q * self.query.transpose() + d_k * self.key.transpose() + d_v * self.value.transpose()
    }
}

pub(crate) fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|x| *x = (*x - max).exp());
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    out
}
