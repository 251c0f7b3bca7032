//! Transformer building blocks in f64 with hand-written backward passes.
//!
//! Every forward returns the cache its backward needs; gradients
//! accumulate into [`Param::grad`] so one example's chain can be walked
//! backward without re-running the forward.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LN_EPS: f64 = 1e-5;

/// A learnable tensor with its gradient accumulator. Optimizer moments
/// live in the optimizer, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Array2::zeros((rows, cols)))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Param::new(Array2::ones((rows, cols)))
    }

    /// Xavier/Glorot normal: std = sqrt(2 / (fan_in + fan_out)).
    pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        Param::new(Array2::from_shape_fn((rows, cols), |_| {
            rng.sample::<f64, _>(StandardNormal) * std
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// y = x·w + b with x: (n, in), w: (in, out), b: (1, out).
pub fn linear_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns dx; accumulates dw = xᵀ·dy and db = column sums of dy.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct LayerNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization with learned scale/shift (both (1, D)).
pub fn layernorm_forward(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in x_hat.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v - mean[i]);
        let var = row.dot(&row) / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        row.mapv_inplace(|v| v * is);
    }
    let y = &x_hat * gamma + beta;
    (y, LayerNormCache { x_hat, inv_std })
}

/// Returns dx; accumulates dgamma and dbeta.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &Array2<f64>,
    dy: &Array2<f64>,
    dgamma: &mut Array2<f64>,
    dbeta: &mut Array2<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dgamma += &(dy * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dx_hat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dx_hat.row(i);
        let xh = cache.x_hat.row(i);
        let m1 = dxh.sum() / d;
        let m2 = dxh.dot(&xh) / d;
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[(i, j)] = is * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh-approximation GELU applied element-wise.
pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    let c = sqrt_2_over_pi();
    x.mapv(|v| 0.5 * v * (1.0 + (c * (v + GELU_C * v * v * v)).tanh()))
}

/// dx = dy ⊙ gelu'(x); x is the forward input.
pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let c = sqrt_2_over_pi();
    let mut dx = x.clone();
    dx.zip_mut_with(dy, |v, &g| {
        let u = c * (*v + GELU_C * *v * *v * *v);
        let th = u.tanh();
        let sech2 = 1.0 - th * th;
        let du = c * (1.0 + 3.0 * GELU_C * *v * *v);
        *v = g * (0.5 * (1.0 + th) + 0.5 * *v * sech2 * du);
    });
    dx
}

/// Stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Weights for one attention block; all matrices are D × D, biases 1 × D.
pub struct AttnWeights<'a> {
    pub wq: &'a Array2<f64>,
    pub bq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub bk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub bv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
    pub bo: &'a Array2<f64>,
}

pub struct AttnGrads<'a> {
    pub wq: &'a mut Array2<f64>,
    pub bq: &'a mut Array2<f64>,
    pub wk: &'a mut Array2<f64>,
    pub bk: &'a mut Array2<f64>,
    pub wv: &'a mut Array2<f64>,
    pub bv: &'a mut Array2<f64>,
    pub wo: &'a mut Array2<f64>,
    pub bo: &'a mut Array2<f64>,
}

pub struct AttnCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmaxed score matrix per head, each n × n.
    pub attn: Vec<Array2<f64>>,
    /// Head outputs re-concatenated, input to the output projection.
    pub concat: Array2<f64>,
}

/// Full-sequence multi-head self-attention, no masking.
pub fn attention_forward(x: &Array2<f64>, w: &AttnWeights, heads: usize) -> (Array2<f64>, AttnCache) {
    let (n, d) = x.dim();
    assert!(heads > 0 && d % heads == 0, "heads must divide model width");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_forward(x, w.wq, w.bq);
    let k = linear_forward(x, w.wk, w.bk);
    let v = linear_forward(x, w.wv, w.bv);
    let mut attn = Vec::with_capacity(heads);
    let mut concat = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let scores = qh.dot(&kh.t()) * scale;
        let a = softmax_rows(&scores);
        let oh = a.dot(&vh);
        concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
        attn.push(a);
    }
    let y = linear_forward(&concat, w.wo, w.bo);
    (
        y,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            concat,
        },
    )
}

/// Returns dx; accumulates all eight weight gradients.
pub fn attention_backward(
    cache: &AttnCache,
    w: &AttnWeights,
    g: &mut AttnGrads<'_>,
    dy: &Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let (n, d) = cache.x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dconcat = linear_backward(&cache.concat, w.wo, dy, g.wo, g.bo);

    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let a = &cache.attn[h];
        let doh = dconcat.slice(ndarray::s![.., cols.clone()]);

        let da = doh.dot(&vh.t());
        dv.slice_mut(ndarray::s![.., cols.clone()])
            .assign(&a.t().dot(&doh));

        // softmax backward per row: ds = a ⊙ (da − (da·a))
        let mut ds = Array2::zeros((n, n));
        for i in 0..n {
            let ai = a.row(i);
            let dai = da.row(i);
            let dot = dai.dot(&ai);
            for j in 0..n {
                ds[(i, j)] = ai[j] * (dai[j] - dot);
            }
        }
        ds *= scale;
        dq.slice_mut(ndarray::s![.., cols.clone()])
            .assign(&ds.dot(&kh));
        dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
    }

    let mut dx = linear_backward(&cache.x, w.wq, &dq, g.wq, g.bq);
    dx += &linear_backward(&cache.x, w.wk, &dk, g.wk, g.bk);
    dx += &linear_backward(&cache.x, w.wv, &dv, g.wv, g.bv);
    dx
}

/// Fixed sinusoidal embedding of a scalar timestep: pairs
/// (sin(t·ω_i), cos(t·ω_i)) with ω_i = 10000^(−2i/d).
pub fn timestep_embedding(t: usize, d: usize) -> Array1<f64> {
    let mut out = Array1::zeros(d);
    let half = d / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-((2 * i) as f64) / d as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    if d % 2 == 1 {
        let freq = (10_000f64).powf(-((d - 1) as f64) / d as f64);
        out[d - 1] = (t as f64 * freq).sin();
    }
    out
}
