//! Forward and backward passes for every layer in the network.
//!
//! Each `*_fwd` returns its output plus a cache of the intermediates the
//! matching `*_bwd` needs. Backward passes are hand-derived reverse-mode
//! gradients; the finite-difference suites in the tests hold them to account.

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: input width {got} does not match parameter width {expected}")]
    WidthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: gradient shape {got:?} does not match cached forward shape {expected:?}")]
    CacheMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: parameter shapes invalid: {detail}")]
    BadParams { op: &'static str, detail: String },
    #[error("softmax_xent: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("softmax_xent: {n} logit rows but {labels} labels")]
    LabelCount { n: usize, labels: usize },
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer parameters: `weight` is `[in × out]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, LayerError> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != weight.shape()[1] {
            return Err(LayerError::BadParams {
                op: "linear",
                detail: format!(
                    "weight {:?} must be rank 2 with bias {:?} matching its second extent",
                    weight.shape(),
                    bias.shape()
                ),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Tensor,
}

/// y = x·W + b, bias broadcast over rows.
pub fn linear_fwd(x: &Tensor, p: &LinearParams) -> Result<(Tensor, LinearCache), LayerError> {
    if x.rank() != 2 || x.cols() != p.in_dim() {
        return Err(LayerError::WidthMismatch {
            op: "linear_fwd",
            expected: p.in_dim(),
            got: if x.rank() == 2 { x.cols() } else { x.rank() },
        });
    }
    let mut y = x.matmul(&p.weight)?;
    let out = p.out_dim();
    for i in 0..y.rows() {
        let row = &mut y.data_mut()[i * out..(i + 1) * out];
        for (v, b) in row.iter_mut().zip(p.bias.data()) {
            *v += b;
        }
    }
    Ok((y, LinearCache { x: x.clone() }))
}

/// dx = dy·Wᵀ, dW = xᵀ·dy, db = column sum of dy.
pub fn linear_bwd(
    dy: &Tensor,
    cache: &LinearCache,
    p: &LinearParams,
) -> Result<(Tensor, Tensor, Tensor), LayerError> {
    let expected = vec![cache.x.rows(), p.out_dim()];
    if dy.shape() != expected.as_slice() {
        return Err(LayerError::CacheMismatch {
            op: "linear_bwd",
            expected,
            got: dy.shape().to_vec(),
        });
    }
    let dx = dy.matmul(&p.weight.transpose2d()?)?;
    let dw = cache.x.transpose2d()?.matmul(dy)?;
    let out = p.out_dim();
    let mut db = vec![0.0; out];
    for i in 0..dy.rows() {
        for (d, v) in db.iter_mut().zip(dy.row(i)) {
            *d += v;
        }
    }
    Ok((dx, dw, Tensor::new(vec![out], db)?))
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

/// One attention head's projection matrices, each `[d_model × d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Multi-head attention parameters: per-head Q/K/V projections plus the
/// output projection `[h·d_head × d_model]`. Requires `h·d_head = d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<AttentionHead>,
    pub w_out: Tensor,
}

impl MhaParams {
    pub fn new(heads: Vec<AttentionHead>, w_out: Tensor) -> Result<Self, LayerError> {
        let p = Self { heads, w_out };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), LayerError> {
        let bad = |detail: String| LayerError::BadParams {
            op: "mha",
            detail,
        };
        if self.heads.is_empty() {
            return Err(bad("at least one head required".into()));
        }
        let d_model = self.heads[0].wq.shape()[0];
        let d_head = self.heads[0].wq.shape()[1];
        for (i, h) in self.heads.iter().enumerate() {
            for (name, w) in [("wq", &h.wq), ("wk", &h.wk), ("wv", &h.wv)] {
                if w.rank() != 2 || w.shape() != [d_model, d_head] {
                    return Err(bad(format!(
                        "head {i} {name} has shape {:?}, expected [{d_model}, {d_head}]",
                        w.shape()
                    )));
                }
            }
        }
        if self.heads.len() * d_head != d_model {
            return Err(bad(format!(
                "h·d_head = {}·{d_head} must equal d_model = {d_model}",
                self.heads.len()
            )));
        }
        if self.w_out.rank() != 2 || self.w_out.shape() != [self.heads.len() * d_head, d_model] {
            return Err(bad(format!(
                "w_out has shape {:?}, expected [{}, {d_model}]",
                self.w_out.shape(),
                self.heads.len() * d_head
            )));
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].wq.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.heads[0].wq.shape()[1]
    }

    /// All-zero gradient container with matching shapes.
    pub fn zeros_like(&self) -> MhaParams {
        MhaParams {
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead {
                    wq: h.wq.zeros_like(),
                    wk: h.wk.zeros_like(),
                    wv: h.wv.zeros_like(),
                })
                .collect(),
            w_out: self.w_out.zeros_like(),
        }
    }
}

struct HeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor, // [T×T], rows sum to 1
}

pub struct MhaCache {
    x: Tensor,
    heads: Vec<HeadCache>,
    concat: Tensor, // [T × h·d_head]
}

impl MhaCache {
    /// Per-head attention weight matrices from the forward pass.
    pub fn attention_weights(&self) -> Vec<&Tensor> {
        self.heads.iter().map(|h| &h.attn).collect()
    }
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Copies a block of `width` columns starting at `start` into its own tensor.
fn col_block(x: &Tensor, start: usize, width: usize) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        data.extend_from_slice(&x.data()[i * n + start..i * n + start + width]);
    }
    Tensor::new(vec![m, width], data).expect("block within bounds")
}

/// Scaled dot-product self-attention over the rows of `x` (time steps), with
/// independent heads concatenated and projected back to `d_model`. No masking.
pub fn mha_fwd(x: &Tensor, p: &MhaParams) -> Result<(Tensor, MhaCache), LayerError> {
    if x.rank() != 2 || x.cols() != p.d_model() {
        return Err(LayerError::WidthMismatch {
            op: "mha_fwd",
            expected: p.d_model(),
            got: if x.rank() == 2 { x.cols() } else { x.rank() },
        });
    }
    let t = x.rows();
    let d_head = p.d_head();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(p.head_count());
    let mut concat = Tensor::zeros(vec![t, p.head_count() * d_head]);
    for (i, head) in p.heads.iter().enumerate() {
        let q = x.matmul(&head.wq)?;
        let k = x.matmul(&head.wk)?;
        let v = x.matmul(&head.wv)?;
        let scores = q.matmul(&k.transpose2d()?)?.scale(scale);
        let attn = softmax_rows(&scores);
        let out = attn.matmul(&v)?;
        let width = p.head_count() * d_head;
        for r in 0..t {
            concat.data_mut()[r * width + i * d_head..r * width + (i + 1) * d_head]
                .copy_from_slice(out.row(r));
        }
        heads.push(HeadCache { q, k, v, attn });
    }
    let y = concat.matmul(&p.w_out)?;
    Ok((
        y,
        MhaCache {
            x: x.clone(),
            heads,
            concat,
        },
    ))
}

/// Exact gradients through the attention map, including the softmax Jacobian
/// and the 1/√d_head scaling. Returns dx plus grads shaped like the params.
pub fn mha_bwd(
    dy: &Tensor,
    cache: &MhaCache,
    p: &MhaParams,
) -> Result<(Tensor, MhaParams), LayerError> {
    if dy.shape() != cache.x.shape() {
        return Err(LayerError::CacheMismatch {
            op: "mha_bwd",
            expected: cache.x.shape().to_vec(),
            got: dy.shape().to_vec(),
        });
    }
    let t = cache.x.rows();
    let d_head = p.d_head();
    let scale = 1.0 / (d_head as f64).sqrt();
    let x_t = cache.x.transpose2d()?;

    let dw_out = cache.concat.transpose2d()?.matmul(dy)?;
    let d_concat = dy.matmul(&p.w_out.transpose2d()?)?;

    let mut dx = Tensor::zeros(vec![t, p.d_model()]);
    let mut grads = p.zeros_like();
    grads.w_out = dw_out;

    for (i, (head, hc)) in p.heads.iter().zip(&cache.heads).enumerate() {
        let d_out = col_block(&d_concat, i * d_head, d_head);
        // out = attn·v
        let d_attn = d_out.matmul(&hc.v.transpose2d()?)?;
        let dv = hc.attn.transpose2d()?.matmul(&d_out)?;
        // softmax rows: ds = a ⊙ (da − Σ_u da[u]·a[u]) per row
        let mut ds = Tensor::zeros(vec![t, t]);
        for r in 0..t {
            let a_row = hc.attn.row(r);
            let da_row = d_attn.row(r);
            let dot: f64 = a_row.iter().zip(da_row).map(|(a, d)| a * d).sum();
            let ds_row = &mut ds.data_mut()[r * t..(r + 1) * t];
            for ((s, &a), &d) in ds_row.iter_mut().zip(a_row).zip(da_row) {
                *s = a * (d - dot);
            }
        }
        let ds = ds.scale(scale);
        // scores = q·kᵀ
        let dq = ds.matmul(&hc.k)?;
        let dk = ds.transpose2d()?.matmul(&hc.q)?;

        grads.heads[i].wq = x_t.matmul(&dq)?;
        grads.heads[i].wk = x_t.matmul(&dk)?;
        grads.heads[i].wv = x_t.matmul(&dv)?;

        dx.axpy(1.0, &dq.matmul(&head.wq.transpose2d()?)?)?;
        dx.axpy(1.0, &dk.matmul(&head.wk.transpose2d()?)?)?;
        dx.axpy(1.0, &dv.matmul(&head.wv.transpose2d()?)?)?;
    }
    Ok((dx, grads))
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// Per-row normalization parameters over a width-`d` feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(gamma: Tensor, beta: Tensor, epsilon: f64) -> Result<Self, LayerError> {
        if gamma.rank() != 1 || beta.rank() != 1 || gamma.shape() != beta.shape() {
            return Err(LayerError::BadParams {
                op: "layernorm",
                detail: format!(
                    "gamma {:?} and beta {:?} must be rank 1 with equal extents",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        if !(epsilon > 0.0) {
            return Err(LayerError::BadParams {
                op: "layernorm",
                detail: format!("epsilon {epsilon} must be positive"),
            });
        }
        Ok(Self {
            gamma,
            beta,
            epsilon,
        })
    }

    /// Width-`d` identity normalization: gamma 1, beta 0.
    pub fn unit(d: usize, epsilon: f64) -> Self {
        Self {
            gamma: Tensor::ones(vec![d]),
            beta: Tensor::zeros(vec![d]),
            epsilon,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.shape()[0]
    }
}

pub struct LayerNormCache {
    x_hat: Tensor,     // standardized input
    inv_std: Vec<f64>, // 1/sqrt(var + eps) per row
}

/// Per row: y = gamma ⊙ (x − mean)/√(var + ε) + beta, population variance.
pub fn layernorm_fwd(
    x: &Tensor,
    p: &LayerNormParams,
) -> Result<(Tensor, LayerNormCache), LayerError> {
    if x.rank() != 2 || x.cols() != p.width() {
        return Err(LayerError::WidthMismatch {
            op: "layernorm_fwd",
            expected: p.width(),
            got: if x.rank() == 2 { x.cols() } else { x.rank() },
        });
    }
    let (n, d) = (x.rows(), x.cols());
    let mut x_hat = Tensor::zeros(vec![n, d]);
    let mut inv_std = vec![0.0; n];
    let mut y = Tensor::zeros(vec![n, d]);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + p.epsilon).sqrt();
        inv_std[r] = s;
        for j in 0..d {
            let xh = (row[j] - mean) * s;
            x_hat.data_mut()[r * d + j] = xh;
            y.data_mut()[r * d + j] = p.gamma.data()[j] * xh + p.beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { x_hat, inv_std }))
}

/// Gradients through the normalization, including the mean and variance
/// pathways: dx = s·(dx̂ − mean(dx̂) − x̂·mean(dx̂ ⊙ x̂)) per row.
pub fn layernorm_bwd(
    dy: &Tensor,
    cache: &LayerNormCache,
    p: &LayerNormParams,
) -> Result<(Tensor, Tensor, Tensor), LayerError> {
    if dy.shape() != cache.x_hat.shape() {
        return Err(LayerError::CacheMismatch {
            op: "layernorm_bwd",
            expected: cache.x_hat.shape().to_vec(),
            got: dy.shape().to_vec(),
        });
    }
    let (n, d) = (dy.rows(), dy.cols());
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = Tensor::zeros(vec![n, d]);
    for r in 0..n {
        let dy_row = dy.row(r);
        let xh_row = cache.x_hat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dy_row[j] * xh_row[j];
            dbeta[j] += dy_row[j];
            let dxh = dy_row[j] * p.gamma.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh_row[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let s = cache.inv_std[r];
        for j in 0..d {
            let dxh = dy_row[j] * p.gamma.data()[j];
            dx.data_mut()[r * d + j] = s * (dxh - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
        }
    }
    Ok((
        dx,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub struct ReluCache {
    x: Tensor,
}

pub fn relu_fwd(x: &Tensor) -> (Tensor, ReluCache) {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (y, ReluCache { x: x.clone() })
}

/// dy masked by (x > 0); subgradient at exactly 0 is 0.
pub fn relu_bwd(dy: &Tensor, cache: &ReluCache) -> Result<Tensor, LayerError> {
    if dy.shape() != cache.x.shape() {
        return Err(LayerError::CacheMismatch {
            op: "relu_bwd",
            expected: cache.x.shape().to_vec(),
            got: dy.shape().to_vec(),
        });
    }
    let mut dx = dy.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(cache.x.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

pub struct GapCache {
    t: usize,
    d: usize,
}

/// Averages a `[T×d]` sequence over time into a `[d]` vector.
pub fn global_avg_pool_fwd(x: &Tensor) -> Result<(Tensor, GapCache), LayerError> {
    if x.rank() != 2 {
        return Err(LayerError::Tensor(TensorError::RankMismatch {
            op: "global_avg_pool",
            expected: 2,
            shape: x.shape().to_vec(),
        }));
    }
    let cache = GapCache {
        t: x.rows(),
        d: x.cols(),
    };
    Ok((x.reduce_mean(0)?, cache))
}

/// dx has every row equal to dy/T.
pub fn global_avg_pool_bwd(dy: &Tensor, cache: &GapCache) -> Result<Tensor, LayerError> {
    if dy.shape() != [cache.d] {
        return Err(LayerError::CacheMismatch {
            op: "global_avg_pool_bwd",
            expected: vec![cache.d],
            got: dy.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(vec![cache.t, cache.d]);
    let inv_t = 1.0 / cache.t as f64;
    for r in 0..cache.t {
        for (o, &g) in dx.data_mut()[r * cache.d..(r + 1) * cache.d]
            .iter_mut()
            .zip(dy.data())
        {
            *o = g * inv_t;
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy over rows with the gradient already divided by n:
/// dlogits = (softmax − onehot)/n. Stable via per-row max subtraction.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), LayerError> {
    if logits.rank() != 2 {
        return Err(LayerError::Tensor(TensorError::RankMismatch {
            op: "softmax_xent",
            expected: 2,
            shape: logits.shape().to_vec(),
        }));
    }
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(LayerError::LabelCount {
            n,
            labels: labels.len(),
        });
    }
    for &label in labels {
        if label >= k {
            return Err(LayerError::LabelOutOfRange { label, classes: k });
        }
    }
    let mut dlogits = Tensor::zeros(vec![n, k]);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum_exp.ln();
        loss += -(row[labels[r]] - max - log_sum);
        let drow = &mut dlogits.data_mut()[r * k..(r + 1) * k];
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - max).exp() / sum_exp * inv_n;
        }
        drow[labels[r]] -= inv_n;
    }
    Ok((loss * inv_n, dlogits))
}
