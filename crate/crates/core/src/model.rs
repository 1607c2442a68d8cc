//! The full network: a multi-head temporal attention block (attention,
//! residual, layer norms, two dense layers) followed by global average
//! pooling and a two-layer classifier head over two classes.

use crate::layers::{
    global_avg_pool_bwd, global_avg_pool_fwd, layernorm_bwd, layernorm_fwd, linear_bwd,
    linear_fwd, mha_bwd, mha_fwd, relu_bwd, relu_fwd, AttentionHead, GapCache, LayerError,
    LayerNormCache, LayerNormParams, LinearCache, LinearParams, MhaCache, MhaParams, ReluCache,
};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TANT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {detail}")]
    InvalidConfig { detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: bad magic {got:?}, expected {expected:?}")]
    BadMagic { got: [u8; 4], expected: [u8; 4] },
    #[error("checkpoint: version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("checkpoint: file corrupt or truncated: {detail}")]
    Corrupt { detail: String },
    #[error("checkpoint: config mismatch on {field}: file has {got}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        got: u64,
        expected: u64,
    },
}

/// Architecture hyperparameters. `d_model` equals the channel count of the
/// input windows; attention runs over time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fc_hidden: usize,
    pub classes: usize,
    pub layernorm_eps: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for a given channel count: two heads, 4x feed-forward width,
    /// a 32-wide classifier hidden layer, two classes.
    pub fn for_channels(channels: usize, init_seed: u64) -> Self {
        Self {
            d_model: channels,
            heads: 2,
            ffn_hidden: 4 * channels,
            fc_hidden: 32,
            classes: 2,
            layernorm_eps: 1e-5,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |detail: String| ModelError::InvalidConfig { detail };
        if self.d_model == 0 || self.ffn_hidden == 0 || self.fc_hidden == 0 {
            return Err(bad("all extents must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(bad("head count must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.classes != 2 {
            return Err(bad(format!(
                "classifier is binary; classes = {} unsupported",
                self.classes
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(bad(format!(
                "layernorm_eps {} must be positive",
                self.layernorm_eps
            )));
        }
        Ok(())
    }
}

/// Every learnable tensor in the network. Enumeration order (`tensors`) is
/// fixed: attention heads (q, k, v per head), output projection, ln1, ln2,
/// ffn1, ffn2, fc1, fc2 — the optimizer, checkpoints, and gradients all rely
/// on this order being identical every run.
#[derive(Debug, Clone, PartialEq)]
pub struct TanetParams {
    pub mha: MhaParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// Gradients use the same structure as the parameters, one tensor per tensor.
pub type ParamGrads = TanetParams;

impl TanetParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for h in &self.mha.heads {
            out.push(&h.wq);
            out.push(&h.wk);
            out.push(&h.wv);
        }
        out.push(&self.mha.w_out);
        out.push(&self.ln1.gamma);
        out.push(&self.ln1.beta);
        out.push(&self.ln2.gamma);
        out.push(&self.ln2.beta);
        out.push(&self.ffn1.weight);
        out.push(&self.ffn1.bias);
        out.push(&self.ffn2.weight);
        out.push(&self.ffn2.bias);
        out.push(&self.fc1.weight);
        out.push(&self.fc1.bias);
        out.push(&self.fc2.weight);
        out.push(&self.fc2.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for h in &mut self.mha.heads {
            out.push(&mut h.wq);
            out.push(&mut h.wk);
            out.push(&mut h.wv);
        }
        out.push(&mut self.mha.w_out);
        out.push(&mut self.ln1.gamma);
        out.push(&mut self.ln1.beta);
        out.push(&mut self.ln2.gamma);
        out.push(&mut self.ln2.beta);
        out.push(&mut self.ffn1.weight);
        out.push(&mut self.ffn1.bias);
        out.push(&mut self.ffn2.weight);
        out.push(&mut self.ffn2.bias);
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> TanetParams {
        TanetParams {
            mha: self.mha.zeros_like(),
            ln1: LayerNormParams {
                gamma: self.ln1.gamma.zeros_like(),
                beta: self.ln1.beta.zeros_like(),
                epsilon: self.ln1.epsilon,
            },
            ln2: LayerNormParams {
                gamma: self.ln2.gamma.zeros_like(),
                beta: self.ln2.beta.zeros_like(),
                epsilon: self.ln2.epsilon,
            },
            ffn1: LinearParams {
                weight: self.ffn1.weight.zeros_like(),
                bias: self.ffn1.bias.zeros_like(),
            },
            ffn2: LinearParams {
                weight: self.ffn2.weight.zeros_like(),
                bias: self.ffn2.bias.zeros_like(),
            },
            fc1: LinearParams {
                weight: self.fc1.weight.zeros_like(),
                bias: self.fc1.bias.zeros_like(),
            },
            fc2: LinearParams {
                weight: self.fc2.weight.zeros_like(),
                bias: self.fc2.bias.zeros_like(),
            },
        }
    }

    /// All parameters as one flat vector, in enumeration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in enumeration order.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
    }

    /// In-place `self += other * s` over every tensor pair.
    pub fn accumulate(&mut self, other: &TanetParams, s: f64) {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.axpy(s, t).expect("aligned param structures");
        }
    }
}

fn glorot_uniform(rng: &mut SplitMix64, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Glorot-uniform weights from a splitmix64 stream seeded by
/// `cfg.init_seed`; biases and beta start at zero, gamma at one. The same
/// seed always produces bit-identical parameters.
pub fn init_params(cfg: &ModelConfig) -> Result<TanetParams, ModelError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let d_head = d / cfg.heads;
    let mut rng = SplitMix64::new(cfg.init_seed);

    let heads = (0..cfg.heads)
        .map(|_| AttentionHead {
            wq: glorot_uniform(&mut rng, d, d_head, vec![d, d_head]),
            wk: glorot_uniform(&mut rng, d, d_head, vec![d, d_head]),
            wv: glorot_uniform(&mut rng, d, d_head, vec![d, d_head]),
        })
        .collect();
    let w_out = glorot_uniform(&mut rng, cfg.heads * d_head, d, vec![cfg.heads * d_head, d]);
    let mha = MhaParams::new(heads, w_out)?;

    let ffn1 = LinearParams::new(
        glorot_uniform(&mut rng, d, cfg.ffn_hidden, vec![d, cfg.ffn_hidden]),
        Tensor::zeros(vec![cfg.ffn_hidden]),
    )?;
    let ffn2 = LinearParams::new(
        glorot_uniform(&mut rng, cfg.ffn_hidden, d, vec![cfg.ffn_hidden, d]),
        Tensor::zeros(vec![d]),
    )?;
    let fc1 = LinearParams::new(
        glorot_uniform(&mut rng, d, cfg.fc_hidden, vec![d, cfg.fc_hidden]),
        Tensor::zeros(vec![cfg.fc_hidden]),
    )?;
    let fc2 = LinearParams::new(
        glorot_uniform(&mut rng, cfg.fc_hidden, cfg.classes, vec![cfg.fc_hidden, cfg.classes]),
        Tensor::zeros(vec![cfg.classes]),
    )?;

    Ok(TanetParams {
        mha,
        ln1: LayerNormParams::unit(d, cfg.layernorm_eps),
        ln2: LayerNormParams::unit(d, cfg.layernorm_eps),
        ffn1,
        ffn2,
        fc1,
        fc2,
    })
}

pub struct MhtamCache {
    mha: MhaCache,
    ln1: LayerNormCache,
    ffn1: LinearCache,
    relu: ReluCache,
    ffn2: LinearCache,
    ln2: LayerNormCache,
}

impl MhtamCache {
    pub fn attention_weights(&self) -> Vec<&Tensor> {
        self.mha.attention_weights()
    }
}

/// The attention block: LN2(FFN2(ReLU(FFN1(LN1(MHA(e) + e))))).
/// Output shape equals input shape. There is no second residual around the
/// dense pair.
pub fn mhtam_fwd(
    e: &Tensor,
    params: &TanetParams,
) -> Result<(Tensor, MhtamCache), ModelError> {
    let (attn, mha_cache) = mha_fwd(e, &params.mha)?;
    let resid = attn.add(e)?;
    let (norm1, ln1_cache) = layernorm_fwd(&resid, &params.ln1)?;
    let (hidden, ffn1_cache) = linear_fwd(&norm1, &params.ffn1)?;
    let (activated, relu_cache) = relu_fwd(&hidden);
    let (projected, ffn2_cache) = linear_fwd(&activated, &params.ffn2)?;
    let (e_prime, ln2_cache) = layernorm_fwd(&projected, &params.ln2)?;
    Ok((
        e_prime,
        MhtamCache {
            mha: mha_cache,
            ln1: ln1_cache,
            ffn1: ffn1_cache,
            relu: relu_cache,
            ffn2: ffn2_cache,
            ln2: ln2_cache,
        },
    ))
}

/// Gradients of the attention block: returns d(input) and writes the block's
/// parameter gradients into `grads`.
pub fn mhtam_bwd(
    d_out: &Tensor,
    cache: &MhtamCache,
    params: &TanetParams,
    grads: &mut ParamGrads,
) -> Result<Tensor, ModelError> {
    let (d_proj, dg2, db2) = layernorm_bwd(d_out, &cache.ln2, &params.ln2)?;
    grads.ln2.gamma.axpy(1.0, &dg2)?;
    grads.ln2.beta.axpy(1.0, &db2)?;

    let (d_act, dw2, dbias2) = linear_bwd(&d_proj, &cache.ffn2, &params.ffn2)?;
    grads.ffn2.weight.axpy(1.0, &dw2)?;
    grads.ffn2.bias.axpy(1.0, &dbias2)?;

    let d_hidden = relu_bwd(&d_act, &cache.relu)?;

    let (d_norm1, dw1, dbias1) = linear_bwd(&d_hidden, &cache.ffn1, &params.ffn1)?;
    grads.ffn1.weight.axpy(1.0, &dw1)?;
    grads.ffn1.bias.axpy(1.0, &dbias1)?;

    let (d_resid, dg1, db1) = layernorm_bwd(&d_norm1, &cache.ln1, &params.ln1)?;
    grads.ln1.gamma.axpy(1.0, &dg1)?;
    grads.ln1.beta.axpy(1.0, &db1)?;

    // residual: resid = mha(e) + e
    let (d_e_attn, mha_grads) = mha_bwd(&d_resid, &cache.mha, &params.mha)?;
    for (gh, h) in grads.mha.heads.iter_mut().zip(&mha_grads.heads) {
        gh.wq.axpy(1.0, &h.wq)?;
        gh.wk.axpy(1.0, &h.wk)?;
        gh.wv.axpy(1.0, &h.wv)?;
    }
    grads.mha.w_out.axpy(1.0, &mha_grads.w_out)?;

    Ok(d_e_attn.add(&d_resid)?)
}

pub struct ForwardCache {
    mhtam: MhtamCache,
    gap: GapCache,
    fc1: LinearCache,
    relu: ReluCache,
    fc2: LinearCache,
}

impl ForwardCache {
    pub fn attention_weights(&self) -> Vec<&Tensor> {
        self.mhtam.attention_weights()
    }
}

/// Full forward pass on one window `[T×C]`: attention block, global average
/// pooling over time, then the two-layer classifier. Returns the length-2
/// logit vector (class 0 = attend-left, class 1 = attend-right).
pub fn forward(e: &Tensor, params: &TanetParams) -> Result<(Tensor, ForwardCache), ModelError> {
    let (e_prime, mhtam_cache) = mhtam_fwd(e, params)?;
    let (pooled, gap_cache) = global_avg_pool_fwd(&e_prime)?;
    let pooled_row = Tensor::new(vec![1, pooled.len()], pooled.data().to_vec())?;
    let (hidden, fc1_cache) = linear_fwd(&pooled_row, &params.fc1)?;
    let (activated, relu_cache) = relu_fwd(&hidden);
    let (logits_row, fc2_cache) = linear_fwd(&activated, &params.fc2)?;
    let logits = Tensor::new(vec![logits_row.cols()], logits_row.data().to_vec())?;
    Ok((
        logits,
        ForwardCache {
            mhtam: mhtam_cache,
            gap: gap_cache,
            fc1: fc1_cache,
            relu: relu_cache,
            fc2: fc2_cache,
        },
    ))
}

/// Reverse-mode gradients for every parameter, accumulated into a fresh
/// grads structure that mirrors the parameter enumeration exactly.
pub fn backward(
    dlogits: &Tensor,
    cache: &ForwardCache,
    params: &TanetParams,
) -> Result<ParamGrads, ModelError> {
    let mut grads = params.zeros_like();
    accumulate_backward(dlogits, cache, params, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but adds into an existing grads structure, so batch
/// gradients can be summed in deterministic window order.
pub fn accumulate_backward(
    dlogits: &Tensor,
    cache: &ForwardCache,
    params: &TanetParams,
    grads: &mut ParamGrads,
) -> Result<(), ModelError> {
    let dlogits_row = Tensor::new(vec![1, dlogits.len()], dlogits.data().to_vec())?;
    let (d_act, dw_fc2, db_fc2) = linear_bwd(&dlogits_row, &cache.fc2, &params.fc2)?;
    grads.fc2.weight.axpy(1.0, &dw_fc2)?;
    grads.fc2.bias.axpy(1.0, &db_fc2)?;

    let d_hidden = relu_bwd(&d_act, &cache.relu)?;

    let (d_pooled_row, dw_fc1, db_fc1) = linear_bwd(&d_hidden, &cache.fc1, &params.fc1)?;
    grads.fc1.weight.axpy(1.0, &dw_fc1)?;
    grads.fc1.bias.axpy(1.0, &db_fc1)?;

    let d_pooled = Tensor::new(vec![d_pooled_row.cols()], d_pooled_row.data().to_vec())?;
    let d_e_prime = global_avg_pool_bwd(&d_pooled, &cache.gap)?;

    mhtam_bwd(&d_e_prime, &cache.mhtam, params, grads)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint io
// ---------------------------------------------------------------------------

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|_| ModelError::Corrupt {
        detail: format!("unexpected end of file reading {what}"),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64, ModelError> {
    let mut b = [0u8; 8];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Writes magic, version, config, then every parameter tensor in enumeration
/// order as little-endian doubles.
pub fn save_params<P: AsRef<Path>>(
    path: P,
    cfg: &ModelConfig,
    params: &TanetParams,
) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, cfg.d_model as u32)?;
    write_u32(&mut w, cfg.heads as u32)?;
    write_u32(&mut w, cfg.ffn_hidden as u32)?;
    write_u32(&mut w, cfg.fc_hidden as u32)?;
    write_u32(&mut w, cfg.classes as u32)?;
    write_f64(&mut w, cfg.layernorm_eps)?;
    write_u64(&mut w, cfg.init_seed)?;
    for t in params.tensors() {
        for &v in t.data() {
            write_f64(&mut w, v)?;
        }
    }
    Ok(())
}

/// Reads back a checkpoint written by [`save_params`]; bit-exact round-trip.
pub fn load_params<P: AsRef<Path>>(path: P) -> Result<(ModelConfig, TanetParams), ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic {
            got: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            got: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg = ModelConfig {
        d_model: read_u32(&mut r, "d_model")? as usize,
        heads: read_u32(&mut r, "heads")? as usize,
        ffn_hidden: read_u32(&mut r, "ffn_hidden")? as usize,
        fc_hidden: read_u32(&mut r, "fc_hidden")? as usize,
        classes: read_u32(&mut r, "classes")? as usize,
        layernorm_eps: read_f64(&mut r, "layernorm_eps")?,
        init_seed: read_u64(&mut r, "init_seed")?,
    };
    cfg.validate()?;

    // Shape skeleton from the config, then overwrite with the stored blob.
    let mut params = init_params(&cfg)?;
    let count = params.param_count();
    let mut flat = Vec::with_capacity(count);
    for i in 0..count {
        flat.push(read_f64(&mut r, &format!("parameter {i}"))?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelError::Corrupt {
            detail: "trailing bytes after parameter blob".into(),
        });
    }
    params.set_from_flat(&flat);
    Ok((cfg, params))
}

/// Loads a checkpoint and requires its config to match `expected` exactly.
pub fn load_params_expecting<P: AsRef<Path>>(
    path: P,
    expected: &ModelConfig,
) -> Result<TanetParams, ModelError> {
    let (cfg, params) = load_params(path)?;
    let pairs: [(&'static str, u64, u64); 5] = [
        ("d_model", cfg.d_model as u64, expected.d_model as u64),
        ("heads", cfg.heads as u64, expected.heads as u64),
        ("ffn_hidden", cfg.ffn_hidden as u64, expected.ffn_hidden as u64),
        ("fc_hidden", cfg.fc_hidden as u64, expected.fc_hidden as u64),
        ("classes", cfg.classes as u64, expected.classes as u64),
    ];
    for (field, got, want) in pairs {
        if got != want {
            return Err(ModelError::ConfigMismatch {
                field,
                got,
                expected: want,
            });
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_err, FD_STEP, REL_FLOOR};

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 4,
            heads: 2,
            ffn_hidden: 8,
            fc_hidden: 4,
            classes: 2,
            layernorm_eps: 1e-5,
            init_seed: seed,
        }
    }

    fn rand_input(seed: u64, t: usize, c: usize) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::new(
            vec![t, c],
            (0..t * c).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
        let n = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for &r in perm {
            data.extend_from_slice(&x.data()[r * n..(r + 1) * n]);
        }
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config(99);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_params(&tiny_config(100)).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn init_gamma_one_beta_zero_bias_zero() {
        let p = init_params(&tiny_config(1)).unwrap();
        assert!(p.ln1.gamma.data().iter().all(|&v| v == 1.0));
        assert!(p.ln1.beta.data().iter().all(|&v| v == 0.0));
        assert!(p.ln2.gamma.data().iter().all(|&v| v == 1.0));
        assert!(p.ffn1.bias.data().iter().all(|&v| v == 0.0));
        assert!(p.fc2.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_glorot_bound() {
        // 64 -> 128 dense layer: bound = sqrt(6/192)
        let cfg = ModelConfig {
            d_model: 64,
            heads: 2,
            ffn_hidden: 128,
            fc_hidden: 32,
            classes: 2,
            layernorm_eps: 1e-5,
            init_seed: 7,
        };
        let p = init_params(&cfg).unwrap();
        let bound = (6.0 / 192.0f64).sqrt();
        assert!((bound - 0.1768).abs() < 1e-4);
        assert!(p.ffn1.weight.data().iter().all(|&v| v.abs() <= bound));
        // samples actually spread toward the bound
        let max = p.ffn1.weight.data().iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max > 0.9 * bound);
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut cfg = tiny_config(1);
        cfg.d_model = 5;
        assert!(matches!(
            init_params(&cfg),
            Err(ModelError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn mhtam_preserves_shape() {
        let cfg = tiny_config(2);
        let p = init_params(&cfg).unwrap();
        for t in [1, 3, 9] {
            let e = rand_input(10 + t as u64, t, 4);
            let (e_prime, _) = mhtam_fwd(&e, &p).unwrap();
            assert_eq!(e_prime.shape(), e.shape());
        }
    }

    #[test]
    fn mhtam_is_row_permutation_equivariant() {
        let p = init_params(&tiny_config(3)).unwrap();
        let e = rand_input(31, 6, 4);
        let perm = vec![5, 3, 1, 0, 4, 2];
        let (out, _) = mhtam_fwd(&e, &p).unwrap();
        let (out_p, _) = mhtam_fwd(&permute_rows(&e, &perm), &p).unwrap();
        let want = permute_rows(&out, &perm);
        for (a, b) in out_p.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mhtam_input_gradient_matches_finite_differences() {
        let p = init_params(&tiny_config(4)).unwrap();
        let e = rand_input(41, 5, 4);
        let mut rng = SplitMix64::new(42);
        let r: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let (_, cache) = mhtam_fwd(&e, &p).unwrap();
        let dy = Tensor::new(vec![5, 4], r.clone()).unwrap();
        let mut grads = p.zeros_like();
        let de = mhtam_bwd(&dy, &cache, &p, &mut grads).unwrap();

        let mut flat = e.data().to_vec();
        let fd = finite_diff_grad(
            |v| {
                let et = Tensor::new(vec![5, 4], v.to_vec()).unwrap();
                let (out, _) = mhtam_fwd(&et, &p).unwrap();
                out.data().iter().zip(&r).map(|(a, b)| a * b).sum()
            },
            &mut flat,
            FD_STEP,
        );
        assert!(max_rel_err(de.data(), &fd, REL_FLOOR) <= 1e-4);
    }

    #[test]
    fn forward_softmax_sums_to_one() {
        let p = init_params(&tiny_config(5)).unwrap();
        let e = rand_input(51, 7, 4);
        let (logits, _) = forward(&e, &p).unwrap();
        assert_eq!(logits.shape(), &[2]);
        let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
        let total: f64 = logits.data().iter().map(|v| (v - m).exp() / s).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let p = init_params(&tiny_config(12)).unwrap();
        let e = rand_input(121, 7, 4);
        let (a, _) = forward(&e, &p).unwrap();
        let (b, _) = forward(&e, &p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_invariant_to_time_permutation() {
        let p = init_params(&tiny_config(6)).unwrap();
        let e = rand_input(61, 8, 4);
        let perm = vec![7, 2, 5, 0, 3, 6, 1, 4];
        let (logits, _) = forward(&e, &p).unwrap();
        let (logits_p, _) = forward(&permute_rows(&e, &perm), &p).unwrap();
        for (a, b) in logits.data().iter().zip(logits_p.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        // T=6, C=4, h=2, ffn 8, fc 4 — every parameter checked.
        let cfg = ModelConfig {
            d_model: 4,
            heads: 2,
            ffn_hidden: 8,
            fc_hidden: 4,
            classes: 2,
            layernorm_eps: 1e-5,
            init_seed: 77,
        };
        let params = init_params(&cfg).unwrap();
        let e = rand_input(78, 6, 4);
        let label = 1usize;

        let (logits, cache) = forward(&e, &params).unwrap();
        let logits_row = Tensor::new(vec![1, 2], logits.data().to_vec()).unwrap();
        let (_, dlogits_row) = crate::layers::softmax_xent(&logits_row, &[label]).unwrap();
        let dlogits = Tensor::new(vec![2], dlogits_row.data().to_vec()).unwrap();
        let grads = backward(&dlogits, &cache, &params).unwrap();

        let mut flat = params.flatten();
        let fd = finite_diff_grad(
            |v| {
                let mut pp = params.clone();
                pp.set_from_flat(v);
                let (lg, _) = forward(&e, &pp).unwrap();
                let row = Tensor::new(vec![1, 2], lg.data().to_vec()).unwrap();
                crate::layers::softmax_xent(&row, &[label]).unwrap().0
            },
            &mut flat,
            FD_STEP,
        );
        let err = max_rel_err(&grads.flatten(), &fd, REL_FLOOR);
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads_and_full_count() {
        let cfg = tiny_config(8);
        let params = init_params(&cfg).unwrap();
        let e = rand_input(81, 5, 4);
        let (_, cache) = forward(&e, &params).unwrap();
        let grads = backward(&Tensor::zeros(vec![2]), &cache, &params).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(grads.param_count(), params.param_count());
        assert_eq!(grads.tensors().len(), params.tensors().len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tant");
        let cfg = tiny_config(9);
        let params = init_params(&cfg).unwrap();
        save_params(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_params(&path).unwrap();
        assert_eq!(cfg, cfg2);
        let a = params.flatten();
        let b = params2.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_truncation_is_a_corrupt_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tant");
        let cfg = tiny_config(10);
        let params = init_params(&cfg).unwrap();
        save_params(&path, &cfg, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_params(&path), Err(ModelError::Corrupt { .. })));
    }

    #[test]
    fn checkpoint_bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tant");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_params(&path), Err(ModelError::BadMagic { .. })));
    }

    #[test]
    fn checkpoint_config_mismatch_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tant");
        let cfg = tiny_config(11);
        let params = init_params(&cfg).unwrap();
        save_params(&path, &cfg, &params).unwrap();
        let mut other = cfg.clone();
        other.d_model = 8;
        other.ffn_hidden = 32;
        let err = load_params_expecting(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('8'), "{msg}");
    }
}
