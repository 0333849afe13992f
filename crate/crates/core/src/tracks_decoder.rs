//! Track decoder D: classifies each featured track as dynamic or static.
//!
//! The main path keeps motion and semantics decoupled: the encoder layer
//! self-attends over motion embeddings only, semantics are concatenated after
//! attention and folded into a memory, and the decoder layer reaches that
//! memory through cross-attention before the sigmoid head. Two ablation
//! variants fuse semantics earlier instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_encoder::{encode, Encoded, EncoderConfig};
use crate::nn::{
    canonical_order, feed_forward, init_prenorm_attention, init_prenorm_feed_forward, linear,
    prenorm_cross_attention, prenorm_feed_forward, prenorm_self_attention,
    prenorm_self_attention_scored, row_key,
};
use crate::tensor::params::init_linear;
use crate::tensor::{ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Must match the motion encoder's embedding width.
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub semantic_dim: usize,
    /// Off replaces the semantic vectors with zeros everywhere they enter.
    pub use_dino: bool,
    /// Logits are clamped to ±this before the sigmoid.
    pub clamp_logits: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            model_dim: 64,
            heads: 8,
            ff_dim: 512,
            semantic_dim: 16,
            use_dino: true,
            clamp_logits: 30.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.semantic_dim == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(self.clamp_logits > 0.0) {
            return Err(Error::Config("clamp_logits must be positive".into()));
        }
        Ok(())
    }
}

/// Decoder output on the tape.
pub struct Decoded {
    /// Per-track dynamic probability, length N, input track order.
    pub probs: Var,
    /// Pre-softmax scores of the first attention layer (canonical track
    /// order) — the layer the decoupling property constrains.
    pub first_scores: Var,
}

/// Parameters of the decoupled decoder (also used by the early-fusion
/// variant, whose difference lives in the encoder inputs).
pub fn init_decoder(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, cfg: &DecoderConfig) {
    let d = cfg.model_dim;
    init_prenorm_attention(store, rng, "dec.enc.sa", d);
    // memory feed-forward maps concat(motion, semantics) back to model width
    init_linear(store, rng, "dec.enc.ff.in", d + cfg.semantic_dim, cfg.ff_dim);
    init_linear(store, rng, "dec.enc.ff.out", cfg.ff_dim, d);
    init_prenorm_attention(store, rng, "dec.dec.sa", d);
    init_prenorm_attention(store, rng, "dec.dec.ca", d);
    init_prenorm_feed_forward(store, rng, "dec.dec.ff", d, cfg.ff_dim);
    init_linear(store, rng, "dec.head", d, 1);
}

/// Parameters of the fused variant: semantics are concatenated onto the
/// embeddings up front, so there is no semantic memory or cross-attention.
pub fn init_decoder_msde_off(
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    cfg: &DecoderConfig,
) {
    let d = cfg.model_dim;
    init_linear(store, rng, "dec.fuse.in", d + cfg.semantic_dim, cfg.ff_dim);
    init_linear(store, rng, "dec.fuse.out", cfg.ff_dim, d);
    init_prenorm_attention(store, rng, "dec.enc.sa", d);
    init_prenorm_attention(store, rng, "dec.dec.sa", d);
    init_prenorm_feed_forward(store, rng, "dec.dec.ff", d, cfg.ff_dim);
    init_linear(store, rng, "dec.head", d, 1);
}

struct CanonicalTracks {
    p: Var,           // [N, D] canonical order
    s: Var,           // [N, Ds] canonical order
    mask: Tensor,     // [1, 1, 1, N] canonical track validity
    inverse: Vec<usize>,
    n: usize,
}

/// Validate shapes, apply the use_dino gate, and reorder tracks canonically
/// keyed by (validity, P row, effective S row).
fn canonicalize(
    tape: &Tape,
    cfg: &DecoderConfig,
    p_var: Var,
    s_var: Var,
    track_valid: &[bool],
) -> Result<CanonicalTracks> {
    cfg.validate()?;
    let ps = tape.shape_of(p_var);
    if ps.len() != 2 || ps[1] != cfg.model_dim {
        return Err(Error::ShapeMismatch(format!(
            "P must be N×{}, got {ps:?}",
            cfg.model_dim
        )));
    }
    let n = ps[0];
    let s_var = if cfg.use_dino {
        let ss = tape.shape_of(s_var);
        if ss != [n, cfg.semantic_dim] {
            return Err(Error::ShapeMismatch(format!(
                "S must be {}×{}, got {ss:?}",
                n, cfg.semantic_dim
            )));
        }
        s_var
    } else {
        tape.leaf(Tensor::zeros(&[n, cfg.semantic_dim]))
    };
    if track_valid.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} validity flags for {n} tracks",
            track_valid.len()
        )));
    }

    let (pv, sv) = (tape.value(p_var), tape.value(s_var));
    let (d, ds) = (cfg.model_dim, cfg.semantic_dim);
    let keys: Vec<Vec<u8>> = (0..n)
        .map(|i| {
            let flag = [if track_valid[i] { 1.0 } else { 0.0 }];
            row_key(&[&flag, &pv.data()[i * d..(i + 1) * d], &sv.data()[i * ds..(i + 1) * ds]])
        })
        .collect();
    let (order, inverse) = canonical_order(&keys);
    let mut mask = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        mask[pos] = if track_valid[i] { 1.0 } else { 0.0 };
    }
    Ok(CanonicalTracks {
        p: tape.gather0(p_var, &order)?,
        s: tape.gather0(s_var, &order)?,
        mask: Tensor::new(vec![1, 1, 1, n], mask)?,
        inverse,
        n,
    })
}

fn head(tape: &Tape, p: &ParamVars, cfg: &DecoderConfig, y: Var, n: usize) -> Result<Var> {
    let logits = linear(tape, p, "dec.head", y)?; // [1, N, 1]
    let logits = tape.clamp(logits, -cfg.clamp_logits, cfg.clamp_logits);
    let probs = tape.sigmoid(logits);
    tape.reshape(probs, &[n])
}

/// Decoupled decoder: motion-only self-attention, semantics concatenated
/// after it into the memory, cross-attention from the motion stream.
pub fn decode(
    tape: &Tape,
    p: &ParamVars,
    cfg: &DecoderConfig,
    p_var: Var,
    s_var: Var,
    track_valid: &[bool],
) -> Result<Decoded> {
    let ct = canonicalize(tape, cfg, p_var, s_var, track_valid)?;
    let (n, d) = (ct.n, cfg.model_dim);
    let x = tape.reshape(ct.p, &[1, n, d])?;

    // encoder layer: attention sees motion only; semantics join afterwards
    let (enc_h, scores) =
        prenorm_self_attention_scored(tape, p, "dec.enc.sa", x, Some(&ct.mask), cfg.heads)?;
    let s3 = tape.reshape(ct.s, &[1, n, cfg.semantic_dim])?;
    let cat = tape.concat_last(&[enc_h, s3])?;
    let memory = feed_forward(tape, p, "dec.enc.ff", cat)?; // [1, N, D]

    // decoder layer: motion stream queries the semantic-bearing memory
    let y = prenorm_self_attention(tape, p, "dec.dec.sa", x, Some(&ct.mask), cfg.heads)?;
    let y = prenorm_cross_attention(tape, p, "dec.dec.ca", y, memory, Some(&ct.mask), cfg.heads)?;
    let y = prenorm_feed_forward(tape, p, "dec.dec.ff", y)?;

    let probs = head(tape, p, cfg, y, n)?;
    Ok(Decoded {
        probs: tape.gather0(probs, &ct.inverse)?,
        first_scores: scores,
    })
}

/// Early-fusion ablation: semantics are concatenated onto every per-point
/// feature before the motion encoder; the decoder itself is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn decode_moe(
    tape: &Tape,
    p: &ParamVars,
    enc_cfg: &EncoderConfig,
    cfg: &DecoderConfig,
    features: Var,
    validity: &Tensor,
    s_var: Var,
) -> Result<(Encoded, Decoded)> {
    if enc_cfg.extra_input_dim != cfg.semantic_dim {
        return Err(Error::Config(format!(
            "early fusion needs encoder extra_input_dim {} = semantic_dim {}",
            enc_cfg.extra_input_dim, cfg.semantic_dim
        )));
    }
    let fs = tape.shape_of(features);
    if fs.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "features must be N×T×F, got {fs:?}"
        )));
    }
    let (n, t) = (fs[0], fs[1]);
    let ss = tape.shape_of(s_var);
    if ss != [n, cfg.semantic_dim] {
        return Err(Error::ShapeMismatch(format!(
            "S must be {}×{}, got {ss:?}",
            n, cfg.semantic_dim
        )));
    }
    let s_eff = if cfg.use_dino {
        s_var
    } else {
        tape.leaf(Tensor::zeros(&[n, cfg.semantic_dim]))
    };
    // broadcast S over time: [N,T,1] @ [N,1,Ds]
    let ones = tape.leaf(Tensor::full(&[n, t, 1], 1.0));
    let s_row = tape.reshape(s_eff, &[n, 1, cfg.semantic_dim])?;
    let s_tiled = tape.matmul(ones, s_row)?;
    let fused = tape.concat_last(&[features, s_tiled])?;

    let enc = encode(tape, p, enc_cfg, fused, validity)?;
    let dec = decode(tape, p, cfg, enc.p, s_eff, &enc.track_valid)?;
    Ok((enc, dec))
}

/// Fused-token ablation: tokens are FF(concat(P, S)) and both attention
/// layers self-attend over them; no cross-attention path exists.
pub fn decode_msde_off(
    tape: &Tape,
    p: &ParamVars,
    cfg: &DecoderConfig,
    p_var: Var,
    s_var: Var,
    track_valid: &[bool],
) -> Result<Decoded> {
    let ct = canonicalize(tape, cfg, p_var, s_var, track_valid)?;
    let (n, d) = (ct.n, cfg.model_dim);
    let p2 = tape.reshape(ct.p, &[1, n, d])?;
    let s3 = tape.reshape(ct.s, &[1, n, cfg.semantic_dim])?;
    let cat = tape.concat_last(&[p2, s3])?;
    let x = feed_forward(tape, p, "dec.fuse", cat)?; // [1, N, D]

    let (h, scores) =
        prenorm_self_attention_scored(tape, p, "dec.enc.sa", x, Some(&ct.mask), cfg.heads)?;
    let y = prenorm_self_attention(tape, p, "dec.dec.sa", h, Some(&ct.mask), cfg.heads)?;
    let y = prenorm_feed_forward(tape, p, "dec.dec.ff", y)?;

    let probs = head(tape, p, cfg, y, n)?;
    Ok(Decoded {
        probs: tape.gather0(probs, &ct.inverse)?,
        first_scores: scores,
    })
}
