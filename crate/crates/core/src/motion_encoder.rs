//! Motion encoder: lifts per-point trajectory features with two MLPs, runs
//! interleaved temporal/spatial self-attention blocks over the track tensor,
//! and max-pools over time into one embedding per track.
//!
//! All row-set computations run in a content-determined canonical track order
//! and are gathered back afterwards, which makes the outputs exactly
//! equivariant to track permutations — not just up to float reassociation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    canonical_order, init_prenorm_attention, init_prenorm_feed_forward, linear,
    prenorm_feed_forward, prenorm_self_attention, row_key,
};
use crate::tensor::params::init_linear;
use crate::tensor::{EmptyRow, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::trackdata::{assemble_features, assemble_raw_features, feature_dim, TrackSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub num_blocks: usize,
    pub freq_count: usize,
    /// Feed depth channels (d, Δd) to the model; off zeroes them.
    pub use_depth: bool,
    /// Feed motion channels (positions, displacements, ρ, confidence); off
    /// zeroes them, leaving only depth and any extra channels.
    pub use_motion: bool,
    /// Frequency-encode positions; off feeds raw (u, v, Δu, Δv) channels.
    pub use_pe: bool,
    /// Interleaved temporal/spatial attention; off uses joint attention over
    /// the flattened N·T sequence.
    pub use_st_att: bool,
    /// Temporal sublayer before the spatial one within each block.
    pub temporal_first: bool,
    /// Width of extra channels appended to every per-point feature vector
    /// (the early-fusion path concatenates semantics here).
    pub extra_input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: 64,
            heads: 4,
            ff_dim: 64,
            num_blocks: 3,
            freq_count: 4,
            use_depth: true,
            use_motion: true,
            use_pe: true,
            use_st_att: true,
            temporal_first: true,
            extra_input_dim: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.num_blocks == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.use_pe && self.freq_count == 0 {
            return Err(Error::Config("freq_count must be >= 1 when encoding".into()));
        }
        Ok(())
    }

    /// Width of the per-point input feature vector this config consumes.
    pub fn feature_dim(&self) -> usize {
        let base = if self.use_pe {
            feature_dim(self.freq_count)
        } else {
            8
        };
        base + self.extra_input_dim
    }

    /// Per-channel input gate: zeroes the depth or motion channels when the
    /// corresponding flag is off. Extra (fused) channels are never gated.
    fn channel_mask(&self) -> Tensor {
        let f = self.feature_dim();
        let base = f - self.extra_input_dim;
        let d_at = if self.use_pe { 8 * self.freq_count } else { 4 };
        let mut m = vec![1.0; f];
        if !self.use_depth {
            m[d_at] = 0.0;
            m[d_at + 1] = 0.0;
        }
        if !self.use_motion {
            for v in &mut m[..d_at] {
                *v = 0.0;
            }
            for v in &mut m[d_at + 2..base] {
                *v = 0.0;
            }
        }
        Tensor::new(vec![f], m).expect("consistent dims")
    }
}

/// Per-track embeddings P (input track order) with the validity summary.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedTracks {
    /// N×model_dim.
    pub p: Tensor,
    /// Row i is meaningful iff track i has at least one valid point.
    pub track_valid: Vec<bool>,
}

/// Tape-level encoder output, for composing with the decoder and the loss.
pub struct Encoded {
    /// N×model_dim, input track order.
    pub p: Var,
    /// N×T×model_dim post-attention features before the temporal pool.
    pub pre_pool: Var,
    pub track_valid: Vec<bool>,
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, cfg: &EncoderConfig) {
    let d = cfg.model_dim;
    init_linear(store, rng, "enc.lift1", cfg.feature_dim(), d);
    init_linear(store, rng, "enc.lift2", d, d);
    for b in 0..cfg.num_blocks {
        if cfg.use_st_att {
            init_prenorm_attention(store, rng, &format!("enc.blk{b}.t"), d);
            init_prenorm_feed_forward(store, rng, &format!("enc.blk{b}.tff"), d, cfg.ff_dim);
            init_prenorm_attention(store, rng, &format!("enc.blk{b}.s"), d);
            init_prenorm_feed_forward(store, rng, &format!("enc.blk{b}.sff"), d, cfg.ff_dim);
        } else {
            init_prenorm_attention(store, rng, &format!("enc.blk{b}.j"), d);
            init_prenorm_feed_forward(store, rng, &format!("enc.blk{b}.jff"), d, cfg.ff_dim);
        }
    }
}

fn check_encode_shapes(cfg: &EncoderConfig, fs: &[usize], vs: &[usize]) -> Result<(usize, usize)> {
    cfg.validate()?;
    if fs.len() != 3 || vs.len() != 2 || fs[0] != vs[0] || fs[1] != vs[1] {
        return Err(Error::ShapeMismatch(format!(
            "encoder wants features N×T×F with validity N×T, got {fs:?} / {vs:?}"
        )));
    }
    if fs[2] != cfg.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} but config implies {}",
            fs[2],
            cfg.feature_dim()
        )));
    }
    Ok((fs[0], fs[1]))
}

/// Mask invalid positions to exact zero and reorder tracks canonically, keyed
/// by the (validity, masked-feature) content of each track.
fn canonicalize(
    tape: &Tape,
    cfg: &EncoderConfig,
    features: Var,
    validity: &Tensor,
) -> Result<(Var, Tensor, Vec<usize>, Vec<usize>, Vec<bool>)> {
    let (n, t) = (validity.shape()[0], validity.shape()[1]);
    let vmask = validity.reshaped(&[n, t, 1])?;
    let masked = tape.mul_mask(features, &vmask)?;
    let masked = tape.mul_mask(masked, &cfg.channel_mask())?;

    let mval = tape.value(masked);
    let f = cfg.feature_dim();
    let keys: Vec<Vec<u8>> = (0..n)
        .map(|i| {
            row_key(&[
                &validity.data()[i * t..(i + 1) * t],
                &mval.data()[i * t * f..(i + 1) * t * f],
            ])
        })
        .collect();
    let (order, inverse) = canonical_order(&keys);

    let x = tape.gather0(masked, &order)?;
    let mut vc = vec![0.0; n * t];
    for (pos, &i) in order.iter().enumerate() {
        vc[pos * t..(pos + 1) * t].copy_from_slice(&validity.data()[i * t..(i + 1) * t]);
    }
    let validity_c = Tensor::new(vec![n, t], vc)?;
    let track_valid = (0..n)
        .map(|i| validity.data()[i * t..(i + 1) * t].iter().any(|&v| v != 0.0))
        .collect();
    Ok((x, validity_c, order, inverse, track_valid))
}

fn lift(tape: &Tape, p: &ParamVars, x: Var) -> Result<Var> {
    let h = linear(tape, p, "enc.lift1", x)?;
    let h = tape.relu(h);
    linear(tape, p, "enc.lift2", h)
}

fn pool_and_restore(
    tape: &Tape,
    x: Var, // N×T×D canonical
    validity_c: &Tensor,
    inverse: &[usize],
    track_valid: Vec<bool>,
    d: usize,
) -> Result<Encoded> {
    let (n, t) = (validity_c.shape()[0], validity_c.shape()[1]);
    let mut pool_mask = vec![0.0; n * t * d];
    for i in 0..n * t {
        if validity_c.data()[i] != 0.0 {
            pool_mask[i * d..(i + 1) * d].fill(1.0);
        }
    }
    let pool_mask = Tensor::new(vec![n, t, d], pool_mask)?;
    let pooled = tape.masked_max(x, 1, &pool_mask, EmptyRow::Zero)?;
    Ok(Encoded {
        p: tape.gather0(pooled, inverse)?,
        pre_pool: tape.gather0(x, inverse)?,
        track_valid,
    })
}

/// Encoder E: featured tracks from per-point features and the validity mask.
/// Dispatches to [`encode_plain`] when the config turns interleaving off.
pub fn encode(
    tape: &Tape,
    p: &ParamVars,
    cfg: &EncoderConfig,
    features: Var,
    validity: &Tensor,
) -> Result<Encoded> {
    if !cfg.use_st_att {
        return encode_plain(tape, p, cfg, features, validity);
    }
    let (n, t) = check_encode_shapes(cfg, &tape.shape_of(features), validity.shape())?;
    let (x, validity_c, _, inverse, track_valid) = canonicalize(tape, cfg, features, validity)?;
    let d = cfg.model_dim;

    let mut h = lift(tape, p, x)?; // [N, T, D]
    let temporal_mask = validity_c.reshaped(&[n, 1, 1, t])?;
    let spatial_mask = {
        let vt = validity_c.permuted(&[1, 0])?; // T×N
        vt.reshaped(&[t, 1, 1, n])?
    };
    for b in 0..cfg.num_blocks {
        let temporal = |tape: &Tape, h: Var| -> Result<Var> {
            let h = prenorm_self_attention(
                tape,
                p,
                &format!("enc.blk{b}.t"),
                h,
                Some(&temporal_mask),
                cfg.heads,
            )?;
            prenorm_feed_forward(tape, p, &format!("enc.blk{b}.tff"), h)
        };
        let spatial = |tape: &Tape, h: Var| -> Result<Var> {
            let ht = tape.permute(h, &[1, 0, 2])?; // [T, N, D]
            let ht = prenorm_self_attention(
                tape,
                p,
                &format!("enc.blk{b}.s"),
                ht,
                Some(&spatial_mask),
                cfg.heads,
            )?;
            let ht = prenorm_feed_forward(tape, p, &format!("enc.blk{b}.sff"), ht)?;
            tape.permute(ht, &[1, 0, 2])
        };
        h = if cfg.temporal_first {
            let h1 = temporal(tape, h)?;
            spatial(tape, h1)?
        } else {
            let h1 = spatial(tape, h)?;
            temporal(tape, h1)?
        };
    }
    pool_and_restore(tape, h, &validity_c, &inverse, track_valid, d)
}

/// Ablation encoder: joint attention over the flattened N·T token sequence
/// instead of interleaved temporal/spatial sublayers.
pub fn encode_plain(
    tape: &Tape,
    p: &ParamVars,
    cfg: &EncoderConfig,
    features: Var,
    validity: &Tensor,
) -> Result<Encoded> {
    let (n, t) = check_encode_shapes(cfg, &tape.shape_of(features), validity.shape())?;
    let (x, validity_c, _, inverse, track_valid) = canonicalize(tape, cfg, features, validity)?;
    let d = cfg.model_dim;

    let h = lift(tape, p, x)?;
    let mut h = tape.reshape(h, &[1, n * t, d])?;
    let joint_mask = validity_c.reshaped(&[1, 1, 1, n * t])?;
    for b in 0..cfg.num_blocks {
        h = prenorm_self_attention(
            tape,
            p,
            &format!("enc.blk{b}.j"),
            h,
            Some(&joint_mask),
            cfg.heads,
        )?;
        h = prenorm_feed_forward(tape, p, &format!("enc.blk{b}.jff"), h)?;
    }
    let h = tape.reshape(h, &[n, t, d])?;
    pool_and_restore(tape, h, &validity_c, &inverse, track_valid, d)
}

/// Per-point input features in the layout `cfg` expects (before any fused
/// extra channels): frequency-encoded when `use_pe`, raw channels otherwise.
pub fn input_features(tracks: &TrackSet, cfg: &EncoderConfig) -> Result<Tensor> {
    if cfg.use_pe {
        Ok(assemble_features(tracks, cfg.freq_count)?.into_tensor())
    } else {
        assemble_raw_features(tracks)
    }
}

/// Run the encoder outside any surrounding graph and extract plain values.
pub fn featured_tracks(
    params: &ParamStore,
    cfg: &EncoderConfig,
    features: &Tensor,
    validity: &Tensor,
) -> Result<FeaturedTracks> {
    let tape = Tape::new();
    let p = params.lift(&tape);
    let fv = tape.leaf(features.clone());
    let enc = encode(&tape, &p, cfg, fv, validity)?;
    Ok(FeaturedTracks {
        p: (*tape.value(enc.p)).clone(),
        track_valid: enc.track_valid,
    })
}
