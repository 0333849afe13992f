//! Model wrapper: one config selecting how semantics meet motion, parameter
//! initialization for the matching encoder/decoder pair, a tape-level forward
//! pass, a convenience prediction path, and config-carrying checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_encoder::{encode, init_encoder, input_features, EncoderConfig};
use crate::synth::SemanticFeatures;
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::trackdata::{TrackLabels, TrackSet};
use crate::tracks_decoder::{
    decode, decode_moe, decode_msde_off, init_decoder, init_decoder_msde_off, DecoderConfig,
};

/// Where semantic features enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Decoupled: attention scores from motion only, semantics injected after
    /// attention and through the cross-attended memory.
    Full,
    /// Semantics concatenated onto every per-point encoder input.
    EarlyFusion,
    /// Semantics fused into the decoder tokens; attention sees the mixture.
    FusedAttention,
    /// Motion channels zeroed at the input: depth and semantics only.
    NoTracks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// True when semantics ride along as extra per-point input channels.
    fn fused_input(&self) -> bool {
        matches!(self.variant, Variant::EarlyFusion | Variant::NoTracks)
    }

    /// Set the knobs the variant dictates (fusion width, motion gating) so
    /// callers only pick the variant.
    pub fn normalized(mut self) -> Self {
        self.encoder.extra_input_dim = if self.fused_input() {
            self.decoder.semantic_dim
        } else {
            0
        };
        if self.variant == Variant::NoTracks {
            self.encoder.use_motion = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.model_dim != self.decoder.model_dim {
            return Err(Error::Config(format!(
                "encoder width {} != decoder width {}",
                self.encoder.model_dim, self.decoder.model_dim
            )));
        }
        let want_extra = if self.fused_input() {
            self.decoder.semantic_dim
        } else {
            0
        };
        if self.encoder.extra_input_dim != want_extra {
            return Err(Error::Config(format!(
                "variant {:?} needs encoder extra_input_dim {want_extra}, got {}; \
                 build the config through normalized()",
                self.variant, self.encoder.extra_input_dim
            )));
        }
        Ok(())
    }
}

/// Encoder plus decoder parameters under one config.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Tape-level forward output.
pub struct ModelOutput {
    /// Per-track dynamic probability, length N, input track order.
    pub probs: Var,
    pub track_valid: Vec<bool>,
}

impl SegModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<SegModel> {
        let cfg = cfg.normalized();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &mut rng, &cfg.encoder);
        match cfg.variant {
            Variant::FusedAttention => init_decoder_msde_off(&mut params, &mut rng, &cfg.decoder),
            _ => init_decoder(&mut params, &mut rng, &cfg.decoder),
        }
        Ok(SegModel { cfg, params })
    }

    /// Forward pass on an open tape, for training and instrumentation.
    /// `features` excludes fused channels — variants append those themselves.
    pub fn forward(
        &self,
        tape: &Tape,
        pv: &ParamVars,
        features: Var,
        validity: &Tensor,
        s: Var,
    ) -> Result<ModelOutput> {
        let (enc_cfg, dec_cfg) = (&self.cfg.encoder, &self.cfg.decoder);
        match self.cfg.variant {
            Variant::Full => {
                let enc = encode(tape, pv, enc_cfg, features, validity)?;
                let dec = decode(tape, pv, dec_cfg, enc.p, s, &enc.track_valid)?;
                Ok(ModelOutput {
                    probs: dec.probs,
                    track_valid: enc.track_valid,
                })
            }
            Variant::EarlyFusion | Variant::NoTracks => {
                let (enc, dec) = decode_moe(tape, pv, enc_cfg, dec_cfg, features, validity, s)?;
                Ok(ModelOutput {
                    probs: dec.probs,
                    track_valid: enc.track_valid,
                })
            }
            Variant::FusedAttention => {
                let enc = encode(tape, pv, enc_cfg, features, validity)?;
                let dec = decode_msde_off(tape, pv, dec_cfg, enc.p, s, &enc.track_valid)?;
                Ok(ModelOutput {
                    probs: dec.probs,
                    track_valid: enc.track_valid,
                })
            }
        }
    }

    /// Per-point input features in this model's expected layout.
    pub fn input_features(&self, tracks: &TrackSet) -> Result<Tensor> {
        input_features(tracks, &self.cfg.encoder)
    }

    /// Dynamic probabilities without building a training graph. Tracks with
    /// no valid point report probability 0.
    pub fn predict_probs(
        &self,
        tracks: &TrackSet,
        sem: &SemanticFeatures,
    ) -> Result<(Vec<f64>, Vec<bool>)> {
        if sem.track_count() != tracks.track_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} semantic rows for {} tracks",
                sem.track_count(),
                tracks.track_count()
            )));
        }
        let feats = self.input_features(tracks)?;
        let validity = tracks.validity_tensor();
        let tape = Tape::new();
        let pv = self.params.lift(&tape);
        let fv = tape.leaf(feats);
        let sv = tape.leaf(sem.tensor().clone());
        let out = self.forward(&tape, &pv, fv, &validity, sv)?;
        let mut probs = tape.value(out.probs).data().to_vec();
        for (p, &ok) in probs.iter_mut().zip(&out.track_valid) {
            if !ok {
                *p = 0.0;
            }
        }
        Ok((probs, out.track_valid))
    }

    pub fn predict(
        &self,
        tracks: &TrackSet,
        sem: &SemanticFeatures,
        threshold: f64,
    ) -> Result<TrackLabels> {
        let (probs, _) = self.predict_probs(tracks, sem)?;
        Ok(TrackLabels {
            labels: probs.iter().map(|&p| p > threshold).collect(),
            probabilities: Some(probs),
        })
    }

    /// Single-file checkpoint: one JSON config line, then the tensor blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf =
            serde_json::to_vec(&self.cfg).map_err(|e| Error::Format(format!("model config: {e}")))?;
        buf.push(b'\n');
        write_checkpoint(&mut buf, &self.params)?;
        crate::util::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<SegModel> {
        let bytes = std::fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("model file has no config header".into()))?;
        let cfg: ModelConfig = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("model config header: {e}")))?;
        cfg.validate()?;
        let params = read_checkpoint(&mut &bytes[nl + 1..])?;
        Ok(SegModel { cfg, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            encoder: EncoderConfig {
                model_dim: 8,
                heads: 2,
                ff_dim: 12,
                num_blocks: 1,
                freq_count: 1,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                model_dim: 8,
                heads: 2,
                ff_dim: 12,
                semantic_dim: 3,
                ..DecoderConfig::default()
            },
        }
    }

    fn toy_tracks(seed: u64) -> (TrackSet, SemanticFeatures) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t) = (5, 4);
        let coords: Vec<f32> = (0..n * t * 2).map(|_| rng.random_range(0.0..64.0)).collect();
        let depth: Vec<f32> = (0..n * t).map(|_| rng.random_range(0.1..4.0)).collect();
        let visibility: Vec<bool> = (0..n * t).map(|i| i % 7 != 3).collect();
        let confidence = vec![1.0f32; n * t];
        let tracks =
            TrackSet::new(n, t, 64, 48, coords, depth, visibility, confidence, 0.5).unwrap();
        let sem_data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sem = SemanticFeatures::new(Tensor::new(vec![n, 3], sem_data).unwrap()).unwrap();
        (tracks, sem)
    }

    #[test]
    fn normalization_sets_variant_knobs() {
        let fused = tiny_cfg(Variant::EarlyFusion).normalized();
        assert_eq!(fused.encoder.extra_input_dim, 3);
        assert!(fused.encoder.use_motion);
        let blind = tiny_cfg(Variant::NoTracks).normalized();
        assert_eq!(blind.encoder.extra_input_dim, 3);
        assert!(!blind.encoder.use_motion);
        let full = tiny_cfg(Variant::Full).normalized();
        assert_eq!(full.encoder.extra_input_dim, 0);
        full.validate().unwrap();
    }

    #[test]
    fn every_variant_predicts_a_probability_per_track() {
        let (tracks, sem) = toy_tracks(1);
        for variant in [
            Variant::Full,
            Variant::EarlyFusion,
            Variant::FusedAttention,
            Variant::NoTracks,
        ] {
            let model = SegModel::init(tiny_cfg(variant), 7).unwrap();
            let labels = model.predict(&tracks, &sem, 0.5).unwrap();
            assert_eq!(labels.len(), tracks.track_count());
            let probs = labels.probabilities.unwrap();
            assert!(probs.iter().all(|p| (0.0..1.0).contains(p)), "{variant:?}: {probs:?}");
        }
    }

    #[test]
    fn no_tracks_variant_cannot_see_motion() {
        let model = SegModel::init(tiny_cfg(Variant::NoTracks), 9).unwrap();
        let (tracks, sem) = toy_tracks(2);
        let (moved, _) = toy_tracks(3); // different coords, same shapes
        let n = tracks.track_count();
        let t = tracks.frame_count();
        // splice the original depth/visibility/confidence under new coords
        let coords: Vec<f32> = (0..n * t * 2).map(|i| moved.u(i / (t * 2), 0) + i as f32).collect();
        let depth: Vec<f32> = (0..n * t).map(|i| tracks.depth(i / t, i % t)).collect();
        let vis: Vec<bool> = (0..n * t).map(|i| tracks.visible(i / t, i % t)).collect();
        let conf: Vec<f32> = (0..n * t).map(|i| tracks.confidence(i / t, i % t)).collect();
        let shuffled = TrackSet::new(n, t, 64, 48, coords, depth, vis, conf, 0.5).unwrap();

        let (p1, _) = model.predict_probs(&tracks, &sem).unwrap();
        let (p2, _) = model.predict_probs(&shuffled, &sem).unwrap();
        assert_eq!(p1, p2, "positions leaked into a motion-blind model");

        let full = SegModel::init(tiny_cfg(Variant::Full), 9).unwrap();
        let (q1, _) = full.predict_probs(&tracks, &sem).unwrap();
        let (q2, _) = full.predict_probs(&shuffled, &sem).unwrap();
        assert_ne!(q1, q2, "full model should react to motion");
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tseg");
        let model = SegModel::init(tiny_cfg(Variant::Full), 11).unwrap();
        model.save(&path).unwrap();
        let back = SegModel::load(&path).unwrap();
        assert_eq!(back, model);
        let (tracks, sem) = toy_tracks(4);
        let (p1, _) = model.predict_probs(&tracks, &sem).unwrap();
        let (p2, _) = back.predict_probs(&tracks, &sem).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = tiny_cfg(Variant::Full);
        cfg.decoder.model_dim = 16;
        cfg.decoder.heads = 2;
        assert!(SegModel::init(cfg, 1).is_err());
    }
}
