//! Weighted-BCE training loop: per-step scene sampling with variable track
//! counts and strided frame subsampling, Adam updates, per-epoch validation
//! accuracy, and a CSV metrics log.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::nn::{canonical_order, row_key};
use crate::synth::{SceneBundle, SemanticFeatures};
use crate::tensor::adam::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor, Var};
use crate::trackdata::{TrackLabels, TrackSet};

/// Probability clamp inside the BCE logs. An exact hit (p = y) must score
/// essentially zero (< 1e-9), which bounds the clamp from above.
pub const BCE_EPS: f64 = 1e-10;

/// Classification threshold used for accuracy metrics.
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// 0 → one step per training scene.
    pub steps_per_epoch: usize,
    /// Candidate track counts; each step draws one and subsamples the scene.
    pub track_counts: Vec<usize>,
    /// Keep every k-th frame (random phase) when the clip has at least 2k
    /// frames; 1 keeps everything.
    pub frame_stride: usize,
    /// Fraction of scenes held out for validation, selected by seed residue.
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 5,
            steps_per_epoch: 0,
            track_counts: vec![48, 64, 96],
            frame_stride: 4,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 || self.frame_stride == 0 {
            return Err(Error::Config("epochs and frame_stride must be >= 1".into()));
        }
        if self.track_counts.is_empty() || self.track_counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("track_counts must be non-empty, all >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config("val_frac must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One scene's training payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub tracks: TrackSet,
    pub semantic: SemanticFeatures,
    pub labels: TrackLabels,
}

impl SceneSample {
    pub fn from_bundle(b: &SceneBundle) -> SceneSample {
        SceneSample {
            seed: b.scene.seed,
            tracks: b.tracks.clone(),
            semantic: b.semantic.clone(),
            labels: b.labels.clone(),
        }
    }
}

/// Scenes whose seed falls in the lowest `val_frac` residues are validation.
pub fn is_validation_seed(seed: u64, val_frac: f64) -> bool {
    (seed % 100) < (val_frac * 100.0).round() as u64
}

/// Class-rebalanced binary cross-entropy over the valid tracks.
///
/// Weights are inverse class frequencies normalized so w₊·n₊ + w₋·n₋ = n;
/// a class absent from the batch gets weight 1. Terms are summed in a
/// content-determined canonical order, making the loss exactly invariant
/// under track permutations.
pub fn weighted_bce(tape: &Tape, probs: Var, labels: &[bool], valid: &[bool]) -> Result<Var> {
    let shape = tape.shape_of(probs);
    let n = labels.len();
    if shape != [n] || valid.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "probs {shape:?} vs {n} labels, {} validity flags",
            valid.len()
        )));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::MalformedInput("no valid track in batch".into()));
    }
    let n_pos = (0..n).filter(|&i| valid[i] && labels[i]).count();
    let n_neg = n_valid - n_pos;
    let classes = (n_pos > 0) as usize + (n_neg > 0) as usize;
    let w_pos = if n_pos > 0 {
        n_valid as f64 / (classes * n_pos) as f64
    } else {
        1.0
    };
    let w_neg = if n_neg > 0 {
        n_valid as f64 / (classes * n_neg) as f64
    } else {
        1.0
    };

    let pv = tape.value(probs);
    let keys: Vec<Vec<u8>> = (0..n)
        .map(|i| {
            let meta = [
                pv.data()[i],
                if labels[i] { 1.0 } else { 0.0 },
                if valid[i] { 1.0 } else { 0.0 },
            ];
            row_key(&[&meta])
        })
        .collect();
    let (order, _) = canonical_order(&keys);

    let mut pos_coef = vec![0.0; n];
    let mut neg_coef = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        if valid[i] {
            if labels[i] {
                pos_coef[pos] = w_pos / n_valid as f64;
            } else {
                neg_coef[pos] = w_neg / n_valid as f64;
            }
        }
    }

    let pc = tape.gather0(probs, &order)?;
    let p = tape.clamp(pc, BCE_EPS, 1.0 - BCE_EPS);
    let q = tape.add_scalar(tape.scale(p, -1.0), 1.0);
    let pos_terms = tape.mul(tape.ln(p), tape.leaf(Tensor::new(vec![n], pos_coef)?))?;
    let neg_terms = tape.mul(tape.ln(q), tape.leaf(Tensor::new(vec![n], neg_coef)?))?;
    Ok(tape.scale(tape.sum_all(tape.add(pos_terms, neg_terms)?), -1.0))
}

/// Draw one training batch: a random scene, a strided frame subsample with
/// random phase, and a track subset sized from the configured set.
pub fn sample_batch(
    dataset: &[SceneSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TrackSet, SemanticFeatures, TrackLabels)> {
    let refs: Vec<&SceneSample> = dataset.iter().collect();
    sample_batch_refs(&refs, cfg, rng)
}

fn sample_batch_refs(
    dataset: &[&SceneSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TrackSet, SemanticFeatures, TrackLabels)> {
    if dataset.is_empty() {
        return Err(Error::MalformedInput("empty dataset".into()));
    }
    cfg.validate()?;
    let scene = dataset[rng.random_range(0..dataset.len())];

    let t = scene.tracks.frame_count();
    let stride = cfg.frame_stride;
    let (mut tracks, mut labels, mut semantic) = if stride > 1 && t >= 2 * stride {
        let phase = rng.random_range(0..stride);
        let frames: Vec<usize> = (phase..t).step_by(stride).collect();
        let (sub, kept) = scene.tracks.select_frames(&frames)?;
        let labels = TrackLabels::from_labels(kept.iter().map(|&i| scene.labels.labels[i]).collect());
        let semantic = scene.semantic.select_tracks(&kept);
        (sub, labels, semantic)
    } else {
        (scene.tracks.clone(), scene.labels.clone(), scene.semantic.clone())
    };

    let want = cfg.track_counts[rng.random_range(0..cfg.track_counts.len())];
    let avail = tracks.track_count();
    if want < avail {
        let mut idx = rand::seq::index::sample(rng, avail, want).into_vec();
        idx.sort_unstable();
        tracks = tracks.select_tracks(&idx)?;
        labels = TrackLabels::from_labels(idx.iter().map(|&i| labels.labels[i]).collect());
        semantic = semantic.select_tracks(&idx);
    }
    Ok((tracks, semantic, labels))
}

/// Pooled classification accuracy of the model over whole scenes.
pub fn track_accuracy(model: &SegModel, scenes: &[&SceneSample], threshold: f64) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in scenes {
        let pred = model.predict(&s.tracks, &s.semantic, threshold)?;
        for (p, y) in pred.labels.iter().zip(&s.labels.labels) {
            correct += (p == y) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::MalformedInput("no tracks to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of this epoch.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub step_losses: Vec<f64>,
    pub final_val_acc: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,val_acc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.loss, r.val_acc));
        }
        out
    }
}

/// Run the full loop: epochs × steps Adam updates with per-epoch validation.
/// Deterministic for a fixed config and dataset; non-finite loss aborts.
pub fn train(model: &mut SegModel, dataset: &[SceneSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::MalformedInput("empty dataset".into()));
    }
    let val: Vec<&SceneSample> = dataset
        .iter()
        .filter(|s| is_validation_seed(s.seed, cfg.val_frac))
        .collect();
    let mut train_set: Vec<&SceneSample> = dataset
        .iter()
        .filter(|s| !is_validation_seed(s.seed, cfg.val_frac))
        .collect();
    let val = if val.is_empty() || train_set.is_empty() {
        log::warn!(
            "seed partition left one side empty ({} train / {} val); using all {} scenes for both",
            train_set.len(),
            val.len(),
            dataset.len()
        );
        train_set = dataset.iter().collect();
        dataset.iter().collect()
    } else {
        val
    };

    let steps = if cfg.steps_per_epoch == 0 {
        train_set.len()
    } else {
        cfg.steps_per_epoch
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = model.params.names().cloned().collect();

    let mut report = TrainReport::default();
    let mut total_steps = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let (tracks, semantic, labels) = sample_batch_refs(&train_set, cfg, &mut rng)?;
            let tape = Tape::new();
            let pv = model.params.lift(&tape);
            let feats = tape.leaf(model.input_features(&tracks)?);
            let sv = tape.leaf(semantic.tensor().clone());
            let out = model.forward(&tape, &pv, feats, &tracks.validity_tensor(), sv)?;
            let loss = weighted_bce(&tape, out.probs, &labels.labels, &out.track_valid)?;
            let loss_v = tape.value(loss).data()[0];
            if !loss_v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch} step {step}: {loss_v}"
                )));
            }
            let mut grads = tape.backward(loss)?;
            let mut grad_map: BTreeMap<String, Tensor> = BTreeMap::new();
            for name in &names {
                if let Some(g) = grads.take(pv.get(name)?) {
                    grad_map.insert(name.clone(), g);
                }
            }
            adam_step(&mut model.params, &grad_map, &mut state, &adam_cfg)?;
            report.step_losses.push(loss_v);
            epoch_loss += loss_v;
            total_steps += 1;
        }
        let val_acc = track_accuracy(model, &val, ACC_THRESHOLD)?;
        report.rows.push(EpochRow {
            epoch: epoch + 1,
            step: total_steps,
            loss: epoch_loss / steps as f64,
            val_acc,
        });
        report.final_val_acc = val_acc;
        log::info!(
            "epoch {epoch}: mean loss {:.6}, val acc {val_acc:.4}",
            epoch_loss / steps as f64
        );
    }
    Ok(report)
}
