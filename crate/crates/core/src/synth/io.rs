//! Scene directory layout: everything a generated scene leaves on disk.
//!
//! ```text
//! scene/
//!   config.toml     seed + generation config + manifest fields
//!   tracks.bin      trajectory container
//!   labels.txt      one 0/1 line per track
//!   semantic.bin    per-track semantic vectors (tensor container)
//!   masks/00000.pgm one id map per frame, pixel value = object id
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::{rasterize_all, render_tracks, semantic_features, SemanticFeatures};
use super::scene::{generate_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::mask::{read_pgm_file, write_pgm_file, Mask, MaskVideo};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use crate::trackdata::{read_labels, read_tracks, write_labels, write_tracks, TrackLabels, TrackSet};
use crate::util::write_atomic;

/// A fully rendered scene: the analytic world plus every derived artifact.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub scene: Scene,
    pub config: SceneConfig,
    pub tracks: TrackSet,
    pub labels: TrackLabels,
    pub gt: MaskVideo,
    pub semantic: SemanticFeatures,
}

/// Generate and render one scene end to end.
pub fn generate_bundle(config: &SceneConfig, seed: u64) -> Result<SceneBundle> {
    config.validate()?;
    let scene = generate_scene(config, seed)?;
    let (tracks, labels, gt) = render_tracks(&scene, config, config.grid_size, config.step)?;
    let id_maps = rasterize_all(&scene);
    let semantic = semantic_features(&scene, config, &tracks, &id_maps)?;
    Ok(SceneBundle {
        scene,
        config: config.clone(),
        tracks,
        labels,
        gt,
        semantic,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    seed: u64,
    digest: String,
    gt_object_ids: Vec<u16>,
    config: SceneConfig,
}

pub fn save_scene_dir(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    let manifest = SceneManifest {
        seed: bundle.scene.seed,
        digest: bundle.scene.digest(),
        gt_object_ids: bundle.gt.object_ids().to_vec(),
        config: bundle.config.clone(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    write_atomic(&dir.join("config.toml"), text.as_bytes())?;
    write_tracks(&bundle.tracks, &dir.join("tracks.bin"))?;
    write_labels(&bundle.labels, &dir.join("labels.txt"))?;
    let mut sem = ParamStore::new();
    sem.insert("semantic", bundle.semantic.tensor().clone());
    save_checkpoint(&dir.join("semantic.bin"), &sem)?;
    let masks = dir.join("masks");
    for f in 0..bundle.gt.frame_count() {
        let map = bundle.gt.id_map(f);
        write_pgm_file(
            &masks.join(format!("{f:05}.pgm")),
            bundle.gt.width(),
            bundle.gt.height(),
            &map,
        )?;
    }
    Ok(())
}

pub fn load_scene_dir(dir: &Path) -> Result<SceneBundle> {
    let text = std::fs::read_to_string(dir.join("config.toml"))?;
    let manifest: SceneManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    manifest.config.validate()?;
    let scene = generate_scene(&manifest.config, manifest.seed)?;
    if scene.digest() != manifest.digest {
        return Err(Error::Format(format!(
            "scene digest mismatch in {}: generation drifted from the manifest",
            dir.display()
        )));
    }
    let tracks = read_tracks(&dir.join("tracks.bin"), manifest.config.c_min)?;
    let labels = read_labels(&dir.join("labels.txt"))?;
    if labels.len() != tracks.track_count() {
        return Err(Error::MalformedInput(format!(
            "{} labels for {} tracks",
            labels.len(),
            tracks.track_count()
        )));
    }
    let sem = load_checkpoint(&dir.join("semantic.bin"))?;
    let semantic = SemanticFeatures::new(sem.get("semantic")?.clone())?;
    if semantic.track_count() != tracks.track_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} semantic rows for {} tracks",
            semantic.track_count(),
            tracks.track_count()
        )));
    }
    let gt = load_gt_masks(dir, &manifest, scene.frame_count)?;
    Ok(SceneBundle {
        scene,
        config: manifest.config,
        tracks,
        labels,
        gt,
        semantic,
    })
}

fn load_gt_masks(dir: &Path, manifest: &SceneManifest, frame_count: usize) -> Result<MaskVideo> {
    let masks_dir = dir.join("masks");
    let mut maps = Vec::with_capacity(frame_count);
    let mut size = None;
    for f in 0..frame_count {
        let (w, h, map) = read_pgm_file(&masks_dir.join(format!("{f:05}.pgm")))?;
        if let Some((pw, ph)) = size {
            if (w, h) != (pw, ph) {
                return Err(Error::ShapeMismatch("mask resolution changes mid-clip".into()));
            }
        }
        size = Some((w, h));
        maps.push(map);
    }
    let (w, h) = size.ok_or_else(|| Error::MalformedInput("clip has no frames".into()))?;
    // rebuild with the manifest's id order; ids hidden in every frame come
    // back as empty masks rather than disappearing
    let ids = &manifest.gt_object_ids;
    let mut masks = Vec::with_capacity(frame_count * ids.len());
    for map in &maps {
        for &id in ids {
            if id == 0 {
                return Err(Error::Format("0 is reserved for background".into()));
            }
            let data = map.iter().map(|&v| v == id).collect();
            masks.push(Mask::from_data(w, h, data)?);
        }
    }
    for map in maps.iter().flatten() {
        if *map != 0 && !ids.contains(map) {
            return Err(Error::Format(format!(
                "mask pixel id {map} not listed in the manifest"
            )));
        }
    }
    MaskVideo::new(w, h, frame_count, ids.clone(), masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_dir_round_trips_every_artifact() {
        let cfg = SceneConfig::default();
        let bundle = generate_bundle(&cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene_0007");
        save_scene_dir(&scene_dir, &bundle).unwrap();
        let loaded = load_scene_dir(&scene_dir).unwrap();
        assert_eq!(loaded.scene, bundle.scene);
        assert_eq!(loaded.tracks, bundle.tracks);
        assert_eq!(loaded.labels, bundle.labels);
        assert_eq!(loaded.gt, bundle.gt);
        assert_eq!(loaded.semantic.tensor(), bundle.semantic.tensor());
    }

    #[test]
    fn tampered_manifest_digest_is_rejected() {
        let cfg = SceneConfig::default();
        let bundle = generate_bundle(&cfg, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        save_scene_dir(&scene_dir, &bundle).unwrap();
        let path = scene_dir.join("config.toml");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("seed = 8", "seed = 9");
        std::fs::write(&path, text).unwrap();
        assert!(load_scene_dir(&scene_dir).is_err());
    }

    #[test]
    fn generation_is_deterministic_across_calls() {
        let cfg = SceneConfig::default();
        let a = generate_bundle(&cfg, 42).unwrap();
        let b = generate_bundle(&cfg, 42).unwrap();
        assert_eq!(a.scene.digest(), b.scene.digest());
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.semantic.tensor(), b.semantic.tensor());
    }
}
