//! Pipeline commands behind the `trajseg` executable: dataset generation,
//! training, inference (classify → group → densify → merge), evaluation
//! against quality gates, and overlay rendering. Everything is a plain
//! function over [`RunConfig`] so the behaviors are testable in-process;
//! the binary only parses flags and maps outcomes to exit codes.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{eval_fine_grained_named, eval_mos_named, EvalReport};
use crate::mask::{read_pgm_file, write_pgm_file, MaskVideo};
use crate::model::{ModelConfig, SegModel};
use crate::prompting::{
    densify, filter_dynamic, group_tracks, merge_masks, ObjectGroup, ObjectMemory,
    OracleSegmenter, PromptParams,
};
use crate::synth::{
    generate_bundle, load_scene_dir, save_scene_dir, DegradationOpts, SceneBundle, SceneConfig,
};
use crate::trackdata::{write_labels, TrackLabels};
use crate::training::{train, SceneSample, TrainConfig};
use crate::util::write_atomic;

/// Full run configuration: every command reads the slice it needs. Loaded
/// from TOML where every field is optional (defaults below), then overridden
/// by command-line flags. Unknown keys are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene directories + manifest live here.
    pub dataset_dir: PathBuf,
    /// Inference, evaluation, and visualization artifacts live here.
    pub output_dir: PathBuf,
    pub model_path: PathBuf,
    pub metrics_path: PathBuf,
    pub scene_count: usize,
    /// Base seed: scene i uses seed + i; also seeds model initialization.
    pub seed: u64,
    /// Worker threads for per-scene parallelism; 0 = library default.
    pub workers: usize,
    /// Dynamic-probability cutoff for inference.
    pub threshold: f64,
    /// Continue training from an existing checkpoint and metrics file.
    pub resume: bool,
    /// Inference uses ground-truth labels instead of the model (pipeline
    /// debugging and upper-bound measurements).
    pub use_gt_labels: bool,
    /// Evaluation gates: the command fails (exit 1) when a mean J&F comes in
    /// under its gate. Defaults accept anything.
    pub min_mos_jf: f64,
    pub min_fine_jf: f64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub prompt: PromptParams,
    pub degradation: DegradationOpts,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("dataset"),
            output_dir: PathBuf::from("out"),
            model_path: PathBuf::from("model.bin"),
            metrics_path: PathBuf::from("metrics.csv"),
            scene_count: 20,
            seed: 0,
            workers: 0,
            threshold: 0.5,
            resume: false,
            use_gt_labels: false,
            min_mos_jf: 0.0,
            min_fine_jf: 0.0,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            prompt: PromptParams::default(),
            degradation: DegradationOpts::default(),
        }
    }
}

/// Flag-level overrides; flags win over the file, the file over defaults.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub threshold: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolve the effective config: defaults, then the optional file, then
    /// flag overrides.
    pub fn resolve(path: Option<&Path>, overrides: Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(workers) = overrides.workers {
            cfg.workers = workers;
        }
        if let Some(threshold) = overrides.threshold {
            cfg.threshold = threshold;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_count == 0 {
            return Err(Error::Config("scene_count must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.min_mos_jf) || !(0.0..=1.0).contains(&self.min_fine_jf) {
            return Err(Error::Config("quality gates must lie in [0, 1]".into()));
        }
        self.scene.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.prompt.validate()?;
        Ok(())
    }

    fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

/// Command result the binary turns into an exit code: quality-gate failures
/// are ordinary (exit 1), hard errors bubble up as `Err` (exit 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmdOutcome {
    Success,
    QualityGateFailed,
}

// ---- dataset manifest ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

pub fn load_manifest(dataset_dir: &Path) -> Result<DatasetManifest> {
    let path = dataset_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Run `f` on a pool of `workers` threads (0 = the global default pool).
fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

// ---- gen ----

/// Generate `scene_count` scenes under the dataset directory and write the
/// manifest listing every scene's name, seed, and digest.
pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let entries: Vec<ManifestEntry> = with_pool(cfg.workers, || {
        (0..cfg.scene_count)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.scene_seed(i);
                let name = format!("scene_{i:05}");
                let bundle = generate_bundle(&cfg.scene, seed)?;
                save_scene_dir(&cfg.dataset_dir.join(&name), &bundle)?;
                Ok(ManifestEntry {
                    name,
                    seed,
                    digest: bundle.scene.digest(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        scenes: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    write_atomic(&cfg.dataset_dir.join("manifest.json"), text.as_bytes())?;
    log::info!(
        "generated {} scenes under {}",
        cfg.scene_count,
        cfg.dataset_dir.display()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<SceneBundle>> {
    let manifest = load_manifest(&cfg.dataset_dir)?;
    with_pool(cfg.workers, || {
        manifest
            .scenes
            .par_iter()
            .map(|e| load_scene_dir(&cfg.dataset_dir.join(&e.name)))
            .collect::<Result<Vec<_>>>()
    })?
}

// ---- train ----

/// Last (epoch, step) recorded in an existing metrics CSV.
fn metrics_offsets(text: &str) -> (usize, usize) {
    let mut last = (0, 0);
    for line in text.lines().skip(1) {
        let mut cells = line.split(',');
        if let (Some(e), Some(s)) = (cells.next(), cells.next()) {
            if let (Ok(e), Ok(s)) = (e.parse(), s.parse()) {
                last = (e, s);
            }
        }
    }
    last
}

/// Train a model on the dataset; write the checkpoint and a metrics CSV.
/// With `resume`, training continues from the existing checkpoint and the
/// new rows extend the existing CSV with continued epoch/step numbering.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let samples: Vec<SceneSample> = load_dataset(cfg)?
        .iter()
        .map(SceneSample::from_bundle)
        .collect();
    let resuming = cfg.resume && cfg.model_path.exists();
    let mut model = if resuming {
        log::info!("resuming from {}", cfg.model_path.display());
        SegModel::load(&cfg.model_path)?
    } else {
        SegModel::init(cfg.model.clone(), cfg.seed)?
    };
    let report = train(&mut model, &samples, &cfg.training)?;
    model.save(&cfg.model_path)?;

    let mut csv = String::from("epoch,step,loss,val_acc\n");
    let (mut epoch0, mut step0) = (0, 0);
    if resuming {
        if let Ok(existing) = std::fs::read_to_string(&cfg.metrics_path) {
            (epoch0, step0) = metrics_offsets(&existing);
            for line in existing.lines().skip(1) {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch + epoch0,
            r.step + step0,
            r.loss,
            r.val_acc
        ));
    }
    write_atomic(&cfg.metrics_path, csv.as_bytes())?;
    log::info!(
        "trained {} epochs, final validation accuracy {:.4}",
        report.rows.len(),
        report.final_val_acc
    );
    Ok(())
}

// ---- infer ----

#[derive(Debug, Serialize, Deserialize)]
struct MemoryEntry {
    id: u16,
    anchor_frame: usize,
    tracks: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemoryFile {
    objects: Vec<MemoryEntry>,
}

fn write_memory(path: &Path, memory: &ObjectMemory) -> Result<()> {
    let file = MemoryFile {
        objects: memory
            .iter()
            .map(|(id, g)| MemoryEntry {
                id,
                anchor_frame: g.anchor_frame,
                tracks: g.tracks.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("memory: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_memory(path: &Path) -> Result<ObjectMemory> {
    let text = std::fs::read_to_string(path)?;
    let file: MemoryFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("memory: {e}")))?;
    let mut memory = ObjectMemory::new();
    for entry in file.objects {
        let id = memory.push(ObjectGroup {
            tracks: entry.tracks,
            anchor_frame: entry.anchor_frame,
        })?;
        if id != entry.id {
            return Err(Error::Format(format!(
                "object ids must be contiguous from 1: found {} at position {id}",
                entry.id
            )));
        }
    }
    Ok(memory)
}

fn write_mask_video(dir: &Path, video: &MaskVideo) -> Result<()> {
    for f in 0..video.frame_count() {
        let map = video.id_map(f);
        write_pgm_file(
            &dir.join(format!("{f:05}.pgm")),
            video.width(),
            video.height(),
            &map,
        )?;
    }
    Ok(())
}

fn infer_scene(cfg: &RunConfig, model: Option<&SegModel>, bundle: &SceneBundle) -> Result<(TrackLabels, ObjectMemory, MaskVideo)> {
    let labels = match model {
        Some(m) => m.predict(&bundle.tracks, &bundle.semantic, cfg.threshold)?,
        None => bundle.labels.clone(),
    };
    let dynamic_idx = match &labels.probabilities {
        Some(probs) => filter_dynamic(probs, cfg.threshold),
        None => (0..labels.len()).filter(|&i| labels.labels[i]).collect(),
    };
    let (w, h) = (
        bundle.tracks.width() as usize,
        bundle.tracks.height() as usize,
    );
    let frames = bundle.tracks.frame_count();
    if dynamic_idx.is_empty() {
        log::warn!("scene seed {}: no dynamic tracks found", bundle.scene.seed);
        return Ok((labels, ObjectMemory::new(), MaskVideo::empty(w, h, frames)));
    }
    let mut segmenter = OracleSegmenter::with_degradation(bundle.scene.clone(), cfg.degradation);
    let memory = group_tracks(&bundle.tracks, &dynamic_idx, &mut segmenter, &cfg.prompt)?;
    if memory.is_empty() {
        log::warn!(
            "scene seed {}: prompting produced no object groups",
            bundle.scene.seed
        );
        return Ok((labels, memory, MaskVideo::empty(w, h, frames)));
    }
    let video = densify(&memory, &bundle.tracks, &mut segmenter, &cfg.prompt)?;
    let merged = merge_masks(&video, cfg.prompt.merge_thresh)?;
    Ok((labels, memory, merged))
}

/// Run the full per-scene pipeline: predicted labels → dynamic-track
/// grouping → densified masks → merge. Writes `labels.txt`, `memory.json`,
/// and `masks/*.pgm` per scene under the output directory.
pub fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(&cfg.dataset_dir)?;
    let model = if cfg.use_gt_labels {
        None
    } else {
        Some(SegModel::load(&cfg.model_path)?)
    };
    with_pool(cfg.workers, || {
        manifest
            .scenes
            .par_iter()
            .map(|entry| {
                let bundle = load_scene_dir(&cfg.dataset_dir.join(&entry.name))?;
                let (labels, memory, video) = infer_scene(cfg, model.as_ref(), &bundle)?;
                let out = cfg.output_dir.join(&entry.name);
                write_labels(&labels, &out.join("labels.txt"))?;
                write_memory(&out.join("memory.json"), &memory)?;
                write_mask_video(&out.join("masks"), &video)?;
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
    })??;
    log::info!(
        "inference over {} scenes written to {}",
        manifest.scenes.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

// ---- eval ----

fn read_mask_video(dir: &Path, width: usize, height: usize, frames: usize) -> Result<MaskVideo> {
    let mut maps = Vec::with_capacity(frames);
    for f in 0..frames {
        let (w, h, map) = read_pgm_file(&dir.join(format!("{f:05}.pgm")))?;
        if (w, h) != (width, height) {
            return Err(Error::ShapeMismatch(format!(
                "mask frame {f} is {w}x{h}, expected {width}x{height}"
            )));
        }
        maps.push(map);
    }
    MaskVideo::from_id_maps(width, height, &maps)
}

/// Score inference outputs against dataset ground truth; write grouped and
/// fine-grained reports and apply the configured quality gates.
pub fn cmd_eval(cfg: &RunConfig) -> Result<CmdOutcome> {
    let manifest = load_manifest(&cfg.dataset_dir)?;
    let scored: Vec<(EvalReport, EvalReport)> = with_pool(cfg.workers, || {
        manifest
            .scenes
            .par_iter()
            .map(|entry| {
                let bundle = load_scene_dir(&cfg.dataset_dir.join(&entry.name))?;
                let gt = &bundle.gt;
                let pred = read_mask_video(
                    &cfg.output_dir.join(&entry.name).join("masks"),
                    gt.width(),
                    gt.height(),
                    gt.frame_count(),
                )?;
                let mos = eval_mos_named(&entry.name, &pred, gt)?;
                let fine = eval_fine_grained_named(&entry.name, &pred, gt)?;
                Ok((mos, fine))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut mos = EvalReport::default();
    let mut fine = EvalReport::default();
    for (m, f) in scored {
        mos.merge(m);
        fine.merge(f);
    }

    let eval_dir = cfg.output_dir.join("eval");
    write_atomic(&eval_dir.join("mos.csv"), mos.to_csv().as_bytes())?;
    write_atomic(&eval_dir.join("fine.csv"), fine.to_csv().as_bytes())?;
    write_atomic(&eval_dir.join("objects.csv"), fine.objects_csv().as_bytes())?;
    let summary = format!(
        "grouped moving-object segmentation\n{}\nfine-grained per-object\n{}",
        mos.summary(),
        fine.summary()
    );
    write_atomic(&eval_dir.join("summary.txt"), summary.as_bytes())?;

    let mos_jf = mos.mean_jf();
    let fine_jf = fine.mean_jf();
    log::info!("grouped J&F {mos_jf:.4}, fine-grained J&F {fine_jf:.4}");
    if mos_jf < cfg.min_mos_jf || fine_jf < cfg.min_fine_jf {
        log::warn!(
            "quality gate failed: grouped {mos_jf:.4} (gate {}), fine {fine_jf:.4} (gate {})",
            cfg.min_mos_jf,
            cfg.min_fine_jf
        );
        return Ok(CmdOutcome::QualityGateFailed);
    }
    Ok(CmdOutcome::Success)
}

// ---- viz ----

/// Distinct object colors; index = (id − 1) mod palette size.
const PALETTE: [[u8; 3]; 10] = [
    [230, 64, 52],
    [60, 130, 240],
    [70, 190, 90],
    [250, 190, 40],
    [170, 80, 220],
    [40, 200, 200],
    [240, 120, 40],
    [230, 90, 170],
    [140, 220, 60],
    [110, 110, 250],
];

fn id_color(id: u16) -> [u8; 3] {
    PALETTE[(id as usize).saturating_sub(1) % PALETTE.len()]
}

const BACKGROUND: u8 = 32;

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Canvas {
        Canvas {
            width,
            height,
            rgb: vec![BACKGROUND; width * height * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let at = (y as usize * self.width + x as usize) * 3;
        self.rgb[at..at + 3].copy_from_slice(&color);
    }

    /// 3×3 marker: filled square when `filled`, its outline otherwise.
    fn marker(&mut self, x: usize, y: usize, color: [u8; 3], filled: bool) {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if filled || dx != 0 || dy != 0 {
                    self.put(x as i64 + dx, y as i64 + dy, color);
                }
            }
        }
    }

    fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Track color: the mask-video object whose region contains the track at its
/// anchor (first valid) frame; None for tracks on no object.
fn track_object_color(
    bundle: &SceneBundle,
    video: &MaskVideo,
    track: usize,
) -> Option<[u8; 3]> {
    let t = (0..bundle.tracks.frame_count()).find(|&t| bundle.tracks.valid(track, t))?;
    let (x, y) = bundle.tracks.pixel(track, t);
    for k in 0..video.object_count() {
        if video.mask(t, k).get(x, y) {
            return Some(id_color(video.object_ids()[k]));
        }
    }
    None
}

/// Render per-frame overlays: object boundaries plus dynamic-track markers
/// (hollow where the point is invisible). Uses inference outputs when
/// present, ground truth otherwise.
pub fn cmd_viz(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(&cfg.dataset_dir)?;
    with_pool(cfg.workers, || {
        manifest
            .scenes
            .par_iter()
            .map(|entry| {
                let bundle = load_scene_dir(&cfg.dataset_dir.join(&entry.name))?;
                let gt = &bundle.gt;
                let out_scene = cfg.output_dir.join(&entry.name);
                let pred_masks = out_scene.join("masks");
                let video = if pred_masks.is_dir() {
                    read_mask_video(&pred_masks, gt.width(), gt.height(), gt.frame_count())?
                } else {
                    gt.clone()
                };
                let labels = if out_scene.join("labels.txt").exists() {
                    crate::trackdata::read_labels(&out_scene.join("labels.txt"))?
                } else {
                    bundle.labels.clone()
                };
                let colors: Vec<Option<[u8; 3]>> = (0..bundle.tracks.track_count())
                    .map(|i| {
                        if labels.labels[i] {
                            track_object_color(&bundle, &video, i)
                        } else {
                            None
                        }
                    })
                    .collect();
                for f in 0..video.frame_count() {
                    let mut canvas = Canvas::new(video.width(), video.height());
                    for k in 0..video.object_count() {
                        let color = id_color(video.object_ids()[k]);
                        let boundary = video.mask(f, k).inner_boundary();
                        for y in 0..video.height() {
                            for x in 0..video.width() {
                                if boundary.get(x, y) {
                                    canvas.put(x as i64, y as i64, color);
                                }
                            }
                        }
                    }
                    for i in 0..bundle.tracks.track_count() {
                        let Some(color) = colors[i] else { continue };
                        let (x, y) = bundle.tracks.pixel(i, f);
                        canvas.marker(x, y, color, bundle.tracks.visible(i, f));
                    }
                    write_atomic(
                        &out_scene.join("viz").join(format!("{f:05}.ppm")),
                        &canvas.to_ppm(),
                    )?;
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
    })??;
    Ok(())
}
