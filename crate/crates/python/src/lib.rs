//! Python bindings for the trajectory segmentation pipeline: scene
//! generation, the track classifier, the prompting pipeline, and the mask
//! metrics. Build as a cdylib and import as `trajseg_py`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use trajseg::eval::{self, default_boundary_tolerance, eval_mos};
use trajseg::mask::{Mask, MaskVideo};
use trajseg::model::{ModelConfig, SegModel, Variant};
use trajseg::motion_encoder::EncoderConfig;
use trajseg::prompting::{
    densify, filter_dynamic, group_tracks, merge_masks, OracleSegmenter, PromptParams,
};
use trajseg::synth::{generate_bundle, SceneBundle, SceneConfig};
use trajseg::tracks_decoder::DecoderConfig;
use trajseg::training::{track_accuracy, train, SceneSample, TrainConfig};

fn err(e: trajseg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Scene generator knobs. Everything not exposed here keeps its default.
#[pyclass(name = "SceneConfig")]
struct SceneConfigPy {
    inner: SceneConfig,
}

#[pymethods]
impl SceneConfigPy {
    #[new]
    #[pyo3(signature = (width=64, height=48, frame_count=24, object_count=3,
                        dynamic_count=1, semantic_dim=16, grid_size=12, step=6))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        width: u32,
        height: u32,
        frame_count: usize,
        object_count: usize,
        dynamic_count: usize,
        semantic_dim: usize,
        grid_size: usize,
        step: usize,
    ) -> PyResult<Self> {
        let inner = SceneConfig {
            width,
            height,
            frame_count,
            object_count,
            dynamic_count,
            semantic_dim,
            grid_size,
            step,
            ..SceneConfig::default()
        };
        inner.validate().map_err(err)?;
        Ok(SceneConfigPy { inner })
    }
}

/// One generated scene: tracks, per-track semantics, ground-truth labels and
/// masks.
#[pyclass(name = "Bundle")]
struct BundlePy {
    inner: SceneBundle,
}

#[pymethods]
impl BundlePy {
    #[getter]
    fn track_count(&self) -> usize {
        self.inner.tracks.track_count()
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.tracks.frame_count()
    }

    #[getter]
    fn object_count(&self) -> usize {
        self.inner.scene.objects.len()
    }

    /// Ground-truth dynamic flag per track.
    fn labels(&self) -> Vec<bool> {
        self.inner.labels.labels.clone()
    }

    /// Normalized (u, v) of track `i` at frame `t`.
    fn point(&self, i: usize, t: usize) -> PyResult<(f32, f32)> {
        if i >= self.track_count() || t >= self.frame_count() {
            return Err(PyValueError::new_err("track or frame out of range"));
        }
        Ok((self.inner.tracks.u(i, t), self.inner.tracks.v(i, t)))
    }

    fn visible(&self, i: usize, t: usize) -> PyResult<bool> {
        if i >= self.track_count() || t >= self.frame_count() {
            return Err(PyValueError::new_err("track or frame out of range"));
        }
        Ok(self.inner.tracks.visible(i, t))
    }
}

/// Generate one seeded scene bundle.
#[pyfunction]
fn generate(config: &SceneConfigPy, seed: u64) -> PyResult<BundlePy> {
    Ok(BundlePy {
        inner: generate_bundle(&config.inner, seed).map_err(err)?,
    })
}

/// The track classifier plus the grouping/densification pipeline around it.
#[pyclass(name = "Model")]
struct ModelPy {
    inner: SegModel,
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    Ok(match s {
        "full" => Variant::Full,
        "early_fusion" => Variant::EarlyFusion,
        "fused_attention" => Variant::FusedAttention,
        "no_tracks" => Variant::NoTracks,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown variant '{other}' (expected full, early_fusion, fused_attention or no_tracks)"
            )))
        }
    })
}

#[pymethods]
impl ModelPy {
    #[new]
    #[pyo3(signature = (variant="full", model_dim=32, heads=4, ff_dim=64,
                        num_blocks=2, semantic_dim=16, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        model_dim: usize,
        heads: usize,
        ff_dim: usize,
        num_blocks: usize,
        semantic_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            variant: parse_variant(variant)?,
            encoder: EncoderConfig {
                model_dim,
                heads,
                ff_dim,
                num_blocks,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                model_dim,
                heads,
                ff_dim,
                semantic_dim,
                ..DecoderConfig::default()
            },
        };
        Ok(ModelPy {
            inner: SegModel::init(cfg, seed).map_err(err)?,
        })
    }

    /// Train in place; returns the final validation accuracy. Scenes whose
    /// generation seed ends in 00..19 land in the validation split.
    #[pyo3(signature = (bundles, epochs=5, lr=1e-3, seed=0))]
    fn fit(&mut self, bundles: Vec<PyRef<BundlePy>>, epochs: usize, lr: f64, seed: u64) -> PyResult<f64> {
        let samples: Vec<SceneSample> =
            bundles.iter().map(|b| SceneSample::from_bundle(&b.inner)).collect();
        let tc = TrainConfig {
            lr,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let report = train(&mut self.inner, &samples, &tc).map_err(err)?;
        Ok(report.final_val_acc)
    }

    /// Per-track dynamic probabilities (0.0 for tracks with no valid points).
    fn predict_probs(&self, bundle: &BundlePy) -> PyResult<Vec<f64>> {
        let (probs, _) = self
            .inner
            .predict_probs(&bundle.inner.tracks, &bundle.inner.semantic)
            .map_err(err)?;
        Ok(probs)
    }

    /// Pooled classification accuracy against the bundles' ground truth.
    #[pyo3(signature = (bundles, threshold=0.5))]
    fn accuracy(&self, bundles: Vec<PyRef<BundlePy>>, threshold: f64) -> PyResult<f64> {
        let samples: Vec<SceneSample> =
            bundles.iter().map(|b| SceneSample::from_bundle(&b.inner)).collect();
        let refs: Vec<&SceneSample> = samples.iter().collect();
        track_accuracy(&self.inner, &refs, threshold).map_err(err)
    }

    /// Run the whole pipeline on one bundle — classify (or take ground-truth
    /// labels), group, densify, merge — and score the merged masks against
    /// the bundle's ground truth. Returns the J&F mean.
    #[pyo3(signature = (bundle, use_gt_labels=false, threshold=0.5))]
    fn segment_score(&self, bundle: &BundlePy, use_gt_labels: bool, threshold: f64) -> PyResult<f64> {
        let b = &bundle.inner;
        let (w, h) = (b.scene.width as usize, b.scene.height as usize);
        let frames = b.tracks.frame_count();
        let dynamic_idx: Vec<usize> = if use_gt_labels {
            (0..b.tracks.track_count()).filter(|&i| b.labels.labels[i]).collect()
        } else {
            let (probs, _) =
                self.inner.predict_probs(&b.tracks, &b.semantic).map_err(err)?;
            filter_dynamic(&probs, threshold)
        };
        let params = PromptParams::default();
        let merged = if dynamic_idx.is_empty() {
            MaskVideo::empty(w, h, frames)
        } else {
            let mut seg = OracleSegmenter::new(b.scene.clone());
            let memory = group_tracks(&b.tracks, &dynamic_idx, &mut seg, &params).map_err(err)?;
            if memory.is_empty() {
                MaskVideo::empty(w, h, frames)
            } else {
                let video = densify(&memory, &b.tracks, &mut seg, &params).map_err(err)?;
                merge_masks(&video, params.merge_thresh).map_err(err)?
            }
        };
        let report = eval_mos(&merged, &b.gt).map_err(err)?;
        Ok(report.sequences[0].jf())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<ModelPy> {
        Ok(ModelPy {
            inner: SegModel::load(&path).map_err(err)?,
        })
    }
}

fn mask_from_rows(rows: &[Vec<bool>]) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask must be a non-empty rectangular grid"));
    }
    let mut m = Mask::new(w, h);
    for (y, row) in rows.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            m.set(x, y, v);
        }
    }
    Ok(m)
}

/// Intersection-over-union of two boolean grids (1.0 when both are empty).
#[pyfunction]
fn region_j(pred: Vec<Vec<bool>>, gt: Vec<Vec<bool>>) -> PyResult<f64> {
    let (p, g) = (mask_from_rows(&pred)?, mask_from_rows(&gt)?);
    if pred.len() != gt.len() || pred[0].len() != gt[0].len() {
        return Err(PyValueError::new_err("mask shapes differ"));
    }
    Ok(eval::region_j(&p, &g))
}

/// Boundary F-measure of two boolean grids. `tolerance` defaults to the
/// image-diagonal-scaled radius used everywhere else.
#[pyfunction]
#[pyo3(signature = (pred, gt, tolerance=None))]
fn boundary_f(pred: Vec<Vec<bool>>, gt: Vec<Vec<bool>>, tolerance: Option<usize>) -> PyResult<f64> {
    let (p, g) = (mask_from_rows(&pred)?, mask_from_rows(&gt)?);
    if pred.len() != gt.len() || pred[0].len() != gt[0].len() {
        return Err(PyValueError::new_err("mask shapes differ"));
    }
    let tol = tolerance.unwrap_or_else(|| default_boundary_tolerance(pred[0].len(), pred.len()));
    Ok(eval::boundary_f(&p, &g, tol))
}

#[pymodule]
fn trajseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SceneConfigPy>()?;
    m.add_class::<BundlePy>()?;
    m.add_class::<ModelPy>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(region_j, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_f, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
