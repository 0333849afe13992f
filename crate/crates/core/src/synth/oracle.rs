//! Prompt-driven segmentation oracles over the analytic scene. These stand in
//! for an interactive video segmenter: given point prompts they return exact
//! rendered masks, optionally with simulated tracking degradation after long
//! occlusions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::render::rasterize_all;
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::mask::{Mask, MaskVideo};
use crate::util::pixel_index;

/// One video prompt: positive points on one object at one frame, tagged with
/// the caller's object id.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrompt {
    pub frame: usize,
    pub points: Vec<[f64; 2]>,
    pub object_id: u16,
}

/// Simulated tracking degradation: when enabled, an object that stays
/// invisible for more than `occlusion_tolerance` consecutive frames is lost
/// until a later prompt re-anchors it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationOpts {
    pub enabled: bool,
    pub occlusion_tolerance: usize,
}

impl Default for DegradationOpts {
    fn default() -> Self {
        DegradationOpts {
            enabled: false,
            occlusion_tolerance: 10,
        }
    }
}

fn point_owner(map: &[u16], width: usize, height: usize, p: [f64; 2]) -> u16 {
    let x = pixel_index(p[0], width);
    let y = pixel_index(p[1], height);
    map[y * width + x]
}

/// Plurality owner of the prompt points (background participates but loses
/// ties to objects; object ties go to the lower id).
fn majority_owner(map: &[u16], width: usize, height: usize, points: &[[f64; 2]]) -> Result<u16> {
    if points.is_empty() {
        return Err(Error::MalformedInput("prompt needs at least one point".into()));
    }
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &p in points {
        *counts.entry(point_owner(map, width, height, p)).or_default() += 1;
    }
    Ok(counts
        .iter()
        .min_by_key(|(id, count)| (usize::MAX - *count, **id == 0, **id))
        .map(|(id, _)| *id)
        .expect("non-empty counts"))
}

fn object_mask_from_map(map: &[u16], width: usize, height: usize, id: u16) -> Mask {
    Mask::from_data(width, height, map.iter().map(|&m| m == id).collect())
        .expect("consistent dims")
}

/// Segment one frame from point prompts: the full rendered mask of whichever
/// object owns the majority of the points; empty when the points sit on
/// background.
pub fn oracle_segment(scene: &Scene, t: usize, points: &[[f64; 2]]) -> Result<Mask> {
    if t >= scene.frame_count {
        return Err(Error::MalformedInput(format!(
            "frame {t} out of range (clip has {})",
            scene.frame_count
        )));
    }
    let (w, h) = (scene.width as usize, scene.height as usize);
    let map = super::render::rasterize_id_map(scene, t);
    let id = majority_owner(&map, w, h, points)?;
    if id == 0 {
        return Ok(Mask::new(w, h));
    }
    Ok(object_mask_from_map(&map, w, h, id))
}

/// Frames a prompted object stays tracked on. Every prompt anchors the object
/// and coverage spreads in both directions; with degradation enabled it stops
/// at any invisible run longer than the tolerance.
fn coverage(
    visible: &[bool],
    prompt_frames: &[usize],
    opts: DegradationOpts,
) -> Vec<bool> {
    let t_total = visible.len();
    if !opts.enabled {
        return vec![true; t_total];
    }
    let mut covered = vec![false; t_total];
    for &p in prompt_frames {
        let mut run = 0usize;
        for t in p..t_total {
            if visible[t] {
                run = 0;
            } else {
                run += 1;
                if run > opts.occlusion_tolerance {
                    break;
                }
            }
            covered[t] = true;
        }
        run = 0;
        for t in (0..=p).rev() {
            if visible[t] {
                run = 0;
            } else {
                run += 1;
                if run > opts.occlusion_tolerance {
                    break;
                }
            }
            covered[t] = true;
        }
    }
    covered
}

/// Segment a whole clip from prompts. Each prompted id resolves (by majority
/// vote at its prompt frame) to one scene object and receives that object's
/// rendered mask on every frame it is tracked and visible. The same id
/// prompted onto two different objects is a protocol error; two ids landing
/// on the same object are allowed and yield duplicate masks — downstream
/// merging is expected to collapse them, so the result may overlap.
pub fn oracle_segment_video(
    scene: &Scene,
    prompts: &[VideoPrompt],
    opts: DegradationOpts,
) -> Result<MaskVideo> {
    let (w, h) = (scene.width as usize, scene.height as usize);
    let t_total = scene.frame_count;
    let id_maps = rasterize_all(scene);

    // resolve each prompt id to one scene object (0 = background no-op)
    let mut resolved: BTreeMap<u16, u16> = BTreeMap::new();
    let mut prompt_frames: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for p in prompts {
        if p.frame >= t_total {
            return Err(Error::MalformedInput(format!(
                "prompt frame {} out of range (clip has {t_total})",
                p.frame
            )));
        }
        let owner = majority_owner(&id_maps[p.frame], w, h, &p.points)?;
        if let Some(&prev) = resolved.get(&p.object_id) {
            if prev != owner {
                return Err(Error::Protocol(format!(
                    "prompt id {} points at two different objects ({prev} and {owner})",
                    p.object_id
                )));
            }
        } else {
            resolved.insert(p.object_id, owner);
        }
        if owner != 0 {
            prompt_frames.entry(p.object_id).or_default().push(p.frame);
        }
    }

    let ids: Vec<u16> = resolved.keys().copied().collect();
    let mut masks = vec![Mask::new(w, h); t_total * ids.len()];
    for (k, &pid) in ids.iter().enumerate() {
        let owner = resolved[&pid];
        if owner == 0 {
            continue; // background prompt: stays empty
        }
        let visible: Vec<bool> = id_maps
            .iter()
            .map(|m| m.iter().any(|&v| v == owner))
            .collect();
        let mut frames = prompt_frames[&pid].clone();
        frames.sort_unstable();
        frames.dedup();
        let covered = coverage(&visible, &frames, opts);
        for t in 0..t_total {
            if covered[t] && visible[t] {
                masks[t * ids.len() + k] = object_mask_from_map(&id_maps[t], w, h, owner);
            }
        }
    }
    MaskVideo::new_overlapping(w, h, t_total, ids, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{MotionProgram, SceneObject, Shape};

    fn disk(center: [f64; 2], radius: f64, layer: u32) -> SceneObject {
        SceneObject {
            shape: Shape::Disk { radius },
            depth_layer: layer,
            category_id: layer,
            motion: MotionProgram {
                translation: center,
                ..MotionProgram::identity()
            },
            is_dynamic: false,
        }
    }

    fn two_disk_scene() -> Scene {
        Scene {
            width: 64,
            height: 64,
            frame_count: 6,
            objects: vec![disk([0.3, 0.5], 0.15, 0), disk([0.7, 0.5], 0.15, 1)],
            camera: MotionProgram::identity(),
            seed: 0,
        }
    }

    /// Occluder rectangle sweeps over a static disk; the disk is fully hidden
    /// exactly on frames 5..=16 (12 frames). Margins exceed one pixel at
    /// 512×512, so the rasterized visibility matches the analytic window.
    fn occlusion_scene() -> Scene {
        let occluder = SceneObject {
            shape: Shape::Rectangle {
                half_w: 0.12,
                half_h: 0.12,
            },
            depth_layer: 0,
            category_id: 0,
            motion: MotionProgram {
                translation: [0.2305, 0.5],
                velocity: [0.0066, 0.0],
                ..MotionProgram::identity()
            },
            is_dynamic: true,
        };
        Scene {
            width: 512,
            height: 512,
            frame_count: 24,
            objects: vec![occluder, disk([0.3, 0.5], 0.08, 1)],
            camera: MotionProgram::identity(),
            seed: 0,
        }
    }

    #[test]
    fn single_point_returns_exact_object_mask() {
        let scene = two_disk_scene();
        let mask = oracle_segment(&scene, 2, &[[0.3, 0.5]]).unwrap();
        let map = rasterize_all(&scene)[2].clone();
        let expected = object_mask_from_map(&map, 64, 64, 1);
        assert_eq!(mask, expected);
        assert!(mask.area() > 0);
    }

    #[test]
    fn background_point_returns_empty_mask() {
        let scene = two_disk_scene();
        let mask = oracle_segment(&scene, 0, &[[0.5, 0.05]]).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn majority_vote_picks_the_two_point_object() {
        let scene = two_disk_scene();
        let mask = oracle_segment(&scene, 0, &[[0.3, 0.5], [0.32, 0.5], [0.7, 0.5]]).unwrap();
        let map = rasterize_all(&scene)[0].clone();
        assert_eq!(mask, object_mask_from_map(&map, 64, 64, 1));
    }

    #[test]
    fn object_beats_background_on_ties_and_lower_id_wins() {
        let scene = two_disk_scene();
        let with_bg = oracle_segment(&scene, 0, &[[0.3, 0.5], [0.5, 0.05]]).unwrap();
        assert!(!with_bg.is_empty(), "object should win the tie");
        let tie = oracle_segment(&scene, 0, &[[0.3, 0.5], [0.7, 0.5]]).unwrap();
        let map = rasterize_all(&scene)[0].clone();
        assert_eq!(tie, object_mask_from_map(&map, 64, 64, 1));
    }

    #[test]
    fn out_of_range_frame_is_rejected() {
        let scene = two_disk_scene();
        assert!(oracle_segment(&scene, 6, &[[0.3, 0.5]]).is_err());
    }

    #[test]
    fn full_prompt_coverage_reproduces_ground_truth() {
        let scene = two_disk_scene();
        let prompts: Vec<VideoPrompt> = (0..6)
            .map(|t| VideoPrompt {
                frame: t,
                points: vec![[0.3, 0.5]],
                object_id: 9,
            })
            .collect();
        let opts = DegradationOpts {
            enabled: true,
            occlusion_tolerance: 10,
        };
        let video = oracle_segment_video(&scene, &prompts, opts).unwrap();
        assert_eq!(video.object_ids(), &[9]);
        let maps = rasterize_all(&scene);
        for t in 0..6 {
            assert_eq!(*video.mask(t, 0), object_mask_from_map(&maps[t], 64, 64, 1));
        }
    }

    #[test]
    fn occlusion_window_matches_the_analytic_derivation() {
        let scene = occlusion_scene();
        let maps = rasterize_all(&scene);
        let visible: Vec<bool> = maps.iter().map(|m| m.iter().any(|&v| v == 2)).collect();
        for (t, &v) in visible.iter().enumerate() {
            assert_eq!(v, !(5..=16).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn long_occlusion_without_reprompt_loses_the_object() {
        let scene = occlusion_scene();
        let prompts = vec![VideoPrompt {
            frame: 0,
            points: vec![[0.37, 0.5]],
            object_id: 1,
        }];
        let opts = DegradationOpts {
            enabled: true,
            occlusion_tolerance: 10,
        };
        let video = oracle_segment_video(&scene, &prompts, opts).unwrap();
        for t in 0..5 {
            assert!(!video.mask(t, 0).is_empty(), "pre-occlusion frame {t}");
        }
        for t in 5..24 {
            assert!(video.mask(t, 0).is_empty(), "post-occlusion frame {t}");
        }
    }

    #[test]
    fn reprompt_after_occlusion_recovers_the_object() {
        let scene = occlusion_scene();
        let prompts = vec![
            VideoPrompt {
                frame: 0,
                points: vec![[0.37, 0.5]],
                object_id: 1,
            },
            VideoPrompt {
                frame: 20,
                points: vec![[0.23, 0.5]],
                object_id: 1,
            },
        ];
        let opts = DegradationOpts {
            enabled: true,
            occlusion_tolerance: 10,
        };
        let video = oracle_segment_video(&scene, &prompts, opts).unwrap();
        for t in 17..24 {
            assert!(!video.mask(t, 0).is_empty(), "recovered frame {t}");
        }
        for t in 5..=16 {
            assert!(video.mask(t, 0).is_empty(), "hidden frame {t}");
        }
    }

    #[test]
    fn degradation_off_tracks_through_any_occlusion() {
        let scene = occlusion_scene();
        let prompts = vec![VideoPrompt {
            frame: 0,
            points: vec![[0.37, 0.5]],
            object_id: 1,
        }];
        let video = oracle_segment_video(&scene, &prompts, DegradationOpts::default()).unwrap();
        for t in 17..24 {
            assert!(!video.mask(t, 0).is_empty(), "frame {t}");
        }
    }

    #[test]
    fn conflicting_prompts_for_one_id_are_a_protocol_error() {
        let scene = two_disk_scene();
        let prompts = vec![
            VideoPrompt {
                frame: 0,
                points: vec![[0.3, 0.5]],
                object_id: 4,
            },
            VideoPrompt {
                frame: 1,
                points: vec![[0.7, 0.5]],
                object_id: 4,
            },
        ];
        let err = oracle_segment_video(&scene, &prompts, DegradationOpts::default()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    }

    #[test]
    fn duplicate_ids_on_one_object_yield_duplicate_masks() {
        let scene = two_disk_scene();
        let prompts = vec![
            VideoPrompt {
                frame: 0,
                points: vec![[0.3, 0.5]],
                object_id: 1,
            },
            VideoPrompt {
                frame: 0,
                points: vec![[0.31, 0.52]],
                object_id: 2,
            },
        ];
        let video = oracle_segment_video(&scene, &prompts, DegradationOpts::default()).unwrap();
        assert_eq!(video.object_ids(), &[1, 2]);
        assert!(!video.is_disjoint());
        for t in 0..6 {
            assert_eq!(video.mask(t, 0), video.mask(t, 1));
        }
    }
}
