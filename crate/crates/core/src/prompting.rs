//! Two-stage iterative prompting. Stage 1 groups dynamic tracks into
//! per-object memories by repeatedly prompting a segmenter at the densest
//! visible point and claiming every track inside the (dilated) returned mask.
//! Stage 2 densifies each memory into per-frame masks by prompting at the
//! anchor frame and at regular intervals, then merges overlapping results.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, MaskVideo};
use crate::synth::{oracle_segment, oracle_segment_video, DegradationOpts, Scene, VideoPrompt};
use crate::trackdata::TrackSet;

/// Point-prompted segmentation backend. Implementations may be stateful
/// across calls within one video (tracking memory); `reset` drops that state.
pub trait PromptableSegmenter {
    /// Mask of the object indicated by `points` (normalized coordinates) at
    /// `frame`. `labels[i]` marks point i as foreground; implementations
    /// without negative-point support may ignore background points.
    fn segment_frame(&mut self, frame: usize, points: &[[f64; 2]], labels: &[bool])
        -> Result<Mask>;
    /// Propagate prompts across the whole clip into per-object mask tracks.
    fn segment_video(&mut self, prompts: &[VideoPrompt]) -> Result<MaskVideo>;
    /// Drop accumulated per-video state.
    fn reset(&mut self);
}

/// Ground-truth-backed segmenter over an analytic scene, with optional
/// simulated tracking degradation after long occlusions.
pub struct OracleSegmenter {
    scene: Scene,
    opts: DegradationOpts,
}

impl OracleSegmenter {
    pub fn new(scene: Scene) -> Self {
        OracleSegmenter {
            scene,
            opts: DegradationOpts::default(),
        }
    }

    pub fn with_degradation(scene: Scene, opts: DegradationOpts) -> Self {
        OracleSegmenter { scene, opts }
    }
}

impl PromptableSegmenter for OracleSegmenter {
    fn segment_frame(
        &mut self,
        frame: usize,
        points: &[[f64; 2]],
        labels: &[bool],
    ) -> Result<Mask> {
        if points.len() != labels.len() {
            return Err(Error::MalformedInput(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        let positive: Vec<[f64; 2]> = points
            .iter()
            .zip(labels)
            .filter(|&(_, &l)| l)
            .map(|(&p, _)| p)
            .collect();
        oracle_segment(&self.scene, frame, &positive)
    }

    fn segment_video(&mut self, prompts: &[VideoPrompt]) -> Result<MaskVideo> {
        oracle_segment_video(&self.scene, prompts, self.opts)
    }

    fn reset(&mut self) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptParams {
    /// Mask dilation radius (px) when collecting a group around a prompt.
    pub dilation_radius: usize,
    /// Minimum group size for a discovered object to be kept.
    pub min_pts: usize,
    /// Densification re-prompts every this many frames from the anchor.
    pub reprompt_gap: usize,
    /// Per-video containment ratio above which two objects merge.
    pub merge_thresh: f64,
    /// Hard cap on grouping iterations.
    pub max_iterations: usize,
    /// How many next-densest points to try after an empty mask.
    pub empty_mask_retries: usize,
}

impl Default for PromptParams {
    fn default() -> Self {
        PromptParams {
            dilation_radius: 3,
            min_pts: 3,
            reprompt_gap: 10,
            merge_thresh: 0.9,
            max_iterations: 64,
            empty_mask_retries: 8,
        }
    }
}

impl PromptParams {
    pub fn validate(&self) -> Result<()> {
        if self.reprompt_gap == 0 || self.max_iterations == 0 {
            return Err(Error::Config(
                "reprompt_gap and max_iterations must be >= 1".into(),
            ));
        }
        if !(self.merge_thresh > 0.0 && self.merge_thresh <= 1.0) {
            return Err(Error::Config("merge_thresh must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Indices of tracks classified dynamic at the threshold.
pub fn filter_dynamic(probs: &[f64], threshold: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&i| probs[i] > threshold).collect()
}

/// Index of the point with the smallest mean distance to its k = min(8, M−1)
/// nearest neighbours; ties go to the lowest index. None only when empty.
pub fn densest_point(points: &[[f64; 2]]) -> Option<usize> {
    let m = points.len();
    match m {
        0 => None,
        1 => Some(0),
        _ => {
            let k = usize::min(8, m - 1);
            let mut best = (f64::INFINITY, 0usize);
            for (i, a) in points.iter().enumerate() {
                let mut d: Vec<f64> = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                    .collect();
                d.sort_unstable_by(f64::total_cmp);
                let mean = d[..k].iter().sum::<f64>() / k as f64;
                if mean < best.0 {
                    best = (mean, i);
                }
            }
            Some(best.1)
        }
    }
}

/// One discovered object: the tracks it owns and the frame it was found at.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGroup {
    /// Ascending indices into the full track set.
    pub tracks: Vec<usize>,
    pub anchor_frame: usize,
}

/// Stage-1 output: object id → owned tracks. Ids run contiguously from 1 in
/// discovery order; track sets are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectMemory {
    groups: BTreeMap<u16, ObjectGroup>,
}

impl ObjectMemory {
    pub fn new() -> Self {
        ObjectMemory::default()
    }

    /// Store a group under the next id, enforcing the invariants.
    pub fn push(&mut self, mut group: ObjectGroup) -> Result<u16> {
        group.tracks.sort_unstable();
        group.tracks.dedup();
        if group.tracks.is_empty() {
            return Err(Error::MalformedInput("object group with no tracks".into()));
        }
        for (id, existing) in &self.groups {
            if group.tracks.iter().any(|t| existing.tracks.binary_search(t).is_ok()) {
                return Err(Error::MalformedInput(format!(
                    "track already owned by object {id}"
                )));
            }
        }
        let id = self.groups.len() as u16 + 1;
        self.groups.insert(id, group);
        Ok(id)
    }

    pub fn get(&self, id: u16) -> Option<&ObjectGroup> {
        self.groups.get(&id)
    }

    pub fn ids(&self) -> Vec<u16> {
        self.groups.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &ObjectGroup)> {
        self.groups.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Discover objects among the dynamic tracks by iterative prompting.
///
/// Each round prompts the segmenter at the densest visible dynamic point of
/// the frame with the most visible dynamic points, claims every visible point
/// inside the dilated mask, and stores the ones inside the undilated mask as
/// a new object (kept when the claimed group reaches `min_pts`, or always
/// when the whole input had at most 5 tracks). Claimed points leave the pool,
/// so every round shrinks it; prompts whose mask comes back empty retry with
/// the next densest point a bounded number of times, after which the tried
/// points are dropped from the pool. Stops when fewer than 6 tracks remain.
pub fn group_tracks(
    tracks: &TrackSet,
    dynamic_idx: &[usize],
    segmenter: &mut dyn PromptableSegmenter,
    params: &PromptParams,
) -> Result<ObjectMemory> {
    params.validate()?;
    let mut remaining: BTreeSet<usize> = dynamic_idx.iter().copied().collect();
    if remaining.is_empty() {
        return Err(Error::MalformedInput("no dynamic tracks to group".into()));
    }
    if let Some(&bad) = remaining.iter().find(|&&i| i >= tracks.track_count()) {
        return Err(Error::MalformedInput(format!(
            "dynamic index {bad} out of range ({} tracks)",
            tracks.track_count()
        )));
    }
    let take_all = remaining.len() <= 5;
    let (w, h) = (tracks.width() as f64, tracks.height() as f64);
    let mut memory = ObjectMemory::new();

    for _ in 0..params.max_iterations {
        if remaining.is_empty() || (remaining.len() < 6 && !take_all) {
            break;
        }
        let t = (0..tracks.frame_count())
            .max_by_key(|&f| {
                let count = remaining.iter().filter(|&&i| tracks.visible(i, f)).count();
                (count, std::cmp::Reverse(f))
            })
            .expect("frame_count >= 2");
        let visible: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| tracks.visible(i, t))
            .collect();
        if visible.is_empty() {
            break; // nothing visible anywhere — no way to prompt
        }

        let mut excluded: BTreeSet<usize> = BTreeSet::new();
        let mut found: Option<Mask> = None;
        for _ in 0..=params.empty_mask_retries {
            let candidates: Vec<usize> = visible
                .iter()
                .copied()
                .filter(|i| !excluded.contains(i))
                .collect();
            let Some(pick) = densest_point(
                &candidates
                    .iter()
                    .map(|&i| [tracks.u(i, t) as f64 * w, tracks.v(i, t) as f64 * h])
                    .collect::<Vec<_>>(),
            ) else {
                break;
            };
            let i = candidates[pick];
            let p = [tracks.u(i, t) as f64, tracks.v(i, t) as f64];
            let mask = segmenter.segment_frame(t, &[p], &[true])?;
            if mask.width() != w as usize || mask.height() != h as usize {
                return Err(Error::ShapeMismatch(format!(
                    "segmenter returned {}x{} for a {w}x{h} clip",
                    mask.width(),
                    mask.height()
                )));
            }
            if mask.is_empty() {
                excluded.insert(i);
                continue;
            }
            found = Some(mask);
            break;
        }

        let Some(mask) = found else {
            // every retry came back empty: drop the tried points and move on
            for i in &excluded {
                remaining.remove(i);
            }
            if excluded.is_empty() {
                break;
            }
            continue;
        };

        let dilated = mask.dilate(params.dilation_radius);
        let group: Vec<usize> = visible
            .iter()
            .copied()
            .filter(|&i| {
                let (x, y) = tracks.pixel(i, t);
                dilated.get(x, y)
            })
            .collect();
        let stored: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&i| {
                let (x, y) = tracks.pixel(i, t);
                mask.get(x, y)
            })
            .collect();
        if (group.len() >= params.min_pts || take_all) && !stored.is_empty() {
            memory.push(ObjectGroup {
                tracks: stored,
                anchor_frame: t,
            })?;
        }
        if group.is_empty() {
            break; // mask missed even the prompt pixel; cannot make progress
        }
        for i in &group {
            remaining.remove(i);
        }
    }
    Ok(memory)
}

/// Turn object memories into per-frame masks. Each object is prompted at its
/// anchor frame and every `reprompt_gap` frames (counted from the anchor)
/// where at least one stored point is visible, using the densest visible
/// stored point and the two farthest from it (all of them when fewer than 3).
///
/// Groups built from wrong upstream labels can carry stray tracks whose
/// refresh prompts drift onto other surfaces; if the segmenter rejects the
/// prompt set as inconsistent, retry with each object's anchor frame only,
/// where the stored points are known to sit on the object.
pub fn densify(
    memory: &ObjectMemory,
    tracks: &TrackSet,
    segmenter: &mut dyn PromptableSegmenter,
    params: &PromptParams,
) -> Result<MaskVideo> {
    params.validate()?;
    let (w, h) = (tracks.width() as usize, tracks.height() as usize);
    let t_total = tracks.frame_count();
    if memory.is_empty() {
        return Ok(MaskVideo::empty(w, h, t_total));
    }
    let mut prompts: Vec<VideoPrompt> = Vec::new();
    for (id, group) in memory.iter() {
        let phase = group.anchor_frame % params.reprompt_gap;
        let frames: Vec<usize> = (phase..t_total).step_by(params.reprompt_gap).collect();
        prompts.extend(group_prompts(tracks, id, group, &frames, w, h));
    }
    segmenter.reset();
    match segmenter.segment_video(&prompts) {
        Err(Error::Protocol(msg)) => {
            log::warn!("refresh prompts rejected ({msg}); retrying anchor frames only");
            let anchored: Vec<VideoPrompt> = memory
                .iter()
                .flat_map(|(id, g)| group_prompts(tracks, id, g, &[g.anchor_frame], w, h))
                .collect();
            segmenter.reset();
            segmenter.segment_video(&anchored)
        }
        other => other,
    }
}

/// Prompts for one object at the given frames: the densest visible stored
/// point plus the two farthest from it (all of them when fewer than 3).
fn group_prompts(
    tracks: &TrackSet,
    id: u16,
    group: &ObjectGroup,
    frames: &[usize],
    w: usize,
    h: usize,
) -> Vec<VideoPrompt> {
    let mut prompts = Vec::new();
    for &f in frames {
        let vis: Vec<usize> = group
            .tracks
            .iter()
            .copied()
            .filter(|&i| tracks.visible(i, f))
            .collect();
        if vis.is_empty() {
            continue;
        }
        let px: Vec<[f64; 2]> = vis
            .iter()
            .map(|&i| {
                [
                    tracks.u(i, f) as f64 * w as f64,
                    tracks.v(i, f) as f64 * h as f64,
                ]
            })
            .collect();
        let chosen: Vec<usize> = if vis.len() <= 3 {
            (0..vis.len()).collect()
        } else {
            let dense = densest_point(&px).expect("non-empty");
            let mut far: Vec<(usize, f64)> = (0..vis.len())
                .filter(|&j| j != dense)
                .map(|j| {
                    let d = ((px[j][0] - px[dense][0]).powi(2)
                        + (px[j][1] - px[dense][1]).powi(2))
                    .sqrt();
                    (j, d)
                })
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            vec![dense, far[0].0, far[1].0]
        };
        prompts.push(VideoPrompt {
            frame: f,
            points: chosen
                .iter()
                .map(|&j| {
                    let i = vis[j];
                    [tracks.u(i, f) as f64, tracks.v(i, f) as f64]
                })
                .collect(),
            object_id: id,
        });
    }
    prompts
}

/// Union-merge objects whose per-video containment |A∩B|/min(|A|,|B|)
/// exceeds the threshold, transitively and to a fixpoint, then renumber ids
/// to 1..=K in order of each merged group's smallest original position.
pub fn merge_masks(video: &MaskVideo, merge_thresh: f64) -> Result<MaskVideo> {
    if !(merge_thresh > 0.0 && merge_thresh <= 1.0) {
        return Err(Error::Config("merge_thresh must be in (0, 1]".into()));
    }
    let (w, h, t_total) = (video.width(), video.height(), video.frame_count());
    let mut current: Vec<Vec<Mask>> = (0..video.object_count())
        .map(|k| (0..t_total).map(|f| video.mask(f, k).clone()).collect())
        .collect();

    loop {
        let k = current.len();
        if k < 2 {
            break;
        }
        let areas: Vec<usize> = current
            .iter()
            .map(|ms| ms.iter().map(Mask::area).sum())
            .collect();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let root = find(parent, parent[i]);
                parent[i] = root;
            }
            parent[i]
        }
        let mut merged_any = false;
        for a in 0..k {
            for b in a + 1..k {
                let floor = areas[a].min(areas[b]);
                if floor == 0 {
                    continue;
                }
                let inter: usize = (0..t_total)
                    .map(|f| current[a][f].intersection_area(&current[b][f]))
                    .sum();
                if inter as f64 / floor as f64 > merge_thresh {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                        merged_any = true;
                    }
                }
            }
        }
        if !merged_any {
            break;
        }
        let mut order: Vec<usize> = Vec::new(); // roots by first appearance
        let mut merged: Vec<Vec<Mask>> = Vec::new();
        for i in 0..k {
            let r = find(&mut parent, i);
            let slot = match order.iter().position(|&o| o == r) {
                Some(s) => s,
                None => {
                    order.push(r);
                    merged.push(vec![Mask::new(w, h); t_total]);
                    merged.len() - 1
                }
            };
            for f in 0..t_total {
                merged[slot][f].union_with(&current[i][f]);
            }
        }
        current = merged;
    }

    let k = current.len();
    let ids: Vec<u16> = (1..=k as u16).collect();
    let mut masks = Vec::with_capacity(t_total * k);
    for f in 0..t_total {
        for ms in &current {
            masks.push(ms[f].clone());
        }
    }
    MaskVideo::new_overlapping(w, h, t_total, ids, masks)
}

// ---- wire protocol ----
//
// The segmenter boundary doubles as a line-delimited JSON protocol so a real
// interactive segmenter can run out of process: one request object per line
// in, one response object per line out.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub frame: usize,
    /// Normalized [0,1]² coordinates.
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<bool>,
    pub object_id: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireResponse {
    Mask {
        width: usize,
        height: usize,
        /// Alternating run lengths, background first, row-major.
        rle: Vec<usize>,
    },
    Error {
        message: String,
    },
}

/// Run-length encode a mask: alternating run lengths starting with
/// background, summing to width·height.
pub fn rle_encode(mask: &Mask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut value = false;
    let mut run = 0usize;
    for &px in mask.data() {
        if px == value {
            run += 1;
        } else {
            runs.push(run);
            value = px;
            run = 1;
        }
    }
    runs.push(run);
    runs
}

pub fn rle_decode(width: usize, height: usize, rle: &[usize]) -> Result<Mask> {
    let total: usize = rle.iter().sum();
    if total != width * height {
        return Err(Error::Format(format!(
            "run lengths sum to {total}, mask has {} pixels",
            width * height
        )));
    }
    let mut data = Vec::with_capacity(total);
    let mut value = false;
    for &run in rle {
        data.extend(std::iter::repeat_n(value, run));
        value = !value;
    }
    Mask::from_data(width, height, data)
}

/// Serve frame requests over the wire until the input ends. Request parse
/// failures and segmenter errors become error responses; the loop keeps
/// serving either way.
pub fn serve_requests<R: BufRead, W: Write>(
    segmenter: &mut dyn PromptableSegmenter,
    input: R,
    output: &mut W,
) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => match segmenter.segment_frame(req.frame, &req.points, &req.labels) {
                Ok(mask) => WireResponse::Mask {
                    width: mask.width(),
                    height: mask.height(),
                    rle: rle_encode(&mask),
                },
                Err(e) => WireResponse::Error {
                    message: e.to_string(),
                },
            },
            Err(e) => WireResponse::Error {
                message: format!("bad request: {e}"),
            },
        };
        let text = serde_json::to_string(&response)
            .map_err(|e| Error::Format(format!("response encoding: {e}")))?;
        writeln!(output, "{text}")?;
    }
    Ok(())
}
