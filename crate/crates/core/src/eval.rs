//! Region (J) and boundary (F) quality metrics, plus the two evaluation
//! protocols built on them: grouped moving-object segmentation (all
//! foreground pooled per frame) and fine-grained per-object scoring with a
//! bipartite prediction-to-truth assignment. Predicted ids carry no meaning,
//! so fine-grained mode matches objects by score (the DAVIS-unsupervised
//! convention) rather than by id.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::mask::{Mask, MaskVideo};

/// Jaccard overlap |pred∩gt| / |pred∪gt|; two empty masks agree perfectly.
pub fn region_j(pred: &Mask, gt: &Mask) -> f64 {
    let union = pred.union_area(gt);
    if union == 0 {
        return 1.0;
    }
    pred.intersection_area(gt) as f64 / union as f64
}

/// Default boundary matching radius: ⌈0.008·diagonal⌉ pixels.
pub fn default_boundary_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

/// Boundary agreement: precision and recall of the two 4-connectivity inner
/// boundaries, where a boundary pixel counts as matched when it falls inside
/// the other boundary dilated by `tol_radius`. F = 2PR/(P+R), zero when
/// nothing matches, and 1 when both masks are empty.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol_radius: usize) -> f64 {
    let bp = pred.inner_boundary();
    let bg = gt.inner_boundary();
    let (np, ng) = (bp.area(), bg.area());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let precision = bp.intersection_area(&bg.dilate(tol_radius)) as f64 / np as f64;
    let recall = bg.intersection_area(&bp.dilate(tol_radius)) as f64 / ng as f64;
    if precision + recall == 0.0 {
        return 0.0;
    }
    2.0 * precision * recall / (precision + recall)
}

/// One evaluated sequence: frame-averaged scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub name: String,
    pub j: f64,
    pub f: f64,
}

impl SequenceScore {
    pub fn jf(&self) -> f64 {
        0.5 * (self.j + self.f)
    }
}

/// Fine-grained result for one ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRow {
    pub sequence: String,
    pub gt_id: u16,
    /// Matched prediction id; None when the object went unpredicted.
    pub pred_id: Option<u16>,
    pub j: f64,
    pub f: f64,
}

impl ObjectRow {
    pub fn jf(&self) -> f64 {
        0.5 * (self.j + self.f)
    }
}

/// Metric report over one or more sequences. The per-object table is filled
/// by fine-grained evaluation and empty in grouped mode. `runtime_secs` is
/// wall-clock bookkeeping only — it never enters the serialized outputs, so
/// reruns of the same inputs produce byte-identical files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    pub objects: Vec<ObjectRow>,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn mean_j(&self) -> f64 {
        mean(self.sequences.iter().map(|s| s.j))
    }

    pub fn mean_f(&self) -> f64 {
        mean(self.sequences.iter().map(|s| s.f))
    }

    pub fn mean_jf(&self) -> f64 {
        0.5 * (self.mean_j() + self.mean_f())
    }

    /// Merge per-sequence rows and object tables; runtimes add up.
    pub fn merge(&mut self, other: EvalReport) {
        self.sequences.extend(other.sequences);
        self.objects.extend(other.objects);
        self.runtime_secs += other.runtime_secs;
    }

    /// CSV: one row per sequence plus a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,j,f,jf\n");
        for s in &self.sequences {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", s.name, s.j, s.f, s.jf()));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6}\n",
            self.mean_j(),
            self.mean_f(),
            self.mean_jf()
        ));
        out
    }

    /// CSV of the fine-grained object table.
    pub fn objects_csv(&self) -> String {
        let mut out = String::from("sequence,gt_id,pred_id,j,f,jf\n");
        for o in &self.objects {
            let pred = o.pred_id.map_or(String::new(), |id| id.to_string());
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                o.sequence,
                o.gt_id,
                pred,
                o.j,
                o.f,
                o.jf()
            ));
        }
        out
    }

    /// Human-readable block mirroring the CSV contents.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>8} {:>8} {:>8}\n",
            "sequence", "J&F", "J", "F"
        ));
        for s in &self.sequences {
            out.push_str(&format!(
                "{:<20} {:>8.4} {:>8.4} {:>8.4}\n",
                s.name,
                s.jf(),
                s.j,
                s.f
            ));
        }
        out.push_str(&format!(
            "{:<20} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean",
            self.mean_jf(),
            self.mean_j(),
            self.mean_f()
        ));
        if !self.objects.is_empty() {
            out.push('\n');
            out.push_str(&format!(
                "{:<20} {:>6} {:>6} {:>8} {:>8} {:>8}\n",
                "sequence", "gt", "pred", "J&F", "J", "F"
            ));
            for o in &self.objects {
                let pred = o.pred_id.map_or("-".to_string(), |id| id.to_string());
                out.push_str(&format!(
                    "{:<20} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
                    o.sequence,
                    o.gt_id,
                    pred,
                    o.jf(),
                    o.j,
                    o.f
                ));
            }
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_geometry(pred: &MaskVideo, gt: &MaskVideo) -> Result<()> {
    if pred.width() != gt.width()
        || pred.height() != gt.height()
        || pred.frame_count() != gt.frame_count()
    {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.width(),
            pred.height(),
            pred.frame_count(),
            gt.width(),
            gt.height(),
            gt.frame_count()
        )));
    }
    Ok(())
}

/// Grouped scores for one sequence: all predicted objects pooled against all
/// ground-truth objects per frame, J and F averaged over frames.
pub fn score_grouped(pred: &MaskVideo, gt: &MaskVideo, tol_radius: usize) -> Result<(f64, f64)> {
    check_geometry(pred, gt)?;
    if pred.frame_count() == 0 {
        return Err(Error::MalformedInput("no frames to evaluate".into()));
    }
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for t in 0..pred.frame_count() {
        let p = pred.frame_union(t);
        let g = gt.frame_union(t);
        j_sum += region_j(&p, &g);
        f_sum += boundary_f(&p, &g, tol_radius);
    }
    let n = pred.frame_count() as f64;
    Ok((j_sum / n, f_sum / n))
}

/// Grouped moving-object evaluation of one sequence at the default boundary
/// tolerance.
pub fn eval_mos(pred: &MaskVideo, gt: &MaskVideo) -> Result<EvalReport> {
    eval_mos_named("sequence", pred, gt)
}

pub fn eval_mos_named(name: &str, pred: &MaskVideo, gt: &MaskVideo) -> Result<EvalReport> {
    let start = Instant::now();
    let tol = default_boundary_tolerance(gt.width(), gt.height());
    let (j, f) = score_grouped(pred, gt, tol)?;
    Ok(EvalReport {
        sequences: vec![SequenceScore {
            name: name.to_string(),
            j,
            f,
        }],
        objects: Vec::new(),
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Maximum-total-score assignment on an n×m matrix. Returns, for each row,
/// the matched column (None when rows outnumber columns and the row loses
/// out). O(max(n,m)³) shortest-augmenting-path form with potentials.
pub fn hungarian_max(score: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = score.len();
    if n == 0 {
        return Vec::new();
    }
    let m = score[0].len();
    debug_assert!(score.iter().all(|r| r.len() == m));
    if m == 0 {
        return vec![None; n];
    }
    // the classic formulation needs rows ≤ cols; transpose when they don't
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| score[i][j]).collect()).collect();
        let col_match = hungarian_max(&t);
        let mut out = vec![None; n];
        for (j, mi) in col_match.into_iter().enumerate() {
            if let Some(i) = mi {
                out[i] = Some(j);
            }
        }
        return out;
    }

    // minimize cost = -score; u, v are dual potentials, p[j] = row on col j
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = -score[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] > 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Per-object scores for one sequence: each ground-truth object is matched
/// one-to-one with the prediction maximizing the total mean J&F (unmatched
/// objects score 0; surplus predictions are ignored).
pub fn score_fine_grained(
    pred: &MaskVideo,
    gt: &MaskVideo,
    tol_radius: usize,
    sequence: &str,
) -> Result<Vec<ObjectRow>> {
    check_geometry(pred, gt)?;
    if pred.frame_count() == 0 {
        return Err(Error::MalformedInput("no frames to evaluate".into()));
    }
    let (ng, np) = (gt.object_count(), pred.object_count());
    let frames = pred.frame_count() as f64;
    // pair_scores[g][p] = (J, F) frame-averaged
    let mut pair: Vec<Vec<(f64, f64)>> = vec![vec![(0.0, 0.0); np]; ng];
    for (g, row) in pair.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            let mut j_sum = 0.0;
            let mut f_sum = 0.0;
            for t in 0..pred.frame_count() {
                j_sum += region_j(pred.mask(t, p), gt.mask(t, g));
                f_sum += boundary_f(pred.mask(t, p), gt.mask(t, g), tol_radius);
            }
            *cell = (j_sum / frames, f_sum / frames);
        }
    }
    let score: Vec<Vec<f64>> = pair
        .iter()
        .map(|row| row.iter().map(|&(j, f)| 0.5 * (j + f)).collect())
        .collect();
    let matching = hungarian_max(&score);
    Ok((0..ng)
        .map(|g| match matching[g] {
            Some(p) => ObjectRow {
                sequence: sequence.to_string(),
                gt_id: gt.object_ids()[g],
                pred_id: Some(pred.object_ids()[p]),
                j: pair[g][p].0,
                f: pair[g][p].1,
            },
            None => ObjectRow {
                sequence: sequence.to_string(),
                gt_id: gt.object_ids()[g],
                pred_id: None,
                j: 0.0,
                f: 0.0,
            },
        })
        .collect())
}

/// Fine-grained per-object evaluation of one sequence at the default
/// boundary tolerance. The sequence row averages the per-object scores.
pub fn eval_fine_grained(pred: &MaskVideo, gt: &MaskVideo) -> Result<EvalReport> {
    eval_fine_grained_named("sequence", pred, gt)
}

pub fn eval_fine_grained_named(
    name: &str,
    pred: &MaskVideo,
    gt: &MaskVideo,
) -> Result<EvalReport> {
    let start = Instant::now();
    let tol = default_boundary_tolerance(gt.width(), gt.height());
    let objects = score_fine_grained(pred, gt, tol, name)?;
    let j = mean(objects.iter().map(|o| o.j));
    let f = mean(objects.iter().map(|o| o.f));
    Ok(EvalReport {
        sequences: vec![SequenceScore {
            name: name.to_string(),
            j,
            f,
        }],
        objects,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn region_matches_pixel_counting() {
        let a = square(32, 32, 4, 4, 10);
        assert_eq!(region_j(&a, &a), 1.0);
        assert_eq!(region_j(&Mask::new(8, 8), &Mask::new(8, 8)), 1.0);
        let b = square(32, 32, 20, 20, 5);
        assert_eq!(region_j(&a, &b), 0.0);
        // 10×10 against itself shifted by 5: overlap 5×10 = 50, union 150
        let c = square(32, 32, 9, 4, 10);
        let jac = region_j(&a, &c);
        assert!((jac - 1.0 / 3.0).abs() < 1e-15, "got {jac}");
    }

    #[test]
    fn boundary_agrees_on_identical_and_empty_cases() {
        let a = square(32, 32, 4, 4, 10);
        assert_eq!(boundary_f(&a, &a, 0), 1.0);
        assert_eq!(boundary_f(&Mask::new(8, 8), &Mask::new(8, 8), 2), 1.0);
        assert_eq!(boundary_f(&Mask::new(32, 32), &a, 2), 0.0);
        assert_eq!(boundary_f(&a, &Mask::new(32, 32), 2), 0.0);
    }

    #[test]
    fn one_pixel_shift_is_perfect_within_tolerance_one() {
        let a = square(32, 32, 4, 4, 10);
        let b = square(32, 32, 5, 4, 10);
        assert_eq!(boundary_f(&a, &b, 1), 1.0);
        assert!(boundary_f(&a, &b, 0) < 1.0);
    }

    #[test]
    fn boundary_precision_recall_arithmetic() {
        // pred: a 3-pixel strip, gt: its middle pixel, tolerance 0.
        // all 3 strip pixels are boundary; 1 of 3 hits the gt pixel →
        // precision 1/3, recall 1, F = 2·(1/3)/(4/3) = 1/2.
        let mut pred = Mask::new(8, 8);
        for x in 2..5 {
            pred.set(x, 3, true);
        }
        let mut gt = Mask::new(8, 8);
        gt.set(3, 3, true);
        assert!((boundary_f(&pred, &gt, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_tolerance_scales_with_the_diagonal() {
        assert_eq!(default_boundary_tolerance(96, 96), 2); // ⌈1.086⌉
        assert_eq!(default_boundary_tolerance(480, 854), 8); // ⌈7.84⌉
        assert_eq!(default_boundary_tolerance(10, 10), 1);
    }

    fn video_of(masks: Vec<Mask>, ids: Vec<u16>, frames: usize) -> MaskVideo {
        // replicate the same per-object masks across all frames
        let (w, h) = (masks[0].width(), masks[0].height());
        let mut all = Vec::new();
        for _ in 0..frames {
            all.extend(masks.iter().cloned());
        }
        MaskVideo::new_overlapping(w, h, frames, ids, all).unwrap()
    }

    #[test]
    fn grouped_eval_pools_objects_and_averages_frames() {
        let a = square(32, 32, 4, 4, 10);
        let b = square(32, 32, 20, 20, 6);
        let gt = video_of(vec![a.clone(), b.clone()], vec![1, 2], 3);
        let perfect = video_of(vec![b.clone(), a.clone()], vec![5, 9], 3);
        let rep = eval_mos(&perfect, &gt).unwrap();
        assert_eq!(rep.mean_j(), 1.0);
        assert_eq!(rep.mean_f(), 1.0);
        assert_eq!(rep.mean_jf(), 1.0);

        let empty = MaskVideo::empty(32, 32, 3);
        let rep = eval_mos(&empty, &gt).unwrap();
        assert_eq!(rep.mean_j(), 0.0);
        assert_eq!(rep.mean_f(), 0.0);

        // single object, single frame: grouped J equals plain region_j
        let shifted = video_of(vec![square(32, 32, 9, 4, 10)], vec![1], 1);
        let gt1 = video_of(vec![a.clone()], vec![1], 1);
        let rep = eval_mos(&shifted, &gt1).unwrap();
        assert!((rep.mean_j() - region_j(&square(32, 32, 9, 4, 10), &a)).abs() < 1e-15);
    }

    #[test]
    fn fine_grained_recovers_a_permutation() {
        let a = square(32, 32, 2, 2, 8);
        let b = square(32, 32, 14, 2, 8);
        let c = square(32, 32, 2, 18, 8);
        let gt = video_of(vec![a.clone(), b.clone(), c.clone()], vec![1, 2, 3], 2);
        let pred = video_of(vec![c, a, b], vec![7, 8, 9], 2);
        let rep = eval_fine_grained(&pred, &gt).unwrap();
        assert_eq!(rep.mean_jf(), 1.0);
        let matched: Vec<(u16, Option<u16>)> =
            rep.objects.iter().map(|o| (o.gt_id, o.pred_id)).collect();
        assert_eq!(matched, vec![(1, Some(8)), (2, Some(9)), (3, Some(7))]);
    }

    #[test]
    fn uncovered_object_halves_the_mean() {
        let a = square(32, 32, 2, 2, 8);
        let b = square(32, 32, 14, 14, 8);
        let gt = video_of(vec![a.clone(), b], vec![1, 2], 2);
        let pred = video_of(vec![a], vec![1], 2);
        let rep = eval_fine_grained(&pred, &gt).unwrap();
        assert_eq!(rep.mean_jf(), 0.5);
        assert_eq!(rep.objects[0].pred_id, Some(1));
        assert_eq!(rep.objects[0].jf(), 1.0);
        assert_eq!(rep.objects[1].pred_id, None);
        assert_eq!(rep.objects[1].jf(), 0.0);
    }

    #[test]
    fn empty_prediction_scores_zero_without_error() {
        let gt = video_of(vec![square(32, 32, 2, 2, 8)], vec![1], 2);
        let pred = MaskVideo::empty(32, 32, 2);
        let rep = eval_fine_grained(&pred, &gt).unwrap();
        assert_eq!(rep.mean_jf(), 0.0);
        assert_eq!(rep.objects[0].pred_id, None);
    }

    fn brute_force_max(score: &[Vec<f64>]) -> f64 {
        // try every injective row→column map; rows may stay unmatched only
        // when columns run out
        fn rec(score: &[Vec<f64>], row: usize, used: &mut Vec<bool>, left: usize) -> f64 {
            if row == score.len() {
                return 0.0;
            }
            let m = used.len();
            let mut best = f64::NEG_INFINITY;
            if score.len() - row > m - left {
                // more rows than free columns: skipping this row is allowed
                best = rec(score, row + 1, used, left);
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    let v = score[row][j] + rec(score, row + 1, used, left + 1);
                    used[j] = false;
                    if v > best {
                        best = v;
                    }
                }
            }
            best
        }
        rec(score, 0, &mut vec![false; score[0].len()], 0)
    }

    fn assignment_total(score: &[Vec<f64>], matching: &[Option<usize>]) -> f64 {
        matching
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.map(|j| score[i][j]))
            .sum()
    }

    #[test]
    fn assignment_matches_exhaustive_search_on_small_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..200 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let score: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
                .collect();
            let matching = hungarian_max(&score);
            // matching must be injective and complete on the smaller side
            let assigned: Vec<usize> = matching.iter().filter_map(|&x| x).collect();
            let mut dedup = assigned.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), assigned.len(), "duplicate column");
            assert_eq!(assigned.len(), n.min(m), "incomplete matching");
            let total = assignment_total(&score, &matching);
            let best = brute_force_max(&score);
            assert!(
                (total - best).abs() < 1e-9,
                "trial {trial}: hungarian {total} vs brute force {best} on {score:?}"
            );
        }
    }

    #[test]
    fn fine_grained_prefers_the_higher_overlap_pairing() {
        // pred 1 overlaps gt A strongly and gt B weakly; pred 2 only B.
        // greedy by gt order could steal pred 2 for A; optimal must not.
        let a = square(32, 32, 2, 2, 10);
        let b = square(32, 32, 16, 16, 10);
        let p1 = square(32, 32, 3, 3, 10); // mostly A
        let p2 = square(32, 32, 16, 16, 10); // exactly B
        let gt = video_of(vec![a, b], vec![1, 2], 1);
        let pred = video_of(vec![p1, p2], vec![1, 2], 1);
        let rep = eval_fine_grained(&pred, &gt).unwrap();
        assert_eq!(rep.objects[0].pred_id, Some(1));
        assert_eq!(rep.objects[1].pred_id, Some(2));
        assert_eq!(rep.objects[1].jf(), 1.0);
    }

    #[test]
    fn csv_and_summary_are_deterministic_and_runtime_free() {
        let a = square(32, 32, 2, 2, 8);
        let gt = video_of(vec![a.clone()], vec![1], 2);
        let pred = video_of(vec![a], vec![1], 2);
        let mut r1 = eval_fine_grained_named("scene_000", &pred, &gt).unwrap();
        let mut r2 = eval_fine_grained_named("scene_000", &pred, &gt).unwrap();
        r1.runtime_secs = 1.0;
        r2.runtime_secs = 99.0;
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.objects_csv(), r2.objects_csv());
        assert_eq!(r1.summary(), r2.summary());
        assert!(r1.to_csv().starts_with("sequence,j,f,jf\n"));
        assert!(r1.to_csv().contains("scene_000,1.000000,1.000000,1.000000"));
        assert!(r1.objects_csv().contains("scene_000,1,1,"));
    }

    #[test]
    fn report_merge_combines_sequences() {
        let a = square(32, 32, 2, 2, 8);
        let gt = video_of(vec![a.clone()], vec![1], 2);
        let perfect = video_of(vec![a], vec![1], 2);
        let empty = MaskVideo::empty(32, 32, 2);
        let mut rep = eval_mos_named("s0", &perfect, &gt).unwrap();
        rep.merge(eval_mos_named("s1", &empty, &gt).unwrap());
        assert_eq!(rep.sequences.len(), 2);
        assert!((rep.mean_j() - 0.5).abs() < 1e-15);
        assert!((rep.mean_jf() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dilating_an_inner_prediction_raises_region_overlap() {
        let gt = square(64, 64, 10, 10, 30);
        let pred = square(64, 64, 20, 20, 6); // strictly inside with margin
        let mut last = region_j(&pred, &gt);
        for k in 1..=4 {
            let grown = pred.dilate(k);
            assert_eq!(grown.intersection_area(&gt), grown.area(), "still inside");
            let j = region_j(&grown, &gt);
            assert!(j >= last, "k={k}: {j} < {last}");
            last = j;
        }
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (2usize..14, 2usize..14).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), w * h)
                .prop_map(move |data| Mask::from_data(w, h, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded(
            (a, b) in (2usize..14, 2usize..14).prop_flat_map(|(w, h)| {
                let m = proptest::collection::vec(any::<bool>(), w * h)
                    .prop_map(move |d| Mask::from_data(w, h, d).unwrap());
                let m2 = proptest::collection::vec(any::<bool>(), w * h)
                    .prop_map(move |d| Mask::from_data(w, h, d).unwrap());
                (m, m2)
            }),
            tol in 0usize..3,
        ) {
            let j = region_j(&a, &b);
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j, region_j(&b, &a));
            let f = boundary_f(&a, &b, tol);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, boundary_f(&b, &a, tol));
        }

        #[test]
        fn self_comparison_is_perfect(a in arb_mask(), tol in 0usize..3) {
            prop_assert_eq!(region_j(&a, &a), 1.0);
            prop_assert_eq!(boundary_f(&a, &a, tol), 1.0);
        }
    }
}
