//! CLEAR-MOT and MT/PT/ML evaluation.
//!
//! Matching follows the CLEAR protocol: matches persist from the previous
//! frame while they stay above the overlap threshold, the remainder is a
//! maximum-total-IoU assignment (solved exactly with the flow solver), and
//! identity switches are counted whenever a ground-truth trajectory's
//! matched hypothesis id changes between its consecutive matched frames.

use std::collections::HashMap;

use crate::assoc::{solve_exact, FlowProblem};
use crate::ingest::{Box2d, LabelRecord};

pub const MATCH_IOU: f64 = 0.5;
const MOSTLY_TRACKED: f64 = 0.8;
const MOSTLY_LOST: f64 = 0.2;

/// Ground-truth box for one frame.
#[derive(Debug, Clone)]
pub struct GtBox {
    pub id: i64,
    pub box2d: Box2d,
    pub dont_care: bool,
}

impl GtBox {
    pub fn from_record(r: &LabelRecord) -> Self {
        GtBox {
            id: r.track_id,
            box2d: r.box2d,
            dont_care: r.is_dont_care(),
        }
    }
}

/// Tracker hypothesis box for one frame.
#[derive(Debug, Clone)]
pub struct HypBox {
    pub id: i64,
    pub box2d: Box2d,
}

impl HypBox {
    pub fn from_record(r: &LabelRecord) -> Self {
        HypBox {
            id: r.track_id,
            box2d: r.box2d,
        }
    }
}

/// Matching outcome for one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameMatch {
    /// (gt id, hyp id, IoU), all IoU strictly above the threshold.
    pub matches: Vec<(i64, i64, f64)>,
    /// Ground-truth ids left unmatched (false negatives).
    pub unmatched_gt: Vec<i64>,
    /// False positives after DontCare suppression.
    pub false_positives: usize,
}

/// Match one frame. `prior` maps gt id to the hypothesis id it was matched
/// with in the previous frame; such pairs are kept whenever both are
/// present and still overlap above the threshold, even if a fresh
/// assignment would score higher. Unmatched hypotheses mostly inside a
/// DontCare region do not count as false positives.
pub fn match_frame(
    gt: &[GtBox],
    hyp: &[HypBox],
    prior: &HashMap<i64, i64>,
    iou_threshold: f64,
) -> FrameMatch {
    let mut out = FrameMatch::default();
    let real_gt: Vec<&GtBox> = gt.iter().filter(|g| !g.dont_care).collect();
    let dont_care: Vec<&GtBox> = gt.iter().filter(|g| g.dont_care).collect();

    let mut gt_taken = vec![false; real_gt.len()];
    let mut hyp_taken = vec![false; hyp.len()];

    // Continuity pass.
    for (gi, g) in real_gt.iter().enumerate() {
        if let Some(&want) = prior.get(&g.id) {
            if let Some(hi) = hyp.iter().position(|h| h.id == want) {
                if !hyp_taken[hi] {
                    let iou = g.box2d.iou(&hyp[hi].box2d);
                    if iou > iou_threshold {
                        gt_taken[gi] = true;
                        hyp_taken[hi] = true;
                        out.matches.push((g.id, want, iou));
                    }
                }
            }
        }
    }

    // Maximum-total-IoU assignment over the remainder.
    let free_gt: Vec<usize> = (0..real_gt.len()).filter(|&i| !gt_taken[i]).collect();
    let free_hyp: Vec<usize> = (0..hyp.len()).filter(|&i| !hyp_taken[i]).collect();
    if !free_gt.is_empty() && !free_hyp.is_empty() {
        let (n, m) = (free_gt.len(), free_hyp.len());
        let mut problem = FlowProblem::empty(n, m);
        for (a, &gi) in free_gt.iter().enumerate() {
            for (b, &hi) in free_hyp.iter().enumerate() {
                let iou = real_gt[gi].box2d.iou(&hyp[hi].box2d);
                problem.link_scores[a * m + b] = if iou > iou_threshold { iou } else { -1.0 };
            }
        }
        let sol = solve_exact(&problem).expect("matching problem is valid");
        for (a, &gi) in free_gt.iter().enumerate() {
            for (b, &hi) in free_hyp.iter().enumerate() {
                if sol.links[a * m + b] {
                    let iou = real_gt[gi].box2d.iou(&hyp[hi].box2d);
                    gt_taken[gi] = true;
                    hyp_taken[hi] = true;
                    out.matches.push((real_gt[gi].id, hyp[hi].id, iou));
                }
            }
        }
    }

    for (gi, g) in real_gt.iter().enumerate() {
        if !gt_taken[gi] {
            out.unmatched_gt.push(g.id);
        }
    }
    for (hi, h) in hyp.iter().enumerate() {
        if hyp_taken[hi] {
            continue;
        }
        let suppressed = dont_care.iter().any(|dc| {
            let inter = h.box2d.intersection_area(&dc.box2d);
            inter / h.box2d.area() > 0.5
        });
        if !suppressed {
            out.false_positives += 1;
        }
    }
    out
}

/// Raw counts, mergeable across sequences by summation.
#[derive(Debug, Clone, Default)]
pub struct MetricTotals {
    pub gt_boxes: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub fragmentations: usize,
    pub iou_sum: f64,
    /// (frames present, frames matched) per ground-truth trajectory.
    pub trajectories: Vec<(usize, usize)>,
}

impl MetricTotals {
    pub fn merge(&mut self, other: &MetricTotals) {
        self.gt_boxes += other.gt_boxes;
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
        self.id_switches += other.id_switches;
        self.fragmentations += other.fragmentations;
        self.iou_sum += other.iou_sum;
        self.trajectories.extend(other.trajectories.iter().copied());
    }

    pub fn report(&self) -> MetricReport {
        let gt = self.gt_boxes as f64;
        let tp = self.true_positives as f64;
        let mut mt = 0usize;
        let mut pt = 0usize;
        let mut ml = 0usize;
        for &(frames, matched) in &self.trajectories {
            let cover = matched as f64 / frames.max(1) as f64;
            if cover >= MOSTLY_TRACKED {
                mt += 1;
            } else if cover <= MOSTLY_LOST {
                ml += 1;
            } else {
                pt += 1;
            }
        }
        let traj = self.trajectories.len().max(1) as f64;
        MetricReport {
            mota: if self.gt_boxes == 0 {
                1.0
            } else {
                1.0 - (self.false_positives + self.false_negatives + self.id_switches) as f64 / gt
            },
            motp: if self.true_positives == 0 {
                0.0
            } else {
                self.iou_sum / tp
            },
            precision: if self.true_positives + self.false_positives == 0 {
                0.0
            } else {
                tp / (tp + self.false_positives as f64)
            },
            recall: if self.gt_boxes == 0 {
                0.0
            } else {
                tp / (tp + self.false_negatives as f64)
            },
            false_positives: self.false_positives,
            false_negatives: self.false_negatives,
            id_switches: self.id_switches,
            fragmentations: self.fragmentations,
            mostly_tracked: 100.0 * mt as f64 / traj,
            partially_tracked: 100.0 * pt as f64 / traj,
            mostly_lost: 100.0 * ml as f64 / traj,
            gt_count: self.gt_boxes,
        }
    }
}

/// CLEAR-MOT summary. MOTA in [-inf, 1], MOTP as mean matched IoU, MT/PT/ML
/// as percentages of ground-truth trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mota: f64,
    pub motp: f64,
    pub precision: f64,
    pub recall: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub fragmentations: usize,
    pub mostly_tracked: f64,
    pub partially_tracked: f64,
    pub mostly_lost: f64,
    pub gt_count: usize,
}

impl MetricReport {
    /// Aligned table, one row per label, column order MOTA, MOTP, Prec.,
    /// Recall, FP, FN, ID-s, Frag, MT, ML.
    pub fn format_table(rows: &[(String, MetricReport)]) -> String {
        let mut out = String::new();
        let name_w = rows
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(6)
            .max(6);
        out.push_str(&format!(
            "{:name_w$}  {:>6} {:>6} {:>6} {:>6} {:>5} {:>5} {:>5} {:>5} {:>6} {:>6}\n",
            "run", "MOTA", "MOTP", "Prec", "Recall", "FP", "FN", "ID-s", "Frag", "MT", "ML"
        ));
        for (name, r) in rows {
            out.push_str(&format!(
                "{:name_w$}  {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>5} {:>5} {:>5} {:>5} {:>6.2} {:>6.2}\n",
                name,
                100.0 * r.mota,
                100.0 * r.motp,
                100.0 * r.precision,
                100.0 * r.recall,
                r.false_positives,
                r.false_negatives,
                r.id_switches,
                r.fragmentations,
                r.mostly_tracked,
                r.mostly_lost,
            ));
        }
        out
    }
}

/// Streaming per-sequence evaluator: feed frames in order, then `finish`.
#[derive(Debug)]
pub struct SequenceEvaluator {
    iou_threshold: f64,
    totals: MetricTotals,
    prev_frame_match: HashMap<i64, i64>,
    last_matched_id: HashMap<i64, i64>,
    last_status: HashMap<i64, bool>,
    ever_tracked: HashMap<i64, bool>,
    gt_frames: HashMap<i64, usize>,
    gt_matched: HashMap<i64, usize>,
}

impl SequenceEvaluator {
    pub fn new(iou_threshold: f64) -> Self {
        SequenceEvaluator {
            iou_threshold,
            totals: MetricTotals::default(),
            prev_frame_match: HashMap::new(),
            last_matched_id: HashMap::new(),
            last_status: HashMap::new(),
            ever_tracked: HashMap::new(),
            gt_frames: HashMap::new(),
            gt_matched: HashMap::new(),
        }
    }

    pub fn observe(&mut self, gt: &[GtBox], hyp: &[HypBox]) {
        let fm = match_frame(gt, hyp, &self.prev_frame_match, self.iou_threshold);
        let real_gt = gt.iter().filter(|g| !g.dont_care);

        self.totals.gt_boxes += gt.iter().filter(|g| !g.dont_care).count();
        self.totals.true_positives += fm.matches.len();
        self.totals.false_positives += fm.false_positives;
        self.totals.false_negatives += fm.unmatched_gt.len();
        self.totals.iou_sum += fm.matches.iter().map(|(_, _, iou)| iou).sum::<f64>();

        let matched_now: HashMap<i64, i64> =
            fm.matches.iter().map(|&(g, h, _)| (g, h)).collect();
        for (&gid, &hid) in &matched_now {
            if let Some(&prev_hid) = self.last_matched_id.get(&gid) {
                if prev_hid != hid {
                    self.totals.id_switches += 1;
                }
            }
            self.last_matched_id.insert(gid, hid);
        }

        for g in real_gt {
            let tracked = matched_now.contains_key(&g.id);
            *self.gt_frames.entry(g.id).or_insert(0) += 1;
            if tracked {
                *self.gt_matched.entry(g.id).or_insert(0) += 1;
            }
            let was = self.last_status.get(&g.id).copied().unwrap_or(false);
            let ever = self.ever_tracked.get(&g.id).copied().unwrap_or(false);
            if tracked && ever && !was {
                self.totals.fragmentations += 1;
            }
            self.last_status.insert(g.id, tracked);
            if tracked {
                self.ever_tracked.insert(g.id, true);
            }
        }
        self.prev_frame_match = matched_now;
    }

    pub fn finish(mut self) -> MetricTotals {
        let mut ids: Vec<i64> = self.gt_frames.keys().copied().collect();
        ids.sort();
        for id in ids {
            let frames = self.gt_frames[&id];
            let matched = self.gt_matched.get(&id).copied().unwrap_or(0);
            self.totals.trajectories.push((frames, matched));
        }
        self.totals
    }
}

/// Evaluate whole sequences given per-frame ground truth and hypotheses.
pub fn evaluate_sequence(
    frames: &[(Vec<GtBox>, Vec<HypBox>)],
    iou_threshold: f64,
) -> MetricTotals {
    let mut eval = SequenceEvaluator::new(iou_threshold);
    for (gt, hyp) in frames {
        eval.observe(gt, hyp);
    }
    eval.finish()
}

/// Group label records by frame index over `0..frame_count`.
pub fn records_by_frame(records: &[LabelRecord], frame_count: usize) -> Vec<Vec<&LabelRecord>> {
    let mut out: Vec<Vec<&LabelRecord>> = vec![Vec::new(); frame_count];
    for r in records {
        if r.frame < frame_count {
            out[r.frame].push(r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gtb(id: i64, left: f64) -> GtBox {
        GtBox {
            id,
            box2d: Box2d::new(left, 0.0, left + 10.0, 10.0).unwrap(),
            dont_care: false,
        }
    }

    fn hypb(id: i64, left: f64) -> HypBox {
        HypBox {
            id,
            box2d: Box2d::new(left, 0.0, left + 10.0, 10.0).unwrap(),
        }
    }

    #[test]
    fn identical_sets_match_fully() {
        let gt = vec![gtb(1, 0.0), gtb(2, 50.0)];
        let hyp = vec![hypb(10, 0.0), hypb(20, 50.0)];
        let fm = match_frame(&gt, &hyp, &HashMap::new(), MATCH_IOU);
        assert_eq!(fm.matches.len(), 2);
        assert_eq!(fm.false_positives, 0);
        assert!(fm.unmatched_gt.is_empty());
    }

    #[test]
    fn disjoint_sets_are_all_fp_and_fn() {
        let gt = vec![gtb(1, 0.0)];
        let hyp = vec![hypb(10, 500.0)];
        let fm = match_frame(&gt, &hyp, &HashMap::new(), MATCH_IOU);
        assert!(fm.matches.is_empty());
        assert_eq!(fm.false_positives, 1);
        assert_eq!(fm.unmatched_gt, vec![1]);
    }

    #[test]
    fn continuity_keeps_weaker_persistent_match() {
        // GT 1 was matched to hyp 10 before. Now hyp 20 overlaps better,
        // but 10 still clears the threshold, so the old pairing stays.
        let gt = vec![gtb(1, 0.0)];
        let hyp = vec![
            HypBox {
                id: 10,
                box2d: Box2d::new(3.0, 0.0, 13.0, 10.0).unwrap(), // IoU ~ 0.54
            },
            hypb(20, 0.0), // IoU 1.0
        ];
        let mut prior = HashMap::new();
        prior.insert(1i64, 10i64);
        let fm = match_frame(&gt, &hyp, &prior, MATCH_IOU);
        assert_eq!(fm.matches.len(), 1);
        assert_eq!(fm.matches[0].0, 1);
        assert_eq!(fm.matches[0].1, 10);
        // The better-overlapping newcomer is now a false positive.
        assert_eq!(fm.false_positives, 1);
    }

    #[test]
    fn dont_care_suppresses_false_positives() {
        let gt = vec![
            gtb(1, 0.0),
            GtBox {
                id: -1,
                box2d: Box2d::new(100.0, 0.0, 140.0, 40.0).unwrap(),
                dont_care: true,
            },
        ];
        // One hyp matches gt, one sits inside the DontCare area, one is a
        // genuine false positive.
        let hyp = vec![hypb(7, 0.0), hypb(8, 110.0), hypb(9, 400.0)];
        let fm = match_frame(&gt, &hyp, &HashMap::new(), MATCH_IOU);
        assert_eq!(fm.matches.len(), 1);
        assert_eq!(fm.false_positives, 1);
    }

    /// Ten GT boxes, two FP, one FN, one IDS: MOTA = 1 - 4/10 = 0.6.
    fn hand_fixture_totals() -> MetricTotals {
        let mut frames: Vec<(Vec<GtBox>, Vec<HypBox>)> = Vec::new();
        for t in 0..10usize {
            let gt = vec![gtb(1, 0.0)];
            let mut hyp = Vec::new();
            match t {
                0 | 1 => {
                    hyp.push(hypb(10, 0.0));
                    hyp.push(hypb(99, 300.0)); // FP
                }
                2..=4 => hyp.push(hypb(10, 0.0)),
                5 => {} // FN
                _ => hyp.push(hypb(11, 0.0)), // IDS on frame 6
            }
            frames.push((gt, hyp));
        }
        evaluate_sequence(&frames, MATCH_IOU)
    }

    #[test]
    fn hand_fixture_scores_mota_point_six() {
        let totals = hand_fixture_totals();
        assert_eq!(totals.gt_boxes, 10);
        assert_eq!(totals.false_positives, 2);
        assert_eq!(totals.false_negatives, 1);
        assert_eq!(totals.id_switches, 1);
        let report = totals.report();
        assert!((report.mota - 0.6).abs() < 1e-12);
        // The gap at frame 5 makes exactly one fragmentation, and 9/10
        // coverage makes the trajectory mostly tracked.
        assert_eq!(report.fragmentations, 1);
        assert_eq!(report.mostly_tracked, 100.0);
        assert_eq!(report.mostly_lost, 0.0);
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let frames: Vec<(Vec<GtBox>, Vec<HypBox>)> = (0..8)
            .map(|_| (vec![gtb(1, 0.0), gtb(2, 40.0)], vec![hypb(5, 0.0), hypb(6, 40.0)]))
            .collect();
        let report = evaluate_sequence(&frames, MATCH_IOU).report();
        assert_eq!(report.mota, 1.0);
        assert_eq!(report.id_switches, 0);
        assert_eq!(report.false_positives, 0);
        assert_eq!(report.false_negatives, 0);
        assert!((report.motp - 1.0).abs() < 1e-12);
        assert_eq!(report.mostly_tracked, 100.0);
    }

    #[test]
    fn consistent_relabeling_leaves_report_unchanged() {
        let build = |offset: i64| {
            let frames: Vec<(Vec<GtBox>, Vec<HypBox>)> = (0..10)
                .map(|t| {
                    let mut hyp = vec![hypb(5 + offset, 0.0)];
                    if t > 4 {
                        hyp.push(hypb(6 + offset, 40.0));
                    }
                    (vec![gtb(1, 0.0), gtb(2, 40.0)], hyp)
                })
                .collect();
            evaluate_sequence(&frames, MATCH_IOU).report()
        };
        assert_eq!(build(0), build(1000));
    }

    #[test]
    fn one_extra_fp_costs_exactly_one_over_gt() {
        let clean: Vec<(Vec<GtBox>, Vec<HypBox>)> = (0..10)
            .map(|_| (vec![gtb(1, 0.0)], vec![hypb(5, 0.0)]))
            .collect();
        let mut with_fp = clean.clone();
        with_fp[3].1.push(hypb(77, 300.0));
        let a = evaluate_sequence(&clean, MATCH_IOU).report();
        let b = evaluate_sequence(&with_fp, MATCH_IOU).report();
        assert!((a.mota - b.mota - 1.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn mt_pt_ml_partition_sums_to_hundred() {
        // Three trajectories: tracked 9/10 (MT), 5/10 (PT), 1/10 (ML).
        let mut frames: Vec<(Vec<GtBox>, Vec<HypBox>)> = Vec::new();
        for t in 0..10usize {
            let gt = vec![gtb(1, 0.0), gtb(2, 40.0), gtb(3, 80.0)];
            let mut hyp = Vec::new();
            if t != 0 {
                hyp.push(hypb(10, 0.0));
            }
            if t < 5 {
                hyp.push(hypb(20, 40.0));
            }
            if t == 0 {
                hyp.push(hypb(30, 80.0));
            }
            frames.push((gt, hyp));
        }
        let report = evaluate_sequence(&frames, MATCH_IOU).report();
        assert!((report.mostly_tracked + report.partially_tracked + report.mostly_lost - 100.0)
            .abs()
            < 1e-9);
        assert!((report.mostly_tracked - 100.0 / 3.0).abs() < 1e-9);
        assert!((report.mostly_lost - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn totals_merge_by_summation() {
        let t1 = hand_fixture_totals();
        let t2 = hand_fixture_totals();
        let mut merged = t1.clone();
        merged.merge(&t2);
        assert_eq!(merged.gt_boxes, 20);
        assert_eq!(merged.id_switches, 2);
        let r = merged.report();
        assert!((r.mota - 0.6).abs() < 1e-12);
        assert_eq!(merged.trajectories.len(), 2);
    }
}
