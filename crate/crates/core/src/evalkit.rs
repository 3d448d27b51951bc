//! KITTI/Waymo-style evaluation: greedy score-ordered matching, interpolated
//! average precision at fixed recall positions, difficulty levels by interior
//! point count and distance buckets by BEV center range.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::scene::GtBox;

/// Which IoU the matcher uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouKind {
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn compute(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

/// One detection to score.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
    pub class_id: usize,
}

/// Greedy matching in descending score order: each detection takes the
/// highest-IoU still-unmatched ground truth with IoU >= threshold.
/// Returns per-detection TP flags and per-gt matched flags.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Box3D],
    iou_threshold: f64,
    kind: IouKind,
) -> (Vec<bool>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut tp = vec![false; dets.len()];
    let mut matched = vec![false; gts.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = kind.compute(&dets[d].box3d, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp[d] = true;
        }
    }
    (tp, matched)
}

/// Matching outcome when some ground truths are "don't care".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Best match was an out-of-level / out-of-bucket ground truth; the
    /// detection is dropped from precision-recall accounting.
    Ignored,
}

/// Greedy matching with an ignore set: detections failing to match a real gt
/// but overlapping an ignored gt (IoU >= threshold) count neither TP nor FP.
pub fn match_with_ignores(
    dets: &[Detection],
    gts: &[Box3D],
    ignored_gts: &[Box3D],
    iou_threshold: f64,
    kind: IouKind,
) -> Vec<MatchOutcome> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut out = vec![MatchOutcome::FalsePositive; dets.len()];
    let mut matched = vec![false; gts.len()];
    let mut matched_ignored = vec![false; ignored_gts.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = kind.compute(&dets[d].box3d, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            out[d] = MatchOutcome::TruePositive;
            continue;
        }
        let mut best_ign: Option<(usize, f64)> = None;
        for (g, gt) in ignored_gts.iter().enumerate() {
            if matched_ignored[g] {
                continue;
            }
            let iou = kind.compute(&dets[d].box3d, gt);
            if iou >= iou_threshold && best_ign.map_or(true, |(_, b)| iou > b) {
                best_ign = Some((g, iou));
            }
        }
        if let Some((g, _)) = best_ign {
            matched_ignored[g] = true;
            out[d] = MatchOutcome::Ignored;
        }
    }
    out
}

/// Interpolated average precision over `recall_positions` evenly spaced
/// recall points (R11: 0, 0.1, ..., 1.0). `entries` are (score, is_tp) for
/// every counted detection across all scenes. Returns None when there is no
/// ground truth to recall.
pub fn average_precision(
    mut entries: Vec<(f64, bool)>,
    num_gt: usize,
    recall_positions: usize,
) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let curve = pr_curve_sorted(&entries, num_gt);
    let mut total = 0.0;
    for i in 0..recall_positions {
        let r = i as f64 / (recall_positions - 1) as f64;
        let p = curve
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|(_, precision)| *precision)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / recall_positions as f64)
}

/// (recall, precision) after each detection, score-descending input.
fn pr_curve_sorted(entries: &[(f64, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = Vec::with_capacity(entries.len());
    for (_, is_tp) in entries {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    curve
}

/// Public PR curve helper for plotting.
pub fn pr_curve(mut entries: Vec<(f64, bool)>, num_gt: usize) -> Vec<(f64, f64)> {
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    pr_curve_sorted(&entries, num_gt)
}

/// Difficulty level by ground-truth interior point count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// More than 5 interior points.
    Level1,
    /// At least 1 interior point.
    Level2,
}

impl Level {
    pub fn admits(&self, num_points: usize) -> bool {
        match self {
            Level::Level1 => num_points > 5,
            Level::Level2 => num_points >= 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Level::Level1 => "LEVEL_1",
            Level::Level2 => "LEVEL_2",
        }
    }
}

/// Evaluation protocol configuration.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Normal and strict IoU thresholds (0.7 / 0.8 for vehicles).
    pub thresholds: Vec<f64>,
    /// R11 by default.
    pub recall_positions: usize,
    /// Distance buckets by BEV center range, meters; None = unbounded.
    pub buckets: Vec<(f64, Option<f64>)>,
    pub iou_kind: IouKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.7, 0.8],
            recall_positions: 11,
            buckets: vec![(0.0, Some(30.0)), (30.0, Some(50.0)), (50.0, None)],
            iou_kind: IouKind::ThreeD,
        }
    }
}

fn bucket_label(bucket: Option<(f64, Option<f64>)>) -> String {
    match bucket {
        None => "overall".to_string(),
        Some((lo, Some(hi))) => format!("{lo:.0}-{hi:.0}m"),
        Some((lo, None)) => format!("{lo:.0}m-inf"),
    }
}

fn in_bucket(range: f64, bucket: Option<(f64, Option<f64>)>) -> bool {
    match bucket {
        None => true,
        Some((lo, Some(hi))) => range >= lo && range < hi,
        Some((lo, None)) => range >= lo,
    }
}

/// One report row: AP for a (level, bucket, threshold) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub level: String,
    pub bucket: String,
    pub threshold: f64,
    /// None = no ground truth in the cell ("n/a").
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_kind: IouKind,
    pub recall_positions: usize,
    pub rows: Vec<ReportRow>,
}

/// Evaluate detections against ground truth, scene-aligned. Detections
/// matching a ground truth outside the current level or bucket are ignored
/// rather than counted as false positives; detections are assigned to
/// distance buckets by their own BEV center range.
pub fn bucketize_and_report(
    scenes: &[(Vec<Detection>, Vec<GtBox>)],
    cfg: &EvalConfig,
) -> EvalReport {
    let mut rows = Vec::new();
    let buckets: Vec<Option<(f64, Option<f64>)>> = std::iter::once(None)
        .chain(cfg.buckets.iter().map(|b| Some(*b)))
        .collect();
    for level in [Level::Level1, Level::Level2] {
        for &bucket in &buckets {
            for &threshold in &cfg.thresholds {
                let mut entries: Vec<(f64, bool)> = Vec::new();
                let mut num_gt = 0usize;
                let mut num_det = 0usize;
                for (dets, gts) in scenes {
                    let mut live: Vec<Box3D> = Vec::new();
                    let mut ignored: Vec<Box3D> = Vec::new();
                    for g in gts {
                        if level.admits(g.num_points) && in_bucket(g.box3d.bev_range(), bucket) {
                            live.push(g.box3d);
                        } else {
                            ignored.push(g.box3d);
                        }
                    }
                    let in_dets: Vec<Detection> = dets
                        .iter()
                        .filter(|d| in_bucket(d.box3d.bev_range(), bucket))
                        .cloned()
                        .collect();
                    num_gt += live.len();
                    let outcomes =
                        match_with_ignores(&in_dets, &live, &ignored, threshold, cfg.iou_kind);
                    for (det, outcome) in in_dets.iter().zip(outcomes) {
                        match outcome {
                            MatchOutcome::TruePositive => {
                                entries.push((det.score, true));
                                num_det += 1;
                            }
                            MatchOutcome::FalsePositive => {
                                entries.push((det.score, false));
                                num_det += 1;
                            }
                            MatchOutcome::Ignored => {}
                        }
                    }
                }
                let ap = average_precision(entries, num_gt, cfg.recall_positions);
                rows.push(ReportRow {
                    level: level.label().to_string(),
                    bucket: bucket_label(bucket),
                    threshold,
                    ap,
                    num_gt,
                    num_det,
                });
            }
        }
    }
    EvalReport {
        iou_kind: cfg.iou_kind,
        recall_positions: cfg.recall_positions,
        rows,
    }
}

/// Aligned text table of one or more named reports (side-by-side AP columns).
pub fn render_table(reports: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let first = reports[0].1;
    out.push_str(&format!(
        "AP with {} recall positions, {} IoU\n",
        first.recall_positions,
        match first.iou_kind {
            IouKind::Bev => "BEV",
            IouKind::ThreeD => "3D",
        }
    ));
    out.push_str(&format!("{:<9} {:<9} {:>5}", "level", "bucket", "thr"));
    for (name, _) in reports {
        out.push_str(&format!(" {:>12}", name));
    }
    out.push_str(&format!(" {:>7}\n", "num_gt"));
    for (i, row) in first.rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<9} {:<9} {:>5.2}",
            row.level, row.bucket, row.threshold
        ));
        for (_, report) in reports {
            let cell = match report.rows[i].ap {
                Some(ap) => format!("{ap:.4}"),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(" {:>12}", cell));
        }
        out.push_str(&format!(" {:>7}\n", row.num_gt));
    }
    out
}
