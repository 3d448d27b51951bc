//! Standalone SVG figures: precision-recall curves and AP-by-distance bars.

use std::io::Write;
use std::path::Path;

use roifusion_core::evalkit::{
    bucketize_and_report, match_with_ignores, pr_curve, Detection, EvalConfig, Level,
    MatchOutcome,
};
use roifusion_core::scene::GtBox;

use crate::CliError;

const W: f64 = 420.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#c23b22", "#2a6fbb", "#3e8e41", "#8e44ad"];

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN;
    let y0 = H - MARGIN;
    let x1 = W - 16.0;
    let y1 = 32.0;
    let mut s = format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{x_label}</text>\n",
        (x0 + x1) / 2.0,
        H - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let x = x0 + f * (x1 - x0);
        let y = y0 - f * (y0 - y1);
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">{f:.1}</text>\n",
            y0 + 14.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">{f:.1}</text>\n",
            x0 - 5.0,
            y + 3.0
        ));
    }
    s
}

fn to_px(recall: f64, precision: f64) -> (f64, f64) {
    let x0 = MARGIN;
    let y0 = H - MARGIN;
    let x1 = W - 16.0;
    let y1 = 32.0;
    (x0 + recall * (x1 - x0), y0 - precision * (y0 - y1))
}

/// PR curves (overall, LEVEL_2, normal threshold) and AP-by-distance bars
/// (LEVEL_2, normal threshold) for every detection source.
pub fn write_plots(
    dir: &Path,
    sources: &[(String, Vec<Vec<Detection>>)],
    gts: &[Vec<GtBox>],
    cfg: &EvalConfig,
) -> Result<(), CliError> {
    let threshold = cfg.thresholds.first().copied().unwrap_or(0.7);

    // PR curves.
    let mut svg = svg_header(&format!("Precision-recall (LEVEL_2, IoU {threshold})"));
    svg.push_str(&axes("recall", "precision"));
    for (idx, (name, grouped)) in sources.iter().enumerate() {
        let mut entries: Vec<(f64, bool)> = Vec::new();
        let mut num_gt = 0usize;
        for (dets, scene_gts) in grouped.iter().zip(gts) {
            let mut live = Vec::new();
            let mut ignored = Vec::new();
            for g in scene_gts {
                if Level::Level2.admits(g.num_points) {
                    live.push(g.box3d);
                } else {
                    ignored.push(g.box3d);
                }
            }
            num_gt += live.len();
            for (det, outcome) in dets
                .iter()
                .zip(match_with_ignores(dets, &live, &ignored, threshold, cfg.iou_kind))
            {
                match outcome {
                    MatchOutcome::TruePositive => entries.push((det.score, true)),
                    MatchOutcome::FalsePositive => entries.push((det.score, false)),
                    MatchOutcome::Ignored => {}
                }
            }
        }
        if num_gt == 0 {
            continue;
        }
        let curve = pr_curve(entries, num_gt);
        let color = COLORS[idx % COLORS.len()];
        let points: Vec<String> = std::iter::once(to_px(0.0, 1.0))
            .chain(curve.iter().map(|&(r, p)| to_px(r, p)))
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            W - 130.0,
            44.0 + 16.0 * idx as f64
        ));
    }
    svg.push_str("</svg>\n");
    write_file(&dir.join("pr_curves.svg"), &svg)?;

    // AP by distance bars.
    let mut svg = svg_header(&format!("AP by distance (LEVEL_2, IoU {threshold})"));
    svg.push_str(&axes("distance bucket", "AP"));
    let n_buckets = cfg.buckets.len();
    for (src_idx, (name, grouped)) in sources.iter().enumerate() {
        let paired: Vec<_> = grouped
            .iter()
            .zip(gts)
            .map(|(d, g)| (d.clone(), g.clone()))
            .collect();
        let report = bucketize_and_report(&paired, cfg);
        let color = COLORS[src_idx % COLORS.len()];
        for (b_idx, bucket) in cfg.buckets.iter().enumerate() {
            let label = if bucket.1.is_some() {
                format!("{:.0}-{:.0}m", bucket.0, bucket.1.unwrap())
            } else {
                format!("{:.0}m-inf", bucket.0)
            };
            let ap = report
                .rows
                .iter()
                .find(|r| {
                    r.level == "LEVEL_2" && r.bucket == label && r.threshold == threshold
                })
                .and_then(|r| r.ap);
            let Some(ap) = ap else { continue };
            let slot_w = (W - MARGIN - 16.0) / n_buckets as f64;
            let bar_w = slot_w / (sources.len() as f64 + 1.0);
            let x = MARGIN + b_idx as f64 * slot_w + bar_w * (src_idx as f64 + 0.5);
            let (_, y_top) = to_px(0.0, ap);
            let y_base = H - MARGIN;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y_top:.1}\" width=\"{bar_w:.1}\" height=\"{:.1}\" fill=\"{color}\" opacity=\"0.85\"/>\n",
                y_base - y_top
            ));
            if src_idx == 0 {
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">{label}</text>\n",
                    MARGIN + (b_idx as f64 + 0.5) * slot_w,
                    H - MARGIN + 26.0
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            W - 130.0,
            44.0 + 16.0 * src_idx as f64
        ));
    }
    svg.push_str("</svg>\n");
    write_file(&dir.join("ap_by_distance.svg"), &svg)?;
    Ok(())
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}
