// Temporary analysis: refinement quality by range bucket plus component
// error breakdown. Usage: iou_probe <dataset.jsonl> <detections.jsonl>
use roifusion_core::geometry::{iou_3d, wrap_angle, Box3D};
use roifusion_core::scene::read_dataset;
use std::collections::HashMap;

fn parse_box(v: &serde_json::Value) -> Box3D {
    let a = v.as_array().unwrap();
    Box3D::new(
        a[0].as_f64().unwrap(),
        a[1].as_f64().unwrap(),
        a[2].as_f64().unwrap(),
        a[3].as_f64().unwrap(),
        a[4].as_f64().unwrap(),
        a[5].as_f64().unwrap(),
        a[6].as_f64().unwrap(),
    )
    .unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenes = read_dataset(std::path::Path::new(&args[1])).unwrap();
    let dets_text = std::fs::read_to_string(&args[2]).unwrap();
    let by_id: HashMap<u64, &roifusion_core::scene::Scene> =
        scenes.iter().map(|s| (s.id, s)).collect();
    let mut buckets: HashMap<&str, (f64, f64, usize)> = HashMap::new();
    let mut errs = [0.0f64; 6];
    for line in dets_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let scene = by_id[&v["scene_id"].as_u64().unwrap()];
        let refined = parse_box(&v["box3d"]);
        let source = parse_box(&v["source_proposal"]);
        let best_gt = scene.gt_boxes.iter().max_by(|a, b| {
            iou_3d(&source, &a.box3d)
                .partial_cmp(&iou_3d(&source, &b.box3d))
                .unwrap()
        });
        let Some(gt) = best_gt else { continue };
        let prop_iou = iou_3d(&source, &gt.box3d);
        if prop_iou < 0.05 {
            continue;
        }
        let g = &gt.box3d;
        let range = g.bev_range();
        let bucket = if range < 30.0 {
            "0-30m"
        } else if range < 50.0 {
            "30-50m"
        } else {
            "50m+"
        };
        let e = buckets.entry(bucket).or_insert((0.0, 0.0, 0));
        e.0 += prop_iou;
        e.1 += iou_3d(&refined, g);
        e.2 += 1;
        if prop_iou >= 0.3 {
            errs[0] += (refined.x - g.x).abs();
            errs[1] += (refined.y - g.y).abs();
            errs[2] += (refined.z - g.z).abs();
            errs[3] += (refined.l / g.l).ln().abs();
            let dyaw = wrap_angle(refined.theta - g.theta).abs();
            errs[4] += dyaw.min(std::f64::consts::PI - dyaw);
            errs[5] += 1.0;
        }
    }
    for (name, (p, r, n)) in &buckets {
        println!(
            "{name}: n={n} proposal_iou={:.3} refined_iou={:.3}",
            p / *n as f64,
            r / *n as f64
        );
    }
    let n = errs[5];
    println!(
        "refined errs: |dx|={:.3} |dy|={:.3} |dz|={:.3} |ln l|={:.3} |dyaw|={:.3} (n={n})",
        errs[0] / n,
        errs[1] / n,
        errs[2] / n,
        errs[3] / n,
        errs[4] / n
    );
}
