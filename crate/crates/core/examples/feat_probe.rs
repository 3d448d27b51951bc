// Temporary: verify gathered point features actually encode the center
// offset target. Usage: feat_probe <dataset.jsonl>
use roifusion_core::decoder::encode_residuals;
use roifusion_core::model::{extract_roi_features, ModelConfig};
use roifusion_core::scene::read_dataset;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenes = read_dataset(std::path::Path::new(&args[1])).unwrap();
    let cfg = ModelConfig {
        channels: 16,
        heads: 4,
        encoder_layers: 3,
        points_per_roi: 32,
        roi_grid: 5,
        image_channels: 8,
        lidar_only: true,
        ..ModelConfig::default()
    };
    for scene in scenes.iter().take(4) {
        for (idx, prop) in scene.proposals.iter().enumerate().take(2) {
            let gt = &scene.gt_boxes[0].box3d;
            let target = encode_residuals(&prop.box3d, gt);
            let feats = extract_roi_features(&scene.points, &[], &prop.box3d, &cfg, 7, None).unwrap();
            let n = feats.point_features.rows();
            let real: Vec<usize> = (0..n).filter(|&i| feats.pad_mask[i]).collect();
            let mean = |col: usize| -> f64 {
                real.iter().map(|&i| feats.point_features.at(i, col)).sum::<f64>() / real.len() as f64
            };
            let diag = (prop.box3d.l * prop.box3d.l + prop.box3d.w * prop.box3d.w).sqrt();
            println!(
                "scene {} prop {idx}: target dx={:+.3} dy={:+.3} | mean local x={:+.3} y={:+.3} (expect ~= target*diag={:+.3},{:+.3}) | n_real={}",
                scene.id, target.dx, target.dy, mean(24), mean(25),
                target.dx * diag, target.dy * diag, real.len()
            );
        }
    }
}
