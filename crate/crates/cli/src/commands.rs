//! The gen / train / refine / eval subcommands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use roifusion_core::config::ConfigMap;
use roifusion_core::decoder::apply_residuals;
use roifusion_core::evalkit::{bucketize_and_report, render_table, Detection, EvalConfig, IouKind};
use roifusion_core::geometry::Box3D;
use roifusion_core::model::{extract_roi_features, ModelConfig, RefineNet};
use roifusion_core::roi::SyntheticBackbone;
use roifusion_core::scene::{
    generate_scene, scene_seed, DatasetReader, DatasetWriter, GenConfig, Scene,
};
use roifusion_core::train::{train as run_training, TrainConfig};
use roifusion_tensor::checkpoint;

use crate::manifest::ManifestBuilder;
use crate::CliError;

fn load_config(path: Option<&Path>) -> Result<ConfigMap, CliError> {
    match path {
        Some(p) => Ok(ConfigMap::from_file(p)?),
        None => Ok(ConfigMap::empty()),
    }
}

fn require_out(out: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    out.map(Path::to_path_buf).ok_or_else(|| {
        CliError::Config(format!("`{command}` requires --out <path>"))
    })
}

pub fn gen(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let out = require_out(out, "gen")?;
    let mut cfg_map = load_config(config)?;
    let mut gen_cfg = GenConfig::from_config(&mut cfg_map)?;
    cfg_map.ensure_consumed_sections(&["gen."], &["gen.", "model.", "train.", "eval."])?;
    if let Some(s) = seed {
        gen_cfg.seed = s;
    }

    let manifest = ManifestBuilder::new("gen", gen_cfg.seed)
        .config(serde_json::to_value(&gen_cfg).expect("config serializes"));

    let mut writer = DatasetWriter::create(&out)?;
    for index in 0..gen_cfg.scenes {
        let scene = generate_scene(
            &gen_cfg,
            index as u64,
            scene_seed(gen_cfg.seed, index as u64),
        )?;
        writer.write_scene(&scene)?;
    }
    let count = writer.finish()?;
    println!("wrote {count} scenes to {}", out.display());
    manifest.output(&out).write(&out)?;
    Ok(())
}

pub fn train(
    dataset: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lidar_only: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let out = require_out(out, "train")?;
    let mut cfg_map = load_config(config)?;
    let mut model_cfg = ModelConfig::from_config(&mut cfg_map)?;
    let mut train_cfg = TrainConfig::from_config(&mut cfg_map)?;
    cfg_map.ensure_consumed_sections(&["model.", "train."], &["gen.", "model.", "train.", "eval."])?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if lidar_only {
        model_cfg.lidar_only = true;
        model_cfg.cross_attention = false;
    }

    let scenes: Vec<Scene> = roifusion_core::scene::read_dataset(dataset)?;
    let n_rois: usize = scenes.iter().map(|s| s.proposals.len()).sum();
    println!(
        "training on {} RoIs from {} scenes ({})",
        n_rois,
        scenes.len(),
        if model_cfg.lidar_only {
            "LiDAR-only"
        } else {
            "fused"
        }
    );

    let metrics_path = out.with_extension("metrics.jsonl");
    let mut metrics_file = BufWriter::new(File::create(&metrics_path)?);
    let mut metrics_err = None;
    let outcome = run_training(&scenes, model_cfg.clone(), &train_cfg, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        println!("{line}");
        if let Err(e) = writeln!(metrics_file, "{line}") {
            metrics_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = metrics_err {
        return Err(e.into());
    }
    metrics_file.flush().map_err(CliError::from)?;

    checkpoint::save(&out, &outcome.net.params).map_err(|e| CliError::Other(e.to_string()))?;
    println!("checkpoint written to {}", out.display());

    let snapshot = serde_json::json!({
        "model": model_cfg,
        "train": train_cfg,
    });
    ManifestBuilder::new("train", train_cfg.seed)
        .config(snapshot)
        .input("dataset", dataset)
        .output(&out)
        .output(&metrics_path)
        .write(&out)?;
    Ok(())
}

/// One refined detection, line-delimited JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: u64,
    /// x, y, z, l, h, w, theta of the refined box.
    pub box3d: [f64; 7],
    /// Sigmoid confidence.
    pub score: f64,
    pub source_proposal: [f64; 7],
    pub source_score: f64,
}

pub fn refine(
    dataset: &Path,
    ckpt_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    calib_jitter: f64,
    lidar_only: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let out = require_out(out, "refine")?;
    let mut cfg_map = load_config(config)?;
    let mut model_cfg = ModelConfig::from_config(&mut cfg_map)?;
    // Tolerate a config file that also carries train.* keys.
    let _ = TrainConfig::from_config(&mut cfg_map)?;
    cfg_map.ensure_consumed_sections(&["model.", "train."], &["gen.", "model.", "train.", "eval."])?;
    if lidar_only {
        model_cfg.lidar_only = true;
        model_cfg.cross_attention = false;
    }
    let seed = seed.unwrap_or(0);

    let params = checkpoint::load(ckpt_path).map_err(|e| CliError::Config(e.to_string()))?;
    let net = RefineNet::from_params(model_cfg.clone(), params)?;
    let backbone = (!model_cfg.lidar_only)
        .then(|| SyntheticBackbone::init(model_cfg.image_channels, model_cfg.backbone_seed));

    let mut writer = BufWriter::new(File::create(&out)?);
    let mut scene_count = 0usize;
    let mut det_count = 0usize;
    for scene in DatasetReader::open(dataset)? {
        let scene = scene?;
        let cams: Vec<_> = match &backbone {
            Some(bb) => scene
                .cameras
                .iter()
                .map(|c| (c.model.clone(), bb.apply(&c.image)))
                .collect(),
            None => Vec::new(),
        };
        for (idx, proposal) in scene.proposals.iter().enumerate() {
            let gather_seed = scene_seed(seed ^ scene.id, idx as u64);
            let jitter = (calib_jitter > 0.0)
                .then(|| (calib_jitter, scene_seed(seed ^ scene.id ^ 0xCA11B, idx as u64)));
            let feats = extract_roi_features(
                &scene.points,
                &cams,
                &proposal.box3d,
                &model_cfg,
                gather_seed,
                jitter,
            )
            .map_err(|e| CliError::Other(e.to_string()))?;
            let (residual, logit) = net.refine_one(&feats)?;
            let refined = apply_residuals(&proposal.box3d, &residual)
                .map_err(|e| CliError::Other(e.to_string()))?;
            let record = DetectionRecord {
                scene_id: scene.id,
                box3d: [
                    refined.x,
                    refined.y,
                    refined.z,
                    refined.l,
                    refined.h,
                    refined.w,
                    refined.theta,
                ],
                score: 1.0 / (1.0 + (-logit).exp()),
                source_proposal: [
                    proposal.box3d.x,
                    proposal.box3d.y,
                    proposal.box3d.z,
                    proposal.box3d.l,
                    proposal.box3d.h,
                    proposal.box3d.w,
                    proposal.box3d.theta,
                ],
                source_score: proposal.score,
            };
            writeln!(
                writer,
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            )?;
            det_count += 1;
        }
        scene_count += 1;
    }
    writer.flush()?;
    println!(
        "refined {det_count} proposals across {scene_count} scenes -> {}",
        out.display()
    );

    ManifestBuilder::new("refine", seed)
        .config(serde_json::json!({
            "model": model_cfg,
            "calib_jitter": calib_jitter,
        }))
        .input("dataset", dataset)
        .input("checkpoint", ckpt_path)
        .output(&out)
        .write(&out)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, CliError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Other(format!("detections line {}: {e}", idx + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

fn detections_by_scene(
    records: &[DetectionRecord],
    scenes: &[Scene],
) -> Result<Vec<Vec<Detection>>, CliError> {
    let index: BTreeMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut grouped = vec![Vec::new(); scenes.len()];
    for r in records {
        let Some(&i) = index.get(&r.scene_id) else {
            return Err(CliError::Config(format!(
                "detections reference scene id {} which is not in the dataset",
                r.scene_id
            )));
        };
        let b = r.box3d;
        grouped[i].push(Detection {
            box3d: Box3D::new(b[0], b[1], b[2], b[3], b[4], b[5], b[6])
                .map_err(|e| CliError::Other(format!("invalid detection box: {e}")))?,
            score: r.score,
            class_id: 0,
        });
    }
    Ok(grouped)
}

pub fn eval(
    dataset: &Path,
    detections: Option<&Path>,
    proposals: bool,
    config: Option<&Path>,
    plot: Option<&Path>,
    iou: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let out = require_out(out, "eval")?;
    if detections.is_none() && !proposals {
        return Err(CliError::Config(
            "`eval` needs --detections <path> and/or --proposals".to_string(),
        ));
    }
    let mut cfg_map = load_config(config)?;
    let recall_positions = cfg_map
        .usize_or("eval.recall_positions", 11)
        .map_err(CliError::from)?;
    cfg_map.ensure_consumed_sections(&["eval."], &["gen.", "model.", "train.", "eval."])?;
    let iou_kind = match iou {
        "bev" => IouKind::Bev,
        "3d" => IouKind::ThreeD,
        other => {
            return Err(CliError::Config(format!(
                "--iou expects `3d` or `bev`, got `{other}`"
            )))
        }
    };
    let eval_cfg = EvalConfig {
        iou_kind,
        recall_positions,
        ..EvalConfig::default()
    };

    let scenes = roifusion_core::scene::read_dataset(dataset)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.gt_boxes.clone()).collect();

    let mut sources: Vec<(String, Vec<Vec<Detection>>)> = Vec::new();
    if proposals {
        let grouped: Vec<Vec<Detection>> = scenes
            .iter()
            .map(|s| {
                s.proposals
                    .iter()
                    .map(|p| Detection {
                        box3d: p.box3d,
                        score: p.score,
                        class_id: 0,
                    })
                    .collect()
            })
            .collect();
        sources.push(("proposals".to_string(), grouped));
    }
    if let Some(det_path) = detections {
        let records = read_detections(det_path)?;
        sources.push((
            "refined".to_string(),
            detections_by_scene(&records, &scenes)?,
        ));
    }

    let mut reports = Vec::new();
    for (name, grouped) in &sources {
        let paired: Vec<_> = grouped
            .iter()
            .zip(&gts)
            .map(|(d, g)| (d.clone(), g.clone()))
            .collect();
        reports.push((name.clone(), bucketize_and_report(&paired, &eval_cfg)));
    }

    // Machine-readable rows, one line each, tagged by source.
    let mut writer = BufWriter::new(File::create(&out)?);
    for (name, report) in &reports {
        for row in &report.rows {
            let mut value = serde_json::to_value(row).expect("row serializes");
            let obj = value.as_object_mut().expect("row is an object");
            obj.insert("source".to_string(), serde_json::json!(name));
            obj.insert(
                "recall_positions".to_string(),
                serde_json::json!(report.recall_positions),
            );
            writeln!(writer, "{}", serde_json::Value::Object(obj.clone()))?;
        }
    }
    writer.flush()?;

    let named: Vec<(&str, &roifusion_core::evalkit::EvalReport)> = reports
        .iter()
        .map(|(n, r)| (n.as_str(), r))
        .collect();
    print!("{}", render_table(&named));

    if let Some(plot_dir) = plot {
        std::fs::create_dir_all(plot_dir)?;
        crate::plot::write_plots(plot_dir, &sources, &gts, &eval_cfg)?;
        println!("plots written to {}", plot_dir.display());
    }

    ManifestBuilder::new("eval", 0)
        .config(serde_json::json!({
            "iou_kind": iou,
            "recall_positions": recall_positions,
            "sources": sources.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        }))
        .input("dataset", dataset)
        .output(&out)
        .write(&out)?;
    Ok(())
}
