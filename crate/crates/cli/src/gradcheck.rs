//! The `gradcheck` command: central finite differences against every
//! learnable block — tape primitives first, then the network blocks
//! (embedding, each encoder layer, decoder, heads) and the composite
//! confidence + regression objective.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use roifusion_core::config::ConfigMap;
use roifusion_core::decoder::BoxResidual;
use roifusion_core::model::{ModelConfig, RefineNet, RoiFeatures};
use roifusion_tensor::gradcheck::finite_difference_check;
use roifusion_tensor::nn::{multi_head_attention, AttentionVars};
use roifusion_tensor::{xavier_uniform, ParamSet, Tape, Tensor, TensorError};

use crate::manifest::ManifestBuilder;
use crate::CliError;

const FAIL_THRESHOLD: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Serialize)]
struct BlockReport {
    block: String,
    max_rel_err: f64,
    coords: usize,
    pass: bool,
}

/// Small-but-complete default: full depth (3 encoder layers), tiny widths.
fn default_gradcheck_config() -> ModelConfig {
    ModelConfig {
        channels: 12,
        heads: 4,
        encoder_layers: 3,
        points_per_roi: 4,
        roi_grid: 2,
        image_channels: 3,
        ..ModelConfig::default()
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.5..1.5)).collect())
        .expect("shape consistent")
}

fn rand_features(cfg: &ModelConfig, rng: &mut ChaCha8Rng, image_valid: bool) -> RoiFeatures {
    RoiFeatures {
        point_features: rand_tensor(&[cfg.points_per_roi, cfg.point_feature_dim()], rng),
        pad_mask: vec![true; cfg.points_per_roi],
        image_tokens: rand_tensor(&[cfg.roi_grid * cfg.roi_grid, cfg.image_channels], rng),
        image_valid,
    }
}

/// Composite two-RoI objective (one positive with regression target and a
/// valid image, one negative without): the full loss without any first-stage
/// term.
fn batch_loss(
    net: &RefineNet,
    feats: &[RoiFeatures],
    labels: &[f64],
    reg_targets: &[Option<BoxResidual>],
) -> Result<(f64, Vec<(String, Tensor)>), TensorError> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let b = feats.len() as f64;
    let b_pos = reg_targets.iter().flatten().count().max(1) as f64;
    let mut total = None;
    for ((f, label), reg) in feats.iter().zip(labels).zip(reg_targets) {
        let out = net.forward(&mut tape, &bound, f).expect("forward");
        let bce = tape.bce_with_logits_mean(out.logit, &[*label])?;
        let mut roi = tape.scale(bce, 1.0 / b);
        if let Some(target) = reg {
            let tt = Tensor::from_vec(&[1, 7], target.to_array().to_vec()).expect("shape");
            let sl1 = tape.smooth_l1_sum(out.residual, &tt)?;
            let scaled = tape.scale(sl1, 1.0 / b_pos);
            roi = tape.add(roi, scaled)?;
        }
        total = Some(match total {
            None => roi,
            Some(t) => tape.add(t, roi)?,
        });
    }
    let loss = total.expect("non-empty batch");
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic = net
        .params
        .iter()
        .enumerate()
        .map(|(idx, p)| {
            let g = grads
                .get(bound.vars[idx])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (p.name.clone(), g)
        })
        .collect();
    Ok((value, analytic))
}

fn check_primitive(
    name: &str,
    build: impl Fn(&ParamSet) -> Result<(f64, Vec<(String, Tensor)>), TensorError>,
    params: ParamSet,
) -> Result<BlockReport, CliError> {
    let (_, analytic) = build(&params).map_err(|e| CliError::Other(e.to_string()))?;
    let report = finite_difference_check(&params, &analytic, |p| build(p).map(|(v, _)| v), EPS)
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(BlockReport {
        block: name.to_string(),
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
        pass: report.max_rel_err < FAIL_THRESHOLD,
    })
}

fn primitive_blocks(rng: &mut ChaCha8Rng) -> Result<Vec<BlockReport>, CliError> {
    let mut reports = Vec::new();

    // linear: x @ W + b against a smooth-L1 pull toward a fixed target.
    {
        let mut params = ParamSet::new();
        params.add("w", xavier_uniform(3, 4, rng)).unwrap();
        params.add("b", rand_tensor(&[4], rng)).unwrap();
        let x = rand_tensor(&[5, 3], rng);
        let target = rand_tensor(&[5, 4], rng);
        reports.push(check_primitive(
            "linear",
            move |p| {
                let mut tape = Tape::new();
                let w = tape.leaf(p.get("w").unwrap().clone());
                let b = tape.leaf(p.get("b").unwrap().clone());
                let xv = tape.constant(x.clone());
                let y = tape.linear(xv, w, b)?;
                let loss = tape.smooth_l1_sum(y, &target)?;
                let v = tape.value(loss).item();
                let g = tape.backward(loss)?;
                Ok((
                    v,
                    vec![
                        ("w".to_string(), g.get(w).unwrap().clone()),
                        ("b".to_string(), g.get(b).unwrap().clone()),
                    ],
                ))
            },
            params,
        )?);
    }

    // softmax: rows mixed through a fixed matrix so the gradient is nonzero.
    {
        let mut params = ParamSet::new();
        params.add("x", rand_tensor(&[3, 5], rng)).unwrap();
        let mix = rand_tensor(&[5, 2], rng);
        let target = rand_tensor(&[3, 2], rng);
        reports.push(check_primitive(
            "softmax",
            move |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let sm = tape.softmax_rows(x)?;
                let m = tape.constant(mix.clone());
                let y = tape.matmul(sm, m)?;
                let loss = tape.smooth_l1_sum(y, &target)?;
                let v = tape.value(loss).item();
                let g = tape.backward(loss)?;
                Ok((v, vec![("x".to_string(), g.get(x).unwrap().clone())]))
            },
            params,
        )?);
    }

    // layer_norm: input, gamma and beta all learnable.
    {
        let mut params = ParamSet::new();
        params.add("x", rand_tensor(&[4, 6], rng)).unwrap();
        params.add("gamma", rand_tensor(&[6], rng)).unwrap();
        params.add("beta", rand_tensor(&[6], rng)).unwrap();
        let target = rand_tensor(&[4, 6], rng);
        reports.push(check_primitive(
            "layer_norm",
            move |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(p.get("x").unwrap().clone());
                let gamma = tape.leaf(p.get("gamma").unwrap().clone());
                let beta = tape.leaf(p.get("beta").unwrap().clone());
                let y = tape.layer_norm(x, gamma, beta, 1e-5)?;
                let loss = tape.smooth_l1_sum(y, &target)?;
                let v = tape.value(loss).item();
                let g = tape.backward(loss)?;
                Ok((
                    v,
                    vec![
                        ("x".to_string(), g.get(x).unwrap().clone()),
                        ("gamma".to_string(), g.get(gamma).unwrap().clone()),
                        ("beta".to_string(), g.get(beta).unwrap().clone()),
                    ],
                ))
            },
            params,
        )?);
    }

    // attention: all four projections of a 2-head block.
    {
        let c = 8usize;
        let mut params = ParamSet::new();
        for n in ["wq", "wk", "wv", "wo"] {
            params.add(n, xavier_uniform(c, c, rng)).unwrap();
        }
        for n in ["bq", "bk", "bv", "bo"] {
            params.add(n, rand_tensor(&[c], rng)).unwrap();
        }
        let x = rand_tensor(&[5, c], rng);
        let target = rand_tensor(&[5, c], rng);
        reports.push(check_primitive(
            "attention",
            move |p| {
                let mut tape = Tape::new();
                let bind = |t: &mut Tape, n: &str| t.leaf(p.get(n).unwrap().clone());
                let av = AttentionVars {
                    wq: bind(&mut tape, "wq"),
                    bq: bind(&mut tape, "bq"),
                    wk: bind(&mut tape, "wk"),
                    bk: bind(&mut tape, "bk"),
                    wv: bind(&mut tape, "wv"),
                    bv: bind(&mut tape, "bv"),
                    wo: bind(&mut tape, "wo"),
                    bo: bind(&mut tape, "bo"),
                };
                let vars = [av.wq, av.bq, av.wk, av.bk, av.wv, av.bv, av.wo, av.bo];
                let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
                let xv = tape.constant(x.clone());
                let y = multi_head_attention(&mut tape, xv, xv, xv, &av, 2)?;
                let loss = tape.smooth_l1_sum(y, &target)?;
                let v = tape.value(loss).item();
                let g = tape.backward(loss)?;
                let out = names
                    .iter()
                    .zip(vars)
                    .map(|(n, var)| (n.to_string(), g.get(var).unwrap().clone()))
                    .collect();
                Ok((v, out))
            },
            params,
        )?);
    }
    Ok(reports)
}

pub fn run(
    config: Option<&Path>,
    seed: Option<u64>,
    block_filter: Option<&str>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg_map = match config {
        Some(p) => ConfigMap::from_file(p)?,
        None => ConfigMap::empty(),
    };
    let model_cfg = match config {
        Some(_) => {
            let cfg = ModelConfig::from_config(&mut cfg_map)?;
            cfg_map.ensure_consumed_sections(&["model."], &["gen.", "model.", "train.", "eval."])?;
            cfg
        }
        None => default_gradcheck_config(),
    };
    let seed = seed.unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut reports = primitive_blocks(&mut rng)?;

    // Network blocks over the composite objective.
    let net = RefineNet::init(model_cfg.clone(), seed)?;
    let feats = vec![
        rand_features(&model_cfg, &mut rng, true),
        rand_features(&model_cfg, &mut rng, false),
    ];
    let labels = vec![1.0, 0.0];
    let reg_targets = vec![
        Some(BoxResidual {
            dx: 0.15,
            dy: -0.1,
            dz: 0.06,
            dl: 0.12,
            dh: -0.05,
            dw: 0.04,
            dtheta: 0.3,
        }),
        None,
    ];

    let (_, full_analytic) =
        batch_loss(&net, &feats, &labels, &reg_targets).map_err(|e| CliError::Other(e.to_string()))?;

    let mut blocks: Vec<(String, Vec<(String, Tensor)>)> = Vec::new();
    let group_of = |name: &str| -> String {
        if name.starts_with("embed") || name.starts_with("img_proj") {
            "embedding".to_string()
        } else if let Some(rest) = name.strip_prefix("encoder.") {
            let layer = rest.split('.').next().expect("layer index");
            format!("encoder.{layer}")
        } else if name.starts_with("decoder") {
            "decoder".to_string()
        } else {
            "heads".to_string()
        }
    };
    for (name, grad) in &full_analytic {
        let group = group_of(name);
        match blocks.iter_mut().find(|(g, _)| *g == group) {
            Some((_, list)) => list.push((name.clone(), grad.clone())),
            None => blocks.push((group, vec![(name.clone(), grad.clone())])),
        }
    }
    blocks.push(("loss".to_string(), full_analytic));

    for (group, analytic) in blocks {
        if let Some(filter) = block_filter {
            if !group.contains(filter) {
                continue;
            }
        }
        let report = finite_difference_check(
            &net.params,
            &analytic,
            |p| {
                let probe = RefineNet::from_params(model_cfg.clone(), p.clone())
                    .expect("same shapes");
                batch_loss(&probe, &feats, &labels, &reg_targets).map(|(v, _)| v)
            },
            EPS,
        )
        .map_err(|e| CliError::Other(e.to_string()))?;
        reports.push(BlockReport {
            block: group,
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
            pass: report.max_rel_err < FAIL_THRESHOLD,
        });
    }

    if let Some(filter) = block_filter {
        reports.retain(|r| r.block.contains(filter));
        if reports.is_empty() {
            return Err(CliError::Config(format!(
                "--block `{filter}` matches no block"
            )));
        }
    }

    let mut all_pass = true;
    for r in &reports {
        println!(
            "block {:<12} max_rel_err {:>12.3e} over {:>6} coords [{}]",
            r.block,
            r.max_rel_err,
            r.coords,
            if r.pass { "pass" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    println!(
        "gradcheck {} in {:.1}s",
        if all_pass { "passed" } else { "FAILED" },
        started.elapsed().as_secs_f64()
    );

    if let Some(out_path) = out {
        let mut f = std::fs::File::create(out_path)?;
        for r in &reports {
            writeln!(f, "{}", serde_json::to_string(r).expect("report serializes"))?;
        }
        ManifestBuilder::new("gradcheck", seed)
            .config(serde_json::to_value(&model_cfg).expect("config serializes"))
            .output(out_path)
            .write(out_path)?;
    }

    if all_pass {
        Ok(())
    } else {
        Err(CliError::Verification(
            "at least one block exceeded the 1e-4 gradient error threshold".to_string(),
        ))
    }
}
