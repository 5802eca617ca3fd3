use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use dynseg::backbone::{argmax_rows, forward_backbone};
use dynseg::checks::{gradient_suite, oracle_suite, CheckOutcome};
use dynseg::clustering::cluster_homogeneous;
use dynseg::losses::LossConfig;
use dynseg::metrics::{evaluate, gt_instances, SceneResult};
use dynseg::pipeline::{
    read_predictions, run_inference, run_oracle_inference, write_predictions, InferenceConfig,
    InstancePrediction, PredictionRecord,
};
use dynseg::scene::{generate_dataset, oracle_predictions, read_scene, write_scene};
use dynseg::tensor::{read_checkpoint, write_checkpoint};
use dynseg::train::{train as fit, write_loss_curve};
use dynseg::{ClusteringConfig, Model, Point3, PointScene, SceneConfig};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::{DataArgs, Failure};

type Outcome = Result<(), Failure>;

const SCENE_EXT: &str = "scene";
const CHECKPOINT_FILE: &str = "model.ckpt";
const CONFIG_FILE: &str = "config.json";

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn make_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Scenes in `data`, sorted by file name, as `(stem, scene)`.
fn load_scenes(data: &DataArgs) -> anyhow::Result<Vec<(String, PointScene)>> {
    let mut paths: Vec<_> = fs::read_dir(&data.data)
        .with_context(|| format!("listing {}", data.data.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == SCENE_EXT));
    paths.sort();
    let take = data.take.unwrap_or(usize::MAX);
    let scenes: Vec<(String, PointScene)> = paths
        .iter()
        .skip(data.skip)
        .take(take)
        .map(|p| {
            let stem = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let s = read_scene(BufReader::new(f))
                .with_context(|| format!("reading {}", p.display()))?;
            Ok((stem, s))
        })
        .collect::<anyhow::Result<_>>()?;
    if scenes.is_empty() {
        bail!("no .{SCENE_EXT} files selected in {}", data.data.display());
    }
    // scene files carry no generator settings; `gen` leaves them beside the scenes
    let Some(sc) = generator_config(&data.data)? else {
        return Ok(scenes);
    };
    scenes
        .into_iter()
        .map(|(name, mut s)| {
            if s.num_classes != sc.num_classes() {
                bail!(
                    "scene `{name}` has {} classes, {CONFIG_FILE} implies {}",
                    s.num_classes,
                    sc.num_classes()
                );
            }
            s.config = Some(sc.clone());
            Ok((name, s))
        })
        .collect()
}

fn generator_config(dir: &Path) -> anyhow::Result<Option<SceneConfig>> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let sc = serde_json::from_value(doc["config"]["scene"].clone())
        .with_context(|| format!("scene block of {}", path.display()))?;
    Ok(Some(sc))
}

fn clustering_for(cfg: &RunConfig, scene: &PointScene) -> ClusteringConfig {
    let radius = cfg.radius_for(scene.config.as_ref());
    match &scene.config {
        Some(sc) => sc.clustering(radius),
        None => ClusteringConfig::new(radius, scene.num_classes, [0]),
    }
}

fn inference_for(cfg: &RunConfig, scene: &PointScene) -> InferenceConfig {
    let mut ic = InferenceConfig::new(clustering_for(cfg, scene));
    ic.min_cluster = cfg.min_cluster_for(scene.config.is_some());
    ic.nms_iou = cfg.nms_iou;
    ic
}

fn load_model(cfg: &mut RunConfig, dir: &Path) -> anyhow::Result<Model> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let saved: serde_json::Value = serde_json::from_str(&text)?;
    let trained: RunConfig = serde_json::from_value(saved["config"].clone())
        .with_context(|| format!("config block of {}", path.display()))?;
    let path = dir.join(CHECKPOINT_FILE);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let params = read_checkpoint(BufReader::new(f))?;
    // the checkpoint fixes the architecture; flags only steer inference
    cfg.model = trained.model.clone();
    let model = Model {
        config: trained.model,
        params,
    };
    model.check_params()?;
    Ok(model)
}

pub fn gen(cfg: &RunConfig, count: usize, out: &Path) -> Outcome {
    make_dir(out)?;
    let scenes = generate_dataset(&cfg.scene, count)?;
    for (i, s) in scenes.iter().enumerate() {
        let mut w = create(&out.join(format!("scene_{i:04}.{SCENE_EXT}")))?;
        write_scene(&mut w, s)?;
        w.flush()?;
    }
    write_json(
        &out.join(CONFIG_FILE),
        &json!({ "config": cfg.to_json(), "scenes": count }),
    )?;
    eprintln!("wrote {count} scenes to {}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &DataArgs, out: &Path) -> Outcome {
    let scenes: Vec<PointScene> = load_scenes(data)?.into_iter().map(|(_, s)| s).collect();
    let first = &scenes[0];
    if scenes
        .iter()
        .any(|s| s.num_classes != first.num_classes || s.feature_dim != first.feature_dim)
    {
        return Err(anyhow!("scenes disagree on class count or feature width").into());
    }
    let mut cfg = cfg.clone();
    cfg.model.num_classes = first.num_classes;
    cfg.model.input_features = first.feature_dim;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut lc = LossConfig::new(clustering_for(&cfg, first));
    lc.centroid_norm = cfg.centroid_norm;
    let every = (cfg.train.steps / 20).max(1);
    let result = fit(&scenes, model, &lc, &cfg.train, |r| {
        if r.step == 1 || r.step % every == 0 {
            eprintln!(
                "step {:>6}  seg {:.4}  ctr {:.4}  mask {:.4}  dice {:.4}  total {:.4}",
                r.step, r.seg, r.ctr, r.mask, r.dice, r.total
            );
        }
    })?;
    make_dir(out)?;
    let mut w = create(&out.join(CHECKPOINT_FILE))?;
    write_checkpoint(&mut w, &result.model.params)?;
    w.flush()?;
    let mut w = create(&out.join("loss_curve.jsonl"))?;
    write_loss_curve(&mut w, &result.curve)?;
    w.flush()?;
    write_json(
        &out.join(CONFIG_FILE),
        &json!({ "config": cfg.to_json(), "train_scenes": scenes.len() }),
    )?;
    eprintln!("wrote checkpoint to {}", out.display());
    Ok(())
}

/// Predictions per scene from the model, or from ground-truth heads.
fn predict(
    cfg: &RunConfig,
    scenes: &[(String, PointScene)],
    model: Option<&Model>,
    offset_noise: f64,
) -> dynseg::Result<Vec<Vec<InstancePrediction>>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, (_, s))| {
            let ic = inference_for(cfg, s);
            match model {
                Some(m) => run_inference(s, m, &ic),
                None => {
                    let (logits, offsets) =
                        oracle_predictions(s, offset_noise, cfg.seed + i as u64);
                    run_oracle_inference(&s.coords, &logits, &offsets, &ic)
                }
            }
        })
        .collect()
}

pub fn infer(
    cfg: &RunConfig,
    data: &DataArgs,
    checkpoint: Option<&Path>,
    offset_noise: f64,
    out: &Path,
) -> Outcome {
    let scenes = load_scenes(data)?;
    let mut cfg = cfg.clone();
    let model = checkpoint.map(|d| load_model(&mut cfg, d)).transpose()?;
    let preds = predict(&cfg, &scenes, model.as_ref(), offset_noise)?;
    let records: Vec<PredictionRecord> = scenes
        .iter()
        .zip(&preds)
        .flat_map(|((name, _), ps)| ps.iter().map(move |p| PredictionRecord::new(name, p)))
        .collect();
    make_dir(out)?;
    let mut w = create(&out.join("predictions.jsonl"))?;
    write_predictions(&mut w, &records)?;
    w.flush()?;
    let source = if model.is_some() { "model" } else { "oracle" };
    write_json(
        &out.join(CONFIG_FILE),
        &json!({
            "config": cfg.to_json(),
            "source": source,
            "offset_noise": offset_noise,
            "scenes": scenes.iter().map(|s| &s.0).collect::<Vec<_>>(),
        }),
    )?;
    eprintln!(
        "wrote {} predictions for {} scenes to {}",
        records.len(),
        scenes.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, data: &DataArgs, predictions: &Path, out: &Path) -> Outcome {
    let scenes = load_scenes(data)?;
    let f =
        File::open(predictions).with_context(|| format!("opening {}", predictions.display()))?;
    let records = read_predictions(BufReader::new(f))?;
    let mut by_scene: BTreeMap<&str, Vec<InstancePrediction>> = scenes
        .iter()
        .map(|(n, _)| (n.as_str(), Vec::new()))
        .collect();
    for r in &records {
        let slot = by_scene
            .get_mut(r.scene.as_str())
            .ok_or_else(|| anyhow!("prediction for unknown scene `{}`", r.scene))?;
        slot.push(r.prediction()?);
    }
    let results: Vec<SceneResult> = scenes
        .iter()
        .map(|(n, s)| {
            let preds = by_scene.remove(n.as_str()).unwrap_or_default();
            if let Some(p) = preds.iter().find(|p| p.mask.len() != s.len()) {
                bail!(
                    "scene `{n}` has {} points, prediction covers {}",
                    s.len(),
                    p.mask.len()
                );
            }
            Ok(SceneResult {
                preds,
                gts: gt_instances(s),
            })
        })
        .collect::<anyhow::Result<_>>()?;
    let coords: Vec<&[Point3]> = scenes.iter().map(|(_, s)| s.coords.as_slice()).collect();
    let report = evaluate(&results, &coords)?;
    print!("{}", report.to_text());
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    write_json(
        out,
        &json!({
            "config": cfg.to_json(),
            "scenes": scenes.len(),
            "predictions": records.len(),
            "metrics": report,
        }),
    )?;
    Ok(())
}

/// Share of a cluster's members carrying its most frequent ground-truth id.
fn purity(members: &[usize], gt: &[i32]) -> f64 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &m in members {
        *counts.entry(gt[m]).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / members.len() as f64
}

pub fn sweep_radius(
    cfg: &RunConfig,
    data: &DataArgs,
    checkpoint: Option<&Path>,
    radii: &[f64],
    offset_noise: f64,
    out: &Path,
) -> Outcome {
    let scenes = load_scenes(data)?;
    let mut cfg = cfg.clone();
    let model = checkpoint.map(|d| load_model(&mut cfg, d)).transpose()?;
    let d_min = scenes[0].1.config.as_ref().unwrap_or(&cfg.scene).d_min;
    let radii: Vec<f64> = if radii.is_empty() {
        [0.25, 0.5, 0.75].iter().map(|f| f * d_min).collect()
    } else {
        radii.to_vec()
    };
    // heads do not depend on the radius
    let heads: Vec<(Vec<usize>, Vec<Point3>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, (_, s))| match &model {
            Some(m) => {
                let o = forward_backbone(s, &m.params, &m.config)?;
                Ok((o.semantic_labels(), o.offset_points()))
            }
            None => {
                let (logits, offsets) = oracle_predictions(s, offset_noise, cfg.seed + i as u64);
                Ok((argmax_rows(&logits), offsets))
            }
        })
        .collect::<dynseg::Result<_>>()?;
    let coords: Vec<&[Point3]> = scenes.iter().map(|(_, s)| s.coords.as_slice()).collect();
    let mut table = String::new();
    table.push_str("# dynseg sweep-radius\n");
    table.push_str(&format!(
        "# source {}  offset_noise {offset_noise}\n",
        if model.is_some() { "model" } else { "oracle" }
    ));
    table.push_str(&format!(
        "# config {}\n",
        serde_json::to_string(&cfg.to_json()).expect("json")
    ));
    table.push_str("radius\tmAP\tAP@50\tclusters\tpurity\n");
    for &r in &radii {
        let mut run = cfg.clone();
        run.radius = Some(r);
        let mut n_clusters = 0;
        let mut purity_sum = 0.0;
        let mut results = Vec::with_capacity(scenes.len());
        for (i, (_, s)) in scenes.iter().enumerate() {
            let ic = inference_for(&run, s);
            let (labels, offsets) = &heads[i];
            let clusters = cluster_homogeneous(&s.coords, offsets, labels, &ic.clustering)?;
            for c in clusters.iter().filter(|c| c.size() >= ic.min_cluster) {
                n_clusters += 1;
                purity_sum += purity(&c.members, &s.gt_instance);
            }
            let preds = match &model {
                Some(m) => run_inference(s, m, &ic)?,
                None => {
                    let (logits, offsets) =
                        oracle_predictions(s, offset_noise, cfg.seed + i as u64);
                    run_oracle_inference(&s.coords, &logits, &offsets, &ic)?
                }
            };
            results.push(SceneResult {
                preds,
                gts: gt_instances(s),
            });
        }
        let report = evaluate(&results, &coords)?;
        let mean_purity = if n_clusters == 0 {
            0.0
        } else {
            purity_sum / n_clusters as f64
        };
        table.push_str(&format!(
            "{r:.6}\t{:.6}\t{:.6}\t{n_clusters}\t{mean_purity:.6}\n",
            report.map, report.ap50
        ));
    }
    print!("{table}");
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    fs::write(out, table).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn report_checks(rows: &[CheckOutcome], header: serde_json::Value, out: Option<&Path>) -> Outcome {
    for r in rows {
        println!(
            "{:<28} {:>10.3e}  tol {:>8.1e}  {}",
            r.name,
            r.value,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = out {
        let mut doc = header;
        doc["checks"] = serde_json::to_value(rows).expect("plain data");
        write_json(out, &doc)?;
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Tolerance(failed))
    }
}

pub fn grad_check(instances: usize, epsilon: f64, tolerance: f64, out: Option<&Path>) -> Outcome {
    let rows = gradient_suite(instances, epsilon, tolerance)?;
    report_checks(
        &rows,
        json!({ "instances": instances, "epsilon": epsilon, "tolerance": tolerance }),
        out,
    )
}

pub fn selfcheck(cfg: &RunConfig, out: Option<&Path>) -> Outcome {
    let rows = oracle_suite(cfg.seed)?;
    report_checks(&rows, json!({ "seed": cfg.seed }), out)
}
