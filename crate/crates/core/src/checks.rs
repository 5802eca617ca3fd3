//! Numeric self-checks: finite-difference gradient suites and
//! oracle-equivalence suites, shared by the command-line driver and the
//! acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::build_heads;
use crate::clustering::{cluster_bruteforce_oracle, cluster_homogeneous, partition, Cluster};
use crate::dynamic::{build_decoder, build_generator, decode_instance, FilterLayout, FilterVector};
use crate::error::Result;
use crate::geometry::{dist2, GridIndex, Point3};
use crate::losses::{
    build_bce, build_centroid_loss, build_dice, build_semantic_loss, scene_loss, CentroidNorm,
    LossConfig,
};
use crate::metrics::{average_precision, GtInstance, SceneResult};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{mask_iou, run_oracle_inference, InferenceConfig, InstancePrediction};
use crate::scene::{generate_dataset, generate_scene, oracle_predictions, SceneConfig};
use crate::tensor::{check_graph_gradients, mhsa_layer, Graph, NodeId, Tensor, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst error, or number of mismatches for exact checks.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

/// Moves every parameter off its initial value. Zero-initialised biases can
/// leave ReLU inputs exactly on the kink, where central differences report
/// half the slope.
pub fn jitter_params(params: &mut TensorMap, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Small model used by the gradient suite.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        mask_dim: 4,
        decoder_hidden: 4,
        decoder_layers: 3,
        grid: 3,
        generator_channels: 4,
        generator_hidden: 6,
        heads: 2,
        transformer_layers: 1,
        ffn_hidden: 8,
        token_cell: 1.0,
        ..Default::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("length matches shape")
    .with_grad()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect()
}

fn model_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng, prefix: &str) -> Result<TensorMap> {
    let mut model = Model::init(cfg.clone(), rng.random())?;
    jitter_params(&mut model.params, rng.random());
    Ok(model
        .params
        .into_iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .collect())
}

/// Worst relative error of `build` over `instances` seeds.
fn worst_over<F>(instances: usize, epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &mut ChaCha8Rng, &mut TensorMap) -> Result<NodeId>,
{
    let mut worst = 0.0f64;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut bind = TensorMap::new();
        let out = build(&mut g, &mut rng, &mut bind)?;
        let r = check_graph_gradients(&g, &bind, out, epsilon, Some(8))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

/// Weighted sum so every output coordinate contributes a distinct slope.
fn project(g: &mut Graph, rng: &mut ChaCha8Rng, y: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random_tensor(rng, &shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference checks of every loss and differentiable module.
pub fn gradient_suite(instances: usize, epsilon: f64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let cfg = small_model_config();
    let mut out = Vec::new();
    let mut push = |name: &str, v: f64| out.push(CheckOutcome::new(name, v, tolerance));

    push(
        "grad/cross-entropy",
        worst_over(instances, epsilon, |g, rng, b| {
            b.insert("x".into(), random_tensor(rng, &[6, 4], 3.0));
            let x = g.leaf("x", &[6, 4])?;
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            build_semantic_loss(g, x, &labels)
        })?,
    );
    push(
        "grad/centroid",
        worst_over(instances, epsilon, |g, rng, b| {
            b.insert("o".into(), random_tensor(rng, &[7, 3], 1.0));
            let o = g.leaf("o", &[7, 3])?;
            let c = random_points(rng, 7);
            let t = random_points(rng, 7);
            let v: Vec<bool> = (0..7).map(|i| i == 0 || rng.random_bool(0.7)).collect();
            build_centroid_loss(g, &c, o, &t, &v, CentroidNorm::Euclidean)
        })?,
    );
    push(
        "grad/mask-bce",
        worst_over(instances, epsilon, |g, rng, b| {
            b.insert("z".into(), random_tensor(rng, &[9], 3.0));
            let z = g.leaf("z", &[9])?;
            let t: Vec<bool> = (0..9).map(|_| rng.random_bool(0.5)).collect();
            build_bce(g, z, &t)
        })?,
    );
    push(
        "grad/dice",
        worst_over(instances, epsilon, |g, rng, b| {
            b.insert("z".into(), random_tensor(rng, &[9], 3.0));
            let z = g.leaf("z", &[9])?;
            let t: Vec<bool> = (0..9).map(|_| rng.random_bool(0.5)).collect();
            build_dice(g, z, &t)
        })?,
    );
    let att = cfg.attention();
    push(
        "grad/mhsa",
        worst_over(instances, epsilon, |g, rng, b| {
            b.extend(model_params(&cfg, rng, "tf.")?);
            b.insert("x".into(), random_tensor(rng, &[5, cfg.feature_dim], 1.0));
            let x = g.leaf("x", &[5, cfg.feature_dim])?;
            let rel = g.constant(random_tensor(rng, &[25, 3], 1.0));
            let y = mhsa_layer(g, x, rel, "tf.0", &att)?;
            project(g, rng, y)
        })?,
    );
    push(
        "grad/heads",
        worst_over(instances, epsilon, |g, rng, b| {
            b.extend(model_params(&cfg, rng, "head.")?);
            b.insert("f".into(), random_tensor(rng, &[6, cfg.feature_dim], 1.0));
            let f = g.leaf("f", &[6, cfg.feature_dim])?;
            let (s, o, m) = build_heads(g, f, &cfg)?;
            let a = project(g, rng, s)?;
            let b2 = project(g, rng, o)?;
            let c = project(g, rng, m)?;
            let ab = g.add(a, b2)?;
            g.add(ab, c)
        })?,
    );
    push(
        "grad/generator",
        worst_over(instances, epsilon, |g, rng, b| {
            b.extend(model_params(&cfg, rng, "gw.")?);
            let n = 10;
            b.insert("f".into(), random_tensor(rng, &[n, cfg.feature_dim], 1.0));
            let f = g.leaf("f", &[n, cfg.feature_dim])?;
            let coords = random_points(rng, n);
            let cluster = Cluster {
                members: (0..n).collect(),
                centroid: [0.5; 3],
                label: 1,
            };
            let flat = build_generator(g, f, &cluster, &coords, &cfg)?;
            project(g, rng, flat)
        })?,
    );
    push(
        "grad/decoder",
        worst_over(instances, epsilon, |g, rng, b| {
            let layout = cfg.layout()?;
            let n = 8;
            b.insert("m".into(), random_tensor(rng, &[n, cfg.mask_dim], 1.0));
            b.insert("w".into(), random_tensor(rng, &[layout.param_count()], 1.0));
            let m = g.leaf("m", &[n, cfg.mask_dim])?;
            let w = g.leaf("w", &[layout.param_count()])?;
            let pos = random_points(rng, n);
            let on: Vec<usize> = (0..n).filter(|&i| i == 0 || rng.random_bool(0.6)).collect();
            let z = build_decoder(g, m, &pos, w, &layout, &on)?;
            let t: Vec<bool> = on.iter().map(|_| rng.random_bool(0.5)).collect();
            build_bce(g, z, &t)
        })?,
    );
    // whole loss on tiny scenes; clustering is frozen inside the graph
    let mut worst = 0.0f64;
    for seed in 0..instances as u64 {
        let scene = generate_scene(&SceneConfig {
            instances: (2, 3),
            points_per_instance: (8, 12),
            floor_density: 0.4,
            seed,
            ..Default::default()
        })?;
        let mut model = Model::init(cfg.clone(), 100 + seed)?;
        jitter_params(&mut model.params, seed);
        let lc = LossConfig {
            min_cluster_size: 1,
            max_clusters: 4,
            ..LossConfig::new(crate::ClusteringConfig::new(0.6, scene.num_classes, [0]))
        };
        let l = scene_loss(&scene, &model.params, &model.config, &lc, false)?;
        let r = check_graph_gradients(&l.graph, &model.params, l.total, epsilon, Some(4))?;
        worst = worst.max(r.max_rel_error);
    }
    push("grad/total-loss", worst);
    Ok(out)
}

fn decoder_count_by_hand(mask_dim: usize, hidden: usize, layers: usize) -> usize {
    let mut total = 0;
    let mut fan_in = mask_dim + 3;
    for l in 0..layers {
        let fan_out = if l + 1 == layers { 1 } else { hidden };
        total += (fan_in + 1) * fan_out;
        fan_in = fan_out;
    }
    total
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

fn random_results(rng: &mut ChaCha8Rng) -> Vec<SceneResult> {
    let scenes = rng.random_range(1..4);
    (0..scenes)
        .map(|_| {
            let n = 40;
            let gts: Vec<GtInstance> = (0..rng.random_range(0..5))
                .map(|_| GtInstance {
                    mask: random_mask(rng, n, 0.3),
                    category: rng.random_range(1..=3),
                })
                .collect();
            let mut preds = Vec::new();
            for z in 0..rng.random_range(0..6) {
                let p = rng.random_range(0.1..0.6);
                preds.push(InstancePrediction {
                    mask: random_mask(rng, n, p),
                    category: rng.random_range(1..=3),
                    score: rng.random_range(0..8) as f64 / 8.0 + 0.05,
                    source_cluster: z,
                });
            }
            for g in &gts {
                if rng.random_bool(0.6) {
                    let mask = g.mask.iter().map(|&v| v ^ rng.random_bool(0.05)).collect();
                    preds.push(InstancePrediction {
                        mask,
                        category: g.category,
                        score: rng.random_range(0..8) as f64 / 8.0 + 0.05,
                        source_cluster: preds.len(),
                    });
                }
            }
            SceneResult { preds, gts }
        })
        .collect()
}

/// AP from scratch: rematch every prefix of the ranked list and integrate
/// the upper envelope of the resulting precision-recall points.
fn exhaustive_ap(scenes: &[SceneResult], t: f64, c: usize) -> Option<f64> {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (s, r) in scenes.iter().enumerate() {
        ranked.extend(
            (0..r.preds.len())
                .filter(|&p| r.preds[p].category == c)
                .map(|p| (s, p)),
        );
    }
    ranked.sort_by(|a, b| {
        scenes[b.0].preds[b.1]
            .score
            .total_cmp(&scenes[a.0].preds[a.1].score)
            .then(a.cmp(b))
    });
    let n_gt: usize = scenes
        .iter()
        .map(|r| r.gts.iter().filter(|g| g.category == c).count())
        .sum();
    if n_gt == 0 {
        return (!ranked.is_empty()).then_some(0.0);
    }
    let mut pr = Vec::new();
    for k in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = scenes.iter().map(|r| vec![false; r.gts.len()]).collect();
        let mut tp = 0;
        for &(s, p) in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in scenes[s].gts.iter().enumerate() {
                if gt.category != c || used[s][gi] {
                    continue;
                }
                let v = mask_iou(&scenes[s].preds[p].mask, &gt.mask).unwrap_or(0.0);
                if v >= t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[s][gi] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / k as f64, tp as f64 / n_gt as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..pr.len() {
        let p = pr[k..].iter().map(|x| x.0).fold(0.0, f64::max);
        ap += (pr[k].1 - prev_r) * p;
        prev_r = pr[k].1;
    }
    Some(ap)
}

/// Oracle-equivalence suites: grid queries, clustering, the filter layout,
/// AP, decoding confinement and radius invariance under oracle inputs.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut bad = 0usize;
    for _ in 0..20 {
        let n = rng.random_range(1..400);
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let r = rng.random_range(0.05..1.0);
        let index = GridIndex::build(&pts, rng.random_range(0.05..1.0))?;
        for q in pts.iter().take(20) {
            let mut got = index.radius_neighbors(q, r);
            got.sort_unstable();
            let want: Vec<usize> = (0..n).filter(|&j| dist2(q, &pts[j]) < r * r).collect();
            bad += usize::from(got != want);
        }
    }
    out.push(CheckOutcome::new("oracle/grid-query", bad as f64, 0.0));

    let mut bad = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(1..=1000);
        let mut pt = |s: f64| {
            [
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            ]
        };
        let coords: Vec<Point3> = (0..n).map(|_| pt(2.0)).collect();
        let offsets: Vec<Point3> = (0..n).map(|_| pt(0.3)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let cfg = crate::ClusteringConfig::new(rng.random_range(0.05..=0.5), 4, [0]);
        let a = cluster_homogeneous(&coords, &offsets, &labels, &cfg)?;
        let b = cluster_bruteforce_oracle(&coords, &offsets, &labels, &cfg)?;
        bad += usize::from(partition(&a) != partition(&b));
    }
    out.push(CheckOutcome::new("oracle/clustering", bad as f64, 0.0));

    let mut bad = 0usize;
    for dm in [2, 4, 8, 16, 32] {
        for layers in 2..=5 {
            let got = FilterLayout::decoder(dm, dm, layers)?.param_count();
            bad += usize::from(got != decoder_count_by_hand(dm, dm, layers));
        }
    }
    bad += usize::from(FilterLayout::decoder(8, 8, 3)?.param_count() != 177);
    out.push(CheckOutcome::new("oracle/filter-count", bad as f64, 0.0));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let scenes = random_results(&mut rng);
        let t = [0.25, 0.5, 0.75][rng.random_range(0..3)];
        for c in 1..=3 {
            worst = worst.max(
                match (
                    average_precision(&scenes, t, c)?,
                    exhaustive_ap(&scenes, t, c),
                ) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                },
            );
        }
    }
    out.push(CheckOutcome::new("oracle/average-precision", worst, 1e-10));

    let mut bad = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let dm = [2, 4, 8][rng.random_range(0..3)];
        let layout = FilterLayout::decoder(dm, rng.random_range(1..9), rng.random_range(1..5))?;
        let fm = Tensor::new(
            &[n, dm],
            (0..n * dm).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )?;
        let pos = random_points(&mut rng, n);
        let flat = (0..layout.param_count())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let fv = FilterVector::new(flat, layout)?;
        let bz = random_mask(&mut rng, n, 0.5);
        let d = decode_instance(&fm, &pos, &fv, &bz)?;
        bad += (0..n)
            .filter(|&i| !bz[i] && (d.mask[i] || d.probs[i] != 0.0))
            .count();
    }
    out.push(CheckOutcome::new(
        "oracle/category-confinement",
        bad as f64,
        0.0,
    ));

    let sc = SceneConfig {
        d_min: 1.0,
        seed,
        ..Default::default()
    };
    let mut bad = 0usize;
    for s in &generate_dataset(&sc, 10)? {
        let (logits, offsets) = oracle_predictions(s, 0.0, 0);
        let mut runs = Vec::new();
        for r in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let mut ic = InferenceConfig::new(sc.clustering(r));
            ic.min_cluster = 10;
            runs.push(run_oracle_inference(&s.coords, &logits, &offsets, &ic)?);
        }
        bad += usize::from(runs.windows(2).any(|w| w[0] != w[1]) || runs[0].is_empty());
    }
    out.push(CheckOutcome::new(
        "oracle/radius-invariance",
        bad as f64,
        0.0,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_count_matches_reference() {
        assert_eq!(decoder_count_by_hand(8, 8, 3), 177);
    }

    #[test]
    fn exhaustive_ap_of_single_hit() {
        let gts = vec![GtInstance {
            mask: vec![true, false],
            category: 1,
        }];
        let preds = vec![InstancePrediction {
            mask: vec![true, false],
            category: 1,
            score: 1.0,
            source_cluster: 0,
        }];
        assert_eq!(
            exhaustive_ap(&[SceneResult { preds, gts }], 0.5, 1),
            Some(1.0)
        );
    }
}
