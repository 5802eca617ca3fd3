use dynseg::metrics::{
    average_precision, coverage_metrics, evaluate, gt_instances, prec_rec_at50, GtInstance,
    SceneResult,
};
use dynseg::pipeline::{
    instance_set, mask_iou, nms, read_predictions, run_inference, run_oracle_inference,
    write_predictions, InferenceConfig, InstancePrediction, PredictionRecord,
};
use dynseg::scene::{generate_scene, oracle_predictions};
use dynseg::tensor::Tensor;
use dynseg::{ClusteringConfig, Model, ModelConfig, PointScene, SceneConfig};
use proptest::prelude::*;

mod common;
use common::{ap_oracle, random_preds, random_results};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference NMS: repeatedly take the best remaining prediction, then drop
/// everything overlapping it.
fn nms_oracle(preds: &[InstancePrediction], t: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..preds.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let best = *alive
            .iter()
            .max_by(|&&a, &&b| {
                preds[a]
                    .score
                    .total_cmp(&preds[b].score)
                    .then(preds[b].source_cluster.cmp(&preds[a].source_cluster))
            })
            .unwrap();
        kept.push(preds[best].source_cluster);
        alive.retain(|&j| j != best && mask_iou(&preds[j].mask, &preds[best].mask).unwrap() < t);
    }
    kept
}

#[test]
fn nms_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let preds = {
            let k = rng.random_range(0..12);
            random_preds(&mut rng, 30, k, 3)
        };
        let t = rng.random_range(0.1..1.0);
        let got: Vec<usize> = nms(preds.clone(), t)
            .unwrap()
            .iter()
            .map(|p| p.source_cluster)
            .collect();
        assert_eq!(got, nms_oracle(&preds, t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn nms_output_is_an_antichain(seed in 0u64..1_000_000, t in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_preds(&mut rng, 25, 10, 2);
        let kept = nms(preds.clone(), t).unwrap();
        for a in 0..kept.len() {
            for b in a + 1..kept.len() {
                prop_assert!(mask_iou(&kept[a].mask, &kept[b].mask).unwrap() < t);
            }
        }
        for p in &preds {
            if kept.iter().all(|k| k.source_cluster != p.source_cluster) {
                let covered = kept.iter().any(|k| k.score >= p.score && mask_iou(&k.mask, &p.mask).unwrap() >= t);
                prop_assert!(covered);
            }
        }
    }

    #[test]
    fn scaling_scores_changes_no_metric(seed in 0u64..1_000_000, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = random_results(&mut rng, 3);
        let scaled: Vec<SceneResult> = scenes
            .iter()
            .map(|s| SceneResult {
                preds: s.preds.iter().map(|p| InstancePrediction { score: p.score * c, ..p.clone() }).collect(),
                gts: s.gts.clone(),
            })
            .collect();
        for t in [0.25, 0.5, 0.75] {
            for class in 1..=3 {
                prop_assert_eq!(average_precision(&scenes, t, class).unwrap(), average_precision(&scaled, t, class).unwrap());
            }
        }
        prop_assert_eq!(prec_rec_at50(&scenes).unwrap(), prec_rec_at50(&scaled).unwrap());
    }

    #[test]
    fn ap_does_not_grow_with_threshold(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = random_results(&mut rng, 3);
        for class in 1..=3 {
            let mut prev = f64::INFINITY;
            for t in [0.1, 0.25, 0.5, 0.75, 0.9] {
                if let Some(ap) = average_precision(&scenes, t, class).unwrap() {
                    prop_assert!(ap <= prev + 1e-12);
                    prev = ap;
                }
            }
        }
    }
}

#[test]
fn ap_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let scenes = {
            let k = rng.random_range(1..4);
            random_results(&mut rng, k)
        };
        let t = [0.25, 0.5, 0.75][rng.random_range(0..3)];
        for c in 1..=3 {
            let got = average_precision(&scenes, t, c).unwrap();
            let want = ap_oracle(&scenes, t, c);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

fn perfect(scene: &PointScene) -> SceneResult {
    let gts = gt_instances(scene);
    let preds = gts
        .iter()
        .enumerate()
        .map(|(z, g)| InstancePrediction {
            mask: g.mask.clone(),
            category: g.category,
            score: 1.0,
            source_cluster: z,
        })
        .collect();
    SceneResult { preds, gts }
}

#[test]
fn perfect_and_empty_predictions() {
    let scenes: Vec<PointScene> = (0..3)
        .map(|s| {
            generate_scene(&SceneConfig {
                seed: s,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    let coords: Vec<&[[f64; 3]]> = scenes.iter().map(|s| s.coords.as_slice()).collect();
    let results: Vec<SceneResult> = scenes.iter().map(perfect).collect();
    let r = evaluate(&results, &coords).unwrap();
    for v in [
        r.map, r.ap50, r.ap25, r.mcov, r.mwcov, r.mprec, r.mrec, r.det_ap25, r.det_ap50,
    ] {
        assert_eq!(v, 1.0);
    }
    let empty: Vec<SceneResult> = results
        .iter()
        .map(|s| SceneResult {
            preds: vec![],
            gts: s.gts.clone(),
        })
        .collect();
    let r = evaluate(&empty, &coords).unwrap();
    for v in [
        r.map, r.ap50, r.ap25, r.mcov, r.mwcov, r.mprec, r.mrec, r.det_ap25, r.det_ap50,
    ] {
        assert_eq!(v, 0.0);
    }
    assert!(coverage_metrics(&[SceneResult {
        preds: vec![],
        gts: vec![]
    }])
    .is_err());
}

#[test]
fn two_class_precision_recall() {
    let m = |r: std::ops::Range<usize>| (0..20).map(|i| r.contains(&i)).collect::<Vec<bool>>();
    let gts = vec![
        GtInstance {
            mask: m(0..5),
            category: 1,
        },
        GtInstance {
            mask: m(5..10),
            category: 1,
        },
        GtInstance {
            mask: m(10..20),
            category: 2,
        },
    ];
    let p = |mask, category, score| InstancePrediction {
        mask,
        category,
        score,
        source_cluster: 0,
    };
    // class 1: one hit, one miss → P 1/2, R 1/2; class 2: one hit, two extra → P 1/3, R 1
    let preds = vec![
        p(m(0..5), 1, 0.9),
        p(m(12..20), 1, 0.8),
        p(m(10..19), 2, 0.7),
        p(m(0..3), 2, 0.6),
        p(m(3..6), 2, 0.5),
    ];
    let (mp, mr) = prec_rec_at50(&[SceneResult { preds, gts }]).unwrap();
    assert!((mp - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((mr - 0.75).abs() < 1e-15);
}

#[test]
fn oracle_inference_recovers_ground_truth() {
    for seed in 0..5 {
        let s = generate_scene(&SceneConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let (logits, offsets) = oracle_predictions(&s, 0.0, 0);
        let mut cfg = InferenceConfig::new(ClusteringConfig::new(0.5, s.num_classes, [0]));
        cfg.min_cluster = 10;
        let preds = run_oracle_inference(&s.coords, &logits, &offsets, &cfg).unwrap();
        assert_eq!(instance_set(&preds), instance_set(&perfect(&s).preds));
        assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    }
}

#[test]
fn stuff_only_scene_gives_no_instances() {
    let s = generate_scene(&SceneConfig {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let n = s.len();
    let logits = Tensor::new(
        &[n, s.num_classes],
        (0..n * s.num_classes)
            .map(|i| if i % s.num_classes == 0 { 5.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let cfg = InferenceConfig::new(ClusteringConfig::new(0.5, s.num_classes, [0]));
    assert!(
        run_oracle_inference(&s.coords, &logits, &vec![[0.0; 3]; n], &cfg)
            .unwrap()
            .is_empty()
    );
}

#[test]
fn model_inference_is_deterministic() {
    let s = generate_scene(&SceneConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let model = Model::init(ModelConfig::default(), 1).unwrap();
    let mut cfg = InferenceConfig::new(ClusteringConfig::new(0.3, s.num_classes, [0]));
    cfg.min_cluster = 10;
    let a = run_inference(&s, &model, &cfg).unwrap();
    assert_eq!(a, run_inference(&s, &model, &cfg).unwrap());
    for p in &a {
        assert!(p.mask.iter().any(|&m| m) && (0.0..=1.0).contains(&p.score));
    }
}

#[test]
fn prediction_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let preds = random_preds(&mut rng, 300, 12, 4);
    let recs: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| {
            PredictionRecord::new(
                "scene_0003",
                &InstancePrediction {
                    score: rng.random_range(0.0..1.0),
                    ..p.clone()
                },
            )
        })
        .collect();
    let mut first = Vec::new();
    write_predictions(&mut first, &recs).unwrap();
    let back = read_predictions(first.as_slice()).unwrap();
    assert_eq!(back, recs);
    let mut second = Vec::new();
    write_predictions(&mut second, &back).unwrap();
    assert_eq!(first, second);
    for (r, p) in back.iter().zip(&preds) {
        assert_eq!(r.prediction().unwrap().mask, p.mask);
    }
}
