use dynseg::geometry::dist2;
use dynseg::scene::{
    generate_dataset, generate_scene, generate_scene_objects, oracle_predictions, read_scene,
    write_scene, ShapeKind,
};
use dynseg::SceneConfig;
use proptest::prelude::*;

fn cfg(seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(&cfg(11)).unwrap();
    let b = generate_scene(&cfg(11)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.coords, generate_scene(&cfg(12)).unwrap().coords);
}

#[test]
fn single_instance_without_floor() {
    let s = generate_scene(&SceneConfig {
        instances: (1, 1),
        floor_density: 0.0,
        ..cfg(4)
    })
    .unwrap();
    let ids = s.instance_ids();
    assert_eq!(ids, vec![0]);
    // a zero-density floor still gets one point
    assert_eq!(s.gt_instance.iter().filter(|&&i| i < 0).count(), 1);
    assert!(s.gt_instance.iter().filter(|&&i| i >= 0).all(|&i| i == 0));
}

#[test]
fn same_class_centroids_respect_d_min() {
    for seed in 0..30 {
        let s = generate_scene(&SceneConfig {
            instances: (8, 8),
            d_min: 1.0,
            ..cfg(seed)
        })
        .unwrap();
        let ids = s.instance_ids();
        let info: Vec<(usize, [f64; 3])> = ids
            .iter()
            .map(|&id| {
                let i = s.gt_instance.iter().position(|&g| g == id).unwrap();
                (s.gt_semantic[i], s.gt_centroids[i])
            })
            .collect();
        for a in 0..info.len() {
            for b in a + 1..info.len() {
                if info[a].0 == info[b].0 {
                    assert!(dist2(&info[a].1, &info[b].1).sqrt() >= 1.0, "seed {seed}");
                }
            }
        }
    }
}

/// Ellipsoid points satisfy `Σ ((p−c)/a)² = 1`; box points sit on a face
/// plane and inside the other two slabs.
#[test]
fn instance_points_lie_on_surfaces() {
    for seed in 0..20 {
        let (s, objects) = generate_scene_objects(&cfg(seed)).unwrap();
        for (i, p) in s.coords.iter().enumerate() {
            let Ok(id) = usize::try_from(s.gt_instance[i]) else {
                continue;
            };
            let o = &objects[id];
            assert_eq!(s.gt_semantic[i], o.class);
            let d: Vec<f64> = (0..3).map(|k| p[k] - o.center[k]).collect();
            match o.kind {
                ShapeKind::Sphere | ShapeKind::Ellipsoid => {
                    let q: f64 = (0..3).map(|k| (d[k] / o.radii[k]).powi(2)).sum();
                    assert!((q - 1.0).abs() < 1e-9, "seed {seed} point {i}: {q}");
                }
                ShapeKind::Box => {
                    let on_face = (0..3).any(|k| (d[k].abs() - o.radii[k]).abs() < 1e-9);
                    let inside = (0..3).all(|k| d[k].abs() <= o.radii[k] + 1e-9);
                    assert!(on_face && inside, "seed {seed} point {i}");
                }
            }
        }
    }
}

#[test]
fn centroids_are_instance_means() {
    for seed in 0..20 {
        let s = generate_scene(&cfg(seed)).unwrap();
        s.validate().unwrap();
        for (i, &g) in s.gt_instance.iter().enumerate() {
            if g < 0 {
                assert_eq!(s.gt_centroids[i], s.coords[i]);
            }
        }
    }
}

#[test]
fn scene_file_round_trip_is_byte_exact() {
    for scene in generate_dataset(&cfg(5), 3).unwrap() {
        let mut first = Vec::new();
        write_scene(&mut first, &scene).unwrap();
        let back = read_scene(first.as_slice()).unwrap();
        assert_eq!(back.coords, scene.coords);
        assert_eq!(back.features, scene.features);
        assert_eq!(back.gt_instance, scene.gt_instance);
        let mut second = Vec::new();
        write_scene(&mut second, &back).unwrap();
        assert_eq!(first, second);
        assert!(read_scene(&first[..first.len() - 1]).is_err());
    }
}

#[test]
fn exact_oracle_votes_hit_centroids() {
    let s = generate_scene(&cfg(2)).unwrap();
    let (logits, offsets) = oracle_predictions(&s, 0.0, 0);
    assert_eq!(dynseg::backbone::argmax_rows(&logits), s.gt_semantic);
    for i in 0..s.len() {
        for k in 0..3 {
            assert!((s.coords[i][k] + offsets[i][k] - s.gt_centroids[i][k]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenes_are_valid(seed in 0u64..1_000_000, walls in any::<bool>()) {
        let s = generate_scene(&SceneConfig { walls, ..cfg(seed) }).unwrap();
        prop_assert!(s.validate().is_ok());
        prop_assert_eq!(s.num_classes, if walls { 6 } else { 5 });
        prop_assert!(s.coords.iter().flatten().all(|v| v.is_finite()));
    }
}
