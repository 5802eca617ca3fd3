use dynseg::clustering::{
    cluster_bruteforce_oracle, cluster_homogeneous, partition, ClusteringConfig,
};
use dynseg::geometry::{build_grid_index, cell_of, dist2, radius_neighbors, Point3};
use dynseg::scene::{generate_scene, oracle_predictions};
use dynseg::SceneConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            ]
        })
        .collect()
}

fn brute(coords: &[Point3], q: &Point3, r: f64) -> Vec<usize> {
    (0..coords.len())
        .filter(|&i| dist2(&coords[i], q) < r * r)
        .collect()
}

#[test]
fn grid_query_matches_brute_force_over_seeds() {
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..400);
        let coords = random_points(&mut rng, n, 2.0);
        let cell = rng.random_range(0.05..1.0);
        let index = build_grid_index(&coords, cell).unwrap();
        for _ in 0..10 {
            let q = random_points(&mut rng, 1, 2.5)[0];
            let r = rng.random_range(0.01..1.5);
            assert_eq!(
                radius_neighbors(&index, &q, r),
                brute(&coords, &q, r),
                "seed {seed}"
            );
        }
    }
}

#[test]
fn every_point_lives_in_its_own_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords = random_points(&mut rng, 10_000, 5.0);
    let index = build_grid_index(&coords, 0.3).unwrap();
    let mut seen = vec![0; coords.len()];
    for (i, p) in coords.iter().enumerate() {
        let members = index.cell_members(&cell_of(p, 0.3));
        assert!(members.contains(&i));
        for &m in members {
            seen[m] += usize::from(m == i);
        }
    }
    assert!(seen.iter().all(|&s| s == 1));
}

#[test]
fn nonfinite_point_is_named() {
    let err = build_grid_index(&[[0.0; 3], [f64::NAN, 0.0, 0.0]], 0.1).unwrap_err();
    assert!(
        matches!(err, dynseg::Error::NonFinitePoint { index: 1 }),
        "{err}"
    );
}

fn random_clustering_input(seed: u64) -> (Vec<Point3>, Vec<Point3>, Vec<usize>, ClusteringConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..600);
    let coords = random_points(&mut rng, n, 1.5);
    let offsets = random_points(&mut rng, n, 0.2);
    let labels = (0..n).map(|_| rng.random_range(0..4)).collect();
    let cfg = ClusteringConfig::new(rng.random_range(0.05..0.5), 4, [0]);
    (coords, offsets, labels, cfg)
}

#[test]
fn bfs_equals_union_find_oracle() {
    for seed in 0..100 {
        let (c, o, l, cfg) = random_clustering_input(seed);
        let fast = cluster_homogeneous(&c, &o, &l, &cfg).unwrap();
        let slow = cluster_bruteforce_oracle(&c, &o, &l, &cfg).unwrap();
        assert_eq!(partition(&fast), partition(&slow), "seed {seed}");
        // same canonical order and centroids too
        assert_eq!(fast, slow, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_query_is_independent_of_cell_size(seed in 0u64..10_000, c1 in 0.05f64..1.0, c2 in 0.05f64..1.0, r in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_points(&mut rng, 200, 1.0);
        let q = random_points(&mut rng, 1, 1.0)[0];
        let a = radius_neighbors(&build_grid_index(&coords, c1).unwrap(), &q, r);
        let b = radius_neighbors(&build_grid_index(&coords, c2).unwrap(), &q, r);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clusters_partition_non_stuff_points_with_pure_labels(seed in 0u64..10_000) {
        let (c, o, l, cfg) = random_clustering_input(seed);
        let clusters = cluster_homogeneous(&c, &o, &l, &cfg).unwrap();
        let mut count = vec![0; c.len()];
        for cl in &clusters {
            prop_assert!(cl.members.windows(2).all(|w| w[0] < w[1]));
            for &m in &cl.members {
                count[m] += 1;
                prop_assert_eq!(l[m], cl.label);
            }
        }
        for i in 0..c.len() {
            prop_assert_eq!(count[i], usize::from(!cfg.is_stuff(l[i])));
        }
    }

    #[test]
    fn larger_radius_only_merges(seed in 0u64..10_000, grow in 1.0f64..3.0) {
        let (c, o, l, cfg) = random_clustering_input(seed);
        let wide = ClusteringConfig { radius: cfg.radius * grow, ..cfg.clone() };
        let fine = cluster_homogeneous(&c, &o, &l, &cfg).unwrap();
        let coarse = cluster_homogeneous(&c, &o, &l, &wide).unwrap();
        let mut owner = vec![usize::MAX; c.len()];
        for (z, cl) in coarse.iter().enumerate() {
            cl.members.iter().for_each(|&m| owner[m] = z);
        }
        for cl in &fine {
            let o0 = owner[cl.members[0]];
            prop_assert!(cl.members.iter().all(|&m| owner[m] == o0));
        }
    }
}

#[test]
fn exact_votes_recover_instances() {
    for seed in 0..10 {
        let scene = generate_scene(&SceneConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let (logits, offsets) = oracle_predictions(&scene, 0.0, 0);
        let labels = dynseg::backbone::argmax_rows(&logits);
        for r in [0.1, 0.5, 0.9] {
            let cfg = ClusteringConfig::new(r, scene.num_classes, [0]);
            let clusters = cluster_homogeneous(&scene.coords, &offsets, &labels, &cfg).unwrap();
            let mut expect: Vec<Vec<usize>> = scene
                .instance_ids()
                .into_iter()
                .map(|id| {
                    (0..scene.len())
                        .filter(|&i| scene.gt_instance[i] == id)
                        .collect()
                })
                .collect();
            expect.sort();
            assert_eq!(partition(&clusters), expect, "seed {seed} r {r}");
        }
    }
}
