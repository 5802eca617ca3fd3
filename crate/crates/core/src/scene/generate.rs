use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mean_of, PointScene, SceneConfig, FEATURE_DIM, FLOOR};
use crate::error::{Error, Result};
use crate::geometry::{dist2, Point3};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Box,
    Ellipsoid,
}

/// One placed object; instance id `i` is the `i`-th object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub kind: ShapeKind,
    pub center: Point3,
    /// Semi-axes (ellipsoid/sphere) or half-extents (box).
    pub radii: [f64; 3],
}

impl SceneObject {
    fn footprint(&self) -> f64 {
        self.radii[0].max(self.radii[1])
    }

    /// Samples one surface point and its outward unit normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Point3, Point3) {
        let (c, a) = (self.center, self.radii);
        match self.kind {
            ShapeKind::Sphere | ShapeKind::Ellipsoid => {
                let mut u = [0.0f64; 3];
                let mut norm = 0.0;
                while norm < 1e-12 {
                    for v in u.iter_mut() {
                        *v = StandardNormal.sample(rng);
                    }
                    norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                }
                let u = [u[0] / norm, u[1] / norm, u[2] / norm];
                let p = [c[0] + a[0] * u[0], c[1] + a[1] * u[1], c[2] + a[2] * u[2]];
                let g = [u[0] / a[0], u[1] / a[1], u[2] / a[2]];
                let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                (p, [g[0] / gn, g[1] / gn, g[2] / gn])
            }
            ShapeKind::Box => {
                // faces perpendicular to axis k have area 4·a_j·a_l
                let areas = [a[1] * a[2], a[0] * a[2], a[0] * a[1]];
                let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                let mut t = rng.random_range(0.0..total);
                let mut face = 5;
                for f in 0..6 {
                    if t < areas[f / 2] {
                        face = f;
                        break;
                    }
                    t -= areas[f / 2];
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = [0.0; 3];
                let mut n = [0.0; 3];
                for k in 0..3 {
                    if k == axis {
                        p[k] = c[k] + sign * a[k];
                        n[k] = sign;
                    } else {
                        p[k] = c[k] + rng.random_range(-a[k]..=a[k]);
                    }
                }
                (p, n)
            }
        }
    }
}

/// Deterministic per-scene seed for scene `index` of a dataset.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

const PLACEMENT_TRIES: usize = 2000;
const SCENE_TRIES: usize = 20;

fn place_instances(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<(Vec<SceneObject>, f64)> {
    let k = cfg.thing_classes;
    let n = rng.random_range(cfg.instances.0..=cfg.instances.1);
    let (lo, hi) = cfg.size_range;
    let spacing = 2.0 * hi * 1.1 + 0.3;
    let side = 1.0 + (n.max(1) as f64).sqrt() * spacing.max(cfg.d_min) * 1.5;
    let mut placed: Vec<SceneObject> = Vec::with_capacity(n);
    for i in 0..n {
        let class = 1 + (i + rng.random_range(0..k)) % k;
        let kind = cfg.shapes[(class - 1) % cfg.shapes.len()];
        let base = if k == 1 {
            lo
        } else {
            lo + (hi - lo) * (class - 1) as f64 / (k - 1) as f64
        };
        let s = base * rng.random_range(0.9..1.1);
        let radii = match kind {
            ShapeKind::Sphere => [s, s, s],
            ShapeKind::Ellipsoid => [s, 0.75 * s, 0.6 * s],
            ShapeKind::Box => [s, 0.8 * s, 0.6 * s],
        };
        let margin = radii[0].max(radii[1]) + 0.05;
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let center = [
                rng.random_range(margin..side - margin),
                rng.random_range(margin..side - margin),
                radii[2] + 0.02,
            ];
            let cand = SceneObject {
                class,
                kind,
                center,
                radii,
            };
            let fits = placed.iter().all(|o| {
                let d = dist2(&o.center, &center).sqrt();
                let clear = d >= o.footprint() + cand.footprint() + 0.1;
                let separated = o.class != class || d >= cfg.d_min + 0.1;
                clear && separated
            });
            if fits {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some((placed, side))
}

fn class_channel(label: usize, num_classes: usize, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> f64 {
    let shown = if cfg.label_noise > 0.0 && rng.random_bool(cfg.label_noise) {
        rng.random_range(0..num_classes)
    } else {
        label
    };
    let noise = if cfg.feature_noise > 0.0 {
        Normal::new(0.0, cfg.feature_noise)
            .expect("finite sigma")
            .sample(rng)
    } else {
        0.0
    };
    shown as f64 / num_classes as f64 + noise
}

/// Generates one scene. Same config (including seed) → identical scene.
pub fn generate_scene(cfg: &SceneConfig) -> Result<PointScene> {
    Ok(generate_scene_objects(cfg)?.0)
}

/// Like [`generate_scene`], also returning the placed objects.
pub fn generate_scene_objects(cfg: &SceneConfig) -> Result<(PointScene, Vec<SceneObject>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_classes = cfg.num_classes();
    for _ in 0..SCENE_TRIES {
        let Some((placed, side)) = place_instances(cfg, &mut rng) else {
            continue;
        };
        let mut coords = Vec::new();
        let mut normals = Vec::new();
        let mut semantic = Vec::new();
        let mut instance = Vec::new();

        let floor_points = ((side * side * cfg.floor_density).round() as usize).max(1);
        for _ in 0..floor_points {
            coords.push([
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
                0.0,
            ]);
            normals.push([0.0, 0.0, 1.0]);
            semantic.push(FLOOR);
            instance.push(-1);
        }
        if let Some(wall) = cfg.wall_label() {
            let wall_points = ((side * 2.0 * cfg.floor_density).round() as usize).max(1);
            for w in 0..2 {
                for _ in 0..wall_points {
                    let along = rng.random_range(0.0..side);
                    let h = rng.random_range(0.0..2.0);
                    if w == 0 {
                        coords.push([0.0, along, h]);
                        normals.push([1.0, 0.0, 0.0]);
                    } else {
                        coords.push([along, 0.0, h]);
                        normals.push([0.0, 1.0, 0.0]);
                    }
                    semantic.push(wall);
                    instance.push(-1);
                }
            }
        }
        for (id, obj) in placed.iter().enumerate() {
            let count = rng.random_range(cfg.points_per_instance.0..=cfg.points_per_instance.1);
            for _ in 0..count {
                let (p, n) = obj.sample(&mut rng);
                coords.push(p);
                normals.push(n);
                semantic.push(obj.class);
                instance.push(id as i32);
            }
        }

        let mut centroids: Vec<Point3> = coords.clone();
        let mut means = Vec::with_capacity(placed.len());
        for id in 0..placed.len() as i32 {
            let m = mean_of(
                instance
                    .iter()
                    .zip(&coords)
                    .filter(|(&g, _)| g == id)
                    .map(|(_, p)| p),
            );
            means.push(m);
            for i in 0..coords.len() {
                if instance[i] == id {
                    centroids[i] = m;
                }
            }
        }
        let separated = (0..placed.len()).all(|a| {
            (a + 1..placed.len()).all(|b| {
                placed[a].class != placed[b].class
                    || dist2(&means[a], &means[b]).sqrt() >= cfg.d_min
            })
        });
        if !separated {
            continue;
        }

        let mut features = Vec::with_capacity(coords.len() * FEATURE_DIM);
        for i in 0..coords.len() {
            features.extend_from_slice(&coords[i]);
            features.extend_from_slice(&normals[i]);
            features.push(class_channel(semantic[i], num_classes, cfg, &mut rng));
        }
        let scene = PointScene {
            coords,
            features,
            feature_dim: FEATURE_DIM,
            num_classes,
            gt_semantic: semantic,
            gt_instance: instance,
            gt_centroids: centroids,
            seed: cfg.seed,
            config: Some(cfg.clone()),
        };
        return Ok((scene, placed));
    }
    Err(Error::Packing {
        attempts: SCENE_TRIES,
    })
}

/// `count` scenes whose seeds derive from `cfg.seed`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<Vec<PointScene>> {
    (0..count)
        .map(|i| {
            let c = SceneConfig {
                seed: scene_seed(cfg.seed, i),
                ..cfg.clone()
            };
            generate_scene(&c)
        })
        .collect()
}

/// Ideal head outputs: one-hot semantic logits scaled by 10 and offsets
/// pointing at the instance centroid, optionally perturbed by Gaussian noise
/// of standard deviation `sigma` (instance points only).
pub fn oracle_predictions(scene: &PointScene, sigma: f64, seed: u64) -> (Tensor, Vec<Point3>) {
    let n = scene.len();
    let c = scene.num_classes;
    let mut logits = vec![0.0; n * c];
    for (i, &l) in scene.gt_semantic.iter().enumerate() {
        logits[i * c + l] = 10.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let offsets = (0..n)
        .map(|i| {
            let (p, t) = (scene.coords[i], scene.gt_centroids[i]);
            let mut o = [t[0] - p[0], t[1] - p[1], t[2] - p[2]];
            if let (Some(d), true) = (&noise, scene.gt_instance[i] >= 0) {
                for v in o.iter_mut() {
                    *v += d.sample(&mut rng);
                }
            }
            o
        })
        .collect();
    (Tensor::new(&[n, c], logits).expect("n >= 1"), offsets)
}
