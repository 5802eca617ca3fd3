#![allow(dead_code)]
//! Reference implementations shared by the integration tests.

use dynseg::metrics::{GtInstance, SceneResult};
use dynseg::pipeline::{mask_iou, InstancePrediction};
use dynseg::tensor::Tensor;
use dynseg::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

pub fn random_preds(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    classes: usize,
) -> Vec<InstancePrediction> {
    (0..k)
        .map(|z| {
            let p = rng.random_range(0.1..0.6);
            InstancePrediction {
                mask: random_mask(rng, n, p),
                category: rng.random_range(1..=classes),
                // coarse scores so ties occur
                score: (rng.random_range(0..8) as f64) / 8.0 + 0.05,
                source_cluster: z,
            }
        })
        .collect()
}

pub fn random_results(rng: &mut ChaCha8Rng, scenes: usize) -> Vec<SceneResult> {
    (0..scenes)
        .map(|_| {
            let n = 40;
            let gts: Vec<GtInstance> = (0..rng.random_range(0..5))
                .map(|_| GtInstance {
                    mask: random_mask(rng, n, 0.3),
                    category: rng.random_range(1..=3),
                })
                .collect();
            let k = rng.random_range(0..6);
            let mut preds = random_preds(rng, n, k, 3);
            // some near-copies of ground truth so matches happen
            for g in &gts {
                if rng.random_bool(0.6) {
                    let mut m = g.mask.clone();
                    m.iter_mut().for_each(|v| *v ^= rng.random_bool(0.05));
                    let z = preds.len();
                    preds.push(InstancePrediction {
                        mask: m,
                        category: g.category,
                        score: rng.random_range(0.0..1.0),
                        source_cluster: z,
                    });
                }
            }
            SceneResult { preds, gts }
        })
        .collect()
}

/// Brute-force AP: for every prefix length `k` of the ranked list, match the
/// first `k` predictions from scratch and read off precision and recall.
pub fn ap_oracle(scenes: &[SceneResult], t: f64, c: usize) -> Option<f64> {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (s, r) in scenes.iter().enumerate() {
        for (p, pr) in r.preds.iter().enumerate() {
            if pr.category == c {
                ranked.push((s, p));
            }
        }
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
    let tp_of_prefix = |k: usize| -> usize {
        let mut used: Vec<Vec<bool>> = scenes.iter().map(|r| vec![false; r.gts.len()]).collect();
        let mut tp = 0;
        for &(s, p) in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in scenes[s].gts.iter().enumerate() {
                if gt.category != c || used[s][g] {
                    continue;
                }
                let v = mask_iou(&scenes[s].preds[p].mask, &gt.mask).unwrap();
                if v >= t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[s][g] = true;
                tp += 1;
            }
        }
        tp
    };
    let pr: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = tp_of_prefix(k) as f64;
            (tp / k as f64, tp / n_gt as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..pr.len() {
        let p_interp = pr[k..].iter().map(|x| x.0).fold(0.0, f64::max);
        ap += (pr[k].1 - prev_r) * p_interp;
        prev_r = pr[k].1;
    }
    Some(ap)
}

/// Independent Σ(in·out + out) for a decoder chain.
pub fn layout_count_oracle(mask_dim: usize, hidden: usize, layers: usize) -> usize {
    let mut total = 0;
    let mut fan_in = mask_dim + 3;
    for l in 0..layers {
        let out = if l + 1 == layers { 1 } else { hidden };
        total += fan_in * out + out;
        fan_in = out;
    }
    total
}

/// Straight-line per-point decoder with its own slicing arithmetic.
pub fn decode_oracle(
    fm: &Tensor,
    pos: &[Point3],
    flat: &[f64],
    dims: &[(usize, usize)],
    bz: &[bool],
) -> Vec<f64> {
    (0..fm.rows())
        .map(|i| {
            if !bz[i] {
                return 0.0;
            }
            let mut h: Vec<f64> = fm.row(i).iter().copied().chain(pos[i]).collect();
            let mut off = 0;
            for (l, &(fi, fo)) in dims.iter().enumerate() {
                let mut next = vec![0.0; fo];
                for o in 0..fo {
                    let mut s = flat[off + fi * fo + o];
                    for c in 0..fi {
                        s += flat[off + o * fi + c] * h[c];
                    }
                    next[o] = if l + 1 < dims.len() { s.max(0.0) } else { s };
                }
                off += fi * fo + fo;
                h = next;
            }
            h[0]
        })
        .collect()
}

/// Moves every parameter off its initial value so biases are not exactly
/// zero; zero biases put ReLU inputs on the kink, where finite differences
/// are meaningless.
pub fn jitter_params(params: &mut dynseg::TensorMap, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}
