//! Adam training loop over a fixed scene set.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{scene_loss, LossBreakdown, LossConfig};
use crate::model::Model;
use crate::scene::PointScene;
use crate::tensor::{Tensor, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Steps at the start that train only the semantic and centroid terms.
    pub warmup_steps: usize,
    pub seed: u64,
    pub batch_scenes: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 3000,
            warmup_steps: 300,
            seed: 7,
            batch_scenes: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Invalid("warmup_steps exceeds steps".into()));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Invalid("batch_scenes must be positive".into()));
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Invalid("bad optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub seg: f64,
    pub ctr: f64,
    pub mask: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: usize, b: LossBreakdown) -> Self {
        Self {
            step,
            seg: b.seg,
            ctr: b.ctr,
            mask: b.mask,
            dice: b.dice,
            total: b.total,
        }
    }
}

pub fn write_loss_curve<W: Write>(mut w: W, curve: &[LossRecord]) -> Result<()> {
    for r in curve {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_loss_curve(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: TensorMap,
    v: TensorMap,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

pub struct TrainResult {
    pub model: Model,
    pub curve: Vec<LossRecord>,
}

/// Loss and gradients of a batch, averaged in scene order.
pub fn batch_gradients(
    scenes: &[&PointScene],
    model: &Model,
    loss: &LossConfig,
    warmup: bool,
) -> Result<(LossBreakdown, TensorMap)> {
    let per_scene: Vec<(LossBreakdown, TensorMap)> = scenes
        .par_iter()
        .map(|s| {
            let l = scene_loss(s, &model.params, &model.config, loss, warmup)?;
            Ok((l.breakdown(), l.gradients()?))
        })
        .collect::<Result<_>>()?;
    let k = per_scene.len() as f64;
    let mut sum = [0.0; 4];
    let mut grads = TensorMap::new();
    for (b, g) in per_scene {
        for (acc, v) in sum.iter_mut().zip([b.seg, b.ctr, b.mask, b.dice]) {
            *acc += v;
        }
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, v)| *a += v),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    grads
        .values_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= k));
    Ok((
        LossBreakdown::new(sum[0] / k, sum[1] / k, sum[2] / k, sum[3] / k),
        grads,
    ))
}

fn clip(grads: &mut TensorMap, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .values_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Trains `model` on `scenes`. `on_step` sees every record as it is made.
/// Batches are drawn from a seeded shuffle, so results depend only on the
/// inputs and the seed.
pub fn train(
    scenes: &[PointScene],
    mut model: Model,
    loss: &LossConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut curve = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_scenes.min(scenes.len());
    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&scenes[order[cursor]]);
            cursor += 1;
        }
        let warmup = step <= cfg.warmup_steps;
        let (b, mut grads) = batch_gradients(&picked, &model, loss, warmup)?;
        if !b.is_finite()
            || grads
                .values()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged { step });
        }
        if let Some(c) = cfg.clip_norm {
            clip(&mut grads, c);
        }
        adam.step(&mut model.params, &grads);
        let rec = LossRecord::new(step, b);
        on_step(&rec);
        curve.push(rec);
    }
    Ok(TrainResult { model, curve })
}
