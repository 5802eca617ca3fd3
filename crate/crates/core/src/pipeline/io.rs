//! Prediction files: one JSON object per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::InstancePrediction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene: String,
    pub category: usize,
    pub score: f64,
    pub source_cluster: usize,
    pub num_points: usize,
    /// `[start, length]` runs of mask points.
    pub runs: Vec<[usize; 2]>,
}

impl PredictionRecord {
    pub fn new(scene: &str, p: &InstancePrediction) -> Self {
        Self {
            scene: scene.to_string(),
            category: p.category,
            score: p.score,
            source_cluster: p.source_cluster,
            num_points: p.mask.len(),
            runs: rle_encode(&p.mask),
        }
    }

    pub fn prediction(&self) -> Result<InstancePrediction> {
        Ok(InstancePrediction {
            mask: mask_from_rle(&self.runs, self.num_points)?,
            category: self.category,
            score: self.score,
            source_cluster: self.source_cluster,
        })
    }
}

pub fn rle_encode(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == i => r[1] += 1,
            _ => runs.push([i, 1]),
        }
    }
    runs
}

pub fn mask_from_rle(runs: &[[usize; 2]], n: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    let mut prev_end = 0;
    for &[start, len] in runs {
        if len == 0 || start < prev_end || start + len > n {
            return Err(Error::Format(format!(
                "bad run [{start}, {len}] for {n} points"
            )));
        }
        mask[start..start + len].iter_mut().for_each(|m| *m = true);
        prev_end = start + len;
    }
    Ok(mask)
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
