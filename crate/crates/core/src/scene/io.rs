//! Binary scene files.
//!
//! Header: `version u32, N u32, C u32, I u32, seed u64`. Then `N` fixed-width
//! records: `3 × f64` coords, `I × f64` features, `i32` semantic id, `i32`
//! instance id, `3 × f64` centroid. Everything little-endian.

use std::io::{Read, Write};

use super::PointScene;
use crate::error::{Error, Result};

pub const SCENE_VERSION: u32 = 1;

pub fn write_scene<W: Write>(mut w: W, scene: &PointScene) -> Result<()> {
    let n = scene.len();
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(scene.num_classes as u32).to_le_bytes())?;
    w.write_all(&(scene.feature_dim as u32).to_le_bytes())?;
    w.write_all(&scene.seed.to_le_bytes())?;
    let mut rec = Vec::with_capacity(8 * (6 + scene.feature_dim) + 8);
    for i in 0..n {
        rec.clear();
        for v in scene.coords[i].iter().chain(scene.feature_row(i)) {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        rec.extend_from_slice(&(scene.gt_semantic[i] as i32).to_le_bytes());
        rec.extend_from_slice(&scene.gt_instance[i].to_le_bytes());
        for v in &scene.gt_centroids[i] {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&rec)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut b = [0u8; K];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn point(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}

pub fn read_scene<R: Read>(r: R) -> Result<PointScene> {
    let mut r = Reader { inner: r };
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::Format(format!(
            "unsupported scene version {version}"
        )));
    }
    let n = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let seed = u64::from_le_bytes(r.bytes()?);
    let mut scene = PointScene {
        coords: Vec::with_capacity(n),
        features: Vec::with_capacity(n * feature_dim),
        feature_dim,
        num_classes,
        gt_semantic: Vec::with_capacity(n),
        gt_instance: Vec::with_capacity(n),
        gt_centroids: Vec::with_capacity(n),
        seed,
        config: None,
    };
    for i in 0..n {
        scene.coords.push(r.point()?);
        for _ in 0..feature_dim {
            scene.features.push(r.f64()?);
        }
        let sem = r.i32()?;
        if sem < 0 || sem as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: sem as i64,
            });
        }
        scene.gt_semantic.push(sem as usize);
        scene.gt_instance.push(r.i32()?);
        scene.gt_centroids.push(r.point()?);
    }
    Ok(scene)
}
