//! Uniform-grid spatial hash for fixed-radius neighbour queries.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

pub type Cell = [i64; 3];

#[derive(Clone, Debug)]
pub struct GridIndex {
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
    coords: Vec<Point3>,
}

pub fn cell_of(p: &Point3, cell_size: f64) -> Cell {
    [
        (p[0] / cell_size).floor() as i64,
        (p[1] / cell_size).floor() as i64,
        (p[2] / cell_size).floor() as i64,
    ]
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl GridIndex {
    pub fn build(coords: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Invalid(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::with_capacity(coords.len());
        for (i, p) in coords.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePoint { index: i });
            }
            cells.entry(cell_of(p, cell_size)).or_default().push(i);
        }
        Ok(Self {
            cell_size,
            cells,
            coords: coords.to_vec(),
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_members(&self, cell: &Cell) -> &[usize] {
        self.cells.get(cell).map_or(&[], Vec::as_slice)
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    /// Calls `f` for every indexed point strictly closer than `r` to `query`.
    pub fn for_each_within(&self, query: &Point3, r: f64, mut f: impl FnMut(usize)) {
        let rings = (r / self.cell_size).ceil() as i64;
        let c = cell_of(query, self.cell_size);
        let r2 = r * r;
        for dx in -rings..=rings {
            for dy in -rings..=rings {
                for dz in -rings..=rings {
                    let key = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if let Some(members) = self.cells.get(&key) {
                        for &i in members {
                            if dist2(&self.coords[i], query) < r2 {
                                f(i);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Indices of points at Euclidean distance `< r` from `query`, ascending.
    pub fn radius_neighbors(&self, query: &Point3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, r, |i| out.push(i));
        out.sort_unstable();
        out
    }
}

/// Convenience wrapper matching [`GridIndex::build`].
pub fn build_grid_index(coords: &[Point3], cell_size: f64) -> Result<GridIndex> {
    GridIndex::build(coords, cell_size)
}

pub fn radius_neighbors(index: &GridIndex, query: &Point3, r: f64) -> Vec<usize> {
    index.radius_neighbors(query, r)
}
