//! Breadth-first grouping of points that share a semantic label and whose
//! centroid votes (`p + o_off`) lie within a radius of each other.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, GridIndex, Point3};

/// Which coordinates a cluster centroid averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Input point coordinates.
    #[default]
    Original,
    /// Centroid votes `p + o_off`.
    Shifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    /// Strict grouping radius in meters.
    pub radius: f64,
    pub num_classes: usize,
    pub stuff_labels: BTreeSet<usize>,
    /// Clusters smaller than this are dropped downstream.
    pub min_report_size: usize,
    #[serde(default)]
    pub centroid_mode: CentroidMode,
}

impl ClusteringConfig {
    pub fn new(
        radius: f64,
        num_classes: usize,
        stuff_labels: impl IntoIterator<Item = usize>,
    ) -> Self {
        Self {
            radius,
            num_classes,
            stuff_labels: stuff_labels.into_iter().collect(),
            min_report_size: 50,
            centroid_mode: CentroidMode::Original,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Invalid(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }

    pub fn is_stuff(&self, label: usize) -> bool {
        self.stuff_labels.contains(&label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Point indices, ascending.
    pub members: Vec<usize>,
    pub centroid: Point3,
    pub label: usize,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

fn check_inputs(
    coords: &[Point3],
    offsets: &[Point3],
    labels: &[usize],
    cfg: &ClusteringConfig,
) -> Result<()> {
    cfg.validate()?;
    if coords.len() != offsets.len() || coords.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} coords, {} offsets, {} labels",
            coords.len(),
            offsets.len(),
            labels.len()
        )));
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= cfg.num_classes)
    {
        return Err(Error::LabelOutOfRange {
            index: i,
            label: l as i64,
        });
    }
    Ok(())
}

fn shifted(coords: &[Point3], offsets: &[Point3]) -> Vec<Point3> {
    coords
        .iter()
        .zip(offsets)
        .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        .collect()
}

fn make_cluster(
    mut members: Vec<usize>,
    label: usize,
    coords: &[Point3],
    votes: &[Point3],
    mode: CentroidMode,
) -> Cluster {
    members.sort_unstable();
    let src = match mode {
        CentroidMode::Original => coords,
        CentroidMode::Shifted => votes,
    };
    let mut c = [0.0; 3];
    for &m in &members {
        for k in 0..3 {
            c[k] += src[m][k];
        }
    }
    let n = members.len() as f64;
    Cluster {
        centroid: [c[0] / n, c[1] / n, c[2] / n],
        members,
        label,
    }
}

/// Groups non-stuff points into clusters.
///
/// Two points share a cluster iff a chain of same-label points links them
/// with consecutive vote distances `< radius`. Clusters come out ordered by
/// their smallest member index.
pub fn cluster_homogeneous(
    coords: &[Point3],
    offsets: &[Point3],
    labels: &[usize],
    cfg: &ClusteringConfig,
) -> Result<Vec<Cluster>> {
    check_inputs(coords, offsets, labels, cfg)?;
    let votes = shifted(coords, offsets);
    let index = GridIndex::build(&votes, cfg.radius)?;
    let mut visited: Vec<bool> = labels.iter().map(|&l| cfg.is_stuff(l)).collect();
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    let mut found = Vec::new();
    for seed in 0..coords.len() {
        if visited[seed] {
            continue;
        }
        let label = labels[seed];
        visited[seed] = true;
        queue.push_back(seed);
        let mut members = vec![seed];
        while let Some(k) = queue.pop_front() {
            found.clear();
            index.for_each_within(&votes[k], cfg.radius, |j| {
                if !visited[j] && labels[j] == label {
                    found.push(j);
                }
            });
            found.sort_unstable();
            for &j in &found {
                visited[j] = true;
                queue.push_back(j);
                members.push(j);
            }
        }
        clusters.push(make_cluster(
            members,
            label,
            coords,
            &votes,
            cfg.centroid_mode,
        ));
    }
    Ok(clusters)
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Quadratic union-find reference for [`cluster_homogeneous`]. Output is
/// canonical: members ascending, clusters ordered by smallest member.
pub fn cluster_bruteforce_oracle(
    coords: &[Point3],
    offsets: &[Point3],
    labels: &[usize],
    cfg: &ClusteringConfig,
) -> Result<Vec<Cluster>> {
    check_inputs(coords, offsets, labels, cfg)?;
    let votes = shifted(coords, offsets);
    let n = coords.len();
    let r2 = cfg.radius * cfg.radius;
    let mut sets = DisjointSets::new(n);
    for i in 0..n {
        if cfg.is_stuff(labels[i]) {
            continue;
        }
        for j in i + 1..n {
            if labels[j] == labels[i] && dist2(&votes[i], &votes[j]) < r2 {
                sets.union(i, j);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        if !cfg.is_stuff(labels[i]) {
            groups.entry(sets.find(i)).or_default().push(i);
        }
    }
    let mut clusters: Vec<Cluster> = groups
        .into_values()
        .map(|m| {
            let label = labels[m[0]];
            make_cluster(m, label, coords, &votes, cfg.centroid_mode)
        })
        .collect();
    clusters.sort_by_key(|c| c.members[0]);
    Ok(clusters)
}

/// Member lists only, for partition comparisons.
pub fn partition(clusters: &[Cluster]) -> Vec<Vec<usize>> {
    let mut p: Vec<Vec<usize>> = clusters.iter().map(|c| c.members.clone()).collect();
    p.sort();
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: f64) -> ClusteringConfig {
        ClusteringConfig::new(r, 4, [0])
    }

    #[test]
    fn singleton_cluster_sits_on_its_point() {
        let c =
            cluster_homogeneous(&[[1.0, 2.0, 3.0]], &[[0.5, 0.0, 0.0]], &[2], &cfg(0.1)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members, vec![0]);
        assert_eq!(c[0].centroid, [1.0, 2.0, 3.0]);
        assert_eq!(c[0].label, 2);
    }

    #[test]
    fn coincident_votes_merge() {
        let coords = [[0.0; 3], [1.0, 0.0, 0.0]];
        let offsets = [[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]];
        let c = cluster_homogeneous(&coords, &offsets, &[1, 1], &cfg(0.01)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].size(), 2);
        assert_eq!(c[0].centroid, [0.5, 0.0, 0.0]);
    }

    #[test]
    fn chain_connectivity_through_middle_point() {
        let r = 1.0;
        let coords = [[0.0; 3], [0.9, 0.0, 0.0], [1.8, 0.0, 0.0]];
        let zero = [[0.0; 3]; 3];
        for f in [cluster_homogeneous, cluster_bruteforce_oracle] {
            let c = f(&coords, &zero, &[3, 3, 3], &cfg(r)).unwrap();
            assert_eq!(partition(&c), vec![vec![0, 1, 2]]);
        }
    }

    #[test]
    fn stuff_and_label_boundaries() {
        let coords = [[0.0; 3]; 4];
        let zero = [[0.0; 3]; 4];
        let c = cluster_homogeneous(&coords, &zero, &[0, 1, 2, 1], &cfg(0.5)).unwrap();
        assert_eq!(partition(&c), vec![vec![1, 3], vec![2]]);
    }

    #[test]
    fn shifted_centroid_mode() {
        let mut cf = cfg(0.5);
        cf.centroid_mode = CentroidMode::Shifted;
        let c = cluster_homogeneous(&[[0.0; 3]], &[[1.0, 1.0, 1.0]], &[1], &cf).unwrap();
        assert_eq!(c[0].centroid, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            cluster_homogeneous(&[[0.0; 3]], &[], &[1], &cfg(0.5)),
            Err(Error::LengthMismatch(_))
        ));
        assert!(matches!(
            cluster_homogeneous(&[[0.0; 3]; 2], &[[0.0; 3]; 2], &[1, 9], &cfg(0.5)),
            Err(Error::LabelOutOfRange { index: 1, label: 9 })
        ));
        assert!(cluster_homogeneous(&[], &[], &[], &cfg(0.0)).is_err());
    }
}
