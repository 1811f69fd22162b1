//! Ward-linkage agglomerative clustering and flat cuts of the resulting
//! dendrogram.
//!
//! Node ids follow the usual convention: leaves are `0..m`, merge `k` creates
//! node `m + k`. Distances are tracked squared and reported as plain Euclidean
//! heights, so two singletons merge at their Euclidean distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    leaves: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    /// Checks the structural invariants: `leaves - 1` merges, every child id
    /// defined before use and consumed once, sizes adding up.
    pub fn new(leaves: usize, merges: Vec<Merge>) -> Result<Self> {
        if leaves == 0 {
            return Err(Error::EmptyInput("dendrogram needs at least one leaf".into()));
        }
        if merges.len() != leaves - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} leaves need {} merges, got {}",
                leaves,
                leaves - 1,
                merges.len()
            )));
        }
        let mut sizes = vec![1usize; leaves];
        let mut used = vec![false; 2 * leaves - 1];
        for (k, m) in merges.iter().enumerate() {
            let defined = leaves + k;
            for child in [m.left, m.right] {
                if child >= defined || used[child] {
                    return Err(Error::InvalidArgument(format!("merge {k} reuses or forward-references node {child}")));
                }
                used[child] = true;
            }
            if m.left == m.right || m.size != sizes[m.left] + sizes[m.right] || !(m.height >= 0.0) {
                return Err(Error::InvalidArgument(format!("merge {k} is inconsistent: {m:?}")));
            }
            sizes.push(m.size);
        }
        Ok(Dendrogram { leaves, merges })
    }

    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn heights(&self) -> impl Iterator<Item = f64> + '_ {
        self.merges.iter().map(|m| m.height)
    }

    /// Flat clustering from all merges of height `<= t`.
    pub fn cut_at_threshold(&self, t: f64) -> ClusterAssignment {
        self.assign(|_, m| m.height <= t)
    }

    /// Flat clustering with exactly `n_clusters` clusters, obtained by applying
    /// the first `leaves - n_clusters` merges.
    pub fn cut_at_count(&self, n_clusters: usize) -> Result<ClusterAssignment> {
        if n_clusters == 0 || n_clusters > self.leaves {
            return Err(Error::InvalidArgument(format!(
                "cluster count {n_clusters} outside [1, {}]",
                self.leaves
            )));
        }
        let applied = self.leaves - n_clusters;
        Ok(self.assign(|k, _| k < applied))
    }

    fn assign(&self, mut apply: impl FnMut(usize, &Merge) -> bool) -> ClusterAssignment {
        let m = self.leaves;
        let mut parent: Vec<usize> = (0..m).collect();
        // Some leaf belonging to each node id.
        let mut rep: Vec<usize> = (0..m).collect();
        for (k, merge) in self.merges.iter().enumerate() {
            let (a, b) = (rep[merge.left], rep[merge.right]);
            rep.push(a);
            if apply(k, merge) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut label_of_root = vec![usize::MAX; m];
        let mut labels = Vec::with_capacity(m);
        let mut clusters = 0;
        for leaf in 0..m {
            let root = find(&mut parent, leaf);
            if label_of_root[root] == usize::MAX {
                label_of_root[root] = clusters;
                clusters += 1;
            }
            labels.push(label_of_root[root]);
        }
        ClusterAssignment { labels, clusters }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Flat partition: `labels[i]` is the cluster of item `i`, ids are dense in
/// `0..clusters` and numbered by first occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    clusters: usize,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let clusters = labels.iter().max().map_or(0, |&l| l + 1);
        let mut seen = vec![false; clusters];
        for &l in &labels {
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("cluster ids must be dense".into()));
        }
        Ok(ClusterAssignment { labels, clusters })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Ward linkage over the rows of an `m × d` matrix.
///
/// Each step merges the closest pair under the Lance–Williams Ward update;
/// exact ties go to the lexicographically smallest `(left id, right id)`.
/// O(m²) memory and O(m³) time.
pub fn ward_linkage(points: &Tensor) -> Result<Dendrogram> {
    if points.rank() != 2 {
        return Err(Error::Dimension(format!(
            "ward linkage expects an m x d matrix, got {:?}",
            points.shape()
        )));
    }
    let (m, d) = (points.shape()[0], points.shape()[1]);
    let rows: Vec<f64> = points.data().iter().map(|&v| f64::from(v)).collect();
    ward_linkage_f64(&rows, m, d)
}

/// As [`ward_linkage`] for a flat row-major `f64` buffer.
pub fn ward_linkage_f64(rows: &[f64], m: usize, d: usize) -> Result<Dendrogram> {
    if m == 0 {
        return Err(Error::EmptyInput("ward linkage needs at least one point".into()));
    }
    if rows.len() != m * d {
        return Err(Error::Dimension(format!("{} values cannot form {m} rows of {d}", rows.len())));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("points contain NaN or infinite values".into()));
    }

    let mut dist = vec![0.0f64; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let s: f64 = rows[i * d..(i + 1) * d]
                .iter()
                .zip(&rows[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * m + j] = s;
            dist[j * m + i] = s;
        }
    }

    let mut id: Vec<usize> = (0..m).collect();
    let mut size = vec![1usize; m];
    let mut active: Vec<usize> = (0..m).collect();
    let mut merges = Vec::with_capacity(m - 1);

    for step in 0..m.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                let d2 = dist[a * m + b];
                let key = (id[a].min(id[b]), id[a].max(id[b]));
                let better = match best {
                    None => true,
                    Some((bd, bkey, _, _)) => d2 < bd || (d2 == bd && key < bkey),
                };
                if better {
                    best = Some((d2, key, a, b));
                }
            }
        }
        let (d2, (left, right), a, b) = best.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for &w in &active {
            if w == a || w == b {
                continue;
            }
            let nw = size[w] as f64;
            let updated = ((na + nw) * dist[a * m + w] + (nb + nw) * dist[b * m + w] - nw * d2) / (na + nb + nw);
            let updated = updated.max(0.0);
            dist[a * m + w] = updated;
            dist[w * m + a] = updated;
        }
        size[a] += size[b];
        id[a] = m + step;
        active.retain(|&s| s != b);
        merges.push(Merge {
            left,
            right,
            height: d2.sqrt(),
            size: size[a],
        });
    }
    Dendrogram::new(m, merges)
}
