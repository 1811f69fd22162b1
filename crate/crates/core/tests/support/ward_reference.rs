//! Ward linkage computed directly from cluster centroids at every step,
//! without a distance matrix or Lance-Williams updates.

use std::collections::BTreeSet;

pub struct RefMerge {
    pub members: BTreeSet<usize>,
    pub height: f64,
}

fn centroid(points: &[Vec<f64>], members: &BTreeSet<usize>) -> Vec<f64> {
    let d = points[0].len();
    let mut c = vec![0.0; d];
    for &i in members {
        for (ck, pk) in c.iter_mut().zip(&points[i]) {
            *ck += pk;
        }
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    c
}

/// Ward distance between clusters: sqrt(2·|A||B|/(|A|+|B|)·‖cA − cB‖²).
fn ward_distance(points: &[Vec<f64>], a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let (ca, cb) = (centroid(points, a), centroid(points, b));
    let sq: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    (2.0 * na * nb / (na + nb) * sq).sqrt()
}

pub fn reference(points: &[Vec<f64>]) -> Vec<RefMerge> {
    let mut active: Vec<BTreeSet<usize>> = (0..points.len()).map(|i| BTreeSet::from([i])).collect();
    let mut out = Vec::new();
    while active.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let dist = ward_distance(points, &active[a], &active[b]);
                if dist < best.0 {
                    best = (dist, a, b);
                }
            }
        }
        let (height, a, b) = best;
        let merged: BTreeSet<usize> = active[a].union(&active[b]).copied().collect();
        active.remove(b);
        active.remove(a);
        out.push(RefMerge { members: merged.clone(), height });
        active.push(merged);
    }
    out
}

/// Draws one instance (m ≤ 64 points in d ≤ 16 dimensions) and compares
/// `ward_linkage_f64` with [`reference`]: merge partitions, heights within
/// 1e-9, sizes, and every count cut.
pub fn compare_random_instance(rng: &mut impl rand::Rng) -> Result<(), String> {
    let m = rng.gen_range(1..=64);
    let d = rng.gen_range(1..=16);
    let points: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let dendro = cup_core::clustering::ward_linkage_f64(&flat, m, d).map_err(|e| e.to_string())?;
    let want = reference(&points);
    if dendro.merges().len() != want.len() {
        return Err(format!("m={m}: {} merges, expected {}", dendro.merges().len(), want.len()));
    }

    let mut members: Vec<BTreeSet<usize>> = (0..m).map(|i| BTreeSet::from([i])).collect();
    for (k, (got, want)) in dendro.merges().iter().zip(&want).enumerate() {
        let merged: BTreeSet<usize> = members[got.left].union(&members[got.right]).copied().collect();
        if merged != want.members {
            return Err(format!("m={m} d={d}: merge {k} joins {merged:?}, expected {:?}", want.members));
        }
        if (got.height - want.height).abs() > 1e-9 {
            return Err(format!("m={m} d={d}: merge {k} height {} vs {}", got.height, want.height));
        }
        if got.size != merged.len() {
            return Err(format!("m={m} d={d}: merge {k} size {} vs {}", got.size, merged.len()));
        }
        members.push(merged);
    }

    // Every flat cut is the partition left after the first merges.
    for n in 1..=m {
        let cut = dendro.cut_at_count(n).map_err(|e| e.to_string())?;
        let mut parts: Vec<BTreeSet<usize>> = (0..m).map(|i| BTreeSet::from([i])).collect();
        for w in &want[..m - n] {
            parts.retain(|p| p.is_disjoint(&w.members));
            parts.push(w.members.clone());
        }
        let mut got: Vec<BTreeSet<usize>> = cut.members().into_iter().map(|c| c.into_iter().collect()).collect();
        got.sort();
        parts.sort();
        if got != parts {
            return Err(format!("m={m} d={d}: cut into {n} clusters differs"));
        }
    }
    Ok(())
}
