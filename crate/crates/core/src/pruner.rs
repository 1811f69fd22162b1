//! Filter selection and network rewiring.
//!
//! A [`PrunePlan`] lists, for each prunable layer, the sorted indices of the
//! filters that survive. [`apply_plan`] drops the other filters and the
//! matching inputs of the consumer layer. Plans come from cluster pruning
//! ([`cup_prune`]) or from the magnitude/random baselines ([`baseline_prune`]).

mod cost;

pub use cost::{cost_report, CostComparison, CostReport, LayerCost, Reduction, COST_CSV_HEADER};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{ward_linkage, ClusterAssignment};
use crate::error::{Error, Result};
use crate::features::{filter_features, FilterFeatures};
use crate::model::{Adjacency, Conv2d, Dense, Layer, Network, PrunableUnit};
use crate::numerics::Tensor;

/// Incoming weights of two filters count as identical within this tolerance.
pub const DUPLICATE_TOLERANCE: f32 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_index: usize,
    /// Filter count before pruning.
    pub original: usize,
    /// Surviving filter indices, sorted and unique.
    pub keep: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
}

impl PrunePlan {
    /// Plan that keeps every filter of every prunable layer.
    pub fn identity(net: &Network) -> Result<Self> {
        Ok(PrunePlan {
            layers: net
                .prunable_units()?
                .iter()
                .map(|u| {
                    let m = net.layer(u.layer_index).filters().unwrap_or(0);
                    LayerPlan {
                        layer_index: u.layer_index,
                        original: m,
                        keep: (0..m).collect(),
                    }
                })
                .collect(),
        })
    }

    /// Surviving filter counts, one per layer plan.
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.keep.len()).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.keep.len() == l.original)
    }

    pub fn validate(&self) -> Result<()> {
        for lp in &self.layers {
            if lp.keep.is_empty() {
                return Err(Error::Plan(format!(
                    "layer {} would lose all of its filters (at least one must remain)",
                    lp.layer_index
                )));
            }
            if lp.keep.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Plan(format!(
                    "keep set of layer {} is not sorted and unique",
                    lp.layer_index
                )));
            }
            if lp.keep.last().is_some_and(|&k| k >= lp.original) {
                return Err(Error::Plan(format!(
                    "keep set of layer {} references filters beyond {}",
                    lp.layer_index, lp.original
                )));
            }
        }
        let mut seen: Vec<usize> = self.layers.iter().map(|l| l.layer_index).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Plan("a layer appears twice in the plan".into()));
        }
        Ok(())
    }
}

/// One representative per cluster: the filter whose full feature row has the
/// largest Euclidean norm (lowest index on ties). Returned sorted.
pub fn select_representatives(features: &FilterFeatures, clusters: &ClusterAssignment) -> Result<Vec<usize>> {
    if clusters.labels().len() != features.filters() {
        return Err(Error::Dimension(format!(
            "{} cluster labels for {} filters",
            clusters.labels().len(),
            features.filters()
        )));
    }
    let norms = features.row_norms();
    let mut best: Vec<Option<usize>> = vec![None; clusters.clusters()];
    for (i, &label) in clusters.labels().iter().enumerate() {
        match best[label] {
            Some(b) if norms[b] >= norms[i] => {}
            _ => best[label] = Some(i),
        }
    }
    let mut keep: Vec<usize> = best.into_iter().flatten().collect();
    keep.sort_unstable();
    Ok(keep)
}

fn dense_rows(d: &Dense, keep: &[usize]) -> Result<Dense> {
    let n = d.inputs();
    let mut w = Vec::with_capacity(keep.len() * n);
    for &i in keep {
        w.extend_from_slice(d.weights.row(i));
    }
    let b = keep.iter().map(|&i| d.bias.data()[i]).collect();
    Dense::new(Tensor::new(vec![keep.len(), n], w)?, Tensor::new(vec![keep.len()], b)?)
}

fn dense_column_blocks(d: &Dense, keep: &[usize], block: usize) -> Result<Dense> {
    let cols = keep.len() * block;
    let mut w = Vec::with_capacity(d.filters() * cols);
    for k in 0..d.filters() {
        let row = d.weights.row(k);
        for &i in keep {
            w.extend_from_slice(&row[i * block..(i + 1) * block]);
        }
    }
    Dense::new(Tensor::new(vec![d.filters(), cols], w)?, d.bias.clone())
}

fn conv_filters(c: &Conv2d, keep: &[usize]) -> Result<Conv2d> {
    let (n, m) = (c.in_channels(), c.filters());
    let (kh, kw) = c.kernel();
    let per = kh * kw;
    let mut w = Vec::with_capacity(n * keep.len() * per);
    for ch in 0..n {
        for &i in keep {
            let start = (ch * m + i) * per;
            w.extend_from_slice(&c.weights.data()[start..start + per]);
        }
    }
    let b = keep.iter().map(|&i| c.bias.data()[i]).collect();
    Conv2d::new(
        Tensor::new(vec![n, keep.len(), kh, kw], w)?,
        Tensor::new(vec![keep.len()], b)?,
        c.stride,
        c.padding,
    )
}

fn conv_channels(c: &Conv2d, keep: &[usize]) -> Result<Conv2d> {
    let (kh, kw) = c.kernel();
    let per = c.filters() * kh * kw;
    let mut w = Vec::with_capacity(keep.len() * per);
    for &ch in keep {
        w.extend_from_slice(&c.weights.data()[ch * per..(ch + 1) * per]);
    }
    Conv2d::new(
        Tensor::new(vec![keep.len(), c.filters(), kh, kw], w)?,
        c.bias.clone(),
        c.stride,
        c.padding,
    )
}

fn drop_filters(layer: &Layer, keep: &[usize]) -> Result<Layer> {
    Ok(match layer {
        Layer::Dense(d) => Layer::Dense(dense_rows(d, keep)?),
        Layer::Conv2d(c) => Layer::Conv2d(conv_filters(c, keep)?),
        other => return Err(Error::Internal(format!("{} layer has no filters", other.kind()))),
    })
}

fn drop_inputs(layer: &Layer, keep: &[usize], adjacency: Adjacency) -> Result<Layer> {
    Ok(match (layer, adjacency) {
        (Layer::Dense(d), Adjacency::DenseColumn) => Layer::Dense(dense_column_blocks(d, keep, 1)?),
        (Layer::Dense(d), Adjacency::DenseColumnBlock { block }) => {
            Layer::Dense(dense_column_blocks(d, keep, block)?)
        }
        (Layer::Conv2d(c), Adjacency::ConvInChannel) => Layer::Conv2d(conv_channels(c, keep)?),
        (other, adj) => {
            return Err(Error::Internal(format!(
                "cannot remove {adj:?} inputs from a {} layer",
                other.kind()
            )))
        }
    })
}

/// Removes the filters outside each keep set and the consumer inputs they fed.
pub fn apply_plan(net: &Network, plan: &PrunePlan) -> Result<Network> {
    plan.validate()?;
    let units = net.prunable_units()?;
    let (input_shape, mut layers) = net.clone().into_parts();
    for lp in &plan.layers {
        let unit = units
            .iter()
            .find(|u| u.layer_index == lp.layer_index)
            .ok_or_else(|| Error::Plan(format!("layer {} is not prunable", lp.layer_index)))?;
        let m = net.layer(unit.layer_index).filters().unwrap_or(0);
        if m != lp.original {
            return Err(Error::Plan(format!(
                "plan expects {} filters in layer {}, network has {}",
                lp.original, lp.layer_index, m
            )));
        }
        if lp.keep.len() == m {
            continue;
        }
        layers[unit.layer_index] = drop_filters(&layers[unit.layer_index], &lp.keep)?;
        layers[unit.next_index] = drop_inputs(&layers[unit.next_index], &lp.keep, unit.adjacency)?;
    }
    Network::new(input_shape, layers).map_err(|e| Error::Internal(format!("rewired network is inconsistent: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Cut every layer's dendrogram at one global height.
    Automatic { threshold: f64 },
    /// Keep exactly `counts[k]` filters in the k-th prunable layer.
    Manual { counts: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub network: Network,
    pub plan: PrunePlan,
    pub costs: CostComparison,
}

fn check_counts(net: &Network, units: &[PrunableUnit], counts: &[usize]) -> Result<()> {
    if counts.len() != units.len() {
        return Err(Error::Plan(format!(
            "{} counts given for {} prunable layers",
            counts.len(),
            units.len()
        )));
    }
    for (unit, &count) in units.iter().zip(counts) {
        let m = net.layer(unit.layer_index).filters().unwrap_or(0);
        if count == 0 || count > m {
            return Err(Error::Plan(format!(
                "layer {} has {} filters, cannot keep {} (at least one must remain)",
                unit.layer_index, m, count
            )));
        }
    }
    Ok(())
}

/// Cluster pruning plan: features, Ward clustering, and one representative per
/// cluster for every prunable layer. Features are always taken from `net`.
pub fn cup_plan(net: &Network, mode: &PruneMode, normalize: bool) -> Result<PrunePlan> {
    let units = net.prunable_units()?;
    match mode {
        PruneMode::Automatic { threshold } if !(threshold.is_finite() && *threshold >= 0.0) => {
            return Err(Error::Config(format!("threshold must be a non-negative number, got {threshold}")))
        }
        PruneMode::Manual { counts } => check_counts(net, &units, counts)?,
        _ => {}
    }
    let mut plan = PrunePlan::default();
    for (k, unit) in units.iter().enumerate() {
        let mut features = filter_features(net, unit)?;
        if normalize {
            features = features.normalize_rows();
        }
        let dendrogram = ward_linkage(&features.matrix)?;
        let clusters = match mode {
            PruneMode::Automatic { threshold } => dendrogram.cut_at_threshold(*threshold),
            PruneMode::Manual { counts } => dendrogram.cut_at_count(counts[k])?,
        };
        plan.layers.push(LayerPlan {
            layer_index: unit.layer_index,
            original: features.filters(),
            keep: select_representatives(&features, &clusters)?,
        });
    }
    Ok(plan)
}

fn outcome(net: &Network, plan: PrunePlan) -> Result<PruneOutcome> {
    let network = apply_plan(net, &plan)?;
    let costs = CostComparison::new(cost_report(net)?, cost_report(&network)?)?;
    Ok(PruneOutcome { network, plan, costs })
}

/// Prunes every layer down to its cluster representatives.
pub fn cup_prune(net: &Network, mode: &PruneMode, normalize: bool) -> Result<PruneOutcome> {
    let plan = cup_plan(net, mode, normalize)?;
    outcome(net, plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Random { seed: u64 },
    L1,
    L2,
}

/// L1 or L2 norm of each filter's incoming weights together with its bias.
pub fn incoming_norms(layer: &Layer, l1: bool) -> Result<Vec<f64>> {
    let norm = |values: &mut dyn Iterator<Item = f32>| -> f64 {
        if l1 {
            values.map(|v| f64::from(v).abs()).sum()
        } else {
            values.map(|v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
        }
    };
    match layer {
        Layer::Dense(d) => Ok((0..d.filters())
            .map(|i| norm(&mut d.weights.row(i).iter().copied().chain([d.bias.data()[i]])))
            .collect()),
        Layer::Conv2d(c) => Ok((0..c.filters())
            .map(|i| {
                norm(
                    &mut (0..c.in_channels())
                        .flat_map(|ch| c.kernel_slice(ch, i).iter().copied())
                        .chain([c.bias.data()[i]]),
                )
            })
            .collect()),
        other => Err(Error::Internal(format!("{} layer has no filters", other.kind()))),
    }
}

/// Indices of the `count` highest scores (lowest index on ties), sorted.
fn top_k(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..count].to_vec();
    keep.sort_unstable();
    keep
}

pub fn baseline_plan(net: &Network, criterion: Criterion, counts: &[usize]) -> Result<PrunePlan> {
    let units = net.prunable_units()?;
    check_counts(net, &units, counts)?;
    let mut rng = match criterion {
        Criterion::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut plan = PrunePlan::default();
    for (unit, &count) in units.iter().zip(counts) {
        let layer = net.layer(unit.layer_index);
        let m = layer.filters().unwrap_or(0);
        let keep = match criterion {
            Criterion::L1 => top_k(&incoming_norms(layer, true)?, count),
            Criterion::L2 => top_k(&incoming_norms(layer, false)?, count),
            Criterion::Random { .. } => {
                let rng = rng.as_mut().expect("seeded above");
                let mut keep = rand::seq::index::sample(rng, m, count).into_vec();
                keep.sort_unstable();
                keep
            }
        };
        plan.layers.push(LayerPlan {
            layer_index: unit.layer_index,
            original: m,
            keep,
        });
    }
    Ok(plan)
}

/// Magnitude (L1/L2 of incoming weights) or random filter pruning to fixed
/// per-layer counts.
pub fn baseline_prune(net: &Network, criterion: Criterion, counts: &[usize]) -> Result<PruneOutcome> {
    let plan = baseline_plan(net, criterion, counts)?;
    outcome(net, plan)
}

fn incoming(layer: &Layer, i: usize) -> Vec<f32> {
    match layer {
        Layer::Dense(d) => d.weights.row(i).iter().copied().chain([d.bias.data()[i]]).collect(),
        Layer::Conv2d(c) => (0..c.in_channels())
            .flat_map(|ch| c.kernel_slice(ch, i).iter().copied())
            .chain([c.bias.data()[i]])
            .collect(),
        _ => Vec::new(),
    }
}

/// Folds filter `j` into filter `i` when both compute the same output: `j`'s
/// outgoing weights are added onto `i`'s and `j` is removed. The network
/// function is unchanged.
pub fn merge_duplicates(net: &Network, unit: &PrunableUnit, i: usize, j: usize) -> Result<Network> {
    let layer = net.layer(unit.layer_index);
    let m = layer
        .filters()
        .ok_or_else(|| Error::Internal(format!("layer {} has no filters", unit.layer_index)))?;
    if i == j {
        return Err(Error::InvalidArgument(format!("cannot merge filter {i} with itself")));
    }
    if i >= m || j >= m {
        return Err(Error::InvalidArgument(format!("filters {i}, {j} outside layer of {m}")));
    }
    let (a, b) = (incoming(layer, i), incoming(layer, j));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    if diff > DUPLICATE_TOLERANCE {
        return Err(Error::NotDuplicate(format!(
            "filters {i} and {j} of layer {} differ by {diff:e} in their incoming weights",
            unit.layer_index
        )));
    }

    let (input_shape, mut layers) = net.clone().into_parts();
    match (&mut layers[unit.next_index], unit.adjacency) {
        (Layer::Dense(d), Adjacency::DenseColumn) => fold_columns(d, i, j, 1),
        (Layer::Dense(d), Adjacency::DenseColumnBlock { block }) => fold_columns(d, i, j, block),
        (Layer::Conv2d(c), Adjacency::ConvInChannel) => {
            let (kh, kw) = c.kernel();
            let per = c.filters() * kh * kw;
            let data = c.weights.data_mut();
            for k in 0..per {
                data[i * per + k] += data[j * per + k];
            }
        }
        (other, adj) => {
            return Err(Error::Internal(format!(
                "adjacency {adj:?} does not match consumer {}",
                other.kind()
            )))
        }
    }
    let merged = Network::new(input_shape, layers)?;
    let plan = PrunePlan {
        layers: vec![LayerPlan {
            layer_index: unit.layer_index,
            original: m,
            keep: (0..m).filter(|&k| k != j).collect(),
        }],
    };
    apply_plan(&merged, &plan)
}

fn fold_columns(d: &mut Dense, i: usize, j: usize, block: usize) {
    let cols = d.inputs();
    let rows = d.filters();
    let data = d.weights.data_mut();
    for r in 0..rows {
        for k in 0..block {
            data[r * cols + i * block + k] += data[r * cols + j * block + k];
        }
    }
}
