//! Per-filter feature vectors built from a filter's incoming weights, its
//! bias and its outgoing weights.
//!
//! For a layer with `m` filters, fan-in `n` and a consumer with `p` filters the
//! feature matrix is `m × (n + 1 + p)`:
//!
//! * dense: `[W[i, :], b[i], W_next[:, i]]`
//! * conv: `[‖W[c, i]‖_F for each input channel c, b[i], h_k for each consumer filter k]`
//!   where `h_k` is the Frobenius norm of consumer filter `k`'s kernel on channel `i`,
//!   or, when the consumer is a dense layer behind a flatten, the Euclidean norm of
//!   row `k` restricted to channel `i`'s column block.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{Adjacency, Layer, Network, PrunableUnit};
use crate::numerics::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FilterFeatures {
    pub layer_index: usize,
    /// `m × d`, one row per filter.
    pub matrix: Tensor,
    /// Number of leading columns derived from incoming weights and bias
    /// (`n + 1`); the remaining columns come from outgoing weights.
    pub input_width: usize,
}

impl FilterFeatures {
    pub fn filters(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.filters()).map(|i| numerics::frobenius_norm(self.row(i))).collect()
    }

    /// Scales every row to unit Euclidean norm. All-zero rows stay zero.
    pub fn normalize_rows(&self) -> FilterFeatures {
        let d = self.dim();
        let mut data = self.matrix.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let norm = numerics::frobenius_norm(row);
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
            }
        }
        FilterFeatures {
            layer_index: self.layer_index,
            matrix: Tensor::new(self.matrix.shape().to_vec(), data).expect("shape unchanged"),
            input_width: self.input_width,
        }
    }

    /// Debug dump: header `filter,f0,f1,...` then one line per filter.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "filter")?;
        for j in 0..self.dim() {
            write!(out, ",f{j}")?;
        }
        writeln!(out)?;
        for i in 0..self.filters() {
            write!(out, "{i}")?;
            for v in self.row(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Features of one prunable layer, dispatching on its kind.
pub fn filter_features(net: &Network, unit: &PrunableUnit) -> Result<FilterFeatures> {
    match net.layer(unit.layer_index) {
        Layer::Dense(_) => dense_features(net, unit),
        Layer::Conv2d(_) => conv_features(net, unit),
        other => Err(Error::Internal(format!(
            "layer {} ({}) has no filters",
            unit.layer_index,
            other.kind()
        ))),
    }
}

pub fn dense_features(net: &Network, unit: &PrunableUnit) -> Result<FilterFeatures> {
    let (layer, next) = match (net.layer(unit.layer_index), net.layer(unit.next_index), unit.adjacency) {
        (Layer::Dense(l), Layer::Dense(n), Adjacency::DenseColumn) => (l, n),
        _ => {
            return Err(Error::Internal(format!(
                "layer {} is not a dense layer with dense-column adjacency",
                unit.layer_index
            )))
        }
    };
    let (m, n, p) = (layer.filters(), layer.inputs(), next.filters());
    if next.inputs() != m {
        return Err(Error::Internal(format!(
            "layer {} consumes {} inputs but layer {} has {} filters",
            unit.next_index,
            next.inputs(),
            unit.layer_index,
            m
        )));
    }
    let d = n + 1 + p;
    let mut data = Vec::with_capacity(m * d);
    let outgoing = next.weights.data();
    for i in 0..m {
        data.extend_from_slice(layer.weights.row(i));
        data.push(layer.bias.data()[i]);
        data.extend((0..p).map(|k| outgoing[k * m + i]));
    }
    Ok(FilterFeatures {
        layer_index: unit.layer_index,
        matrix: Tensor::new(vec![m, d], data)?,
        input_width: n + 1,
    })
}

pub fn conv_features(net: &Network, unit: &PrunableUnit) -> Result<FilterFeatures> {
    let layer = match net.layer(unit.layer_index) {
        Layer::Conv2d(c) => c,
        _ => {
            return Err(Error::Internal(format!(
                "layer {} is not a conv layer",
                unit.layer_index
            )))
        }
    };
    let (n, m) = (layer.in_channels(), layer.filters());

    // Outgoing descriptor: one norm per consumer filter.
    let outgoing: Box<dyn Fn(usize) -> Vec<f32>> = match (net.layer(unit.next_index), unit.adjacency) {
        (Layer::Conv2d(next), Adjacency::ConvInChannel) if next.in_channels() == m => Box::new(move |i| {
            (0..next.filters())
                .map(|k| numerics::frobenius_norm(next.kernel_slice(i, k)) as f32)
                .collect()
        }),
        (Layer::Dense(next), Adjacency::DenseColumnBlock { block }) if next.inputs() == m * block => {
            Box::new(move |i| {
                (0..next.filters())
                    .map(|k| numerics::frobenius_norm(&next.weights.row(k)[i * block..(i + 1) * block]) as f32)
                    .collect()
            })
        }
        _ => {
            return Err(Error::Internal(format!(
                "adjacency {:?} does not match the consumer of conv layer {}",
                unit.adjacency, unit.layer_index
            )))
        }
    };

    let mut data = Vec::new();
    let mut d = 0;
    for i in 0..m {
        let start = data.len();
        data.extend((0..n).map(|c| numerics::frobenius_norm(layer.kernel_slice(c, i)) as f32));
        data.push(layer.bias.data()[i]);
        data.extend(outgoing(i));
        d = data.len() - start;
    }
    Ok(FilterFeatures {
        layer_index: unit.layer_index,
        matrix: Tensor::new(vec![m, d], data)?,
        input_width: n + 1,
    })
}

/// Channelwise Frobenius norms of a `(c, h, w)` tensor.
pub fn channel_norms(x: &Tensor) -> Result<Vec<f64>> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "channel norms need a rank-3 tensor, got {:?}",
            x.shape()
        )));
    }
    let per = x.shape()[1] * x.shape()[2];
    Ok((0..x.shape()[0])
        .map(|c| numerics::frobenius_norm(&x.data()[c * per..(c + 1) * per]))
        .collect())
}
