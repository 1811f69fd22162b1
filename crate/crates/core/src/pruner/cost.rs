//! Parameter and flop accounting.
//!
//! One multiply-accumulate counts as two flops. Dense layers cost `2·m·n`,
//! conv layers `2·m·n·kh·kw·H'·W'`. Biases, activations, pooling and softmax
//! are not counted as flops. Parameters include biases.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, Network};

pub const COST_CSV_HEADER: &str = "# cup-cost v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_index: usize,
    pub kind: String,
    pub filters: Option<usize>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    /// Filter counts of the parameterized layers, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().filter_map(|l| l.filters).collect()
    }

    /// `(PR, FR)` of `compressed` relative to `self`.
    pub fn reduction(&self, compressed: &CostReport) -> Reduction {
        Reduction {
            params: ratio(self.total_params, compressed.total_params),
            flops: ratio(self.total_flops, compressed.total_flops),
        }
    }
}

fn ratio(base: u64, compressed: u64) -> f64 {
    if compressed == 0 {
        f64::INFINITY
    } else {
        base as f64 / compressed as f64
    }
}

/// Compression ratios `baseline / compressed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    /// Parameter reduction (PR).
    pub params: f64,
    /// Flops reduction (FR).
    pub flops: f64,
}

pub fn cost_report(net: &Network) -> Result<CostReport> {
    let shapes = net.shapes()?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let (params, flops) = match layer {
            Layer::Dense(d) => {
                let (m, n) = (d.filters() as u64, d.inputs() as u64);
                (m * n + m, 2 * m * n)
            }
            Layer::Conv2d(c) => {
                let (m, n) = (c.filters() as u64, c.in_channels() as u64);
                let (kh, kw) = c.kernel();
                let spatial = (shapes[i][1] * shapes[i][2]) as u64;
                let weights = m * n * (kh * kw) as u64;
                (weights + m, 2 * weights * spatial)
            }
            _ => (0, 0),
        };
        layers.push(LayerCost {
            layer_index: i,
            kind: layer.kind().to_string(),
            filters: layer.filters(),
            params,
            flops,
        });
    }
    Ok(CostReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// Layerwise before/after comparison of two structurally matching networks
/// (same layer sequence, possibly different widths).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub before: CostReport,
    pub after: CostReport,
    pub reduction: Reduction,
}

impl CostComparison {
    pub fn new(before: CostReport, after: CostReport) -> Result<Self> {
        let kinds = |r: &CostReport| r.layers.iter().map(|l| l.kind.clone()).collect::<Vec<_>>();
        if kinds(&before) != kinds(&after) {
            return Err(Error::Comparison("networks have different layer sequences".into()));
        }
        let reduction = before.reduction(&after);
        Ok(CostComparison {
            before,
            after,
            reduction,
        })
    }

    /// Compares two networks that must share an input shape and layer sequence.
    pub fn between(before: &Network, after: &Network) -> Result<Self> {
        if before.input_shape() != after.input_shape() {
            return Err(Error::Comparison(format!(
                "input shapes differ: {:?} vs {:?}",
                before.input_shape(),
                after.input_shape()
            )));
        }
        CostComparison::new(cost_report(before)?, cost_report(after)?)
    }

    /// CSV with a version comment, one row per layer and a final `total` row.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{COST_CSV_HEADER}")?;
        writeln!(out, "layer,kind,filters_before,filters_after,params_before,params_after,flops_before,flops_after")?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for (b, a) in self.before.layers.iter().zip(&self.after.layers) {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.layer_index,
                b.kind,
                opt(b.filters),
                opt(a.filters),
                b.params,
                a.params,
                b.flops,
                a.flops
            )?;
        }
        writeln!(
            out,
            "total,,,,{},{},{},{}",
            self.before.total_params, self.after.total_params, self.before.total_flops, self.after.total_flops
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv2d, Dense};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ann_b_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::mlp(&[784, 500, 300, 10], &mut rng).unwrap();
        let r = cost_report(&net).unwrap();
        assert_eq!(r.total_params, 784 * 500 + 500 + 500 * 300 + 300 + 300 * 10 + 10);
        assert_eq!(r.total_params, 545_810);
        assert_eq!(r.total_flops, 2 * (784 * 500 + 500 * 300 + 300 * 10));
        assert_eq!(r.layers[0].flops, 784_000);
        assert_eq!(r.widths(), vec![500, 300, 10]);
        assert_eq!(r.reduction(&r), Reduction { params: 1.0, flops: 1.0 });
    }

    #[test]
    fn conv_cost_uses_output_footprint() {
        let c = Conv2d::new(Tensor::zeros(&[3, 8, 3, 3]).unwrap(), Tensor::zeros(&[8]).unwrap(), 1, 1).unwrap();
        let net = Network::new(vec![3, 10, 10], vec![Layer::Conv2d(c), Layer::Relu]).unwrap();
        let r = cost_report(&net).unwrap();
        assert_eq!(r.total_params, 3 * 8 * 9 + 8);
        assert_eq!(r.total_flops, 2 * 3 * 8 * 9 * 100);
        assert_eq!(r.layers[1].flops, 0);
    }

    #[test]
    fn comparison_csv() {
        let d = |m, n| Layer::Dense(Dense::new(Tensor::zeros(&[m, n]).unwrap(), Tensor::zeros(&[m]).unwrap()).unwrap());
        let a = Network::new(vec![4], vec![d(3, 4), Layer::Relu, d(2, 3)]).unwrap();
        let b = Network::new(vec![4], vec![d(1, 4), Layer::Relu, d(2, 1)]).unwrap();
        let cmp = CostComparison::new(cost_report(&a).unwrap(), cost_report(&b).unwrap()).unwrap();
        let mut out = Vec::new();
        cmp.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "# cup-cost v1\n\
             layer,kind,filters_before,filters_after,params_before,params_after,flops_before,flops_after\n\
             0,dense,3,1,15,5,24,8\n\
             1,relu,,,0,0,0,0\n\
             2,dense,2,2,8,4,12,4\n\
             total,,,,23,9,36,12\n"
        );
        let c = Network::new(vec![4], vec![d(3, 4), d(2, 3)]).unwrap();
        assert!(CostComparison::new(cost_report(&a).unwrap(), cost_report(&c).unwrap()).is_err());
        let wide = Network::new(vec![5], vec![d(3, 5), Layer::Relu, d(2, 3)]).unwrap();
        assert!(matches!(CostComparison::between(&a, &wide), Err(Error::Comparison(_))));
        assert_eq!(CostComparison::between(&a, &a).unwrap().reduction, Reduction { params: 1.0, flops: 1.0 });
    }
}
