//! Single-shot pruning: cluster pruning interleaved with training.
//!
//! Before each epoch `e` (1-based), while the network's flops are at or above
//! the target, every layer is pruned at threshold `t(e) = k·e + b`. Once a
//! pruning step reaches the target the architecture is frozen and training
//! simply continues.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::pruner::{cost_report, cup_prune, PruneMode};
use crate::trainer::{train, Dataset, TrainConfig};

pub const SS_HISTORY_HEADER: &str = "# cup-ss-history v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsTarget {
    /// Absolute flops budget.
    Flops(u64),
    /// Required flops reduction `initial / final`.
    Reduction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsConfig {
    pub k: f64,
    pub b: f64,
    pub target: FlopsTarget,
    /// Scale feature rows to unit norm before clustering.
    pub normalize: bool,
}

impl SsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k >= 0.0 && self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::Config(format!("k and b must be non-negative, got k={} b={}", self.k, self.b)));
        }
        if self.k + self.b <= 0.0 {
            return Err(Error::Config("k + b must be positive, otherwise nothing is ever pruned".into()));
        }
        match self.target {
            FlopsTarget::Flops(0) => Err(Error::Config("flops target must be positive".into())),
            FlopsTarget::Reduction(r) if !(r.is_finite() && r >= 1.0) => {
                Err(Error::Config(format!("target flops reduction must be at least 1, got {r}")))
            }
            _ => Ok(()),
        }
    }

    pub fn target_flops(&self, initial: u64) -> u64 {
        match self.target {
            FlopsTarget::Flops(f) => f,
            FlopsTarget::Reduction(r) => (initial as f64 / r).floor() as u64,
        }
    }
}

/// `k·epoch + b`.
pub fn threshold_at(cfg: &SsConfig, epoch: usize) -> f64 {
    cfg.k * epoch as f64 + cfg.b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsEpoch {
    /// 1-based.
    pub epoch: usize,
    /// Threshold used to prune before this epoch, if pruning ran.
    pub threshold: Option<f64>,
    /// Architecture trained during this epoch.
    pub widths: Vec<usize>,
    pub params: u64,
    pub flops: u64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsHistory {
    pub initial_flops: u64,
    pub target_flops: u64,
    pub epochs: Vec<SsEpoch>,
    /// The target was not reached within the epoch budget.
    pub shortfall: bool,
}

impl SsHistory {
    pub fn final_flops(&self) -> u64 {
        self.epochs.last().map_or(self.initial_flops, |e| e.flops)
    }

    /// `initial / final` flops.
    pub fn flops_reduction(&self) -> f64 {
        self.initial_flops as f64 / self.final_flops() as f64
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{SS_HISTORY_HEADER}")?;
        writeln!(out, "# initial_flops={} target_flops={} shortfall={}", self.initial_flops, self.target_flops, self.shortfall)?;
        writeln!(out, "epoch,threshold,widths,params,flops,train_loss,val_acc")?;
        for e in &self.epochs {
            let widths = e.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-");
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{}",
                e.epoch,
                e.threshold.map(|t| ((t * 1e12).round() / 1e12).to_string()).unwrap_or_default(),
                widths,
                e.params,
                e.flops,
                e.train_loss,
                e.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

pub struct SsOutcome {
    pub network: Network,
    pub history: SsHistory,
}

/// Trains `net` for `tcfg.epochs` epochs, pruning before epochs while the
/// flops budget is not met.
pub fn train_ss(
    net: Network,
    data: &Dataset,
    tcfg: &TrainConfig,
    scfg: &SsConfig,
    validation: Option<&Dataset>,
) -> Result<SsOutcome> {
    scfg.validate()?;
    tcfg.validate()?;
    if !net.is_dense_only() {
        return Err(Error::UnsupportedForTraining("single-shot pruning needs a dense-only network".into()));
    }
    let initial_flops = cost_report(&net)?.total_flops;
    let target_flops = scfg.target_flops(initial_flops);
    let mut frozen = target_flops >= initial_flops;
    if frozen {
        log::warn!("flops target {target_flops} is not below the initial {initial_flops}; nothing will be pruned");
    }

    let mut thresholds: Vec<Option<f64>> = Vec::with_capacity(tcfg.epochs);
    let mut widths: Vec<Vec<usize>> = Vec::with_capacity(tcfg.epochs);
    let mut hook = |epoch: usize, current: &Network| -> Result<Option<Network>> {
        let flops = cost_report(current)?.total_flops;
        if frozen || flops < target_flops {
            thresholds.push(None);
            widths.push(current.widths());
            return Ok(None);
        }
        let t = threshold_at(scfg, epoch);
        let outcome = cup_prune(current, &PruneMode::Automatic { threshold: t }, scfg.normalize)?;
        let after = outcome.costs.after.total_flops;
        log::info!("epoch {epoch}: t={t:.4} flops {flops} -> {after} (target {target_flops})");
        if after <= target_flops {
            frozen = true;
        }
        thresholds.push(Some(t));
        widths.push(outcome.network.widths());
        Ok(Some(outcome.network))
    };
    let trained = train(net, data, tcfg, validation, Some(&mut hook))?;

    let epochs: Vec<SsEpoch> = trained
        .log
        .records
        .iter()
        .zip(thresholds)
        .zip(widths)
        .map(|((r, threshold), widths)| SsEpoch {
            epoch: r.epoch,
            threshold,
            widths,
            params: r.params,
            flops: r.flops,
            train_loss: r.train_loss,
            val_acc: r.val_acc,
        })
        .collect();
    let final_flops = epochs.last().map_or(initial_flops, |e| e.flops);
    let shortfall = final_flops > target_flops;
    if shortfall {
        log::warn!("flops target {target_flops} not reached: finished at {final_flops}");
    }
    Ok(SsOutcome {
        network: trained.network,
        history: SsHistory { initial_flops, target_flops, epochs, shortfall },
    })
}
