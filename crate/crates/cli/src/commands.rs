use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cup_core::data_ingest::{load_mnist, Split};
use cup_core::model::{self, Network};
use cup_core::pruner::{baseline_prune, cost_report, cup_prune, CostComparison, Criterion, PruneMode, PruneOutcome};
use cup_core::schedule::{train_ss, FlopsTarget, SsConfig};
use cup_core::trainer::{self, evaluate, Dataset, TrainConfig, MNIST_MEAN, MNIST_STD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    BaselineArgs, Counts, CriterionArg, DataArgs, Mode, PruneArgs, RecipeArgs, ReportArgs, RetrainArgs, SsArgs, SsFlags,
    SweepArgs, SweepParam, TrainArgs,
};

pub const SWEEP_CSV_HEADER: &str = "# cup-sweep v1";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(cup_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<cup_core::Error> for CliError {
    fn from(e: cup_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Data {
    train: Dataset,
    test: Dataset,
}

fn data_dir(args: &DataArgs) -> Result<&Path> {
    args.data_dir.as_deref().ok_or_else(|| {
        CliError::Core(cup_core::Error::Config(
            "no data directory: pass --data-dir or set CUP_DATA_DIR".into(),
        ))
    })
}

fn load_split(args: &DataArgs, split: Split) -> Result<Dataset> {
    let data = load_mnist(data_dir(args)?, split)?.standardized(MNIST_MEAN, MNIST_STD);
    let limit = match split {
        Split::Train => args.train_limit,
        Split::Test => args.test_limit,
    };
    Ok(match limit {
        Some(n) => data.head(n),
        None => data,
    })
}

fn load_data(args: &DataArgs) -> Result<Data> {
    Ok(Data {
        train: load_split(args, Split::Train)?,
        test: load_split(args, Split::Test)?,
    })
}

fn recipe(r: &RecipeArgs, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: r.batch_size,
        lr: r.lr,
        weight_decay: r.weight_decay,
        seed: r.seed,
        momentum: r.momentum,
        ..TrainConfig::default()
    }
}

/// `model.cupm` + `plan.json` -> `model.plan.json`.
fn sidecar(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> cup_core::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn ratio(x: f64) -> String {
    format!("{x:.4}")
}

fn acc(x: Option<f64>) -> String {
    x.map(|a| format!("{a:.4}")).unwrap_or_default()
}

fn widths(net: &Network) -> String {
    net.widths().iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
}

/// Sum of filter counts over prunable layers.
fn prunable_filters(net: &Network) -> usize {
    let w = net.widths();
    w[..w.len().saturating_sub(1)].iter().sum()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let net = Network::mlp(&a.arch.0, &mut ChaCha8Rng::seed_from_u64(a.recipe.seed))?;
    let cfg = recipe(&a.recipe, a.epochs);
    cfg.validate()?;
    let (net, log, val_acc) = if a.epochs == 0 {
        (net, Default::default(), None)
    } else {
        let data = load_data(&a.data)?;
        let out = trainer::train(net, &data.train, &cfg, Some(&data.test), None)?;
        let val = out.log.records.last().and_then(|r| r.val_acc);
        (out.network, out.log, val)
    };
    model::save(&net, &a.out)?;
    let log_path = sidecar(&a.out, "train.csv");
    write_with(&log_path, |w| log.write_csv(w))?;
    println!("arch={}", net.arch_string());
    println!("epochs={}", a.epochs);
    println!("val_acc={}", acc(val_acc));
    println!("model={}", a.out.display());
    println!("log={}", log_path.display());
    Ok(())
}

/// Optional retraining plus accuracy bookkeeping shared by the prune commands.
struct Finished {
    network: Network,
    acc_base: Option<f64>,
    acc_pruned: Option<f64>,
    acc_retrained: Option<f64>,
}

fn finish(base: &Network, pruned: Network, r: &RetrainArgs) -> Result<Finished> {
    if r.retrain_epochs == 0 && r.data.data_dir.is_none() {
        return Ok(Finished { network: pruned, acc_base: None, acc_pruned: None, acc_retrained: None });
    }
    let cfg = recipe(&r.recipe, r.retrain_epochs);
    cfg.validate()?;
    let test = load_split(&r.data, Split::Test)?;
    let acc_base = Some(evaluate(base, &test)?);
    let acc_pruned = Some(evaluate(&pruned, &test)?);
    if r.retrain_epochs == 0 {
        return Ok(Finished { network: pruned, acc_base, acc_pruned, acc_retrained: None });
    }
    let train_set = load_split(&r.data, Split::Train)?;
    let out = trainer::train(pruned, &train_set, &cfg, Some(&test), None)?;
    let acc_retrained = Some(evaluate(&out.network, &test)?);
    Ok(Finished { network: out.network, acc_base, acc_pruned, acc_retrained })
}

fn write_prune_outputs(out: &Path, outcome: &PruneOutcome, done: &Finished) -> Result<()> {
    model::save(&done.network, out)?;
    let plan_path = sidecar(out, "plan.json");
    let cost_path = sidecar(out, "cost.csv");
    let mut plan = serde_json::to_string_pretty(&outcome.plan).map_err(cup_core::Error::from)?;
    plan.push('\n');
    std::fs::write(&plan_path, plan)?;
    write_with(&cost_path, |w| outcome.costs.write_csv(w))?;
    let c = &outcome.costs;
    println!("arch={}", done.network.arch_string());
    println!("params_before={}", c.before.total_params);
    println!("params_after={}", c.after.total_params);
    println!("flops_before={}", c.before.total_flops);
    println!("flops_after={}", c.after.total_flops);
    println!("pr={}", ratio(c.reduction.params));
    println!("fr={}", ratio(c.reduction.flops));
    println!("acc_base={}", acc(done.acc_base));
    println!("acc_before_retrain={}", acc(done.acc_pruned));
    println!("acc_after_retrain={}", acc(done.acc_retrained));
    println!("model={}", out.display());
    println!("plan={}", plan_path.display());
    println!("cost={}", cost_path.display());
    Ok(())
}

fn prune_mode(mode: Mode, t: Option<f64>, counts: Option<Counts>) -> Result<PruneMode> {
    match (mode, t, counts) {
        (Mode::Auto, Some(threshold), None) => Ok(PruneMode::Automatic { threshold }),
        (Mode::Auto, _, Some(_)) => Err(CliError::Usage("--counts needs --mode manual".into())),
        (Mode::Auto, None, None) => Err(CliError::Usage("--mode auto needs --t".into())),
        (Mode::Manual, None, Some(Counts(counts))) => Ok(PruneMode::Manual { counts }),
        (Mode::Manual, Some(_), _) => Err(CliError::Usage("--t needs --mode auto".into())),
        (Mode::Manual, None, None) => Err(CliError::Usage("--mode manual needs --counts".into())),
    }
}

pub fn prune(a: PruneArgs) -> Result<()> {
    let mode = prune_mode(a.mode, a.t, a.counts)?;
    let net = model::load(&a.model)?;
    let outcome = cup_prune(&net, &mode, a.normalize)?;
    let done = finish(&net, outcome.network.clone(), &a.retrain)?;
    write_prune_outputs(&a.out, &outcome, &done)
}

pub fn prune_baseline(a: BaselineArgs) -> Result<()> {
    let criterion = match a.criterion {
        CriterionArg::Random => Criterion::Random { seed: a.retrain.recipe.seed },
        CriterionArg::L1 => Criterion::L1,
        CriterionArg::L2 => Criterion::L2,
    };
    let net = model::load(&a.model)?;
    let outcome = baseline_prune(&net, criterion, &a.counts.0)?;
    let done = finish(&net, outcome.network.clone(), &a.retrain)?;
    write_prune_outputs(&a.out, &outcome, &done)
}

fn ss_config(f: &SsFlags, k: f64) -> Result<SsConfig> {
    let target = match f.target_flops {
        Some(flops) => FlopsTarget::Flops(flops),
        None => FlopsTarget::Reduction(f.target_fr),
    };
    let cfg = SsConfig { k, b: f.b, target, normalize: f.normalize };
    cfg.validate()?;
    Ok(cfg)
}

pub fn prune_ss(a: SsArgs) -> Result<()> {
    let scfg = ss_config(&a.ss, a.ss.k)?;
    let tcfg = recipe(&a.recipe, a.epochs);
    tcfg.validate()?;
    let net = Network::mlp(&a.arch.0, &mut ChaCha8Rng::seed_from_u64(a.recipe.seed))?;
    let data = load_data(&a.data)?;
    let out = train_ss(net, &data.train, &tcfg, &scfg, Some(&data.test))?;
    model::save(&out.network, &a.out)?;
    let csv_path = sidecar(&a.out, "history.csv");
    let json_path = sidecar(&a.out, "history.json");
    write_with(&csv_path, |w| out.history.write_csv(w))?;
    let mut json = serde_json::to_string_pretty(&out.history).map_err(cup_core::Error::from)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    let h = &out.history;
    println!("arch={}", out.network.arch_string());
    println!("flops_before={}", h.initial_flops);
    println!("flops_after={}", h.final_flops());
    println!("target_flops={}", h.target_flops);
    println!("fr={}", ratio(h.flops_reduction()));
    println!("shortfall={}", h.shortfall);
    println!("val_acc={}", acc(h.epochs.last().and_then(|e| e.val_acc)));
    println!("model={}", a.out.display());
    println!("history={}", csv_path.display());
    Ok(())
}

/// `from, from + step, ...` up to `to` (inclusive, with rounding slack).
fn grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(CliError::Usage(format!("--step must be positive, got {step}")));
    }
    if !(from.is_finite() && to.is_finite() && from <= to) {
        return Err(CliError::Usage(format!("empty range {from}..{to}")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9).collect())
}

struct SweepRow {
    value: f64,
    pr: f64,
    fr: f64,
    acc_before: f64,
    acc_after: f64,
    network: Network,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let values = grid(a.from, a.to, a.step)?;
    let param = match a.param {
        SweepParam::T => "t",
        SweepParam::K => "k",
    };
    let rcfg = recipe(&a.retrain.recipe, a.retrain.retrain_epochs);
    rcfg.validate()?;
    let mut rows = Vec::with_capacity(values.len());
    match a.param {
        SweepParam::T => {
            let path = a.model.as_ref().ok_or_else(|| CliError::Usage("--param t needs --model".into()))?;
            let net = model::load(path)?;
            let data = load_data(&a.retrain.data)?;
            for &t in &values {
                let outcome = cup_prune(&net, &PruneMode::Automatic { threshold: t }, a.ss.normalize)?;
                let acc_before = evaluate(&outcome.network, &data.test)?;
                let (network, acc_after) = retrain(outcome.network, &data, &rcfg, acc_before)?;
                log::info!("t={t}: fr {:.3} acc {acc_before:.4} -> {acc_after:.4}", outcome.costs.reduction.flops);
                rows.push(SweepRow {
                    value: t,
                    pr: outcome.costs.reduction.params,
                    fr: outcome.costs.reduction.flops,
                    acc_before,
                    acc_after,
                    network,
                });
            }
        }
        SweepParam::K => {
            let arch = a.arch.as_ref().ok_or_else(|| CliError::Usage("--param k needs --arch".into()))?;
            let tcfg = recipe(&a.retrain.recipe, a.epochs);
            tcfg.validate()?;
            let data = load_data(&a.retrain.data)?;
            for &k in &values {
                let scfg = ss_config(&a.ss, k)?;
                let net = Network::mlp(&arch.0, &mut ChaCha8Rng::seed_from_u64(a.retrain.recipe.seed))?;
                let base = cost_report(&net)?;
                let out = train_ss(net, &data.train, &tcfg, &scfg, Some(&data.test))?;
                let costs = CostComparison::new(base, cost_report(&out.network)?)?;
                let acc_before = evaluate(&out.network, &data.test)?;
                let (network, acc_after) = retrain(out.network, &data, &rcfg, acc_before)?;
                rows.push(SweepRow {
                    value: k,
                    pr: costs.reduction.params,
                    fr: costs.reduction.flops,
                    acc_before,
                    acc_after,
                    network,
                });
            }
        }
    }

    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "{SWEEP_CSV_HEADER}")?;
        writeln!(w, "param,value,pr,fr,acc_before_retrain,acc_after_retrain,filters,widths")?;
        for r in &rows {
            writeln!(
                w,
                "{param},{},{},{},{:.4},{:.4},{},{}",
                r.value,
                ratio(r.pr),
                ratio(r.fr),
                r.acc_before,
                r.acc_after,
                prunable_filters(&r.network),
                widths(&r.network)
            )?;
        }
        Ok(())
    };
    match &a.out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            write(&mut f)?;
            f.flush()?;
        }
        None => write(&mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn retrain(net: Network, data: &Data, cfg: &TrainConfig, acc_before: f64) -> Result<(Network, f64)> {
    if cfg.epochs == 0 {
        return Ok((net, acc_before));
    }
    let out = trainer::train(net, &data.train, cfg, None, None)?;
    let acc = evaluate(&out.network, &data.test)?;
    Ok((out.network, acc))
}

pub fn report(a: ReportArgs) -> Result<()> {
    let base = model::load(&a.baseline_model)?;
    let compressed = model::load(&a.compressed_model)?;
    let cmp = CostComparison::between(&base, &compressed)?;
    println!("baseline_arch={}", base.arch_string());
    println!("compressed_arch={}", compressed.arch_string());
    println!("params_before={}", cmp.before.total_params);
    println!("params_after={}", cmp.after.total_params);
    println!("flops_before={}", cmp.before.total_flops);
    println!("flops_after={}", cmp.after.total_flops);
    println!("pr={}", ratio(cmp.reduction.params));
    println!("fr={}", ratio(cmp.reduction.flops));
    match &a.out {
        Some(path) => write_with(path, |w| cmp.write_csv(w))?,
        None => cmp.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}
