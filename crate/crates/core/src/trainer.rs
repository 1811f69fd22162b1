//! Mini-batch SGD for ReLU MLPs with a fused softmax cross-entropy loss.
//!
//! Only dense, relu, flatten and a final softmax layer are trainable. Conv
//! layers support inference only. Training is single-threaded and
//! bit-reproducible for a fixed seed.

mod engine;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::numerics::Tensor;
use crate::pruner::cost_report;
use engine::{argmax, grad_at, Fault, Mlp};

/// Conventional MNIST pixel statistics after scaling to `[0, 1]`.
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

pub const TRAIN_LOG_HEADER: &str = "# cup-train-log v1";

const EVAL_CHUNK: usize = 500;

/// Labelled samples. `images` has shape `N × ...`; each sample is flattened
/// row-major when fed to a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::Pairing(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Values per sample.
    pub fn features(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let f = self.features();
        &self.images.data()[i * f..(i + 1) * f]
    }

    /// `(x - mean) / std` applied to every value.
    pub fn standardized(mut self, mean: f32, std: f32) -> Self {
        for v in self.images.data_mut() {
            *v = (*v - mean) / std;
        }
        self
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let images = Tensor::new(shape, self.images.data()[..n * self.features()].to_vec())
            .expect("prefix of a valid tensor");
        Dataset {
            images,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    fn gather<T: engine::Scalar>(&self, indices: &[usize], out: &mut Vec<T>) {
        out.clear();
        for &i in indices {
            out.extend(self.sample(i).iter().map(|&v| T::from_f32(v)));
        }
    }
}

/// Multiply the learning rate by `factor` from epoch `floor(at · epochs)` on
/// (0-based). A drop that would land on epoch 0 is ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub at: f64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 penalty on weights; biases are not decayed.
    pub weight_decay: f64,
    pub lr_drops: Vec<LrDrop>,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            weight_decay: 1e-4,
            lr_drops: vec![LrDrop { at: 0.5, factor: 0.1 }, LrDrop { at: 0.75, factor: 0.1 }],
            seed: 0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        for drop in &self.lr_drops {
            if !(drop.factor > 0.0 && drop.factor <= 1.0) {
                return Err(Error::Config(format!("lr drop factor must lie in (0, 1], got {}", drop.factor)));
            }
            if !(0.0..=1.0).contains(&drop.at) {
                return Err(Error::Config(format!("lr drop position must lie in [0, 1], got {}", drop.at)));
            }
        }
        Ok(())
    }

    /// Learning rate used during 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|d| {
                let start = (d.at * self.epochs as f64).floor() as usize;
                start > 0 && epoch >= start
            })
            .fold(self.lr, |lr, d| lr * d.factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    /// Size of the network trained during this epoch.
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{TRAIN_LOG_HEADER}")?;
        writeln!(out, "epoch,lr,train_loss,val_acc,params,flops")?;
        for r in &self.records {
            let acc = r.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            // 0.1 * 0.1 * 0.1 prints as 0.0010000000000000002 otherwise.
            let lr: f64 = format!("{:.12e}", r.lr).parse().unwrap_or(r.lr);
            writeln!(out, "{},{},{:.6},{},{},{}", r.epoch, lr, r.train_loss, acc, r.params, r.flops)?;
        }
        Ok(())
    }
}

/// Called before every epoch with the 1-based epoch number and the current
/// network. Returning a network replaces the one being trained.
pub type EpochHook<'a> = dyn FnMut(usize, &Network) -> Result<Option<Network>> + 'a;

pub struct TrainOutcome {
    pub network: Network,
    pub log: TrainLog,
}

struct Optimizer {
    velocity: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    fn new(mlp: &Mlp<f32>) -> Self {
        Optimizer {
            velocity: mlp.dense.iter().map(|d| (vec![0.0; d.w.len()], vec![0.0; d.b.len()])).collect(),
        }
    }

    fn step(&mut self, mlp: &mut Mlp<f32>, grads: &engine::Grads<f32>, lr: f32, weight_decay: f32, momentum: f32) {
        for ((params, (gw, gb)), (vw, vb)) in mlp.dense.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in params.w.iter_mut().zip(gw).zip(vw.iter_mut()) {
                let g = g + weight_decay * *w;
                if momentum > 0.0 {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                } else {
                    *w -= lr * g;
                }
            }
            for ((b, &g), v) in params.b.iter_mut().zip(gb).zip(vb.iter_mut()) {
                if momentum > 0.0 {
                    *v = momentum * *v + g;
                    *b -= lr * *v;
                } else {
                    *b -= lr * g;
                }
            }
        }
    }
}

fn check_inputs(net: &Network, data: &Dataset) -> Result<()> {
    let inputs: usize = net.input_shape().iter().product();
    if inputs != data.features() {
        return Err(Error::Dimension(format!(
            "network takes {inputs} inputs, dataset samples have {}",
            data.features()
        )));
    }
    Ok(())
}

/// Trains `net` for `cfg.epochs` epochs of shuffled mini-batch SGD.
pub fn train(
    net: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    mut hook: Option<&mut EpochHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { network: net, log: TrainLog::default() });
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut net = net;
    let mut mlp = Mlp::<f32>::from_network(&net)?;
    let mut opt = Optimizer::new(&mlp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut x = Vec::new();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        if let Some(hook) = hook.as_deref_mut() {
            if let Some(replacement) = hook(epoch + 1, &net)? {
                net = replacement;
                mlp = Mlp::from_network(&net)?;
                opt = Optimizer::new(&mlp);
            }
        }
        check_inputs(&net, data)?;
        if mlp.outputs() < data.classes() {
            return Err(Error::Dimension(format!(
                "network has {} outputs for {} classes",
                mlp.outputs(),
                data.classes()
            )));
        }
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            data.gather(chunk, &mut x);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = mlp.loss_and_grads(std::mem::take(&mut x), &labels, Fault::None);
            loss_sum += loss;
            batches += 1;
            opt.step(&mut mlp, &grads, lr as f32, cfg.weight_decay as f32, cfg.momentum as f32);
        }
        mlp.write_back(&mut net);
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() {
            log::warn!("epoch {}: training loss is not finite", epoch + 1);
        }
        let val_acc = validation.map(|v| evaluate(&net, v)).transpose()?;
        let cost = cost_report(&net)?;
        log::info!(
            "epoch {}/{}: lr {lr} loss {train_loss:.4}{}",
            epoch + 1,
            cfg.epochs,
            val_acc.map(|a| format!(" val_acc {a:.4}")).unwrap_or_default()
        );
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_acc,
            params: cost.total_params,
            flops: cost.total_flops,
        });
    }
    Ok(TrainOutcome { network: net, log })
}

/// Fraction of samples whose highest-scoring output equals the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    evaluate_in_chunks(net, data, EVAL_CHUNK)
}

/// [`evaluate`] with an explicit internal batch size.
pub fn evaluate_in_chunks(net: &Network, data: &Dataset, chunk: usize) -> Result<f64> {
    check_inputs(net, data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let chunk = chunk.max(1);
    let mut correct = 0usize;
    match Mlp::<f32>::from_network(net) {
        Ok(mlp) => {
            let indices: Vec<usize> = (0..data.len()).collect();
            let classes = mlp.outputs();
            let mut x = Vec::new();
            for idx in indices.chunks(chunk) {
                data.gather(idx, &mut x);
                let logits = mlp.logits(std::mem::take(&mut x), idx.len());
                for (row, &i) in logits.chunks_exact(classes).zip(idx) {
                    correct += usize::from(argmax(row) == data.labels[i]);
                }
            }
        }
        Err(Error::UnsupportedForTraining(_)) => {
            for i in 0..data.len() {
                let input = Tensor::new(net.input_shape().to_vec(), data.sample(i).to_vec())?;
                let out = net.forward(&input)?;
                correct += usize::from(argmax(out.data()) == data.labels[i]);
            }
        }
        Err(e) => return Err(e),
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Central difference step.
    pub step: f64,
    /// Parameters sampled per check.
    pub max_params: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, max_params: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU, where the loss is not
    /// differentiable.
    pub skipped: usize,
}

/// Gradients below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

/// Compares backpropagated gradients of the mean cross-entropy on `data`
/// against central finite differences, in `f64`.
pub fn finite_diff_check(net: &Network, data: &Dataset, opts: &GradCheck) -> Result<GradCheckReport> {
    finite_diff_check_with(net, data, opts, Fault::None)
}

fn finite_diff_check_with(net: &Network, data: &Dataset, opts: &GradCheck, fault: Fault) -> Result<GradCheckReport> {
    check_inputs(net, data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("gradient check needs at least one sample".into()));
    }
    if !(opts.step.is_finite() && opts.step > 0.0) {
        return Err(Error::Config(format!("finite difference step must be positive, got {}", opts.step)));
    }
    let mut mlp = Mlp::<f64>::from_network(net)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut x = Vec::new();
    data.gather(&all, &mut x);
    let (_, grads) = mlp.loss_and_grads(x.clone(), data.labels(), fault);

    let total = mlp.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sample = if total <= opts.max_params {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, opts.max_params).into_vec()
    };
    sample.sort_unstable();

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for p in sample {
        let original = *mlp.param_mut(p);
        *mlp.param_mut(p) = original + opts.step;
        let (plus, pattern_plus) = mlp.loss_and_pattern(x.clone(), data.labels());
        *mlp.param_mut(p) = original - opts.step;
        let (minus, pattern_minus) = mlp.loss_and_pattern(x.clone(), data.labels());
        *mlp.param_mut(p) = original;
        if pattern_plus != pattern_minus {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = grad_at(&grads, p);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
