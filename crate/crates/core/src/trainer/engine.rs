//! Batched forward/backward for ReLU MLPs.
//!
//! Activations are row-major `batch × width` buffers. Matrix products go
//! through `matrixmultiply`, which runs single-threaded here, so results are
//! bit-reproducible for a fixed input order.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::{Layer, Network};

pub(crate) trait Scalar: Float + std::iter::Sum + std::ops::AddAssign + std::fmt::Debug + 'static {
    /// `c = beta·c + a·b` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f32(v: f32) -> Self;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
}

/// Row-major operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = beta·c + a·b`, where `c` is row-major with `a`'s rows and `b`'s columns.
pub(crate) fn gemm<T: Scalar>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: every operand length was checked against its logical shape and strides.
    unsafe {
        T::gemm_raw(m, k, n, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DenseParams<T> {
    /// `filters × inputs`, row-major.
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub filters: usize,
    pub inputs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Op {
    Dense(usize),
    Relu,
}

/// Deliberate backward-pass faults, used to show the gradient check catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Fault {
    None,
    NegateHiddenDelta,
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp<T> {
    pub dense: Vec<DenseParams<T>>,
    pub ops: Vec<Op>,
    /// Network layer index of every dense layer.
    pub layer_index: Vec<usize>,
    pub inputs: usize,
}

/// Per-layer `(dW, db)`.
pub(crate) type Grads<T> = Vec<(Vec<T>, Vec<T>)>;

impl<T: Scalar> Mlp<T> {
    /// Extracts the trainable view of a dense-only network. Flatten layers are
    /// no-ops on flat buffers; a trailing softmax is fused into the loss.
    pub fn from_network(net: &Network) -> Result<Self> {
        let mut mlp = Mlp {
            dense: Vec::new(),
            ops: Vec::new(),
            layer_index: Vec::new(),
            inputs: net.input_shape().iter().product(),
        };
        let last = net.layers().len().saturating_sub(1);
        for (i, layer) in net.layers().iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    mlp.ops.push(Op::Dense(mlp.dense.len()));
                    mlp.layer_index.push(i);
                    mlp.dense.push(DenseParams {
                        w: d.weights.data().iter().map(|&v| T::from_f32(v)).collect(),
                        b: d.bias.data().iter().map(|&v| T::from_f32(v)).collect(),
                        filters: d.filters(),
                        inputs: d.inputs(),
                    });
                }
                Layer::Relu => mlp.ops.push(Op::Relu),
                Layer::Flatten => {}
                Layer::Softmax if i == last => {}
                other => {
                    return Err(Error::UnsupportedForTraining(format!(
                        "layer {i} is a {} layer; only dense, relu, flatten and a final softmax can be trained",
                        other.kind()
                    )))
                }
            }
        }
        if mlp.dense.is_empty() {
            return Err(Error::UnsupportedForTraining("network has no dense layer".into()));
        }
        Ok(mlp)
    }

    pub fn outputs(&self) -> usize {
        self.dense.last().map_or(self.inputs, |d| d.filters)
    }

    pub fn param_count(&self) -> usize {
        self.dense.iter().map(|d| d.w.len() + d.b.len()).sum()
    }

    /// Copies parameters back into `net`, whose architecture must match.
    pub fn write_back(&self, net: &mut Network) {
        for (params, &index) in self.dense.iter().zip(&self.layer_index) {
            if let Layer::Dense(d) = &mut net.layers_mut()[index] {
                for (dst, src) in d.weights.data_mut().iter_mut().zip(&params.w) {
                    *dst = src.to_f32().unwrap_or(f32::NAN);
                }
                for (dst, src) in d.bias.data_mut().iter_mut().zip(&params.b) {
                    *dst = src.to_f32().unwrap_or(f32::NAN);
                }
            }
        }
    }

    /// All activations: `acts[0]` is the input, `acts[k + 1]` the output of op `k`.
    pub fn forward(&self, x: Vec<T>, batch: usize) -> Vec<Vec<T>> {
        debug_assert_eq!(x.len(), batch * self.inputs);
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        acts.push(x);
        for op in &self.ops {
            let input = acts.last().expect("input pushed above");
            let out = match *op {
                Op::Dense(i) => {
                    let d = &self.dense[i];
                    let mut y = Vec::with_capacity(batch * d.filters);
                    for _ in 0..batch {
                        y.extend_from_slice(&d.b);
                    }
                    gemm(
                        Mat::new(input, batch, d.inputs),
                        Mat::new(&d.w, d.filters, d.inputs).t(),
                        T::one(),
                        &mut y,
                    );
                    y
                }
                Op::Relu => input.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            };
            acts.push(out);
        }
        acts
    }

    /// Logits for a batch.
    pub fn logits(&self, x: Vec<T>, batch: usize) -> Vec<T> {
        self.forward(x, batch).pop().expect("forward keeps the input")
    }

    /// Mean softmax cross-entropy of a batch and its parameter gradients.
    pub fn loss_and_grads(&self, x: Vec<T>, labels: &[usize], fault: Fault) -> (f64, Grads<T>) {
        let batch = labels.len();
        let acts = self.forward(x, batch);
        let classes = self.outputs();
        let logits = acts.last().expect("forward keeps the input");
        let mut delta = vec![T::zero(); batch * classes];
        let scale = T::one() / T::from(batch).expect("batch size fits");
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let z = &logits[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(z);
            loss += (lse - z[label]).to_f64().unwrap_or(f64::NAN);
            for (c, d) in delta[r * classes..(r + 1) * classes].iter_mut().enumerate() {
                let p = (z[c] - lse).exp();
                *d = (if c == label { p - T::one() } else { p }) * scale;
            }
        }

        let mut grads: Grads<T> = self
            .dense
            .iter()
            .map(|d| (vec![T::zero(); d.w.len()], vec![T::zero(); d.b.len()]))
            .collect();
        let mut width = classes;
        for (k, op) in self.ops.iter().enumerate().rev() {
            match *op {
                Op::Dense(i) => {
                    let d = &self.dense[i];
                    let input = &acts[k];
                    let (gw, gb) = &mut grads[i];
                    gemm(
                        Mat::new(&delta, batch, d.filters).t(),
                        Mat::new(input, batch, d.inputs),
                        T::zero(),
                        gw,
                    );
                    for row in delta.chunks_exact(d.filters) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    if k > 0 {
                        let mut next = vec![T::zero(); batch * d.inputs];
                        gemm(Mat::new(&delta, batch, d.filters), Mat::new(&d.w, d.filters, d.inputs), T::zero(), &mut next);
                        if fault == Fault::NegateHiddenDelta {
                            next.iter_mut().for_each(|v| *v = -*v);
                        }
                        delta = next;
                        width = d.inputs;
                    }
                }
                Op::Relu => {
                    debug_assert_eq!(acts[k + 1].len(), batch * width);
                    for (d, &a) in delta.iter_mut().zip(&acts[k + 1]) {
                        if a <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
            }
        }
        (loss / batch as f64, grads)
    }

    /// Mean cross-entropy and the ReLU on/off pattern of a batch.
    pub fn loss_and_pattern(&self, x: Vec<T>, labels: &[usize]) -> (f64, Vec<bool>) {
        let batch = labels.len();
        let acts = self.forward(x, batch);
        let classes = self.outputs();
        let logits = acts.last().expect("forward keeps the input");
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &label)| {
                let z = &logits[r * classes..(r + 1) * classes];
                (log_sum_exp(z) - z[label]).to_f64().unwrap_or(f64::NAN)
            })
            .sum();
        let pattern = self
            .ops
            .iter()
            .enumerate()
            .filter(|(_, op)| **op == Op::Relu)
            .flat_map(|(k, _)| acts[k].iter().map(|&v| v > T::zero()))
            .collect();
        (loss / batch as f64, pattern)
    }

    pub fn param_mut(&mut self, flat: usize) -> &mut T {
        let mut i = flat;
        for d in &mut self.dense {
            if i < d.w.len() {
                return &mut d.w[i];
            }
            i -= d.w.len();
            if i < d.b.len() {
                return &mut d.b[i];
            }
            i -= d.b.len();
        }
        panic!("parameter index {flat} out of range");
    }
}

pub(crate) fn grad_at<T: Copy>(grads: &Grads<T>, flat: usize) -> T {
    let mut i = flat;
    for (gw, gb) in grads {
        if i < gw.len() {
            return gw[i];
        }
        i -= gw.len();
        if i < gb.len() {
            return gb[i];
        }
        i -= gb.len();
    }
    panic!("parameter index {flat} out of range");
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
