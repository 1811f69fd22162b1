//! Dense row-major tensors and the small set of kernels the rest of the crate
//! builds on.
//!
//! Storage is `f32`; every reduction (dot products, norms, convolution patches)
//! accumulates in `f64`.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_rank(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; len])
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; len])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    /// Row vector helper: `vector(&[1.0, 2.0])` has shape `[2]`.
    pub fn vector(values: &[f32]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a rank-2 tensor from equally long rows.
    pub fn matrix(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &dim)| acc * dim + i)
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(&self.data)
    }
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "tensor rank must be between 1 and {MAX_RANK}, got shape {shape:?}"
        )));
    }
    Ok(())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn squared_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

/// Frobenius (Euclidean) norm of a flat slice of values.
pub fn frobenius_norm(x: &[f32]) -> f64 {
    squared_norm(x).sqrt()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = f64::from(a_ip);
            let b_row = &b.data[p * n..(p + 1) * n];
            for (slot, &b_pj) in acc.iter_mut().zip(b_row) {
                *slot += a_ip * f64::from(b_pj);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Output spatial extent of a sliding window, or `None` when the window does
/// not fit.
pub fn window_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation of a `(n, H, W)` input with `(n, m, kh, kw)` weights.
///
/// Returns `(m, H', W')` with `H' = (H + 2·padding − kh) / stride + 1`. Padding
/// is zero-valued. No nonlinearity is applied.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.rank() != 3 || weights.rank() != 4 || bias.rank() != 1 {
        return Err(Error::Dimension(format!(
            "conv2d expects input (n,H,W), weights (n,m,kh,kw), bias (m); got {:?}, {:?}, {:?}",
            input.shape, weights.shape, bias.shape
        )));
    }
    let (n, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (wn, m, kh, kw) = (
        weights.shape[0],
        weights.shape[1],
        weights.shape[2],
        weights.shape[3],
    );
    if wn != n {
        return Err(Error::Dimension(format!(
            "conv2d weights {:?} expect {} input channels, input {:?} has {}",
            weights.shape, wn, input.shape, n
        )));
    }
    if bias.shape[0] != m {
        return Err(Error::Dimension(format!(
            "conv2d bias {:?} does not match {} filters",
            bias.shape, m
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv2d stride must be positive".into()));
    }
    let (oh, ow) = match (
        window_output_len(h, kh, stride, padding),
        window_output_len(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )))
        }
    };

    let mut out = vec![0.0f32; m * oh * ow];
    for f in 0..m {
        let b = f64::from(bias.data[f]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for c in 0..n {
                    let kernel = &weights.data[((c * m + f) * kh) * kw..((c * m + f) * kh + kh) * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &input.data[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += f64::from(kernel[ky * kw + kx]) * f64::from(in_row[ix as usize]);
                        }
                    }
                }
                out[(f * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![m, oh, ow], out)
}

/// Max pooling over each channel of a `(c, H, W)` tensor, without padding.
pub fn maxpool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Dimension(format!(
            "maxpool2d expects a (c,H,W) input, got {:?}",
            input.shape
        )));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = match (
        window_output_len(h, window, stride, 0),
        window_output_len(w, window, stride, 0),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Dimension(format!(
                "pool window {window} (stride {stride}) does not fit input {h}x{w}"
            )))
        }
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let v = input.data[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0)).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a.at(&[i, p])) * f64::from(b.at(&[p, j]));
                }
            }
        }
        out
    }

    /// Direct six-loop convolution with explicit bounds checks.
    fn naive_conv(input: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>, usize) {
        let (n, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (m, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; m * oh * ow];
        let mut macs = 0;
        for f in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = f64::from(b.at(&[f]));
                    for c in 0..n {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as i64 - pad as i64;
                                let x = (ox * stride + kx) as i64 - pad as i64;
                                macs += 1;
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < wd {
                                    s += f64::from(w.at(&[c, f, ky, kx]))
                                        * f64::from(input.at(&[c, y as usize, x as usize]));
                                }
                            }
                        }
                    }
                    out[(f * oh + oy) * ow + ox] = s;
                }
            }
        }
        (vec![m, oh, ow], out, macs)
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);

        let a = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::matrix(&[&[3.0], &[4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - e).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_all_ones_and_bias_only() {
        let x = Tensor::filled(&[1, 3, 3], 1.0).unwrap();
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::vector(&[0.0]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let x = Tensor::filled(&[2, 4, 4], 3.0).unwrap();
        let w = Tensor::zeros(&[2, 3, 2, 2]).unwrap();
        let b = Tensor::vector(&[5.0, 5.0, 5.0]);
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv_matches_six_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 8, 8], &mut rng);
        let w = random(&[2, 4, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let (shape, expect, macs) = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), shape.as_slice());
            assert_eq!(macs, 2 * 4 * 9 * shape[1] * shape[2]);
            for (g, e) in y.data().iter().zip(expect) {
                assert!((f64::from(*g) - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::vector(&[0.0]);
        assert!(matches!(conv2d_forward(&x, &w, &b, 1, 0), Err(Error::Dimension(_))));
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_ok());
        let w2 = Tensor::zeros(&[2, 1, 1, 1]).unwrap();
        assert!(conv2d_forward(&x, &w2, &b, 1, 0).is_err());
    }

    #[test]
    fn frobenius_norm_cases() {
        assert_eq!(Tensor::filled(&[2, 2], 1.0).unwrap().frobenius_norm(), 2.0);
        assert_eq!(Tensor::zeros(&[3, 3]).unwrap().frobenius_norm(), 0.0);
        assert_eq!(Tensor::matrix(&[&[3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 7.0, 4.0]).unwrap();
        let y = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, l], &mut rng);
            let c = random(&[l, n], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / scale < 1e-4);
            }
        }

        #[test]
        fn squared_frobenius_is_sum_of_squares(values in proptest::collection::vec(-100.0f32..100.0, 1..64)) {
            let t = Tensor::vector(&values);
            let sum: f64 = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            let norm = t.frobenius_norm();
            prop_assert!((norm * norm - sum).abs() <= 1e-6 * sum.max(1e-12));
        }

        #[test]
        fn conv_matches_reference_on_random_shapes(
            seed in any::<u64>(), n in 1usize..3, m in 1usize..4, k in 1usize..4,
            h in 3usize..7, stride in 1usize..3, pad in 0usize..2,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[n, h, h + 1], &mut rng);
            let w = random(&[n, m, k, k], &mut rng);
            let b = random(&[m], &mut rng);
            let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let (shape, expect, _) = naive_conv(&x, &w, &b, stride, pad);
            prop_assert_eq!(y.shape(), shape.as_slice());
            for (g, e) in y.data().iter().zip(expect) {
                prop_assert!((f64::from(*g) - e).abs() < 1e-5);
            }
        }
    }
}
