//! Networks with planted duplicate filters, and the merge that folds every
//! duplicate dropped by a `t = 0` cluster prune into its surviving twin.

use cup_core::model::{Conv2d, Dense, Layer, Network};
use cup_core::numerics::Tensor;
use cup_core::pruner::{cup_plan, merge_duplicates, PruneMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(layer index, filter a, filter b)` with `a` and `b` identical.
pub type Pair = (usize, usize, usize);

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-0.5f32..0.5)).unwrap()
}

fn copy_row(t: &mut Tensor, cols: usize, from: usize, to: usize) {
    let data = t.data_mut();
    for k in 0..cols {
        data[to * cols + k] = data[from * cols + k];
    }
}

/// Copies dense filter `from` onto `to`: incoming row, bias and outgoing column.
fn duplicate_dense(layers: &mut [Layer], at: usize, next: usize, from: usize, to: usize) {
    if let Layer::Dense(d) = &mut layers[at] {
        let cols = d.inputs();
        copy_row(&mut d.weights, cols, from, to);
        let b = d.bias.data()[from];
        d.bias.data_mut()[to] = b;
    }
    if let Layer::Dense(d) = &mut layers[next] {
        let cols = d.inputs();
        let data = d.weights.data_mut();
        for r in 0..d.bias.len() {
            data[r * cols + to] = data[r * cols + from];
        }
    }
}

/// 6-8-7-3 MLP; two duplicate pairs in the first hidden layer, one in the second.
pub fn dense_case(seed: u64) -> (Network, Vec<Pair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [6, 8, 7, 3];
    let mut layers = Vec::new();
    for pair in widths.windows(2) {
        let d = Dense::new(random(&[pair[1], pair[0]], &mut rng), random(&[pair[1]], &mut rng)).unwrap();
        layers.extend([Layer::Dense(d), Layer::Relu]);
    }
    layers.pop();
    layers.push(Layer::Softmax);
    duplicate_dense(&mut layers, 0, 2, 1, 5);
    duplicate_dense(&mut layers, 0, 2, 2, 6);
    duplicate_dense(&mut layers, 2, 4, 3, 0);
    (Network::new(vec![6], layers).unwrap(), vec![(0, 1, 5), (0, 2, 6), (2, 0, 3)])
}

/// conv 2→4, conv 4→5, pool, flatten (5·3·3), dense 45→6, dense 6→3 on
/// `2 × 6 × 6` inputs, with one duplicate pair in each hidden layer.
pub fn conv_case(seed: u64) -> (Network, Vec<Pair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Conv2d::new(random(&[2, 4, 3, 3], &mut rng), random(&[4], &mut rng), 1, 1).unwrap();
    let mut b = Conv2d::new(random(&[4, 5, 3, 3], &mut rng), random(&[5], &mut rng), 1, 1).unwrap();
    let mut c = Dense::new(random(&[6, 45], &mut rng), random(&[6], &mut rng)).unwrap();
    let mut d = Dense::new(random(&[3, 6], &mut rng), random(&[3], &mut rng)).unwrap();

    // Filter 3 of `a` copies filter 1: kernels over every input channel, bias,
    // and the matching input-channel block of `b`.
    for ch in 0..2 {
        copy_row(&mut a.weights, 9, ch * 4 + 1, ch * 4 + 3);
    }
    a.bias.data_mut()[3] = a.bias.data()[1];
    copy_row(&mut b.weights, 5 * 9, 1, 3);
    // Filter 4 of `b` copies filter 0, and so does its flattened column block.
    for ch in 0..4 {
        copy_row(&mut b.weights, 9, ch * 5, ch * 5 + 4);
    }
    b.bias.data_mut()[4] = b.bias.data()[0];
    for r in 0..6 {
        for k in 0..9 {
            let v = c.weights.data()[r * 45 + k];
            c.weights.data_mut()[r * 45 + 36 + k] = v;
        }
    }
    // Filter 5 of `c` copies filter 2.
    copy_row(&mut c.weights, 45, 2, 5);
    c.bias.data_mut()[5] = c.bias.data()[2];
    for r in 0..3 {
        let v = d.weights.data()[r * 6 + 2];
        d.weights.data_mut()[r * 6 + 5] = v;
    }

    let layers = vec![
        Layer::Conv2d(a),
        Layer::Relu,
        Layer::Conv2d(b),
        Layer::Relu,
        Layer::MaxPool2d { window: 2, stride: 2 },
        Layer::Flatten,
        Layer::Dense(c),
        Layer::Relu,
        Layer::Dense(d),
        Layer::Softmax,
    ];
    (Network::new(vec![2, 6, 6], layers).unwrap(), vec![(0, 1, 3), (2, 0, 4), (6, 2, 5)])
}

/// Runs the `t = 0` plan, checks it drops exactly one filter of every pair,
/// and merges each dropped filter into the one kept.
pub fn merge_by_plan(net: &Network, pairs: &[Pair]) -> Result<Network, String> {
    let plan = cup_plan(net, &PruneMode::Automatic { threshold: 0.0 }, false).map_err(|e| e.to_string())?;
    let mut merged = net.clone();
    for lp in &plan.layers {
        let mut removed = Vec::new();
        for &(_, a, b) in pairs.iter().filter(|p| p.0 == lp.layer_index) {
            match (lp.keep.contains(&a), lp.keep.contains(&b)) {
                (true, false) => removed.push((b, a)),
                (false, true) => removed.push((a, b)),
                _ => return Err(format!("layer {}: filters {a}, {b} not split by the plan", lp.layer_index)),
            }
        }
        if removed.len() != lp.original - lp.keep.len() {
            return Err(format!("layer {} drops filters that are not duplicates", lp.layer_index));
        }
        removed.sort_by(|x, y| y.0.cmp(&x.0));
        let mut gone: Vec<usize> = Vec::new();
        for (drop, keep) in removed {
            let cur = |x: usize| x - gone.iter().filter(|&&g| g < x).count();
            let units = merged.prunable_units().map_err(|e| e.to_string())?;
            let unit = units.iter().find(|u| u.layer_index == lp.layer_index).ok_or("unit vanished")?;
            merged = merge_duplicates(&merged, unit, cur(keep), cur(drop)).map_err(|e| e.to_string())?;
            gone.push(drop);
        }
    }
    Ok(merged)
}

/// Largest absolute output difference over `samples` random inputs in `[-2, 2)`.
pub fn max_output_gap(a: &Network, b: &Network, samples: usize, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap = 0.0f32;
    for _ in 0..samples {
        let x = Tensor::from_fn(a.input_shape(), |_| rng.gen_range(-2.0f32..2.0)).unwrap();
        let (ya, yb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
        for (p, q) in ya.data().iter().zip(yb.data()) {
            gap = gap.max((p - q).abs());
        }
    }
    gap
}
