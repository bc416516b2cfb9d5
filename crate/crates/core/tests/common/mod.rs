#![allow(dead_code)]

use hlavqa::numcore::{Graph, Tensor, Var};
use hlavqa::saliency::SaliencyMap;
use hlavqa::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Every differentiable primitive composed into a scalar.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let t = g.tanh(m)?;
            g.sum(t)
        }),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |g, v| {
            let m = g.matmul_t(v[0], v[1])?;
            let t = g.sigmoid(m)?;
            g.sum(t)
        }),
        ("transpose", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let t = g.transpose(v[0])?;
            let m = g.matmul(t, v[1])?;
            let s = g.tanh(m)?;
            g.sum(s)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let m = g.mul(m, a)?;
            g.sum(m)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let a = g.add_row(v[0], v[1])?;
            let t = g.tanh(a)?;
            let m = g.mul(t, t)?;
            g.sum(m)
        }),
        ("mul_row", vec![vec![3, 4], vec![4]], |g, v| {
            let a = g.mul_row(v[0], v[1])?;
            let t = g.tanh(a)?;
            g.mean(t)
        }),
        ("mul_col", vec![vec![3, 4], vec![3]], |g, v| {
            let a = g.mul_col(v[0], v[1])?;
            let t = g.sigmoid(a)?;
            g.mean(t)
        }),
        ("scale_div", vec![vec![2, 5]], |g, v| {
            let a = g.scale(v[0], 1.7)?;
            let b = g.div_scalar(a, 3.0)?;
            let t = g.tanh(b)?;
            let m = g.mul(t, b)?;
            g.sum(m)
        }),
        ("relu", vec![vec![4, 4], vec![4, 4]], |g, v| {
            let r = g.relu(v[0])?;
            let m = g.mul(r, v[1])?;
            g.sum(m)
        }),
        ("softmax_masked", vec![vec![3, 5], vec![3, 5]], |g, v| {
            let s = g.softmax(v[0], Some(&[true, true, false, true, false]))?;
            let m = g.mul(s, v[1])?;
            let m = g.mul(m, s)?;
            g.sum(m)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6], vec![3, 6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let m = g.mul(y, v[3])?;
            let t = g.tanh(m)?;
            g.sum(t)
        }),
        ("bce", vec![vec![4, 6]], |g, v| {
            let t = Tensor::new(vec![4, 6], (0..24).map(|i| (i % 5) as f64 / 4.0).collect())?;
            g.bce_with_logits(v[0], &t)
        }),
        ("slices_and_concats", vec![vec![4, 6]], |g, v| {
            let a = g.slice_cols(v[0], 1, 3)?;
            let b = g.slice_cols(v[0], 4, 2)?;
            let c = g.concat_cols(&[b, a])?;
            let r1 = g.slice_rows(c, 0, 2)?;
            let r2 = g.slice_rows(c, 3, 1)?;
            let s = g.concat_rows(&[r2, r1])?;
            let t = g.tanh(s)?;
            let m = g.mul(t, s)?;
            g.sum(m)
        }),
        ("gather_scatter", vec![vec![5, 3]], |g, v| {
            let a = g.gather_rows(v[0], &[4, 0, 2])?;
            let t = g.tanh(a)?;
            let s = g.scatter_rows(t, &[1, 3, 0], 6)?;
            let m = g.mul(s, s)?;
            g.sum(m)
        }),
    ]
}

/// Values on a 2^-24 lattice, so f64 sums in any order are exact.
pub fn lattice_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    let vals = (0..h * w)
        .map(|_| rng.random_range(0u32..1 << 24) as f64 / (1u64 << 24) as f64)
        .collect();
    SaliencyMap::new(h, w, vals, w as f64 / h as f64).unwrap()
}

pub fn naive_cells(map: &SaliencyMap, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..map.height() {
                for x in 0..map.width() {
                    if y * rows / map.height() == r && x * cols / map.width() == c {
                        out[r * cols + c] += map.get(y, x);
                    }
                }
            }
        }
    }
    out
}

/// Metric by enumerating the ten leave-one-out subsets.
pub fn brute_force_accuracy(matches: usize) -> f64 {
    let hit: Vec<bool> = (0..10).map(|i| i < matches).collect();
    let mut thirds = 0;
    for left_out in 0..10 {
        let m = (0..10).filter(|&i| i != left_out && hit[i]).count();
        thirds += m.min(3);
    }
    thirds as f64 / 30.0
}
