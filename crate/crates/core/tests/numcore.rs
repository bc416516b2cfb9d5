mod common;

use common::{op_cases, rand_tensor, Build};
use hlavqa::numcore::gradcheck::{check_gradients, DEFAULT_STEP};
use hlavqa::numcore::{Graph, Tensor};
use hlavqa::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get2(i, p) * b.get2(p, j);
            }
            out[i * c + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3)).unwrap();
    let mv = g.constant(m.clone()).unwrap();
    let out = g.matmul(i, mv).unwrap();
    assert!(g.value(out).bitwise_eq(&m));

    let a = g.constant(Tensor::from_rows(&[&[2.0]])).unwrap();
    let b = g.constant(Tensor::from_rows(&[&[3.0]])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[6.0]);
}

#[test]
fn matmul_matches_naive_loop() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[7, 5]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(Error::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn identity_associativity_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[4, 6]);
    let b = rand_tensor(&mut rng, &[6, 3]);
    let mut g = Graph::new();
    let av = g.constant(a).unwrap();
    let bv = g.constant(b).unwrap();
    let i = g.constant(Tensor::identity(6)).unwrap();
    let ai = g.matmul(av, i).unwrap();
    let left = g.matmul(ai, bv).unwrap();
    let right = g.matmul(av, bv).unwrap();
    assert!(g.value(left).bitwise_eq(g.value(right)));
}

fn softmax_of(row: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::row_vector(row.to_vec()).unwrap())?;
    let s = g.softmax(v, mask)?;
    Ok(g.value(s).data().to_vec())
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0], None).unwrap(), vec![0.5, 0.5]);
    let p = softmax_of(&[2f64.ln(), 0.0], None).unwrap();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    let p = softmax_of(&[5.0, 9.0], Some(&[true, false])).unwrap();
    assert_eq!(p, vec![1.0, 0.0]);
    assert!(matches!(
        softmax_of(&[1.0, 2.0], Some(&[false, false])),
        Err(Error::Validation(_))
    ));
}

#[test]
fn softmax_masked_entries_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let mask = [true, false, true, true, false];
    let mut g = Graph::new();
    let xv = g.leaf(x).unwrap();
    let wv = g.constant(w).unwrap();
    let s = g.softmax(xv, Some(&mask)).unwrap();
    for row in g.value(s).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[4], 0.0);
    }
    let p = g.mul(s, wv).unwrap();
    let l = g.sum(p).unwrap();
    g.backward(l).unwrap();
    let gx = g.grad(xv).unwrap();
    for row in gx.chunks(5) {
        assert_eq!(row[1].to_bits(), 0f64.to_bits());
        assert_eq!(row[4].to_bits(), 0f64.to_bits());
    }
}

fn ln_row(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(row.to_vec()).unwrap()).unwrap();
    let gm = g.constant(Tensor::row_vector(gamma.to_vec()).unwrap()).unwrap();
    let bt = g.constant(Tensor::row_vector(beta.to_vec()).unwrap()).unwrap();
    let y = g.layer_norm(x, gm, bt, eps).unwrap();
    assert_eq!(g.value(y).len(), n);
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    let eps = 1e-6;
    let out = ln_row(&[3.0; 4], &[1.0; 4], &[0.0; 4], eps);
    assert!(out.iter().all(|v| v.abs() <= eps.sqrt()));

    let out = ln_row(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12);
    assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

    let row = [0.3, -1.2, 2.0];
    let base = ln_row(&row, &[1.0; 3], &[0.0; 3], eps);
    let shifted = ln_row(&row, &[1.0; 3], &[0.5, -2.0, 7.0], eps);
    for ((b, s), off) in base.iter().zip(&shifted).zip([0.5, -2.0, 7.0]) {
        assert_eq!(*s, b + off);
    }
}

fn naive_bce(z: f64, t: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
}

#[test]
fn bce_examples_and_naive_oracle() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let l = g.bce_with_logits(z, &Tensor::filled(&[2, 3], 0.5)).unwrap();
    assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);

    let z = g.constant(Tensor::filled(&[1, 2], 40.0)).unwrap();
    let l = g.bce_with_logits(z, &Tensor::filled(&[1, 2], 1.0)).unwrap();
    assert!(g.value(l).data()[0] < 1e-15);

    let bad = g.bce_with_logits(z, &Tensor::filled(&[1, 2], 1.5));
    assert!(matches!(bad, Err(Error::Validation(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = rand_tensor(&mut rng, &[4, 6]);
    let targets = Tensor::new(vec![4, 6], (0..24).map(|_| rng.random_range(0.0..=1.0)).collect())
        .unwrap();
    let z = g.constant(logits.clone()).unwrap();
    let l = g.bce_with_logits(z, &targets).unwrap();
    let oracle: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &t)| naive_bce(z, t))
        .sum::<f64>()
        / 24.0;
    assert!((g.value(l).data()[0] - oracle).abs() <= 1e-10);
}

#[test]
fn backward_trivial_cases() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[&[1.0, -2.0, 3.5]])).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(matches!(g.backward(s), Err(Error::Graph(_))));
    g.zero_grads();
    g.backward(s).unwrap();

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0)).unwrap();
    let y = g.leaf(Tensor::scalar(-4.0)).unwrap();
    let p = g.mul(x, y).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-4.0]);
    assert_eq!(g.grad(y).unwrap(), &[3.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Graph(_))));
}

#[test]
fn unused_leaves_still_get_a_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.0)).unwrap();
    let unused = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 4]);
}

#[test]
fn nonfinite_output_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1e308)).unwrap();
    assert!(matches!(g.scale(x, 10.0), Err(Error::Numerical(_))));
}

#[test]
fn every_op_passes_finite_difference_check() {
    for (name, shapes, build) in op_cases() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let report = check_gradients(&inputs, build, DEFAULT_STEP, None).unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "{name} seed {seed}: {:?}",
                report
            );
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn random_two_layer_net_gradient() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[5, 4]),
            rand_tensor(&mut rng, &[4, 8]),
            rand_tensor(&mut rng, &[8]),
            rand_tensor(&mut rng, &[8, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let build: Build = |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.relu(h)?;
            let o = g.matmul(h, v[3])?;
            let o = g.add_row(o, v[4])?;
            let t = Tensor::new(vec![5, 3], vec![0.0, 1.0, 0.3, 0.9, 0.1, 0.0, 1.0, 0.5, 0.5, 0.2, 0.2, 0.7, 0.0, 0.0, 1.0])?;
            g.bce_with_logits(o, &t)
        };
        let report = check_gradients(&inputs, build, DEFAULT_STEP, None).unwrap();
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn same_ops_same_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = rand_tensor(&mut rng, &[6, 5]);
        let b = rand_tensor(&mut rng, &[5, 5]);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(a).unwrap(), g.leaf(b).unwrap());
        let m = g.matmul(av, bv).unwrap();
        let s = g.softmax(m, None).unwrap();
        let l = g.mean(s).unwrap();
        let l2 = g.mul(l, l).unwrap();
        g.backward(l2).unwrap();
        (
            g.value(s).clone(),
            g.grad(av).unwrap().to_vec(),
            g.grad(bv).unwrap().to_vec(),
        )
    };
    let (s1, ga1, gb1) = run();
    let (s2, ga2, gb2) = run();
    assert!(s1.bitwise_eq(&s2));
    assert!(ga1.iter().zip(&ga2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gb1.iter().zip(&gb2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            mask in proptest::collection::vec(any::<bool>(), 4),
        ) {
            prop_assume!(mask.iter().any(|&m| m));
            let mut g = Graph::new();
            let v = g.constant(Tensor::matrix(3, 4, vals).unwrap()).unwrap();
            let s = g.softmax(v, Some(&mask)).unwrap();
            for row in g.value(s).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                for (p, &m) in row.iter().zip(&mask) {
                    prop_assert!(*p >= 0.0);
                    if !m { prop_assert_eq!(*p, 0.0); }
                }
            }
        }
    }
}
