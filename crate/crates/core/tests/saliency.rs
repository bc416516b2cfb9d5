mod common;

use common::{lattice_map, naive_cells};
use hlavqa::attention::NormMode;
use hlavqa::numcore::gradcheck::{check_gradients, DEFAULT_STEP};
use hlavqa::numcore::{Graph, Tensor, Var};
use hlavqa::params::{Bound, Init, ParamStore};
use hlavqa::saliency::{
    aggregate_to_grid, cell_sums, crop_letterbox, load_msal, load_pgm, pgm_sidecar, save_msal, GridGeometry,
    SaliencyMap, TextSaliencyNet, TsmConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn aggregation_matches_naive_loop_and_conserves_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = lattice_map(&mut rng, 64, 96);
    let grid = GridGeometry::new(4, 6).unwrap();
    let sums = cell_sums(&map, grid).unwrap();
    let naive = naive_cells(&map, 4, 6);
    let total: f64 = naive.iter().sum();
    for (a, b) in sums.iter().zip(&naive) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(sums.iter().sum::<f64>(), map.values().iter().sum::<f64>());
    let p = aggregate_to_grid(&map, grid, NormMode::SumToOne).unwrap();
    for (w, s) in p.weights().iter().zip(&naive) {
        assert!((w - s / total).abs() <= 1e-12);
    }
}

#[test]
fn uniform_map_gives_uniform_prior() {
    let map = SaliencyMap::new(40, 60, vec![0.3; 2400], 1.5).unwrap();
    let p = aggregate_to_grid(&map, GridGeometry::new(4, 6).unwrap(), NormMode::SumToOne).unwrap();
    assert!(p.weights().iter().all(|w| (w - 1.0 / 24.0).abs() <= 1e-9));
    let p = aggregate_to_grid(&map, GridGeometry::new(4, 6).unwrap(), NormMode::MeanOne).unwrap();
    assert!(p.weights().iter().all(|w| (w - 1.0).abs() <= 1e-9));
}

#[test]
fn all_zero_map_falls_back_to_uniform() {
    let map = SaliencyMap::new(8, 8, vec![0.0; 64], 1.0).unwrap();
    let p = aggregate_to_grid(&map, GridGeometry::new(2, 2).unwrap(), NormMode::SumToOne).unwrap();
    assert_eq!(p.weights(), &[0.25; 4]);
}

#[test]
fn crop_then_aggregate_ignores_letterbox_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let content = lattice_map(&mut rng, 30, 60);
    // 60x30 content fitted into a 60x60 map: 15 rows of padding above and below.
    for pad in [0.0, 0.7] {
        let mut vals = vec![pad; 15 * 60];
        vals.extend_from_slice(content.values());
        vals.extend(std::iter::repeat_n(pad, 15 * 60));
        let boxed = SaliencyMap::new(60, 60, vals, 2.0).unwrap();
        let cropped = crop_letterbox(&boxed).unwrap();
        assert_eq!(cropped.values(), content.values());
        let grid = GridGeometry::new(3, 5).unwrap();
        let a = aggregate_to_grid(&cropped, grid, NormMode::SumToOne).unwrap();
        let b = aggregate_to_grid(&content, grid, NormMode::SumToOne).unwrap();
        assert_eq!(a.weights(), b.weights());
    }
}

#[test]
fn msal_and_pgm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = lattice_map(&mut rng, 5, 7);
    // The aspect is stored as f32.
    let map = SaliencyMap::new(5, 7, m.values().to_vec(), 1.375).unwrap();
    let path = dir.path().join("m.msal");
    save_msal(&path, &map).unwrap();
    assert_eq!(load_msal(&path).unwrap(), map);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_msal(&path), Err(hlavqa::Error::Format(_))));

    let pgm = dir.path().join("m.pgm");
    std::fs::write(&pgm, "P2\n2 2\n10\n0 5\n10 5\n").unwrap();
    std::fs::write(pgm_sidecar(&pgm), r#"{"content_aspect": 1.0}"#).unwrap();
    let m = load_pgm(&pgm).unwrap();
    assert_eq!(m.values(), &[0.0, 0.5, 1.0, 0.5]);
}

fn tsm(seed: u64, d_in: usize) -> (ParamStore, TextSaliencyNet) {
    let mut store = ParamStore::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
    let cfg = TsmConfig { hidden: 8, heads: 4 };
    let net = TextSaliencyNet::new(&mut store, &mut init, "tsm", d_in, cfg).unwrap();
    (store, net)
}

fn prior(store: &ParamStore, net: &TextSaliencyNet, emb: &Tensor, mask: &[bool], norm: NormMode) -> Vec<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let e = g.constant(emb.clone()).unwrap();
    let w = net.forward(&mut g, &p, e, Some(mask), norm).unwrap();
    g.value(w).data().to_vec()
}

fn rand_emb(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_head_gives_uniform_over_valid_tokens() {
    let (mut store, net) = tsm(0, 6);
    store.set(net.head.w, Tensor::zeros(&[16, 1])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = rand_emb(&mut rng, 5, 6);
    let w = prior(&store, &net, &emb, &[true, true, true, false, false], NormMode::SumToOne);
    assert_eq!(w, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
}

#[test]
fn prior_sums_to_one_for_every_length() {
    let (store, net) = tsm(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=14 {
        let emb = rand_emb(&mut rng, 14, 6);
        let mask: Vec<bool> = (0..14).map(|i| i < n).collect();
        let w = prior(&store, &net, &emb, &mask, NormMode::SumToOne);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(w[n..].iter().all(|&v| v == 0.0));
        let w = prior(&store, &net, &emb, &mask, NormMode::MeanOne);
        assert!((w.iter().sum::<f64>() - n as f64).abs() <= 1e-10);
    }
}

#[test]
fn empty_question_is_an_error() {
    let (store, net) = tsm(2, 4);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let e = g.constant(Tensor::zeros(&[3, 4])).unwrap();
    assert!(net.forward(&mut g, &p, e, Some(&[false; 3]), NormMode::SumToOne).is_err());
}

#[test]
fn gradients_reach_every_tsm_parameter() {
    let (store, net) = tsm(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb = rand_emb(&mut rng, 4, 3);
    let values = rand_emb(&mut rng, 4, 2);
    let mask = [true, false, true, true];
    let n_params = store.len();
    let inputs = store.tensors();
    let f = |g: &mut Graph, vars: &[Var]| {
        let p = Bound::from_vars(vars[..n_params].to_vec());
        let e = g.constant(emb.clone())?;
        let w = net.forward(g, &p, e, Some(&mask), NormMode::SumToOne)?;
        // Loss depends on the prior through a weighted read of fixed values.
        let v = g.constant(values.clone())?;
        let read = g.matmul(w, v)?;
        let sq = g.mul(read, read)?;
        g.sum(sq)
    };
    let report = check_gradients(&inputs, f, DEFAULT_STEP, Some(400)).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");

    let mut g = Graph::new();
    let p = store.bind(&mut g, true).unwrap();
    let e = g.constant(emb).unwrap();
    let w = net.forward(&mut g, &p, e, Some(&mask), NormMode::SumToOne).unwrap();
    let v = g.constant(values).unwrap();
    let read = g.matmul(w, v).unwrap();
    let sq = g.mul(read, read).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    for (id, grad) in store.ids().zip(p.grads(&g)) {
        let name = store.name(id);
        if name.ends_with(".b") && name.contains("head") {
            continue; // a shared shift of every score leaves softmax unchanged
        }
        assert!(grad.iter().any(|&x| x != 0.0), "no gradient reached {name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    /// Moving padding slots around while keeping valid tokens in order moves
    /// the prior with them.
    #[test]
    fn covariant_with_order_preserving_mask_permutations(seed in 0u64..500, n_valid in 1usize..6, shift in 0u64..1000) {
        let (store, net) = tsm(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let valid = rand_emb(&mut rng, n_valid, 4);
        let layout = |s: u64| -> Vec<bool> {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let mut m = vec![true; n_valid];
            for _ in 0..(8 - n_valid) {
                let at = r.random_range(0..=m.len());
                m.insert(at, false);
            }
            m
        };
        let mut out = Vec::new();
        for s in [shift, shift + 1] {
            let mask = layout(s);
            let mut rows = Vec::new();
            let mut k = 0;
            for &m in &mask {
                if m { rows.extend_from_slice(valid.row(k)); k += 1; } else { rows.extend(std::iter::repeat_n(0.0, 4)); }
            }
            let emb = Tensor::new(vec![8, 4], rows).unwrap();
            let w = prior(&store, &net, &emb, &mask, NormMode::SumToOne);
            let packed: Vec<f64> = w.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
            prop_assert!(w.iter().zip(&mask).all(|(v, &m)| m || *v == 0.0));
            out.push(packed);
        }
        prop_assert_eq!(&out[0], &out[1]);
    }
}
