use std::sync::Arc;

use hlavqa::attention::{ApplyMode, AttentionPrior, NormMode};
use hlavqa::model::{
    load_checkpoint, save_checkpoint, IntegrationConfig, Model, ModelConfig, QuestionEncoderKind, SampleInput,
    TextPriorSource,
};
use hlavqa::numcore::{Graph, Tensor};
use hlavqa::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ModelConfig {
    let mut c = ModelConfig::toy(12, 8, 7);
    c.d_model = 16;
    c.ffn_hidden = 24;
    c.d_y = 12;
    c.fused_dim = 10;
    c.tsm = Some(hlavqa::saliency::TsmConfig { hidden: 4, heads: 2 });
    c
}

fn sample(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize, valid: usize, m: usize) -> SampleInput {
    let mask: Vec<bool> = (0..n).map(|i| i < valid).collect();
    let q: Vec<f64> = (0..n * cfg.d_emb)
        .map(|i| if mask[i / cfg.d_emb] { rng.random_range(-1.0..1.0) } else { 0.0 })
        .collect();
    let img: Vec<f64> = (0..m * cfg.d_x).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tp: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let ip: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    SampleInput {
        question: Tensor::new(vec![n, cfg.d_emb], q).unwrap(),
        text_prior: Some(AttentionPrior::from_raw(&tp, Some(&mask), NormMode::SumToOne, ApplyMode::PerKey).unwrap()),
        image_prior: Some(AttentionPrior::from_raw(&ip, None, NormMode::SumToOne, ApplyMode::PerKey).unwrap()),
        mask,
        image: Arc::new(Tensor::new(vec![m, cfg.d_x], img).unwrap()),
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = Model::new(small_cfg(), 3).unwrap();
    let b = Model::new(small_cfg(), 3).unwrap();
    let c = Model::new(small_cfg(), 4).unwrap();
    assert!(a.store.bitwise_eq(&b.store));
    assert!(!a.store.bitwise_eq(&c.store));
}

#[test]
fn zero_encoder_layers_is_a_config_error() {
    let mut c = small_cfg();
    c.encoder_layers = 0;
    assert!(matches!(Model::new(c, 0), Err(Error::Config(_))));
}

#[test]
fn toy_forward_shapes_and_distributions() {
    let cfg = ModelConfig::toy(32, 32, 21);
    let model = Model::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = vec![sample(&mut rng, &cfg, 14, 5, 24), sample(&mut rng, &cfg, 14, 14, 24)];
    let preds = model.forward(&batch, &IntegrationConfig::multimodal()).unwrap();
    assert_eq!(preds.len(), 2);
    for (p, s) in preds.iter().zip(&batch) {
        assert_eq!(p.scores.0.len(), 21);
        assert!(p.scores.0.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!((p.text_weights.len(), p.image_weights.len()), (14, 24));
        for w in [&p.text_weights, &p.image_weights] {
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
        for (w, &m) in p.text_weights.iter().zip(&s.mask) {
            assert!(m || *w == 0.0);
        }
        let tp = p.text_prior.as_ref().unwrap();
        assert!(tp.iter().zip(&s.mask).all(|(v, &m)| m || *v == 0.0));
    }
}

#[test]
fn empty_integration_is_the_baseline_path() {
    let cfg = small_cfg();
    let model = Model::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = sample(&mut rng, &cfg, 6, 4, 6);
    let base = model.predict(&s, &IntegrationConfig::none()).unwrap();
    let other = IntegrationConfig {
        apply_mode: ApplyMode::PerQuery,
        norm_mode: NormMode::MeanOne,
        text_source: TextPriorSource::Provided,
        ..Default::default()
    };
    let p = model.predict(&s, &other).unwrap();
    assert_eq!(base.scores, p.scores);
    assert!(p.text_prior.is_none() && p.image_prior.is_none());
}

#[test]
fn unit_priors_equal_baseline_bitwise() {
    let cfg = small_cfg();
    let model = Model::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = sample(&mut rng, &cfg, 6, 4, 6);
    let base = model.predict(&s, &IntegrationConfig::none()).unwrap();
    s.text_prior = Some(AttentionPrior::from_raw(&[1.0; 6], Some(&s.mask), NormMode::MeanOne, ApplyMode::PerKey).unwrap());
    s.image_prior = Some(AttentionPrior::unit(6, ApplyMode::PerKey));
    for apply in [ApplyMode::PerKey, ApplyMode::PerQuery] {
        let integ = IntegrationConfig {
            text_layers: [1, 2].into(),
            image_layers: [1, 2].into(),
            apply_mode: apply,
            norm_mode: NormMode::MeanOne,
            text_source: TextPriorSource::Provided,
        };
        let p = model.predict(&s, &integ).unwrap();
        assert_eq!(base.scores, p.scores, "{apply:?}");
        assert_eq!(base.image_weights, p.image_weights);
    }
}

#[test]
fn missing_prior_is_a_config_error() {
    let cfg = small_cfg();
    let model = Model::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = sample(&mut rng, &cfg, 5, 5, 4);
    s.image_prior = None;
    let r = model.predict(&s, &IntegrationConfig::multimodal());
    assert!(matches!(r, Err(Error::Config(_))));
    let mut s = sample(&mut rng, &cfg, 5, 5, 4);
    s.text_prior = None;
    let integ = IntegrationConfig {
        text_layers: [1].into(),
        text_source: TextPriorSource::Provided,
        ..Default::default()
    };
    assert!(matches!(model.predict(&s, &integ), Err(Error::Config(_))));
}

#[test]
fn reduce_of_single_row_projects_that_row() {
    let cfg = small_cfg();
    let model = Model::new(cfg.clone(), 9).unwrap();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false).unwrap();
    let row = g.constant(Tensor::matrix(1, 16, (0..16).map(|i| i as f64 / 10.0).collect()).unwrap()).unwrap();
    let (out, w) = model.reduce_x.forward(&mut g, &p, row, None).unwrap();
    assert_eq!(g.value(w).data(), &[1.0]);
    let direct = model.reduce_x.merge.forward(&mut g, &p, row).unwrap();
    assert!(g.value(out).bitwise_eq(g.value(direct)));
}

#[test]
fn reduce_weights_are_masked_distributions_with_pinned_output() {
    let cfg = small_cfg();
    let model = Model::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f = Tensor::matrix(4, 16, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false).unwrap();
    let fv = g.constant(f).unwrap();
    let (out, w) = model.reduce_y.forward(&mut g, &p, fv, Some(&[true, false, true, true])).unwrap();
    let w = g.value(w).data();
    assert_eq!(w[1], 0.0);
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let got = &g.value(out).data()[..3];
    // Recorded from the first verified run.
    let pinned = [-0.6631986082539598, 0.0615538889617709, 0.7152042230419111];
    for (a, b) in got.iter().zip(pinned) {
        assert!((a - b).abs() < 1e-12, "{got:?}");
    }
}

#[test]
fn fusion_head_properties() {
    let cfg = small_cfg();
    let mut model = Model::new(cfg, 11).unwrap();
    let zero = Tensor::zeros(&[1, 10]);
    let scores = |model: &Model, y: &Tensor, x: &Tensor| {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false).unwrap();
        let (yv, xv) = (g.constant(y.clone()).unwrap(), g.constant(x.clone()).unwrap());
        let s = model.fusion.fuse_and_classify(&mut g, &p, yv, xv).unwrap();
        g.value(s).data().to_vec()
    };
    assert!(scores(&model, &zero, &zero).iter().all(|&v| v == 0.5));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y = Tensor::matrix(1, 10, (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let x = Tensor::matrix(1, 10, (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let before = scores(&model, &y, &x);
    assert!(before.iter().all(|&v| v > 0.0 && v < 1.0));
    let b = model.fusion.classifier.b;
    model.store.get_mut(b).data_mut()[3] += 0.5;
    let after = scores(&model, &y, &x);
    for k in 0..before.len() {
        if k == 3 {
            assert!(after[k] > before[k]);
        } else {
            assert_eq!(after[k], before[k]);
        }
    }
}

#[test]
fn parameter_count_matches_buffers() {
    for enc in [QuestionEncoderKind::Recurrent, QuestionEncoderKind::Linear] {
        let mut cfg = ModelConfig::toy(32, 32, 21);
        cfg.question_encoder = enc;
        let model = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(Model::count_parameters(&cfg, true), model.store.numel());
        assert_eq!(
            Model::count_parameters(&cfg, false),
            model.store.numel() - model.store.numel_with_prefix("tsm.")
        );
    }
    let mut cfg = ModelConfig::paper();
    cfg.vocab_size = 20_000;
    let n = Model::count_parameters(&cfg, true);
    assert!((50_000_000..=66_000_000).contains(&n), "{n}");
    assert_eq!(Model::count_parameters_with_embeddings(&cfg, true), n + 6_000_000);
}

#[test]
fn gradients_reach_text_prior_net_but_not_image_prior() {
    let cfg = small_cfg();
    let model = Model::new(cfg.clone(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = sample(&mut rng, &cfg, 6, 4, 6);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true).unwrap();
    let out = model.forward_sample(&mut g, &p, &s, &IntegrationConfig::multimodal()).unwrap();
    let t = Tensor::matrix(1, 7, vec![1.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0]).unwrap();
    let loss = g.bce_with_logits(out.logits, &t).unwrap();
    g.backward(loss).unwrap();
    let grads = p.grads(&g);
    let tsm_grad: f64 = model
        .store
        .ids()
        .zip(&grads)
        .filter(|(id, _)| model.store.name(*id).starts_with("tsm."))
        .map(|(_, gr)| gr.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(tsm_grad > 0.0);
    let ip = out.image_prior.unwrap();
    assert!(!g.requires_grad(ip));
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_cfg();
    let model = Model::new(cfg.clone(), 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let s = sample(&mut rng, &cfg, 7, 3, 6);
    let a = model.predict(&s, &IntegrationConfig::multimodal()).unwrap();
    let b = model.predict(&s, &IntegrationConfig::multimodal()).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.text_weights, b.text_weights);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(small_cfg(), 17).unwrap();
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert!(back.store.bitwise_eq(&model.store));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
}
