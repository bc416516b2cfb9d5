mod common;

use common::brute_force_accuracy;
use hlavqa::data::{generate_dataset, Dataset, GenSpec, QuestionType};
use hlavqa::model::{IntegrationConfig, Model, ModelConfig};
use hlavqa::numcore::Graph;
use hlavqa::saliency::TsmConfig;
use hlavqa::train::{
    adam_step, dump_attention, evaluate, paired_t_test, read_jsonl, report_by_length, run_ablation, sweep_layers,
    train, train_from_scratch, vqa_accuracy, write_jsonl, Adam, AdamState, AttentionRecord, LrSchedule, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data(seed: u64, questions: usize) -> Dataset {
    let spec = GenSpec {
        num_images: questions / 5,
        num_questions: questions,
        ..Default::default()
    };
    generate_dataset(seed, &spec).unwrap().dataset
}

fn tiny_cfg(ds: &Dataset) -> ModelConfig {
    let mut c = ModelConfig::toy(ds.meta.d_x, ds.meta.d_emb, ds.answers.len());
    c.d_model = 16;
    c.heads = 2;
    c.ffn_hidden = 32;
    c.d_y = 16;
    c.fused_dim = 16;
    c.tsm = Some(TsmConfig { hidden: 8, heads: 2 });
    c
}

fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        seed,
        schedule: LrSchedule {
            base_lr: 3e-3,
            warmup_epochs: 1,
            decay_epochs: vec![],
            decay_factor: 0.2,
        },
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn metric_matches_enumeration(k in 0usize..=10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut answers: Vec<String> = (0..10).map(|i| if i < k { "cat".into() } else { format!("dog{}", rng.random_range(0..3)) }).collect();
        for i in (1..10).rev() {
            answers.swap(i, rng.random_range(0..=i));
        }
        let a = vqa_accuracy("Cat", &answers).unwrap();
        prop_assert_eq!(a, brute_force_accuracy(k));
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn adam_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut reference = params.clone();
    let mut state = AdamState::new(5);
    let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
    let lr = 1e-3;
    for t in 1..=100u64 {
        let grads: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        adam_step(&mut params, &grads, &mut state, t, lr).unwrap();
        let c2 = 1.0 - 0.98f64.powf(t as f64);
        let step = lr * c2.sqrt() / (1.0 - 0.9f64.powf(t as f64));
        for i in 0..5 {
            m[i] = 0.9 * m[i] + 0.1 * grads[i];
            v[i] = 0.98 * v[i] + 0.02 * grads[i] * grads[i];
            reference[i] -= step * m[i] / (v[i].sqrt() + 1e-9 * c2.sqrt());
        }
    }
    for (a, b) in params.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn store_optimizer_rejects_nan_without_touching_parameters() {
    let ds = tiny_data(1, 20);
    let mut model = Model::new(tiny_cfg(&ds), 0).unwrap();
    let before = model.store.clone();
    let mut adam = Adam::new(&model.store);
    let mut grads: Vec<Vec<f64>> = model.store.ids().map(|id| vec![0.1; model.store.get(id).len()]).collect();
    grads[3][0] = f64::NAN;
    assert!(matches!(adam.step(&mut model.store, &grads, 1e-3), Err(hlavqa::Error::Numerical(_))));
    assert!(model.store.bitwise_eq(&before));
    assert_eq!(adam.steps(), 0);
}

#[test]
fn same_seed_same_report() {
    let ds = tiny_data(2, 100);
    let cfg = tiny_cfg(&ds);
    let integ = IntegrationConfig::multimodal();
    let a = train_from_scratch(&cfg, &ds, &integ, &tiny_train(2, 5), "a").unwrap();
    let b = train_from_scratch(&cfg, &ds, &integ, &tiny_train(2, 5), "a").unwrap();
    assert_eq!(a.1.report.canonical_json(), b.1.report.canonical_json());
    assert!(a.0.store.bitwise_eq(&b.0.store));
    let c = train_from_scratch(&cfg, &ds, &integ, &tiny_train(2, 6), "a").unwrap();
    assert_ne!(a.1.report.epochs, c.1.report.epochs);
    assert_ne!(a.1.report.fingerprint, c.1.report.fingerprint);
}

#[test]
fn loss_decreases_over_first_epochs() {
    let ds = tiny_data(3, 300);
    let cfg = tiny_cfg(&ds);
    let mut decreasing = 0;
    for seed in 0..5 {
        let (_, out) = train_from_scratch(&cfg, &ds, &IntegrationConfig::multimodal(), &tiny_train(3, seed), "s").unwrap();
        let l: Vec<f64> = out.report.epochs.iter().map(|e| e.loss).collect();
        if l[1] < l[0] && l[2] < l[1] {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 3, "{decreasing} of 5 seeds");
}

#[test]
fn report_is_consistent() {
    let ds = tiny_data(4, 100);
    let cfg = tiny_cfg(&ds);
    let (model, out) = train_from_scratch(&cfg, &ds, &IntegrationConfig::multimodal(), &tiny_train(2, 1), "r").unwrap();
    let r = &out.report;
    assert_eq!(r.parameter_count, Model::count_parameters(&cfg, true));
    assert_eq!(r.epochs.len(), 2);
    assert_eq!(r.per_qtype.len(), 13);
    assert_eq!(r.per_length.len(), 14);
    assert_eq!(r.per_length.iter().map(|b| b.count).sum::<usize>(), ds.val.len());
    let best = r.epochs[r.best_epoch.unwrap() - 1].val_accuracy;
    assert!((r.overall_accuracy.unwrap() - best).abs() < 1e-12);
    for a in r.per_qtype.iter().filter_map(|q| q.accuracy).chain(r.epochs.iter().map(|e| e.val_accuracy)) {
        assert!((0.0..=1.0).contains(&a));
    }
    let again = evaluate(&model, &ds, &ds.val, &IntegrationConfig::multimodal()).unwrap();
    assert_eq!(again, out.records);
}

#[test]
fn image_prior_is_an_input_not_a_parameter() {
    let ds = tiny_data(5, 20);
    let model = Model::new(tiny_cfg(&ds), 0).unwrap();
    let s = ds.encode(&ds.train[0], Default::default()).unwrap();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true).unwrap();
    let out = model.forward_sample(&mut g, &p, &s, &IntegrationConfig::multimodal()).unwrap();
    let loss = g.sum(out.logits).unwrap();
    g.backward(loss).unwrap();
    let prior = out.image_prior.unwrap();
    assert!(!g.requires_grad(prior));
    assert!(g.grad(prior).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
    assert!(model.store.ids().all(|id| !model.store.name(id).contains("prior")));
}

#[test]
fn nan_aborts_and_keeps_partial_report() {
    let ds = tiny_data(6, 60);
    let mut model = Model::new(tiny_cfg(&ds), 0).unwrap();
    let id = model.store.find("classifier.b").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let out = train(&mut model, &ds, &IntegrationConfig::none(), &tiny_train(2, 0), "nan").unwrap();
    assert!(out.report.aborted.is_some());
    assert!(out.report.epochs.is_empty());
    assert!(out.report.overall_accuracy.is_none());
}

#[test]
fn ablation_rows_and_baseline_equivalence() {
    let ds = tiny_data(7, 60);
    let cfg = tiny_cfg(&ds);
    let tc = tiny_train(1, 3);
    let rows = run_ablation(&ds, &cfg, &IntegrationConfig::multimodal(), &tc).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["multimodal", "text_only", "image_only", "none"]);
    let fps: std::collections::BTreeSet<_> = rows.iter().map(|r| &r.fingerprint).collect();
    assert_eq!(fps.len(), 4);
    let (_, alone) = train_from_scratch(&cfg, &ds, &IntegrationConfig::none(), &tc, "none").unwrap();
    assert_eq!(rows[3].report.canonical_json(), alone.report.canonical_json());
}

#[test]
fn sweep_dedups_and_reports_bad_layers() {
    let ds = tiny_data(8, 40);
    let cfg = tiny_cfg(&ds);
    let combos = vec![
        ([1].into(), [2].into()),
        ([1].into(), [2].into()),
        ([5].into(), [2].into()),
        ([2].into(), [1].into()),
    ];
    let rows = sweep_layers(&ds, &cfg, &IntegrationConfig::multimodal(), &tiny_train(1, 0), &combos);
    assert_eq!(rows.len(), 3);
    assert!(rows[1].error.as_deref().unwrap().contains("text layer 5"));
    assert!(rows[0].accuracy.is_some() && rows[2].accuracy.is_some());
}

#[test]
fn attention_dump_round_trip() {
    let ds = tiny_data(9, 40);
    let model = Model::new(tiny_cfg(&ds), 0).unwrap();
    let recs = dump_attention(&model, &ds, &ds.val[..5], &IntegrationConfig::multimodal(), 8).unwrap();
    assert_eq!(recs.len(), 5);
    for r in &recs {
        assert_eq!(r.epoch, 8);
        assert_eq!(r.text_weights.len(), r.tokens.len());
        assert_eq!(r.image_weights.len(), r.rows * r.cols);
        for w in [&r.text_weights, &r.image_weights] {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &recs).unwrap();
    let back: Vec<AttentionRecord> = read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, recs);
}

#[test]
fn epoch_dumps_are_tagged() {
    let ds = tiny_data(10, 40);
    let cfg = tiny_cfg(&ds);
    let tc = TrainConfig {
        dump_epochs: [1, 2].into(),
        dump_samples: 3,
        ..tiny_train(2, 0)
    };
    let (_, out) = train_from_scratch(&cfg, &ds, &IntegrationConfig::multimodal(), &tc, "d").unwrap();
    let epochs: Vec<usize> = out.dumps.iter().map(|d| d.epoch).collect();
    assert_eq!(epochs, [1, 1, 1, 2, 2, 2]);
}

#[test]
fn length_report_all_correct() {
    let ds = tiny_data(11, 60);
    let recs: Vec<_> = ds
        .val
        .iter()
        .map(|s| hlavqa::train::EvalRecord {
            id: s.id,
            qtype: s.qtype,
            tokens: hlavqa::data::tokenize(&s.question).len(),
            predicted: s.answers[0].clone(),
            accuracy: 1.0,
        })
        .collect();
    let rows = report_by_length(&recs, None);
    assert!(rows.iter().all(|r| r.accuracy.is_none_or(|a| a == 1.0)));
    assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), recs.len());
    let t = paired_t_test(&recs, &recs).unwrap();
    assert_eq!((t.mean_diff, t.significant_at_05), (0.0, false));
    assert!(recs.iter().all(|r| r.qtype != QuestionType::Reading));
}
