use std::collections::BTreeSet;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metric::{soft_targets, vqa_accuracy};
use super::optim::{Adam, LrSchedule};
use super::report::{report_by_length, report_by_qtype, LengthRow, QtypeRow};
use crate::data::{tokenize, Dataset, QuestionType, VqaSample, MAX_TOKENS};
use crate::error::{bail, Error, Result};
use crate::attention::{ApplyMode, AttentionPrior, NormMode};
use crate::model::{IntegrationConfig, Model, ModelConfig, SampleInput, TextPriorSource};
use crate::numcore::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Seeds both initialisation and the per-epoch shuffles.
    pub seed: u64,
    /// Epochs after which reduction weights of the first `dump_samples`
    /// validation samples are recorded.
    pub dump_epochs: BTreeSet<usize>,
    pub dump_samples: usize,
    /// Epochs fitting the text saliency network to the dataset's text
    /// priors before joint training. Used only when that network supplies
    /// the text prior.
    pub text_prior_pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 12,
            schedule: LrSchedule::default(),
            seed: 0,
            dump_epochs: BTreeSet::new(),
            dump_samples: 0,
            text_prior_pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        bad.extend(self.schedule.validate(self.epochs));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Outcome of evaluating one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u32,
    pub qtype: QuestionType,
    /// Question length in tokens, capped at the model's maximum.
    pub tokens: usize,
    pub predicted: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss.
    pub loss: f64,
    pub val_accuracy: f64,
}

/// Everything a run reports. Only `timestamp` varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub fingerprint: String,
    pub parameter_count: usize,
    pub model: ModelConfig,
    pub integration: IntegrationConfig,
    pub train: TrainConfig,
    pub optimizer_note: String,
    /// Mean squared error per text-prior pretraining epoch.
    pub pretrain_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub overall_accuracy: Option<f64>,
    pub per_qtype: Vec<QtypeRow>,
    pub per_length: Vec<LengthRow>,
    /// Set when training stopped on a numerical fault.
    pub aborted: Option<String>,
    pub timestamp: Option<u64>,
}

impl RunReport {
    /// Pretty JSON with the timestamp cleared.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.timestamp = None;
        serde_json::to_string_pretty(&r).expect("report serialises")
    }
}

/// Per-sample reduction weights and priors, for heatmaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub epoch: usize,
    pub id: u32,
    pub question: String,
    pub tokens: Vec<String>,
    pub qtype: QuestionType,
    pub rows: usize,
    pub cols: usize,
    pub text_weights: Vec<f64>,
    pub image_weights: Vec<f64>,
    pub text_prior: Option<Vec<f64>>,
    pub image_prior: Option<Vec<f64>>,
    pub predicted: String,
    pub answers: Vec<String>,
    pub accuracy: f64,
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// Validation records of the best epoch.
    pub records: Vec<EvalRecord>,
    pub dumps: Vec<AttentionRecord>,
}

const OPTIMIZER_NOTE: &str = "Adam(0.9, 0.98, 1e-9) with warmup and step decay; a convention, not a reported setting";

#[derive(Serialize)]
struct FingerprintInput<'a> {
    model: &'a ModelConfig,
    integration: &'a IntegrationConfig,
    train: &'a TrainConfig,
    data: &'a crate::data::DatasetMeta,
    answers: &'a [String],
    train_size: usize,
    val_size: usize,
}

/// Hex SHA-256 of the canonical JSON of everything that shapes a run.
pub fn config_fingerprint(model: &ModelConfig, integ: &IntegrationConfig, train: &TrainConfig, ds: &Dataset) -> String {
    let input = FingerprintInput {
        model,
        integration: integ,
        train,
        data: &ds.meta,
        answers: &ds.answers,
        train_size: ds.train.len(),
        val_size: ds.val.len(),
    };
    let bytes = serde_json::to_vec(&input).expect("config serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn workers(len: usize) -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(len).max(1)
}

/// Predicts every sample (in parallel over samples) and scores it.
pub fn evaluate(model: &Model, ds: &Dataset, samples: &[VqaSample], integ: &IntegrationConfig) -> Result<Vec<EvalRecord>> {
    let inputs = ds.encode_all(samples, integ.norm_mode)?;
    evaluate_encoded(model, ds, samples, &inputs, integ)
}

fn evaluate_encoded(
    model: &Model,
    ds: &Dataset,
    samples: &[VqaSample],
    inputs: &[SampleInput],
    integ: &IntegrationConfig,
) -> Result<Vec<EvalRecord>> {
    integ.validate(&model.cfg)?;
    let one = |s: &VqaSample, x: &SampleInput| -> Result<EvalRecord> {
        let pred = model.predict(x, integ)?;
        let Some(answer) = ds.answers.get(pred.scores.argmax()) else {
            bail!(Config, "model has more outputs than the answer vocabulary");
        };
        Ok(EvalRecord {
            id: s.id,
            qtype: s.qtype,
            tokens: tokenize(&s.question).len().min(MAX_TOKENS),
            predicted: answer.clone(),
            accuracy: vqa_accuracy(answer, &s.answers)?,
        })
    };
    let k = workers(samples.len());
    if k == 1 {
        return samples.iter().zip(inputs).map(|(s, x)| one(s, x)).collect();
    }
    let chunk = samples.len().div_ceil(k);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .zip(inputs.chunks(chunk))
            .map(|(ss, xs)| scope.spawn(move || ss.iter().zip(xs).map(|(s, x)| one(s, x)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Reduction weights, priors and predictions for `samples`.
pub fn dump_attention(
    model: &Model,
    ds: &Dataset,
    samples: &[VqaSample],
    integ: &IntegrationConfig,
    epoch: usize,
) -> Result<Vec<AttentionRecord>> {
    samples
        .iter()
        .map(|s| {
            let x = ds.encode(s, integ.norm_mode)?;
            let pred = model.predict(&x, integ)?;
            let predicted = ds.answers[pred.scores.argmax()].clone();
            let img = &ds.images[&s.image];
            let mut tokens = tokenize(&s.question);
            tokens.truncate(MAX_TOKENS);
            let n = tokens.len();
            Ok(AttentionRecord {
                epoch,
                id: s.id,
                question: s.question.clone(),
                qtype: s.qtype,
                rows: img.rows,
                cols: img.cols,
                text_weights: pred.text_weights[..n].to_vec(),
                image_weights: pred.image_weights,
                text_prior: pred.text_prior.map(|p| p[..n].to_vec()),
                image_prior: pred.image_prior,
                accuracy: vqa_accuracy(&predicted, &s.answers)?,
                predicted,
                answers: s.answers.clone(),
                tokens,
            })
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Fits the text saliency network alone to the provided text priors
/// (sum-to-one, squared error).
fn pretrain_text_prior(
    model: &mut Model,
    inputs: &[SampleInput],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let Some(tsm) = model.tsm.clone() else {
        bail!(Config, "model has no text saliency network to pretrain");
    };
    let usable: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].text_prior.is_some()).collect();
    if usable.is_empty() {
        bail!(Data, "no training sample carries a text prior");
    }
    let targets: Vec<Vec<f64>> = usable
        .iter()
        .map(|&i| {
            let x = &inputs[i];
            let p = x.text_prior.as_ref().expect("filtered");
            AttentionPrior::from_raw(p.weights(), Some(&x.mask), NormMode::SumToOne, ApplyMode::PerKey).map(|p| p.into_weights())
        })
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::new();
    for epoch in 1..=cfg.text_prior_pretrain_epochs {
        order.shuffle(rng);
        let mut total = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true)?;
            let mut errs = Vec::with_capacity(batch.len());
            for &k in batch {
                let x = &inputs[usable[k]];
                let emb = g.constant(x.question.clone())?;
                let out = tsm.forward(&mut g, &p, emb, Some(&x.mask), NormMode::SumToOne)?;
                let t = g.constant(Tensor::row_vector(targets[k].clone())?)?;
                let d = g.sub(out, t)?;
                let sq = g.mul(d, d)?;
                errs.push(g.sum(sq)?);
            }
            let all = g.concat_cols(&errs)?;
            let loss = g.mean(all)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                bail!(Numerical, "text prior loss {} at pretraining epoch {}", value, epoch);
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            drop(g);
            adam.step(&mut model.store, &grads, cfg.schedule.base_lr)?;
            total.push(value);
        }
        let l = mean(total.into_iter()).unwrap_or(f64::NAN);
        log::info!("text prior pretraining epoch {epoch}: loss {l:.6}");
        losses.push(l);
    }
    Ok(losses)
}

/// Builds a model from `cfg` seeded with `train.seed` and trains it.
pub fn train_from_scratch(
    cfg: &ModelConfig,
    ds: &Dataset,
    integ: &IntegrationConfig,
    train: &TrainConfig,
    name: &str,
) -> Result<(Model, TrainOutcome)> {
    let mut model = Model::new(cfg.clone(), train.seed)?;
    let out = self::train(&mut model, ds, integ, train, name)?;
    Ok((model, out))
}

/// Minibatch training with soft-target BCE. On return `model` holds the
/// parameters of the epoch with the best validation accuracy. A numerical
/// fault stops training and is recorded in the report instead of failing.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    integ: &IntegrationConfig,
    cfg: &TrainConfig,
    name: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    integ.validate(&model.cfg)?;
    if ds.train.is_empty() {
        bail!(Data, "training split is empty");
    }
    if ds.val.is_empty() {
        bail!(Data, "validation split is empty");
    }
    if ds.answers.len() != model.cfg.answer_vocab_size {
        bail!(
            Config,
            "dataset has {} answers, model outputs {}",
            ds.answers.len(),
            model.cfg.answer_vocab_size
        );
    }
    let train_in = ds.encode_all(&ds.train, integ.norm_mode)?;
    let val_in = ds.encode_all(&ds.val, integ.norm_mode)?;
    let targets = ds
        .train
        .iter()
        .map(|s| soft_targets(&s.answers, &ds.answers))
        .collect::<Result<Vec<_>>>()?;
    let a = ds.answers.len();

    let mut report = RunReport {
        name: name.to_string(),
        fingerprint: config_fingerprint(&model.cfg, integ, cfg, ds),
        parameter_count: model.store.numel(),
        model: model.cfg.clone(),
        integration: integ.clone(),
        train: cfg.clone(),
        optimizer_note: OPTIMIZER_NOTE.to_string(),
        pretrain_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        overall_accuracy: None,
        per_qtype: Vec::new(),
        per_length: Vec::new(),
        aborted: None,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs()),
    };
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let uses_tsm = !integ.text_layers.is_empty() && integ.text_source == TextPriorSource::Tsm;
    if uses_tsm && cfg.text_prior_pretrain_epochs > 0 {
        match pretrain_text_prior(model, &train_in, cfg, &mut rng) {
            Ok(l) => report.pretrain_losses = l,
            Err(Error::Numerical(msg)) => {
                log::error!("{name}: text prior pretraining aborted: {msg}");
                report.aborted = Some(msg);
                return Ok(TrainOutcome {
                    report,
                    records: Vec::new(),
                    dumps: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let mut adam = Adam::new(&model.store);
    let mut best: Option<(f64, crate::params::ParamStore, Vec<EvalRecord>)> = None;
    let mut dumps = Vec::new();

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let step = (|| -> Result<f64> {
                let mut g = Graph::new();
                let p = model.store.bind(&mut g, true)?;
                let mut logits = Vec::with_capacity(batch.len());
                let mut t = Vec::with_capacity(batch.len() * a);
                for &i in batch {
                    logits.push(model.forward_sample(&mut g, &p, &train_in[i], integ)?.logits);
                    t.extend_from_slice(&targets[i]);
                }
                let z = g.concat_rows(&logits)?;
                let loss = g.bce_with_logits(z, &Tensor::matrix(batch.len(), a, t)?)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    bail!(Numerical, "loss {} at epoch {}", value, epoch);
                }
                g.backward(loss)?;
                let grads = p.grads(&g);
                drop(g);
                adam.step(&mut model.store, &grads, lr)?;
                Ok(value)
            })();
            match step {
                Ok(l) => losses.push(l),
                Err(Error::Numerical(msg)) => {
                    log::error!("{name}: training aborted: {msg}");
                    report.aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let records = evaluate_encoded(model, ds, &ds.val, &val_in, integ)?;
        let acc = mean(records.iter().map(|r| r.accuracy)).unwrap_or(0.0);
        let loss = mean(losses.iter().copied()).unwrap_or(f64::NAN);
        log::info!("{name}: epoch {epoch} lr {lr:.3e} loss {loss:.6} val accuracy {acc:.4}");
        report.epochs.push(EpochLog {
            epoch,
            lr,
            loss,
            val_accuracy: acc,
        });
        if cfg.dump_epochs.contains(&epoch) && cfg.dump_samples > 0 {
            let k = cfg.dump_samples.min(ds.val.len());
            dumps.extend(dump_attention(model, ds, &ds.val[..k], integ, epoch)?);
        }
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            report.best_epoch = Some(epoch);
            best = Some((acc, model.store.clone(), records));
        }
    }

    let records = match best {
        Some((_, store, records)) => {
            model.store = store;
            records
        }
        None => Vec::new(),
    };
    if !records.is_empty() {
        report.overall_accuracy = mean(records.iter().map(|r| r.accuracy));
        report.per_qtype = report_by_qtype(&records);
        report.per_length = report_by_length(&records, None);
    }
    Ok(TrainOutcome { report, records, dumps })
}
