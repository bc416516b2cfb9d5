//! Command-line front end: data generation, training, evaluation and the
//! experiment harness.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use hlavqa::attention::{ApplyMode, NormMode};
use hlavqa::data::{generate_dataset, load_dataset, write_dataset, Dataset, GenSpec};
use hlavqa::model::{load_checkpoint, save_checkpoint, IntegrationConfig, ModelConfig, TextPriorSource};
use hlavqa::train::{
    dump_attention, evaluate, paired_t_test, paper_layer_combos, parse_layer_set, read_jsonl, report_by_length,
    report_by_qtype, run_ablation, sweep_layers, train_from_scratch, write_ablation_csv, write_jsonl,
    write_length_csv, write_qtype_csv, write_sweep_csv, EvalRecord, LayerCombo, RunReport, TrainConfig,
};
use hlavqa::{Error, Result};

#[derive(Parser)]
#[command(name = "hlavqa", version, about = "Attention-prior VQA experiments on a synthetic grid task")]
struct Cli {
    /// JSON file with optional `gen`, `model`, `train` and `integration` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the generator and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Overrides the base learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    integ: IntegArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct IntegArgs {
    /// Layer preset: text prior in encoder layer 1, image prior in decoder layer 2.
    #[arg(long, global = true, value_enum)]
    integration: Option<Preset>,
    /// Encoder layers using the text prior, e.g. "1,3,5" or "1-6".
    #[arg(long, global = true)]
    text_layers: Option<String>,
    /// Decoder layers using the image prior.
    #[arg(long, global = true)]
    image_layers: Option<String>,
    #[arg(long, global = true, value_enum)]
    prior_mode: Option<PriorMode>,
    #[arg(long, global = true, value_enum)]
    prior_norm: Option<PriorNorm>,
    #[arg(long, global = true, value_enum)]
    text_source: Option<TextSource>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    None,
    Text,
    Image,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorMode {
    Key,
    Query,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorNorm {
    Sum1,
    Mean1,
}

#[derive(Clone, Copy, ValueEnum)]
enum TextSource {
    Tsm,
    Provided,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset into the output directory.
    GenData {
        #[arg(long)]
        questions: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        informativeness: Option<f64>,
        #[arg(long)]
        distractor_prob: Option<f64>,
    },
    /// Train one model and write its checkpoint and reports.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train multimodal, text-only, image-only and no-integration variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one model per text/image layer combination.
    SweepLayers {
        #[arg(long)]
        data: PathBuf,
        /// "TEXT/IMAGE" layer sets, e.g. "1,3,5/2". Defaults to the seven
        /// published combinations.
        #[arg(long = "combo")]
        combos: Vec<String>,
    },
    /// Per-type and per-length tables from prediction records.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Reduction weights and priors for validation samples.
    DumpAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    gen: GenSpec,
    /// Fields replacing those of the desk-scale model.
    model: serde_json::Map<String, serde_json::Value>,
    train: TrainConfig,
    integration: Option<IntegrationConfig>,
}

struct Ctx {
    file: FileConfig,
    train: TrainConfig,
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<FileConfig> {
    let Some(path) = &cli.config else {
        return Ok(FileConfig::default());
    };
    let f = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Ctx {
    fn model_config(&self, ds: &Dataset) -> Result<ModelConfig> {
        let base = ModelConfig::toy(ds.meta.d_x, ds.meta.d_emb, ds.answers.len());
        let mut v = serde_json::to_value(base)?;
        let obj = v.as_object_mut().expect("config is an object");
        for (k, val) in &self.file.model {
            obj.insert(k.clone(), val.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("model: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn integration(&self, a: &IntegArgs, stored: Option<IntegrationConfig>) -> Result<IntegrationConfig> {
        let mut integ = self
            .file
            .integration
            .clone()
            .or(stored)
            .unwrap_or_else(IntegrationConfig::multimodal);
        if let Some(p) = a.integration {
            let m = IntegrationConfig::multimodal();
            let (t, i) = match p {
                Preset::None => (Default::default(), Default::default()),
                Preset::Text => (m.text_layers, Default::default()),
                Preset::Image => (Default::default(), m.image_layers),
                Preset::Both => (m.text_layers, m.image_layers),
            };
            integ.text_layers = t;
            integ.image_layers = i;
        }
        if let Some(s) = &a.text_layers {
            integ.text_layers = parse_layer_set(s)?;
        }
        if let Some(s) = &a.image_layers {
            integ.image_layers = parse_layer_set(s)?;
        }
        if let Some(m) = a.prior_mode {
            integ.apply_mode = match m {
                PriorMode::Key => ApplyMode::PerKey,
                PriorMode::Query => ApplyMode::PerQuery,
            };
        }
        if let Some(n) = a.prior_norm {
            integ.norm_mode = match n {
                PriorNorm::Sum1 => NormMode::SumToOne,
                PriorNorm::Mean1 => NormMode::MeanOne,
            };
        }
        if let Some(s) = a.text_source {
            integ.text_source = match s {
                TextSource::Tsm => TextPriorSource::Tsm,
                TextSource::Provided => TextPriorSource::Provided,
            };
        }
        Ok(integ)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        std::fs::create_dir_all(&self.out)?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        log::info!("wrote {}", self.out.join(name).display());
        Ok(())
    }

    fn write_json(&self, name: &str, text: &str) -> Result<()> {
        self.write_with(name, |w| Ok(writeln!(w, "{text}")?))
    }

    fn write_eval_tables(&self, records: &[EvalRecord], baseline: Option<&[EvalRecord]>) -> Result<()> {
        self.write_with("qtype.csv", |w| write_qtype_csv(w, &report_by_qtype(records)))?;
        self.write_with("length.csv", |w| write_length_csv(w, &report_by_length(records, baseline)))
    }
}

fn stored_integration(checkpoint: &Path) -> Result<Option<IntegrationConfig>> {
    let p = checkpoint.with_file_name("integration.json");
    if !p.exists() {
        return Ok(None);
    }
    let f = File::open(&p)?;
    Ok(Some(serde_json::from_reader(BufReader::new(f))?))
}

fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_jsonl(BufReader::new(f))
}

fn parse_combo(s: &str) -> Result<LayerCombo> {
    let (t, i) = s
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("combination {s:?} is not TEXT/IMAGE")))?;
    Ok((parse_layer_set(t)?, parse_layer_set(i)?))
}

fn check_model(model_cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    if model_cfg.d_x != ds.meta.d_x || model_cfg.d_emb != ds.meta.d_emb || model_cfg.answer_vocab_size != ds.answers.len() {
        return Err(Error::Data(format!(
            "checkpoint expects d_x {}, d_emb {}, {} answers; dataset has {}, {}, {}",
            model_cfg.d_x,
            model_cfg.d_emb,
            model_cfg.answer_vocab_size,
            ds.meta.d_x,
            ds.meta.d_emb,
            ds.answers.len()
        )));
    }
    Ok(())
}

/// Returns whether training was aborted.
fn run(cli: Cli) -> Result<bool> {
    let file = load_config(&cli)?;
    let mut train = file.train.clone();
    if let Some(s) = cli.seed {
        train.seed = s;
    }
    if let Some(e) = cli.epochs {
        train.epochs = e;
        train.schedule.decay_epochs.retain(|&d| d <= e);
    }
    if let Some(lr) = cli.lr {
        train.schedule.base_lr = lr;
    }
    let ctx = Ctx {
        file,
        train,
        out: cli.out.clone(),
    };
    match &cli.cmd {
        Cmd::GenData {
            questions,
            images,
            informativeness,
            distractor_prob,
        } => {
            let mut spec = ctx.file.gen.clone();
            if let Some(q) = questions {
                spec.num_questions = *q;
            }
            if let Some(n) = images {
                spec.num_images = *n;
            }
            if let Some(k) = informativeness {
                spec.prior_informativeness = *k;
            }
            if let Some(p) = distractor_prob {
                spec.distractor_prob = *p;
            }
            let g = generate_dataset(cli.seed.unwrap_or(0), &spec)?;
            write_dataset(&ctx.out, &g.dataset)?;
            log::info!(
                "{} train and {} val questions written to {}",
                g.dataset.train.len(),
                g.dataset.val.len(),
                ctx.out.display()
            );
        }
        Cmd::Train { data } => {
            let ds = load_dataset(data)?;
            let cfg = ctx.model_config(&ds)?;
            let integ = ctx.integration(&cli.integ, None)?;
            let (model, out) = train_from_scratch(&cfg, &ds, &integ, &ctx.train, "train")?;
            std::fs::create_dir_all(&ctx.out)?;
            save_checkpoint(&ctx.out.join("checkpoint.bin"), &model)?;
            ctx.write_json("integration.json", &serde_json::to_string_pretty(&integ)?)?;
            ctx.write_json("report.json", &serde_json::to_string_pretty(&out.report)?)?;
            ctx.write_with("epochs.csv", |w| {
                writeln!(w, "epoch,lr,loss,val_accuracy")?;
                for e in &out.report.epochs {
                    writeln!(w, "{},{:e},{:.9},{:.6}", e.epoch, e.lr, e.loss, e.val_accuracy)?;
                }
                Ok(())
            })?;
            ctx.write_eval_tables(&out.records, None)?;
            ctx.write_with("predictions.jsonl", |w| write_jsonl(w, &out.records))?;
            ctx.write_with("attention.jsonl", |w| write_jsonl(w, &out.dumps))?;
            if let Some(msg) = &out.report.aborted {
                log::error!("training aborted: {msg}");
                return Ok(true);
            }
            println!("overall accuracy {:.4}", out.report.overall_accuracy.unwrap_or(0.0));
        }
        Cmd::Eval { data, checkpoint } => {
            let ds = load_dataset(data)?;
            let model = load_checkpoint(checkpoint)?;
            check_model(&model.cfg, &ds)?;
            let integ = ctx.integration(&cli.integ, stored_integration(checkpoint)?)?;
            integ.validate(&model.cfg)?;
            let records = evaluate(&model, &ds, &ds.val, &integ)?;
            ctx.write_eval_tables(&records, None)?;
            ctx.write_with("predictions.jsonl", |w| write_jsonl(w, &records))?;
            let overall = report_by_qtype(&records).last().and_then(|r| r.accuracy);
            println!("overall accuracy {:.4}", overall.unwrap_or(0.0));
        }
        Cmd::Ablate { data } => {
            let ds = load_dataset(data)?;
            let cfg = ctx.model_config(&ds)?;
            let integ = ctx.integration(&cli.integ, None)?;
            let rows = run_ablation(&ds, &cfg, &integ, &ctx.train)?;
            ctx.write_with("ablation.csv", |w| write_ablation_csv(w, &rows))?;
            let reports: Vec<&RunReport> = rows.iter().map(|r| &r.report).collect();
            ctx.write_json("ablation.json", &serde_json::to_string_pretty(&reports)?)?;
            for r in &rows {
                println!("{:<12} {:.4}", r.name, r.overall.unwrap_or(0.0));
            }
        }
        Cmd::SweepLayers { data, combos } => {
            let combos = if combos.is_empty() {
                paper_layer_combos()
            } else {
                combos.iter().map(|c| parse_combo(c)).collect::<Result<_>>()?
            };
            let ds = load_dataset(data)?;
            let cfg = ctx.model_config(&ds)?;
            let integ = ctx.integration(&cli.integ, None)?;
            let rows = sweep_layers(&ds, &cfg, &integ, &ctx.train, &combos);
            ctx.write_with("sweep.csv", |w| write_sweep_csv(w, &rows))?;
        }
        Cmd::Report { predictions, baseline } => {
            let records = read_records(predictions)?;
            let base = baseline.as_deref().map(read_records).transpose()?;
            ctx.write_eval_tables(&records, base.as_deref())?;
            if let Some(b) = &base {
                let t = paired_t_test(&records, b)?;
                ctx.write_json("ttest.json", &serde_json::to_string_pretty(&t)?)?;
            }
        }
        Cmd::DumpAttn {
            data,
            checkpoint,
            samples,
            epoch,
        } => {
            let ds = load_dataset(data)?;
            let model = load_checkpoint(checkpoint)?;
            check_model(&model.cfg, &ds)?;
            let integ = ctx.integration(&cli.integ, stored_integration(checkpoint)?)?;
            integ.validate(&model.cfg)?;
            let k = (*samples).min(ds.val.len());
            let recs = dump_attention(&model, &ds, &ds.val[..k], &integ, *epoch)?;
            ctx.write_with("attention.jsonl", |w| write_jsonl(w, &recs))?;
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
