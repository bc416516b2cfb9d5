use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::report::QtypeRow;
use super::run::{config_fingerprint, train_from_scratch, RunReport, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{IntegrationConfig, ModelConfig};

/// The four integration settings compared in an ablation, in report order.
pub fn ablation_variants(base: &IntegrationConfig) -> Vec<(&'static str, IntegrationConfig)> {
    let text_only = IntegrationConfig {
        image_layers: BTreeSet::new(),
        ..base.clone()
    };
    let image_only = IntegrationConfig {
        text_layers: BTreeSet::new(),
        ..base.clone()
    };
    vec![
        ("multimodal", base.clone()),
        ("text_only", text_only),
        ("image_only", image_only),
        ("none", IntegrationConfig::none()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub fingerprint: String,
    pub integration: IntegrationConfig,
    pub overall: Option<f64>,
    pub per_qtype: Vec<QtypeRow>,
    pub report: RunReport,
}

/// Trains the four settings of [`ablation_variants`] from the same seed.
pub fn run_ablation(
    ds: &Dataset,
    cfg: &ModelConfig,
    base: &IntegrationConfig,
    train: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ablation_variants(base)
        .into_iter()
        .map(|(name, integ)| {
            let (_, out) = train_from_scratch(cfg, ds, &integ, train, name)?;
            Ok(AblationRow {
                name: name.to_string(),
                fingerprint: out.report.fingerprint.clone(),
                integration: integ,
                overall: out.report.overall_accuracy,
                per_qtype: out.report.per_qtype.clone(),
                report: out.report,
            })
        })
        .collect()
}

pub fn write_ablation_csv(mut w: impl Write, rows: &[AblationRow]) -> Result<()> {
    let bins: Vec<&str> = rows
        .first()
        .map(|r| r.per_qtype.iter().map(|q| q.bin.as_str()).collect())
        .unwrap_or_default();
    writeln!(w, "variant,fingerprint,{}", bins.join(","))?;
    for r in rows {
        let cells: Vec<String> = r
            .per_qtype
            .iter()
            .map(|q| q.accuracy.map_or_else(|| "absent".into(), |a| format!("{a:.6}")))
            .collect();
        writeln!(w, "{},{},{}", r.name, r.fingerprint, cells.join(","))?;
    }
    Ok(())
}

pub type LayerCombo = (BTreeSet<usize>, BTreeSet<usize>);

/// Text/image layer sets of the published layer-wise study, for six layers.
pub fn paper_layer_combos() -> Vec<LayerCombo> {
    let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    vec![
        (set(&[1]), set(&[2])),
        (set(&[2]), set(&[2])),
        (set(&[1, 3, 5]), set(&[2])),
        (set(&[1]), (1..=6).collect()),
        ((1..=3).collect(), set(&[2])),
        ((1..=6).collect(), set(&[2])),
        ((1..=6).collect(), (2..=6).collect()),
    ]
}

/// Parses `"1,3,5"`, `"1-6"`, mixtures such as `"1,3-4"`, or `""`.
pub fn parse_layer_set(s: &str) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for part in s.split([',', ';']).map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || crate::Error::Config(format!("bad layer list {s:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    Ok(out)
}

pub fn format_layer_set(s: &BTreeSet<usize>) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub text_layers: BTreeSet<usize>,
    pub image_layers: BTreeSet<usize>,
    pub fingerprint: Option<String>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Trains one model per distinct combination. A failing combination yields
/// an error row and the sweep moves on.
pub fn sweep_layers(
    ds: &Dataset,
    cfg: &ModelConfig,
    base: &IntegrationConfig,
    train: &TrainConfig,
    combos: &[LayerCombo],
) -> Vec<SweepRow> {
    let mut seen = BTreeSet::new();
    combos
        .iter()
        .filter(|c| seen.insert((*c).clone()))
        .map(|(t, i)| {
            let integ = IntegrationConfig {
                text_layers: t.clone(),
                image_layers: i.clone(),
                ..base.clone()
            };
            let name = format!("text {} image {}", format_layer_set(t), format_layer_set(i));
            match train_from_scratch(cfg, ds, &integ, train, &name) {
                Ok((_, out)) => SweepRow {
                    text_layers: t.clone(),
                    image_layers: i.clone(),
                    fingerprint: Some(out.report.fingerprint),
                    accuracy: out.report.overall_accuracy,
                    error: out.report.aborted,
                },
                Err(e) => {
                    log::warn!("{name}: {e}");
                    SweepRow {
                        text_layers: t.clone(),
                        image_layers: i.clone(),
                        fingerprint: Some(config_fingerprint(cfg, &integ, train, ds)),
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "text_layers,image_layers,accuracy,fingerprint,error")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},\"{}\"",
            format_layer_set(&r.text_layers),
            format_layer_set(&r.image_layers),
            r.accuracy.map_or_else(String::new, |a| format!("{a:.6}")),
            r.fingerprint.as_deref().unwrap_or(""),
            r.error.as_deref().unwrap_or("").replace('"', "\"\"")
        )?;
    }
    Ok(())
}
