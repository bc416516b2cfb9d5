use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::run::EvalRecord;
use crate::data::{QuestionType, MAX_TOKENS};
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QtypeRow {
    /// Question-type name, or `overall`.
    pub bin: String,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub tokens: usize,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub baseline_count: Option<usize>,
    pub baseline_accuracy: Option<f64>,
    /// `accuracy − baseline_accuracy` when both exist.
    pub delta: Option<f64>,
}

fn bin_mean(acc: &[f64]) -> Option<f64> {
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

/// One row per question type in canonical order, then `overall`.
pub fn report_by_qtype(records: &[EvalRecord]) -> Vec<QtypeRow> {
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); QuestionType::ALL.len()];
    for r in records {
        bins[r.qtype.index()].push(r.accuracy);
    }
    let mut rows: Vec<QtypeRow> = QuestionType::ALL
        .iter()
        .zip(&bins)
        .map(|(q, b)| QtypeRow {
            bin: q.as_str().to_string(),
            count: b.len(),
            accuracy: bin_mean(b),
        })
        .collect();
    let all: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    rows.push(QtypeRow {
        bin: "overall".into(),
        count: all.len(),
        accuracy: bin_mean(&all),
    });
    rows
}

fn length_bins(records: &[EvalRecord]) -> Vec<Vec<f64>> {
    let mut bins = vec![Vec::new(); MAX_TOKENS];
    for r in records {
        bins[r.tokens.clamp(1, MAX_TOKENS) - 1].push(r.accuracy);
    }
    bins
}

/// Accuracy for question lengths 1 to 14, with deltas against `baseline`.
pub fn report_by_length(records: &[EvalRecord], baseline: Option<&[EvalRecord]>) -> Vec<LengthRow> {
    let bins = length_bins(records);
    let base = baseline.map(length_bins);
    (0..MAX_TOKENS)
        .map(|i| {
            let accuracy = bin_mean(&bins[i]);
            let (baseline_count, baseline_accuracy) = match &base {
                Some(b) => (Some(b[i].len()), bin_mean(&b[i])),
                None => (None, None),
            };
            LengthRow {
                tokens: i + 1,
                count: bins[i].len(),
                accuracy,
                baseline_count,
                baseline_accuracy,
                delta: accuracy.zip(baseline_accuracy).map(|(a, b)| a - b),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    /// Mean of `a − b` over paired samples.
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided.
    pub p_value: f64,
    pub significant_at_05: bool,
}

/// Paired two-sided t-test on per-sample accuracies, matched by sample id.
pub fn paired_t_test(a: &[EvalRecord], b: &[EvalRecord]) -> Result<PairedTTest> {
    let bmap: BTreeMap<u32, f64> = b.iter().map(|r| (r.id, r.accuracy)).collect();
    if bmap.len() != b.len() || a.len() != b.len() {
        bail!(Data, "paired test needs the same samples in both runs");
    }
    let mut d = Vec::with_capacity(a.len());
    for r in a {
        let Some(&y) = bmap.get(&r.id) else {
            bail!(Data, "sample {} is missing from the second run", r.id);
        };
        d.push(r.accuracy - y);
    }
    let n = d.len();
    if n < 2 {
        bail!(Data, "paired test needs at least two samples, got {}", n);
    }
    let mean_diff = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean_diff).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (t, p_value) = if var == 0.0 {
        if mean_diff == 0.0 {
            (0.0, 1.0)
        } else {
            (mean_diff.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean_diff / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
        (t, 2.0 * dist.sf(t.abs()))
    };
    Ok(PairedTTest {
        n,
        mean_diff,
        t,
        p_value,
        significant_at_05: p_value < 0.05,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| format!("{x:.6}"))
}

pub fn write_qtype_csv(mut w: impl Write, rows: &[QtypeRow]) -> Result<()> {
    writeln!(w, "bin,count,accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.bin, r.count, opt(r.accuracy))?;
    }
    Ok(())
}

pub fn write_length_csv(mut w: impl Write, rows: &[LengthRow]) -> Result<()> {
    writeln!(w, "tokens,count,accuracy,baseline_count,baseline_accuracy,delta")?;
    for r in rows {
        let bc = r.baseline_count.map_or_else(String::new, |c| c.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.tokens,
            r.count,
            opt(r.accuracy),
            bc,
            opt(r.baseline_accuracy),
            opt(r.delta)
        )?;
    }
    Ok(())
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(e) => bail!(Data, "line {}: {}", i + 1, e),
        }
    }
    Ok(out)
}
