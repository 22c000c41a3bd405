//! HR@1, ValidRatio, VHR@1, proxy-task accuracy, and ablation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::CandidatePool;
use crate::error::{invalid, Error, Result};
use crate::spae::PptInstance;

/// A decoded answer: 1-based candidate index and proxy answer, either
/// `None` when the generated token was not well formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: Option<usize>,
    pub proxy: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predicted: Option<usize>,
    pub valid: bool,
    pub correct: bool,
    pub proxy: Option<bool>,
    pub proxy_correct: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr1: f64,
    pub valid_ratio: f64,
    pub vhr1: f64,
    /// Set when no answer was valid, so `hr1` is reported as 0.
    pub hr_undefined: bool,
    pub total: usize,
    pub valid: usize,
    pub correct: usize,
    pub ppt: Option<PptScore>,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PptScore {
    pub acc: f64,
    pub valid_acc: f64,
    pub valid_ratio: f64,
    pub total: usize,
    pub valid: usize,
    pub correct: usize,
}

/// Per-example records; an answer is correct only when it is valid and
/// names the positive.
pub fn records(preds: &[Prediction], pools: &[CandidatePool], ppts: Option<&[PptInstance]>) -> Result<Vec<EvalRecord>> {
    if preds.len() != pools.len() || ppts.is_some_and(|p| p.len() != preds.len()) {
        return Err(invalid("predictions, pools and proxy instances must pair up"));
    }
    Ok(preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pool = &pools[i];
            let valid = p.index.is_some_and(|k| (1..=pool.len()).contains(&k));
            EvalRecord {
                predicted: p.index,
                valid,
                correct: valid && p.index == Some(pool.positive_index + 1),
                proxy: p.proxy,
                proxy_correct: ppts.is_some_and(|t| p.proxy == Some(t[i].label)),
            }
        })
        .collect())
}

/// `ValidRatio = valid/total`, `HR@1 = correct/valid`, so that
/// `VHR@1 = ValidRatio·HR@1 = correct/total`.
pub fn score_counts(total: usize, valid: usize, correct: usize) -> Result<MetricsReport> {
    if total == 0 {
        return Err(invalid("empty evaluation set"));
    }
    if valid > total || correct > valid {
        return Err(invalid(format!("inconsistent counts {correct}/{valid}/{total}")));
    }
    let valid_ratio = valid as f64 / total as f64;
    let (hr1, hr_undefined) = if valid == 0 {
        (0.0, true)
    } else {
        (correct as f64 / valid as f64, false)
    };
    Ok(MetricsReport {
        hr1,
        valid_ratio,
        vhr1: valid_ratio * hr1,
        hr_undefined,
        total,
        valid,
        correct,
        ppt: None,
        config_hash: String::new(),
    })
}

pub fn score(preds: &[Prediction], pools: &[CandidatePool]) -> Result<MetricsReport> {
    let recs = records(preds, pools, None)?;
    score_counts(recs.len(), recs.iter().filter(|r| r.valid).count(), recs.iter().filter(|r| r.correct).count())
}

/// Accuracy over valid yes/no answers; `ValidAcc = Acc × ValidRatio`.
pub fn score_ppt(answers: &[Option<bool>], instances: &[PptInstance]) -> Result<PptScore> {
    if answers.len() != instances.len() {
        return Err(invalid("proxy answers and instances must pair up"));
    }
    let total = answers.len();
    let valid = answers.iter().filter(|a| a.is_some()).count();
    let correct = answers.iter().zip(instances).filter(|(a, t)| **a == Some(t.label)).count();
    let valid_ratio = if total == 0 { 0.0 } else { valid as f64 / total as f64 };
    let acc = if valid == 0 { 0.0 } else { correct as f64 / valid as f64 };
    Ok(PptScore {
        acc,
        valid_acc: acc * valid_ratio,
        valid_ratio,
        total,
        valid,
        correct,
    })
}

/// One labelled report in an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    /// Hash of everything except the variant switch; must agree across rows.
    pub base_hash: String,
    pub report: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

/// Metrics per variant with deltas against the `full` row (or the first
/// row when there is none). Rows keep their input order.
pub fn compare_variants(rows: &[VariantReport], format: TableFormat) -> Result<String> {
    let first = rows.first().ok_or_else(|| invalid("no reports to compare"))?;
    if let Some(bad) = rows.iter().find(|r| r.base_hash != first.base_hash) {
        return Err(Error::Config(format!(
            "variant `{}` was run with a different corpus/config ({} ≠ {})",
            bad.variant, bad.base_hash, first.base_hash
        )));
    }
    let base = rows.iter().find(|r| r.variant == "full").unwrap_or(first);
    let cols = |r: &MetricsReport| {
        [
            r.hr1,
            r.valid_ratio,
            r.vhr1,
            r.ppt.map_or(f64::NAN, |p| p.acc),
            r.ppt.map_or(f64::NAN, |p| p.valid_acc),
        ]
    };
    let b = cols(&base.report);
    let header = ["variant", "HR@1", "ValidRatio", "VHR@1", "PPT_Acc", "PPT_ValidAcc", "dHR@1", "dVHR@1"];
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        }
        TableFormat::Csv => {
            let _ = writeln!(out, "{}", header.join(","));
        }
    }
    for r in rows {
        let c = cols(&r.report);
        let fmt = |v: f64| if v.is_nan() { "-".to_string() } else { format!("{v:.4}") };
        let delta = |v: f64| format!("{v:+.4}");
        let cells = [
            r.variant.clone(),
            fmt(c[0]),
            fmt(c[1]),
            fmt(c[2]),
            fmt(c[3]),
            fmt(c[4]),
            delta(c[0] - b[0]),
            delta(c[2] - b[2]),
        ];
        let _ = match format {
            TableFormat::Markdown => writeln!(out, "| {} |", cells.join(" | ")),
            TableFormat::Csv => writeln!(out, "{}", cells.join(",")),
        };
    }
    Ok(out)
}

/// Single-report CSV (header + one row).
pub fn report_csv(r: &MetricsReport) -> String {
    let (acc, vacc) = r.ppt.map_or((String::new(), String::new()), |p| (format!("{}", p.acc), format!("{}", p.valid_acc)));
    format!(
        "hr1,valid_ratio,vhr1,hr_undefined,total,valid,correct,ppt_acc,ppt_valid_acc,config_hash\n{},{},{},{},{},{},{},{},{},{}\n",
        r.hr1, r.valid_ratio, r.vhr1, r.hr_undefined, r.total, r.valid, r.correct, acc, vacc, r.config_hash
    )
}
