//! Exact-match micro-F1 and cross-run confidence intervals.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::codec::Record;
use crate::schema::{SentimentTuple, Task};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("sentence ids differ: missing from predictions {missing_pred:?}, missing from gold {missing_gold:?}")]
    IdMismatch {
        missing_pred: Vec<String>,
        missing_gold: Vec<String>,
    },
    #[error("duplicate sentence id `{0}`")]
    DuplicateId(String),
    #[error("need at least 2 runs to aggregate, got {0}")]
    TooFewRuns(usize),
}

/// Precision, recall and F1 from raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub tp: usize,
    pub pred_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, pred_count: usize, gold_count: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, pred_count);
        let recall = ratio(tp, gold_count);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            tp,
            pred_count,
            gold_count,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    #[serde(flatten)]
    pub overall: Prf,
    pub by_language: BTreeMap<String, Prf>,
}

pub type TupleSets = BTreeMap<String, BTreeSet<SentimentTuple>>;

fn check_ids(pred: &TupleSets, gold: &TupleSets) -> Result<(), EvalError> {
    let missing_pred: Vec<String> = gold.keys().filter(|k| !pred.contains_key(*k)).cloned().collect();
    let missing_gold: Vec<String> = pred.keys().filter(|k| !gold.contains_key(*k)).cloned().collect();
    if missing_pred.is_empty() && missing_gold.is_empty() {
        Ok(())
    } else {
        Err(EvalError::IdMismatch {
            missing_pred,
            missing_gold,
        })
    }
}

fn counts(pred: &BTreeSet<SentimentTuple>, gold: &BTreeSet<SentimentTuple>, task: Task) -> (usize, usize, usize) {
    let pred: BTreeSet<_> = pred.iter().map(|t| t.project(task)).collect();
    let gold: BTreeSet<_> = gold.iter().map(|t| t.project(task)).collect();
    (pred.intersection(&gold).count(), pred.len(), gold.len())
}

/// Micro-averaged exact-match scores over sentences keyed by id.
pub fn score(pred: &TupleSets, gold: &TupleSets, task: Task) -> Result<EvalReport, EvalError> {
    check_ids(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (id, g) in gold {
        let (t, p, n) = counts(&pred[id], g, task);
        tp += t;
        np += p;
        ng += n;
    }
    Ok(EvalReport {
        task,
        overall: Prf::from_counts(tp, np, ng),
        by_language: BTreeMap::new(),
    })
}

fn to_sets(records: &[Record]) -> Result<TupleSets, EvalError> {
    let mut out = TupleSets::new();
    for r in records {
        if out.insert(r.id.clone(), r.tuples.iter().cloned().collect()).is_some() {
            return Err(EvalError::DuplicateId(r.id.clone()));
        }
    }
    Ok(out)
}

/// [`score`] over JSONL records, with a breakdown by the gold language tag.
pub fn score_records(pred: &[Record], gold: &[Record], task: Task) -> Result<EvalReport, EvalError> {
    let pred_sets = to_sets(pred)?;
    let gold_sets = to_sets(gold)?;
    let mut report = score(&pred_sets, &gold_sets, task)?;
    let mut per_lang: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for g in gold {
        let (t, p, n) = counts(&pred_sets[&g.id], &gold_sets[&g.id], task);
        let e = per_lang.entry(g.language.clone()).or_default();
        e.0 += t;
        e.1 += p;
        e.2 += n;
    }
    report.by_language = per_lang
        .into_iter()
        .map(|(lang, (t, p, n))| (lang, Prf::from_counts(t, p, n)))
        .collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunAggregate {
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Half-width of the two-sided 95% Student-t interval.
    pub half_width: f64,
}

/// Two-sided 0.975 quantile of Student's t with `df` degrees of freedom.
pub fn t_critical_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df >= 1")
        .inverse_cdf(0.975)
}

/// Mean and 95% half-width `t(0.975, n-1) * s / sqrt(n)` with the sample
/// standard deviation `s`.
pub fn aggregate(runs: &[f64]) -> Result<RunAggregate, EvalError> {
    let n = runs.len();
    if n < 2 {
        return Err(EvalError::TooFewRuns(n));
    }
    let mean = runs.iter().sum::<f64>() / n as f64;
    let var = runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half_width = t_critical_975(n - 1) * var.sqrt() / (n as f64).sqrt();
    Ok(RunAggregate {
        runs: runs.to_vec(),
        mean,
        half_width,
    })
}
