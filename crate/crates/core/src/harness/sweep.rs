use serde::{Deserialize, Serialize};

use super::evaluate::evaluate;
use super::train::{corpus_vocab, train};
use super::RunConfig;
use crate::data::{few_shot_subset, QAInstance};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub f1t: f64,
    pub hit1: f64,
    pub em: f64,
    pub type_accuracy: Option<f64>,
}

impl SweepRow {
    pub fn from_report(size: usize, r: &MetricsReport) -> Self {
        Self {
            size,
            f1t: r.overall.f1t,
            hit1: r.overall.hit1,
            em: r.overall.em,
            type_accuracy: r.type_accuracy,
        }
    }
}

/// Trains and evaluates one model per size on nested type-stratified
/// subsets of `train`. All runs share the vocabulary of the full training
/// set, so a size-0 model is the untrained initialization. Sizes listed in
/// `known` reuse the given report instead of training again.
pub fn fewshot_sweep(
    cfg: &RunConfig,
    train_set: &[QAInstance],
    eval_set: &[QAInstance],
    sizes: &[usize],
    known: &[(usize, MetricsReport)],
) -> Result<Vec<(usize, MetricsReport)>> {
    cfg.validate()?;
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter(format!("sweep sizes must be sorted, got {sizes:?}")));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n > train_set.len()) {
        return Err(Error::Parameter(format!("sweep size {n} exceeds training set of {}", train_set.len())));
    }
    let vocab = corpus_vocab(train_set, cfg.min_count)?;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if let Some((_, r)) = known.iter().find(|(k, _)| *k == n) {
            out.push((n, r.clone()));
            continue;
        }
        let subset = few_shot_subset(train_set, n, cfg.seed)?;
        let outcome = train(cfg, &subset, Some(vocab.clone()))?;
        let report = evaluate(&outcome.checkpoint, eval_set, None, cfg.max_answer_len)?;
        log::info!("sweep size {n}: F1 {:.4}", report.overall.f1t);
        out.push((n, report));
    }
    Ok(out)
}

const HEADER: &str = "size\tf1t\thit1\tem\ttype_accuracy";

/// Tab-separated `size × metrics` table; floats use the shortest
/// representation that parses back to the same value.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        let acc = r.type_accuracy.map_or_else(|| "-".to_string(), |a| a.to_string());
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.size, r.f1t, r.hit1, r.em, acc));
    }
    out
}

pub fn parse_sweep_table(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Dataset("not a sweep table".into()));
    }
    lines
        .map(|line| {
            let bad = || Error::Dataset(format!("malformed sweep row {line:?}"));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(SweepRow {
                size: f[0].parse().map_err(|_| bad())?,
                f1t: num(f[1])?,
                hit1: num(f[2])?,
                em: num(f[3])?,
                type_accuracy: if f[4] == "-" { None } else { Some(num(f[4])?) },
            })
        })
        .collect()
}
