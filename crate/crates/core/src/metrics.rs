//! Multi-answer QA metrics.
//!
//! All three metrics share one normalization: lowercase, split with
//! [`tokenize`], and drop tokens made only of punctuation. Two answers are
//! equal when their normalized token lists are equal.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{QAInstance, RelationType};
use crate::error::{Error, Result};
use crate::text::{is_punctuation, tokenize};

pub fn normalize(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text).filter(|t| !is_punctuation(t)).collect()
}

fn pooled_counts<S: AsRef<str>>(answers: &[S]) -> (HashMap<String, usize>, usize) {
    let mut counts = HashMap::new();
    let mut total = 0;
    for a in answers {
        for t in normalize(a.as_ref()) {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Token F1 between the pooled multisets of predicted and gold answer tokens.
pub fn f1_token<P: AsRef<str>, G: AsRef<str>>(pred: &[P], gold: &[G]) -> f64 {
    let (p, np) = pooled_counts(pred);
    let (g, ng) = pooled_counts(gold);
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let common: usize = p.iter().map(|(t, &c)| c.min(g.get(t).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / np as f64;
    let recall = common as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// 1 when the leftmost predicted answer contains some gold answer trigger as
/// a consecutive token run.
pub fn hit_at_1<P: AsRef<str>, T: AsRef<str>>(pred: &[P], gold_triggers: &[T]) -> f64 {
    let Some(first) = pred.first() else { return 0.0 };
    let hay = normalize(first.as_ref());
    let hit = gold_triggers.iter().any(|t| contains_run(&hay, &normalize(t.as_ref())));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// 1 when any predicted answer equals any gold answer after normalization.
pub fn exact_match<P: AsRef<str>, G: AsRef<str>>(pred: &[P], gold: &[G]) -> f64 {
    let gold: Vec<Vec<String>> = gold.iter().map(|g| normalize(g.as_ref())).collect();
    let hit = pred.iter().map(|p| normalize(p.as_ref())).any(|p| gold.contains(&p));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Model output for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_type: Option<RelationType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    #[serde(rename = "type")]
    pub relation: RelationType,
    pub f1t: f64,
    pub hit1: f64,
    pub em: f64,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1t: f64,
    pub hit1: f64,
    pub em: f64,
    pub count: usize,
}

impl Scores {
    fn mean<'a>(rows: impl Iterator<Item = &'a QuestionScore>) -> Self {
        let mut s = Scores::default();
        for r in rows {
            s.f1t += r.f1t;
            s.hit1 += r.hit1;
            s.em += r.em;
            s.count += 1;
        }
        if s.count > 0 {
            let n = s.count as f64;
            s.f1t /= n;
            s.hit1 /= n;
            s.em /= n;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Scores,
    /// Keyed by relation type name; types without questions are omitted.
    pub per_type: BTreeMap<String, Scores>,
    pub per_question: Vec<QuestionScore>,
    /// Share of questions whose predicted type is correct, when types were predicted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores predictions against the dataset, one prediction per instance in
/// any order. Unknown, duplicate or missing ids are errors.
pub fn build_report(predictions: &[Prediction], dataset: &[QAInstance]) -> Result<MetricsReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Invalid {
                id: p.id.clone(),
                reason: "duplicate prediction".into(),
            });
        }
    }
    if let Some(p) = predictions.iter().find(|p| !dataset.iter().any(|d| d.id == p.id)) {
        return Err(Error::Invalid {
            id: p.id.clone(),
            reason: "prediction for an instance not in the dataset".into(),
        });
    }
    let mut per_question = Vec::with_capacity(dataset.len());
    let mut typed = 0usize;
    let mut typed_correct = 0usize;
    for inst in dataset {
        let p = by_id.get(inst.id.as_str()).ok_or_else(|| Error::Invalid {
            id: inst.id.clone(),
            reason: "no prediction".into(),
        })?;
        let gold = inst.answer_texts();
        let triggers: Vec<&str> = inst.events.answer.iter().map(|s| s.text.as_str()).collect();
        if let Some(t) = p.predicted_type {
            typed += 1;
            typed_correct += usize::from(t == inst.relation);
        }
        per_question.push(QuestionScore {
            id: inst.id.clone(),
            relation: inst.relation,
            f1t: f1_token(&p.answers, &gold),
            hit1: hit_at_1(&p.answers, &triggers),
            em: exact_match(&p.answers, &gold),
            answers: p.answers.clone(),
        });
    }
    let per_type = RelationType::ALL
        .iter()
        .filter(|t| per_question.iter().any(|q| q.relation == **t))
        .map(|&t| (t.name().to_string(), Scores::mean(per_question.iter().filter(|q| q.relation == t))))
        .collect();
    Ok(MetricsReport {
        overall: Scores::mean(per_question.iter()),
        per_type,
        per_question,
        type_accuracy: (typed > 0).then(|| typed_correct as f64 / typed as f64),
    })
}
