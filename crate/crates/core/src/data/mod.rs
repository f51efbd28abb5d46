//! Event-centric QA instances: the on-disk schema, validation, a synthetic
//! corpus generator, and stratified few-shot subsetting.

mod fewshot;
mod synth;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fewshot::{few_shot_subset, stratified_order};
pub use synth::{largest_remainder, synth_generate, SynthOptions, DEFAULT_PROPORTIONS};

/// The five question/answer event relation types, in code order 0..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    Causal,
    Conditional,
    Counterfactual,
    #[serde(rename = "Sub-event")]
    SubEvent,
    #[serde(rename = "Co-reference")]
    Coreference,
}

impl RelationType {
    pub const ALL: [RelationType; 5] = [
        RelationType::Causal,
        RelationType::Conditional,
        RelationType::Counterfactual,
        RelationType::SubEvent,
        RelationType::Coreference,
    ];
    pub const COUNT: usize = 5;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Causal => "Causal",
            RelationType::Conditional => "Conditional",
            RelationType::Counterfactual => "Counterfactual",
            RelationType::SubEvent => "Sub-event",
            RelationType::Coreference => "Co-reference",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationType {
    type Err = Error;

    /// Case-insensitive; hyphens, spaces and underscores are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "causal" => Ok(RelationType::Causal),
            "conditional" => Ok(RelationType::Conditional),
            "counterfactual" => Ok(RelationType::Counterfactual),
            "subevent" => Ok(RelationType::SubEvent),
            "coreference" => Ok(RelationType::Coreference),
            _ => Err(Error::Dataset(format!("unknown relation type {s:?}"))),
        }
    }
}

/// Character-offset span (`end` exclusive) with its surface text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Span {
    pub fn new(start: usize, end: usize, text: impl Into<String>) -> Self {
        Self {
            start,
            end,
            text: text.into(),
        }
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventRole {
    Question,
    Answer,
    Other,
}

/// Annotated event triggers grouped by role. Question-role spans index
/// into the question, the rest into the paragraph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    pub question: Vec<Span>,
    pub answer: Vec<Span>,
    pub other: Vec<Span>,
}

impl Events {
    pub fn iter(&self) -> impl Iterator<Item = (EventRole, &Span)> {
        let q = self.question.iter().map(|s| (EventRole::Question, s));
        let a = self.answer.iter().map(|s| (EventRole::Answer, s));
        let o = self.other.iter().map(|s| (EventRole::Other, s));
        q.chain(a).chain(o)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub paragraph: String,
    pub question: String,
    #[serde(rename = "type")]
    pub relation: RelationType,
    pub answers: Vec<Span>,
    pub events: Events,
}

/// The part of an instance a model may see at inference time.
#[derive(Debug, Clone, Copy)]
pub struct InferenceInput<'a> {
    pub id: &'a str,
    pub question: &'a str,
    pub paragraph: &'a str,
}

impl QAInstance {
    pub fn inference_input(&self) -> InferenceInput<'_> {
        InferenceInput {
            id: &self.id,
            question: &self.question,
            paragraph: &self.paragraph,
        }
    }

    pub fn answer_texts(&self) -> Vec<&str> {
        self.answers.iter().map(|a| a.text.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Invalid {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.question.trim().is_empty() || self.paragraph.trim().is_empty() {
            return Err(fail("empty question or paragraph".into()));
        }
        if self.answers.is_empty() {
            return Err(fail("no answers".into()));
        }
        for a in &self.answers {
            check_span(&self.paragraph, a).map_err(|e| fail(format!("answer {e}")))?;
        }
        if self.events.question.is_empty() {
            return Err(fail("question has no event trigger".into()));
        }
        for s in &self.events.question {
            check_span(&self.question, s).map_err(|e| fail(format!("question event {e}")))?;
        }
        for s in &self.events.answer {
            check_span(&self.paragraph, s).map_err(|e| fail(format!("answer event {e}")))?;
            if !self.answers.iter().any(|a| a.contains(s)) {
                return Err(fail(format!(
                    "answer event {:?} at {}..{} lies outside every answer",
                    s.text, s.start, s.end
                )));
            }
        }
        for s in &self.events.other {
            check_span(&self.paragraph, s).map_err(|e| fail(format!("other event {e}")))?;
            if self.events.answer.iter().any(|a| a.overlaps(s)) {
                return Err(fail(format!("other event {:?} overlaps an answer event", s.text)));
            }
        }
        Ok(())
    }
}

/// Slice by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut idx = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b0 = idx.nth(start)?;
    let b1 = if end == start { b0 } else { idx.nth(end - start - 1)? };
    Some(&text[b0..b1])
}

fn check_span(text: &str, s: &Span) -> std::result::Result<(), String> {
    let len = text.chars().count();
    if s.start >= s.end || s.end > len {
        return Err(format!("span {}..{} outside text of length {len}", s.start, s.end));
    }
    let slice = char_slice(text, s.start, s.end).expect("checked bounds");
    if slice != s.text {
        return Err(format!("text {:?} does not match slice {slice:?}", s.text));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any invalid record aborts the load.
    #[default]
    Strict,
    /// Invalid records are skipped with a warning.
    Lenient,
}

/// Maps one raw JSON record onto an instance. Swap this to ingest a
/// different serialization without touching validation.
pub type Adapter = fn(serde_json::Value) -> Result<QAInstance>;

pub fn native_adapter(v: serde_json::Value) -> Result<QAInstance> {
    let mut v = v;
    // accept any casing of the relation label
    if let Some(t) = v.get_mut("type") {
        if let Some(s) = t.as_str() {
            let rel: RelationType = s.parse()?;
            *t = serde_json::Value::String(rel.name().to_string());
        }
    }
    Ok(serde_json::from_value(v)?)
}

pub fn load_dataset(path: impl AsRef<Path>, mode: LoadMode) -> Result<Vec<QAInstance>> {
    load_dataset_with(path, mode, native_adapter)
}

pub fn load_dataset_with(path: impl AsRef<Path>, mode: LoadMode, adapter: Adapter) -> Result<Vec<QAInstance>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&raw, mode, adapter)
}

pub fn parse_dataset(raw: &str, mode: LoadMode, adapter: Adapter) -> Result<Vec<QAInstance>> {
    let records: Vec<serde_json::Value> = serde_json::from_str(raw)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let id = rec
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{i}"));
        let checked = adapter(rec)
            .map_err(|e| match e {
                Error::Invalid { .. } => e,
                other => Error::Invalid {
                    id: id.clone(),
                    reason: other.to_string(),
                },
            })
            .and_then(|inst| inst.validate().map(|_| inst));
        match (checked, mode) {
            (Ok(inst), _) => out.push(inst),
            (Err(e), LoadMode::Strict) => return Err(e),
            (Err(e), LoadMode::Lenient) => log::warn!("skipping record: {e}"),
        }
    }
    Ok(out)
}

pub fn to_json(instances: &[QAInstance]) -> Result<String> {
    Ok(serde_json::to_string_pretty(instances)?)
}

pub fn save_dataset(path: impl AsRef<Path>, instances: &[QAInstance]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(instances)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> QAInstance {
        QAInstance {
            id: "q1".into(),
            paragraph: "Kopp was linked through DNA testing to the hair.".into(),
            question: "What led to the charges?".into(),
            relation: RelationType::Conditional,
            answers: vec![Span::new(9, 35, "linked through DNA testing")],
            events: Events {
                question: vec![Span::new(16, 23, "charges")],
                answer: vec![Span::new(28, 35, "testing")],
                other: vec![],
            },
        }
    }

    #[test]
    fn relation_parsing_ignores_case() {
        assert_eq!("causal".parse::<RelationType>().unwrap(), RelationType::Causal);
        assert_eq!("CAUSAL".parse::<RelationType>().unwrap(), RelationType::Causal);
        assert_eq!("sub-event".parse::<RelationType>().unwrap(), RelationType::SubEvent);
        assert_eq!("Coreference".parse::<RelationType>().unwrap(), RelationType::Coreference);
        assert!("temporal".parse::<RelationType>().is_err());
    }

    #[test]
    fn codes_are_stable() {
        for (i, t) in RelationType::ALL.iter().enumerate() {
            assert_eq!(t.code(), i);
            assert_eq!(RelationType::from_code(i), Some(*t));
        }
    }

    #[test]
    fn char_slicing_counts_characters() {
        assert_eq!(char_slice("naïve cat", 0, 5), Some("naïve"));
        assert_eq!(char_slice("naïve cat", 6, 9), Some("cat"));
        assert_eq!(char_slice("abc", 3, 3), Some(""));
        assert_eq!(char_slice("abc", 2, 4), None);
    }

    #[test]
    fn two_instance_file_loads() {
        let mut b = sample();
        b.id = "q2".into();
        let raw = to_json(&[sample(), b]).unwrap();
        let got = parse_dataset(&raw, LoadMode::Strict, native_adapter).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], sample());
    }

    #[test]
    fn out_of_range_answer_names_the_instance() {
        let mut bad = sample();
        bad.answers[0] = Span::new(40, 90, "x");
        let raw = to_json(&[bad]).unwrap();
        let err = parse_dataset(&raw, LoadMode::Strict, native_adapter).unwrap_err();
        match err {
            Error::Invalid { id, .. } => assert_eq!(id, "q1"),
            other => panic!("unexpected {other:?}"),
        }
        let lenient = parse_dataset(&raw, LoadMode::Lenient, native_adapter).unwrap();
        assert!(lenient.is_empty());
    }

    #[test]
    fn lowercase_type_is_normalized() {
        let raw = to_json(&[sample()]).unwrap().replace("\"Conditional\"", "\"conditional\"");
        let got = parse_dataset(&raw, LoadMode::Strict, native_adapter).unwrap();
        assert_eq!(got[0].relation, RelationType::Conditional);
    }

    #[test]
    fn answer_event_outside_answers_is_invalid() {
        let mut bad = sample();
        bad.events.answer = vec![Span::new(0, 4, "Kopp")];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_answers_are_invalid() {
        let mut bad = sample();
        bad.answers.clear();
        assert!(bad.validate().is_err());
    }
}
