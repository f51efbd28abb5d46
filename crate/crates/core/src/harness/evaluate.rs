use crate::autograd::Graph;
use crate::data::{char_slice, InferenceInput, QAInstance, RelationType};
use crate::error::{Error, Result};
use crate::metrics::{build_report, MetricsReport, Prediction};
use crate::model::{split_answers, tag_runs, Model};
use crate::objectives::{question_ids, question_type, Ablation};
use crate::text::{format_input, AlignedSequence, Segment, Setting, Vocab};

use super::checkpoint::Checkpoint;

/// Gold relation type by instance id, used only as the prefix fallback.
pub type GoldType<'f> = &'f dyn Fn(&str) -> Option<RelationType>;

/// Anything that answers questions from the question and paragraph alone.
pub trait AnswerSystem {
    /// Relation type read off the question, or `None` when the system has no
    /// type classifier.
    fn predict_type(&self, input: &InferenceInput<'_>) -> Result<Option<RelationType>>;

    /// Answers given the type prefix (absent under the prefix ablation).
    fn answer(&self, input: &InferenceInput<'_>, prefix: Option<RelationType>) -> Result<Vec<String>>;

    /// Whether inputs carry a type prefix at all.
    fn uses_prefix(&self) -> bool;
}

/// A trained checkpoint viewed as an [`AnswerSystem`].
pub struct TrainedSystem<'a> {
    pub model: &'a Model<f32>,
    pub vocab: &'a Vocab,
    pub ablation: Ablation,
    pub max_answer_len: usize,
}

impl<'a> TrainedSystem<'a> {
    pub fn new(ckpt: &'a Checkpoint, max_answer_len: usize) -> Self {
        Self {
            model: &ckpt.model,
            vocab: &ckpt.vocab,
            ablation: ckpt.ablation,
            max_answer_len,
        }
    }

    fn format(&self, input: &InferenceInput<'_>, prefix: Option<RelationType>) -> AlignedSequence {
        let mut seq = format_input(self.model.setting(), self.vocab, prefix, input.question, input.paragraph);
        if seq.truncate_paragraph(self.model.config.max_len) {
            log::warn!("{}: paragraph truncated to fit {} tokens", input.id, self.model.config.max_len);
        }
        seq
    }
}

/// Answers read from predicted tags: each run of answer labels becomes the
/// verbatim paragraph substring between its first and last token.
pub fn extract_answers(seq: &AlignedSequence, paragraph_positions: &[usize], tags: &[usize], paragraph: &str, model: &Model<f32>) -> Vec<String> {
    tag_runs(tags, model.config.tagging)
        .into_iter()
        .filter_map(|(s, e)| {
            let start = seq.spans[paragraph_positions[s]]?.0;
            let end = seq.spans[paragraph_positions[e]]?.1;
            char_slice(paragraph, start, end).map(str::to_string)
        })
        .collect()
}

impl AnswerSystem for TrainedSystem<'_> {
    fn predict_type(&self, input: &InferenceInput<'_>) -> Result<Option<RelationType>> {
        if self.ablation.no_tc {
            return Ok(None);
        }
        let ids = question_ids(self.vocab, input.question);
        let mut g = Graph::with_params(&self.model.store);
        let (t, _) = question_type(self.model, &mut g, &ids, !self.ablation.no_transm, None, None)?;
        Ok(Some(t))
    }

    fn answer(&self, input: &InferenceInput<'_>, prefix: Option<RelationType>) -> Result<Vec<String>> {
        let seq = self.format(input, prefix);
        match self.model.setting() {
            Setting::Generative => {
                let ids = self.model.generate(&seq, self.max_answer_len)?;
                Ok(split_answers(&ids, self.vocab))
            }
            Setting::Extractive => {
                let positions = seq.positions(Segment::Paragraph);
                if positions.is_empty() {
                    return Ok(Vec::new());
                }
                let tags = self.model.tag_tokens(&seq, &positions)?;
                Ok(extract_answers(&seq, &positions, &tags, input.paragraph, self.model))
            }
        }
    }

    fn uses_prefix(&self) -> bool {
        !self.ablation.no_prefix
    }
}

/// Runs a system over inference inputs. `fallback` supplies the prefix type
/// for systems without a classifier; gold labels reach prediction through
/// nothing else.
pub fn predict_answers<S: AnswerSystem + ?Sized>(
    system: &S,
    inputs: &[InferenceInput<'_>],
    fallback: Option<GoldType<'_>>,
) -> Result<Vec<Prediction>> {
    let mut warned = false;
    inputs
        .iter()
        .map(|input| {
            let (prefix, predicted_type) = if system.uses_prefix() {
                match system.predict_type(input)? {
                    Some(t) => (Some(t), Some(t)),
                    None => {
                        if !warned {
                            log::warn!("no type classifier: falling back to the gold relation type as prefix");
                            warned = true;
                        }
                        let gold = fallback.and_then(|f| f(input.id));
                        if gold.is_none() {
                            return Err(Error::Contract(format!("{}: no prefix type available", input.id)));
                        }
                        (gold, None)
                    }
                }
            } else {
                (None, None)
            };
            Ok(Prediction {
                id: input.id.to_string(),
                answers: system.answer(input, prefix)?,
                predicted_type,
            })
        })
        .collect()
}

pub fn evaluate_system<S: AnswerSystem + ?Sized>(system: &S, dataset: &[QAInstance]) -> Result<MetricsReport> {
    let inputs: Vec<InferenceInput<'_>> = dataset.iter().map(QAInstance::inference_input).collect();
    let gold = |id: &str| dataset.iter().find(|d| d.id == id).map(|d| d.relation);
    let preds = predict_answers(system, &inputs, Some(&gold))?;
    build_report(&preds, dataset)
}

/// Scores a checkpoint. A requested setting different from the checkpoint's is an error.
pub fn evaluate(ckpt: &Checkpoint, dataset: &[QAInstance], requested: Option<Setting>, max_answer_len: usize) -> Result<MetricsReport> {
    if let Some(s) = requested {
        if s != ckpt.model.setting() {
            return Err(Error::Mode {
                expected: match ckpt.model.setting() {
                    Setting::Generative => "generative",
                    Setting::Extractive => "extractive",
                },
            });
        }
    }
    evaluate_system(&TrainedSystem::new(ckpt, max_answer_len), dataset)
}
