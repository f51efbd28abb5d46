//! Word-level tokenization, vocabulary, input templates for both QA
//! settings, and alignment of character spans to token positions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::RelationType;
use crate::error::{Error, Result};

/// Reserved tokens. Their ids are fixed and never produced by tokenizing
/// corpus text: a `;` typed in a paragraph maps to an ordinary word id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad = 0,
    Unk = 1,
    Bos = 2,
    Eos = 3,
    Colon = 4,
    Newline = 5,
    Semicolon = 6,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Pad,
        Special::Unk,
        Special::Bos,
        Special::Eos,
        Special::Colon,
        Special::Newline,
        Special::Semicolon,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn display(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Unk => "<unk>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Colon => ":",
            Special::Newline => "\n",
            Special::Semicolon => ";",
        }
    }
}

const N_SPECIAL: u32 = Special::ALL.len() as u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenRef<'a> {
    Special(Special),
    Word(&'a str),
}

/// Bijection between tokens and ids; ids below 7 are the specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + N_SPECIAL))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len() + N_SPECIAL as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Id of a corpus token; unseen tokens map to `<unk>`.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Special::Unk.id())
    }

    pub fn token(&self, id: u32) -> Option<TokenRef<'_>> {
        if id < N_SPECIAL {
            Some(TokenRef::Special(Special::ALL[id as usize]))
        } else {
            self.words.get((id - N_SPECIAL) as usize).map(|w| TokenRef::Word(w))
        }
    }

    pub fn display(&self, id: u32) -> &str {
        match self.token(id) {
            Some(TokenRef::Special(s)) => s.display(),
            Some(TokenRef::Word(w)) => w,
            None => Special::Unk.display(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(&t.text)).collect()
    }
}

/// Vocabulary of every corpus token seen at least `min_count` times, plus
/// the specials and the relation-type label words. Ids are ordered by
/// descending frequency, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Dataset("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for t in tokenize(text.as_ref()) {
            *counts.entry(t.text).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut words: Vec<String> = kept.into_iter().map(|(w, _)| w).collect();
    for t in RelationType::ALL {
        for tok in tokenize(t.name()) {
            if !words.contains(&tok.text) {
                words.push(tok.text);
            }
        }
    }
    Ok(Vocab::from(words))
}

/// Lowercased token with its character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace; alphanumeric runs form words and every other
/// character is a token of its own.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word: Option<(usize, String)> = None;
    let flush = |word: &mut Option<(usize, String)>, end: usize, out: &mut Vec<Token>| {
        if let Some((start, text)) = word.take() {
            out.push(Token { text, start, end });
        }
    };
    for (i, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            match &mut word {
                Some((_, w)) => w.extend(ch.to_lowercase()),
                None => word = Some((i, ch.to_lowercase().collect())),
            }
        } else {
            flush(&mut word, i, &mut out);
            if !ch.is_whitespace() {
                out.push(Token {
                    text: ch.to_lowercase().collect(),
                    start: i,
                    end: i + 1,
                });
            }
        }
    }
    flush(&mut word, text.chars().count(), &mut out);
    out
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Prefix,
    Special,
    Question,
    Paragraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Generative,
    Extractive,
}

/// Token ids with, per token, the character span in its source text
/// (question or paragraph, per the segment tag).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignedSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<Option<(usize, usize)>>,
    pub segments: Vec<Segment>,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push_special(&mut self, s: Special) {
        self.ids.push(s.id());
        self.spans.push(None);
        self.segments.push(Segment::Special);
    }

    fn push_text(&mut self, vocab: &Vocab, text: &str, seg: Segment) {
        for t in tokenize(text) {
            self.ids.push(vocab.id(&t.text));
            self.spans.push(match seg {
                Segment::Question | Segment::Paragraph => Some((t.start, t.end)),
                _ => None,
            });
            self.segments.push(seg);
        }
    }

    fn push_prefix(&mut self, vocab: &Vocab, t: Option<RelationType>) {
        if let Some(t) = t {
            self.push_text(vocab, t.name(), Segment::Prefix);
            self.push_special(Special::Colon);
        }
    }

    pub fn positions(&self, seg: Segment) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == seg)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        self.ids.iter().map(|&i| vocab.display(i)).collect::<Vec<_>>().join(" ")
    }

    /// Drops trailing paragraph tokens until at most `max_len` remain.
    /// Returns whether anything was removed.
    pub fn truncate_paragraph(&mut self, max_len: usize) -> bool {
        let mut removed = false;
        while self.len() > max_len {
            let Some(last) = self.segments.iter().rposition(|s| *s == Segment::Paragraph) else {
                break;
            };
            self.ids.remove(last);
            self.spans.remove(last);
            self.segments.remove(last);
            removed = true;
        }
        removed
    }
}

/// `t : question \n paragraph </s>`; `t :` is omitted when `t` is `None`.
pub fn format_generative(vocab: &Vocab, t: Option<RelationType>, question: &str, paragraph: &str) -> AlignedSequence {
    let mut seq = AlignedSequence::default();
    seq.push_prefix(vocab, t);
    seq.push_text(vocab, question, Segment::Question);
    seq.push_special(Special::Newline);
    seq.push_text(vocab, paragraph, Segment::Paragraph);
    seq.push_special(Special::Eos);
    seq
}

/// `<s> t : question </s> </s> paragraph`; `t :` is omitted when `t` is `None`.
pub fn format_extractive(vocab: &Vocab, t: Option<RelationType>, question: &str, paragraph: &str) -> AlignedSequence {
    let mut seq = AlignedSequence::default();
    seq.push_special(Special::Bos);
    seq.push_prefix(vocab, t);
    seq.push_text(vocab, question, Segment::Question);
    seq.push_special(Special::Eos);
    seq.push_special(Special::Eos);
    seq.push_text(vocab, paragraph, Segment::Paragraph);
    seq
}

pub fn format_input(setting: Setting, vocab: &Vocab, t: Option<RelationType>, question: &str, paragraph: &str) -> AlignedSequence {
    match setting {
        Setting::Generative => format_generative(vocab, t, question, paragraph),
        Setting::Extractive => format_extractive(vocab, t, question, paragraph),
    }
}

/// For each span (character offsets into the `seg` source text of length
/// `text_len`), the positions of tokens whose spans intersect it.
pub fn align_event_spans(
    seq: &AlignedSequence,
    seg: Segment,
    text_len: usize,
    spans: &[(usize, usize)],
) -> Result<Vec<Vec<usize>>> {
    spans
        .iter()
        .map(|&(start, end)| {
            if start >= end || end > text_len {
                return Err(Error::Range {
                    start,
                    end,
                    len: text_len,
                });
            }
            let hits: Vec<usize> = seq
                .segments
                .iter()
                .zip(&seq.spans)
                .enumerate()
                .filter_map(|(i, (s, sp))| match (s, sp) {
                    (s, Some((a, b))) if *s == seg && *a < end && start < *b => Some(i),
                    _ => None,
                })
                .collect();
            if hits.is_empty() {
                Err(Error::Alignment { start, end })
            } else {
                Ok(hits)
            }
        })
        .collect()
}
