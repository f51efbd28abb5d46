//! Training losses: answer generation or tagging, relation type
//! classification and event contrastive alignment, plus their weighted sum.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar, Var};
use crate::data::{QAInstance, RelationType};
use crate::error::{Error, Result};
use crate::model::{gold_tags, Model, Tagging, TAG_O};
use crate::text::{align_event_spans, format_input, tokenize, AlignedSequence, Segment, Setting, Special, Vocab};

/// Weight of answer labels (`I`, `B`) in the tagging loss.
pub const ANSWER_LABEL_WEIGHT: f64 = 4.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_prefix: bool,
    pub no_tc: bool,
    pub no_cl: bool,
    pub no_transm: bool,
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_prefix {
            parts.push("-prefix");
        }
        if self.no_tc {
            parts.push("-TC");
        }
        if self.no_cl {
            parts.push("-CL");
        }
        if self.no_transm {
            parts.push("-TransM");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(" ")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_tc: f64,
    pub lambda_cl: f64,
    pub k_neg: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda_tc: 0.1,
            lambda_cl: 0.1,
            k_neg: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        for (name, v) in [("lambda_tc", self.lambda_tc), ("lambda_cl", self.lambda_cl)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_qa: f64,
    pub l_tc: f64,
    pub l_cl: f64,
    pub l: f64,
    pub tau: f64,
    pub lambda_tc: f64,
    pub lambda_cl: f64,
}

impl LossBundle {
    /// `l = l_qa + λ_tc·l_tc + λ_cl·l_cl`.
    pub fn new(l_qa: f64, l_tc: f64, l_cl: f64, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let l = l_qa + cfg.lambda_tc * l_tc + cfg.lambda_cl * l_cl;
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        Ok(Self {
            l_qa,
            l_tc,
            l_cl,
            l,
            tau: cfg.tau,
            lambda_tc: cfg.lambda_tc,
            lambda_cl: cfg.lambda_cl,
        })
    }
}

/// Token positions of annotated event triggers within a formatted sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventIndices {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub other: Vec<usize>,
}

impl EventIndices {
    fn check_disjoint(&self) -> Result<()> {
        let clash = |a: &[usize], b: &[usize]| a.iter().find(|i| b.contains(i)).copied();
        if let Some(i) = clash(&self.question, &self.answer)
            .or_else(|| clash(&self.question, &self.other))
            .or_else(|| clash(&self.answer, &self.other))
        {
            return Err(Error::Contract(format!("token {i} belongs to two event roles")));
        }
        Ok(())
    }
}

/// Transformed event vectors grouped by role; `None` for an empty role.
#[derive(Debug, Clone, Copy)]
pub struct EventVectorSets {
    pub question: Option<Var>,
    pub answer: Option<Var>,
    pub other: Option<Var>,
    pub c_q: usize,
    pub c_a: usize,
    pub c_o: usize,
}

pub fn collect_event_vectors<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    hidden: Var,
    events: &EventIndices,
    use_transform: bool,
) -> Result<EventVectorSets> {
    events.check_disjoint()?;
    let mut pick = |idx: &[usize]| -> Result<Option<Var>> {
        if idx.is_empty() {
            Ok(None)
        } else {
            model.event_rows(g, hidden, idx, use_transform).map(Some)
        }
    };
    Ok(EventVectorSets {
        question: pick(&events.question)?,
        answer: pick(&events.answer)?,
        other: pick(&events.other)?,
        c_q: events.question.len(),
        c_a: events.answer.len(),
        c_o: events.other.len(),
    })
}

/// `min(k, available)` distinct indices drawn uniformly.
pub fn sample_negatives<R: Rng + ?Sized>(available: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let n = k.min(available);
    if n == 0 {
        return Vec::new();
    }
    let mut picked = index::sample(rng, available, n).into_vec();
    picked.sort_unstable();
    picked
}

/// One ordered-pair term: `−log(exp(pos/τ) / (exp(pos/τ) + Σ exp(neg/τ)))`.
pub fn pair_loss(cos_pos: f64, cos_negs: &[f64], tau: f64) -> f64 {
    let scaled: Vec<f64> = std::iter::once(cos_pos).chain(cos_negs.iter().copied()).map(|c| c / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scaled[0]
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOutcome {
    /// `None` when the instance has no question-answer event pair.
    pub loss: Option<Var>,
    pub pairs: usize,
}

/// Contrastive loss over every ordered (question event, answer event) pair
/// in both directions, with negatives drawn per anchor from the other events
/// and the sum normalized by `2(C_q + C_a)`.
pub fn contrastive_loss<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    sets: &EventVectorSets,
    tau: f64,
    k_neg: usize,
    rng: &mut R,
) -> Result<ContrastiveOutcome> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let (Some(q), Some(a)) = (sets.question, sets.answer) else {
        return Ok(ContrastiveOutcome { loss: None, pairs: 0 });
    };
    let (c_q, c_a, c_o) = (sets.c_q, sets.c_a, sets.c_o);
    let anchors = g.concat_rows(&[q, a])?;
    let everything = match sets.other {
        Some(o) => g.concat_rows(&[q, a, o])?,
        None => anchors,
    };
    // rows: q then a; columns: q, a, o
    let sims = g.cosine_similarity(anchors, everything)?;
    let width = c_q + c_a + c_o;
    let n_neg = k_neg.min(c_o);
    let cols = 1 + n_neg;

    let negatives: Vec<Vec<usize>> = (0..c_q + c_a).map(|_| sample_negatives(c_o, k_neg, rng)).collect();
    let mut idx = Vec::with_capacity(2 * c_q * c_a * cols);
    let mut push_row = |row: usize, positive_col: usize| {
        idx.push(row * width + positive_col);
        for &n in &negatives[row] {
            idx.push(row * width + c_q + c_a + n);
        }
    };
    for i in 0..c_q {
        for j in 0..c_a {
            push_row(i, c_q + j);
            push_row(c_q + j, i);
        }
    }
    let pairs = 2 * c_q * c_a;
    let logits = g.gather(sims, &idx, pairs, cols)?;
    let logits = g.scale(logits, F::of(1.0 / tau))?;
    let z = F::of(2.0 * (c_q + c_a) as f64);
    let loss = g.cross_entropy(logits, &vec![0; pairs], &vec![F::one(); pairs], z)?;
    Ok(ContrastiveOutcome { loss: Some(loss), pairs })
}

/// Predicted relation type and, given the gold label, its cross-entropy.
pub fn type_loss_and_predict<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    hidden: Var,
    question: &[usize],
    use_transform: bool,
    gold: Option<RelationType>,
) -> Result<(RelationType, Option<Var>)> {
    let logits = model.type_logits(g, hidden, question, use_transform)?;
    let pred = RelationType::from_code(crate::model::argmax(g.value(logits))).expect("five logits");
    let loss = match gold {
        Some(t) => Some(g.cross_entropy(logits, &[t.code()], &[F::one()], F::one())?),
        None => None,
    };
    Ok((pred, loss))
}

/// Decoder target `a₁ ; a₂ ; … </s>` and the content length `T` (without `</s>`).
pub fn generative_target(answers: &[&str], vocab: &Vocab) -> Result<(Vec<u32>, usize)> {
    if answers.is_empty() {
        return Err(Error::Contract("an answerable question needs at least one answer".into()));
    }
    let mut ids = Vec::new();
    for (k, a) in answers.iter().enumerate() {
        if k > 0 {
            ids.push(Special::Semicolon.id());
        }
        ids.extend(tokenize(a).iter().map(|t| vocab.id(&t.text)));
    }
    let t = ids.len();
    ids.push(Special::Eos.id());
    Ok((ids, t))
}

/// Teacher-forced decoder input: `<s>` followed by the target without its last token.
pub fn decoder_input(target: &[u32]) -> Vec<u32> {
    std::iter::once(Special::Bos.id())
        .chain(target[..target.len().saturating_sub(1)].iter().copied())
        .collect()
}

/// Mean token cross-entropy over the target, end token included.
pub fn generative_qa_loss<F: Scalar>(g: &mut Graph<'_, F>, logits: Var, target: &[u32]) -> Result<Var> {
    let (r, _) = g.shape(logits);
    if r != target.len() || target.is_empty() {
        return Err(Error::shape("generative_qa_loss", format!("{r} logit rows for {} targets", target.len())));
    }
    let t: Vec<usize> = target.iter().map(|&i| i as usize).collect();
    g.cross_entropy(logits, &t, &vec![F::one(); r], F::of(r as f64))
}

/// Label-weighted mean token cross-entropy over paragraph tokens.
pub fn extractive_qa_loss<F: Scalar>(g: &mut Graph<'_, F>, logits: Var, gold: &[usize]) -> Result<Var> {
    let (r, _) = g.shape(logits);
    if r != gold.len() {
        return Err(Error::shape("extractive_qa_loss", format!("{r} logit rows for {} tags", gold.len())));
    }
    let weights: Vec<F> = gold
        .iter()
        .map(|&t| F::of(if t == TAG_O { 1.0 } else { ANSWER_LABEL_WEIGHT }))
        .collect();
    let denom = weights.iter().copied().sum();
    g.cross_entropy(logits, gold, &weights, denom)
}

/// `L = L_qa + λ_tc·L_tc + λ_cl·L_cl`, skipping absent terms.
pub fn total_loss<F: Scalar>(g: &mut Graph<'_, F>, l_qa: Var, l_tc: Option<Var>, l_cl: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total = l_qa;
    for (term, w) in [(l_tc, cfg.lambda_tc), (l_cl, cfg.lambda_cl)] {
        if let Some(v) = term {
            if w != 0.0 {
                let s = g.scale(v, F::of(w))?;
                total = g.add(total, s)?;
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QaTarget {
    Generative { target: Vec<u32>, content_len: usize },
    Extractive { paragraph: Vec<usize>, tags: Vec<usize> },
}

/// A training instance formatted and aligned for one setting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedInstance {
    pub id: String,
    pub relation: RelationType,
    pub seq: AlignedSequence,
    pub question: Vec<usize>,
    /// The question on its own, as read by the type classifier.
    pub question_ids: Vec<u32>,
    pub events: EventIndices,
    pub target: QaTarget,
}

fn flatten_unique(groups: Vec<Vec<usize>>) -> Vec<usize> {
    let mut out: Vec<usize> = groups.into_iter().flatten().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Formats an instance with its gold type prefix (unless `no_prefix`) and
/// aligns triggers and answers. Paragraph tokens past `max_len` are cut;
/// losing an answer or a trigger to the cut is a length error.
pub fn prepare_instance(
    inst: &QAInstance,
    vocab: &Vocab,
    setting: Setting,
    tagging: Tagging,
    no_prefix: bool,
    max_len: usize,
) -> Result<PreparedInstance> {
    let prefix = (!no_prefix).then_some(inst.relation);
    let mut seq = format_input(setting, vocab, prefix, &inst.question, &inst.paragraph);
    let full_len = seq.len();
    seq.truncate_paragraph(max_len);
    if seq.len() > max_len {
        return Err(Error::Length { len: seq.len(), max: max_len });
    }
    let too_long = |e: Error| match e {
        Error::Alignment { .. } => Error::Length { len: full_len, max: max_len },
        e => e,
    };
    let q_len = inst.question.chars().count();
    let p_len = inst.paragraph.chars().count();
    let spans = |v: &[crate::data::Span]| v.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>();

    let events = EventIndices {
        question: flatten_unique(align_event_spans(&seq, Segment::Question, q_len, &spans(&inst.events.question))?),
        answer: flatten_unique(align_event_spans(&seq, Segment::Paragraph, p_len, &spans(&inst.events.answer)).map_err(too_long)?),
        other: flatten_unique(align_event_spans(&seq, Segment::Paragraph, p_len, &spans(&inst.events.other)).map_err(too_long)?),
    };
    events.check_disjoint()?;
    let question = seq.positions(Segment::Question);

    let target = match setting {
        Setting::Generative => {
            let (target, content_len) = generative_target(&inst.answer_texts(), vocab)?;
            if target.len() > max_len {
                return Err(Error::Length { len: target.len(), max: max_len });
            }
            QaTarget::Generative { target, content_len }
        }
        Setting::Extractive => {
            let paragraph = seq.positions(Segment::Paragraph);
            let runs = align_event_spans(&seq, Segment::Paragraph, p_len, &spans(&inst.answers)).map_err(too_long)?;
            // runs hold sequence positions; tags index paragraph tokens
            let offset = paragraph[0];
            let local: Vec<Vec<usize>> = runs.into_iter().map(|r| r.into_iter().map(|i| i - offset).collect()).collect();
            let tags = gold_tags(paragraph.len(), &local, tagging);
            QaTarget::Extractive { paragraph, tags }
        }
    };
    Ok(PreparedInstance {
        id: inst.id.clone(),
        relation: inst.relation,
        question_ids: question_ids(vocab, &inst.question),
        seq,
        question,
        events,
        target,
    })
}

/// Token ids of a question formatted alone, without prefix or paragraph.
pub fn question_ids(vocab: &Vocab, question: &str) -> Vec<u32> {
    tokenize(question).iter().map(|t| vocab.id(&t.text)).collect()
}

/// Type logits from an encoding of the question alone, so the classifier
/// sees the same input in training and at inference.
pub fn question_type<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    ids: &[u32],
    use_transform: bool,
    gold: Option<RelationType>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(RelationType, Option<Var>)> {
    if ids.is_empty() {
        return Err(Error::Contract("type classification needs question tokens".into()));
    }
    let hidden = model.encode(g, ids, dropout)?;
    let all: Vec<usize> = (0..ids.len()).collect();
    type_loss_and_predict(model, g, hidden, &all, use_transform, gold)
}

/// Graph node of every loss term for one instance.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_qa: Var,
    pub l_tc: Option<Var>,
    pub l_cl: Option<Var>,
    pub total: Var,
}

/// Builds the full objective for one prepared instance. `rng` drives dropout
/// (when `train` is set) and negative sampling.
pub fn instance_objective<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    ex: &PreparedInstance,
    cfg: &LossConfig,
    ablation: &Ablation,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(LossVars, LossBundle)> {
    let use_transform = !ablation.no_transm;
    let mut dropout = train.then_some(&mut *rng);
    let hidden = model.encode(g, &ex.seq.ids, dropout.as_deref_mut())?;
    let l_qa = match &ex.target {
        QaTarget::Generative { target, .. } => {
            let logits = model.decode(g, hidden, &decoder_input(target), dropout.as_deref_mut())?;
            generative_qa_loss(g, logits, target)?
        }
        QaTarget::Extractive { paragraph, tags } => {
            let logits = model.tag_logits(g, hidden, paragraph)?;
            extractive_qa_loss(g, logits, tags)?
        }
    };
    let l_tc = if ablation.no_tc {
        None
    } else {
        question_type(model, g, &ex.question_ids, use_transform, Some(ex.relation), dropout)?.1
    };
    let l_cl = if ablation.no_cl {
        None
    } else {
        let sets = collect_event_vectors(model, g, hidden, &ex.events, use_transform)?;
        contrastive_loss(g, &sets, cfg.tau, cfg.k_neg, rng)?.loss
    };
    let total = total_loss(g, l_qa, l_tc, l_cl, cfg)?;
    let value = |g: &Graph<'_, F>, v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).f64());
    let bundle = LossBundle::new(g.scalar(l_qa).f64(), value(g, l_tc), value(g, l_cl), cfg)?;
    Ok((LossVars { l_qa, l_tc, l_cl, total }, bundle))
}
