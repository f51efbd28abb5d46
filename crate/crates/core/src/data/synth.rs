//! Templated stand-in corpus.
//!
//! Each paragraph is a shuffled list of short sentences `<Marker> <subject>
//! <verb> .`. Sentences whose marker belongs to the question's relation type
//! carry the gold answers; the rest are distractors whose verbs become
//! other-role triggers. Questions open with a type-revealing cue phrase.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Events, QAInstance, RelationType, Span};
use crate::error::{Error, Result};

/// Share of each relation type, in code order.
pub const DEFAULT_PROPORTIONS: [f64; 5] = [0.431, 0.213, 0.071, 0.156, 0.129];

const SUBJECTS: [&str; 12] = [
    "the river", "the mayor", "the factory", "the storm", "the workers", "the council",
    "the market", "the police", "the army", "the school", "the bank", "the farmers",
];

const VERBS: [&str; 12] = [
    "flooded", "resigned", "collapsed", "protested", "closed", "expanded",
    "announced", "arrested", "retreated", "rebuilt", "crashed", "negotiated",
];

const MARKERS: [&str; 5] = ["Earlier", "Provided", "Otherwise", "Meanwhile", "Namely"];
const NEUTRAL_MARKERS: [&str; 2] = ["Later", "Also"];

fn cues(t: RelationType) -> [&'static str; 2] {
    match t {
        RelationType::Causal => ["What caused", "Why did it happen that"],
        RelationType::Conditional => ["What if", "What would follow if"],
        RelationType::Counterfactual => ["Instead of what", "What would not happen if not"],
        RelationType::SubEvent => ["What happened as part of", "Which steps made up"],
        RelationType::Coreference => ["Which event refers to", "Which event is the same as"],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    /// Other-role event sentences per paragraph.
    pub distractors: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { distractors: 4 }
    }
}

/// Integer counts summing to `n` by the largest-remainder rule
/// (ties broken toward the lower index).
pub fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

struct Clause {
    subject: usize,
    verb: usize,
}

impl Clause {
    fn text(&self) -> String {
        format!("{} {}", SUBJECTS[self.subject], VERBS[self.verb])
    }
}

/// Paragraph builder tracking character offsets.
struct Builder {
    text: String,
    chars: usize,
}

impl Builder {
    fn push(&mut self, s: &str) -> (usize, usize) {
        let start = self.chars;
        self.text.push_str(s);
        self.chars += s.chars().count();
        (start, self.chars)
    }
}

pub fn synth_generate(n: usize, proportions: &[f64], seed: u64, opts: SynthOptions) -> Result<Vec<QAInstance>> {
    if n == 0 {
        return Err(Error::Parameter("synthetic corpus size must be positive".into()));
    }
    if proportions.len() != RelationType::COUNT
        || proportions.iter().any(|&p| p < 0.0 || !p.is_finite())
        || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Parameter(format!(
            "proportions must be 5 non-negative shares summing to 1, got {proportions:?}"
        )));
    }
    let counts = largest_remainder(n, proportions);
    let mut types: Vec<RelationType> = counts
        .iter()
        .enumerate()
        .flat_map(|(code, &c)| std::iter::repeat_n(RelationType::from_code(code).unwrap(), c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    types.shuffle(&mut rng);

    types
        .into_iter()
        .enumerate()
        .map(|(i, t)| instance(format!("synth-{seed}-{i:05}"), t, opts, &mut rng))
        .collect()
}

fn instance(id: String, t: RelationType, opts: SynthOptions, rng: &mut ChaCha8Rng) -> Result<QAInstance> {
    let n_answers = match t {
        RelationType::SubEvent => rng.random_range(3..=4),
        _ => rng.random_range(1..=2),
    };
    let needed = 1 + n_answers + opts.distractors;
    let pool = SUBJECTS.len() * VERBS.len();
    if needed > pool {
        return Err(Error::Parameter(format!("{needed} clauses requested from a pool of {pool}")));
    }

    // distinct subjects and verbs keep every trigger unambiguous in the paragraph
    let mut subjects: Vec<usize> = (0..SUBJECTS.len()).collect();
    let mut verbs: Vec<usize> = (0..VERBS.len()).collect();
    subjects.shuffle(rng);
    verbs.shuffle(rng);
    if needed > SUBJECTS.len() {
        return Err(Error::Parameter(format!("at most {} clauses per instance", SUBJECTS.len())));
    }
    let clauses: Vec<Clause> = (0..needed)
        .map(|k| Clause {
            subject: subjects[k],
            verb: verbs[k],
        })
        .collect();
    let (question_clause, rest) = clauses.split_first().expect("at least one clause");

    // sentence plan: (marker, clause index into rest, is_answer)
    let mut plan: Vec<(&str, usize, bool)> = Vec::with_capacity(rest.len());
    for k in 0..n_answers {
        plan.push((MARKERS[t.code()], k, true));
    }
    let distractor_markers: Vec<&str> = MARKERS
        .iter()
        .enumerate()
        .filter(|&(code, _)| code != t.code())
        .map(|(_, m)| *m)
        .chain(NEUTRAL_MARKERS)
        .collect();
    for k in n_answers..rest.len() {
        let m = distractor_markers[rng.random_range(0..distractor_markers.len())];
        plan.push((m, k, false));
    }
    plan.shuffle(rng);

    let mut para = Builder {
        text: String::new(),
        chars: 0,
    };
    let mut answers = Vec::new();
    let mut answer_events = Vec::new();
    let mut other_events = Vec::new();
    for (s, &(marker, k, is_answer)) in plan.iter().enumerate() {
        if s > 0 {
            para.push(" ");
        }
        para.push(marker);
        para.push(" ");
        let clause = &rest[k];
        let subj = para.push(SUBJECTS[clause.subject]);
        para.push(" ");
        let verb = para.push(VERBS[clause.verb]);
        para.push(" .");
        let trigger = Span::new(verb.0, verb.1, VERBS[clause.verb]);
        if is_answer {
            answers.push(Span::new(subj.0, verb.1, clause.text()));
            answer_events.push(trigger);
        } else {
            other_events.push(trigger);
        }
    }

    let cue = cues(t)[rng.random_range(0..2)];
    let mut q = Builder {
        text: String::new(),
        chars: 0,
    };
    q.push(cue);
    q.push(" ");
    q.push(SUBJECTS[question_clause.subject]);
    q.push(" ");
    let qv = q.push(VERBS[question_clause.verb]);
    q.push(" ?");

    Ok(QAInstance {
        id,
        paragraph: para.text,
        question: q.text,
        relation: t,
        answers,
        events: Events {
            question: vec![Span::new(qv.0, qv.1, VERBS[question_clause.verb])],
            answer: answer_events,
            other: other_events,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{native_adapter, parse_dataset, to_json, LoadMode};

    #[test]
    fn thousand_instances_follow_type_shares() {
        let corpus = synth_generate(1000, &DEFAULT_PROPORTIONS, 7, SynthOptions::default()).unwrap();
        let mut counts = [0usize; 5];
        for inst in &corpus {
            counts[inst.relation.code()] += 1;
        }
        assert_eq!(counts, [431, 213, 71, 156, 129]);
    }

    #[test]
    fn largest_remainder_sums_to_n() {
        for n in [1, 7, 99, 1000, 4547] {
            assert_eq!(largest_remainder(n, &DEFAULT_PROPORTIONS).iter().sum::<usize>(), n);
        }
        assert_eq!(largest_remainder(10, &[0.25, 0.25, 0.5]), vec![3, 2, 5]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = to_json(&synth_generate(50, &DEFAULT_PROPORTIONS, 3, SynthOptions::default()).unwrap()).unwrap();
        let b = to_json(&synth_generate(50, &DEFAULT_PROPORTIONS, 3, SynthOptions::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = to_json(&synth_generate(50, &DEFAULT_PROPORTIONS, 4, SynthOptions::default()).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_instances_validate_and_round_trip() {
        let corpus = synth_generate(200, &DEFAULT_PROPORTIONS, 11, SynthOptions::default()).unwrap();
        let raw = to_json(&corpus).unwrap();
        let loaded = parse_dataset(&raw, LoadMode::Strict, native_adapter).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn sub_event_questions_have_many_answers() {
        let corpus = synth_generate(1000, &DEFAULT_PROPORTIONS, 5, SynthOptions::default()).unwrap();
        let sub: Vec<_> = corpus.iter().filter(|i| i.relation == RelationType::SubEvent).collect();
        let mean = sub.iter().map(|i| i.answers.len()).sum::<usize>() as f64 / sub.len() as f64;
        assert!(mean > 3.0, "{mean}");
        assert!(corpus.iter().all(|i| i.events.other.len() == 4));
    }

    #[test]
    fn bad_arguments() {
        assert!(synth_generate(0, &DEFAULT_PROPORTIONS, 0, SynthOptions::default()).is_err());
        assert!(synth_generate(5, &[0.5, 0.5, 0.1, 0.0, 0.0], 0, SynthOptions::default()).is_err());
    }
}
