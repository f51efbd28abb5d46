use std::collections::BTreeSet;

use tranclr::data::{synth_generate, SynthOptions, DEFAULT_PROPORTIONS};
use tranclr::harness::{
    project_embeddings, read_projection, train, write_projection, EventRoleTag, ProjectionRow, RunConfig,
};
use tranclr::objectives::prepare_instance;
use tranclr::{ModelConfig, QAInstance, Setting};

fn corpus(n: usize) -> Vec<QAInstance> {
    synth_generate(n, &DEFAULT_PROPORTIONS, 11, SynthOptions::default()).unwrap()
}

fn config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            d_model: 32,
            d_ff: 64,
            heads: 2,
            setting: Setting::Extractive,
            ..ModelConfig::default()
        },
        epochs,
        ..RunConfig::default()
    };
    cfg.optim.lr = 1e-3;
    cfg.optim.weight_decay = 0.01;
    cfg
}

fn mean_distance(rows: &[ProjectionRow], a: EventRoleTag, b: EventRoleTag) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for inst in rows.iter().map(|r| &r.instance).collect::<BTreeSet<_>>() {
        let of = |role| rows.iter().filter(move |r| &r.instance == inst && r.role == role);
        for p in of(a) {
            for q in of(b) {
                sum += ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn one_row_per_token_with_the_four_roles() {
    let data = corpus(6);
    let out = train(&config(1), &data, None).unwrap();
    let rows = project_embeddings(&out.checkpoint, &data[..3], "e1").unwrap();
    let cfg = &out.checkpoint.model.config;
    let tokens: usize = data[..3]
        .iter()
        .map(|i| prepare_instance(i, &out.checkpoint.vocab, cfg.setting, cfg.tagging, false, cfg.max_len).unwrap().seq.len())
        .sum();
    assert_eq!(rows.len(), tokens);
    let roles: BTreeSet<&str> = rows.iter().map(|r| r.role.name()).collect();
    assert_eq!(roles, BTreeSet::from(["answer-event", "non-event", "other-event", "question-event"]));
    assert!(rows.iter().all(|r| r.epoch == "e1"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tsv");
    write_projection(&path, &rows).unwrap();
    assert_eq!(read_projection(&path).unwrap(), rows);
    assert!(project_embeddings(&out.checkpoint, &[], "e1").is_err());
}

#[test]
fn trained_question_events_sit_nearer_answers_than_other_events() {
    let data = corpus(860);
    let (train_set, held) = data.split_at(800);
    let out = train(&config(8), train_set, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tsv");
    write_projection(&path, &project_embeddings(&out.checkpoint, held, "final").unwrap()).unwrap();
    let rows = read_projection(&path).unwrap();
    let qa = mean_distance(&rows, EventRoleTag::QuestionEvent, EventRoleTag::AnswerEvent);
    let qo = mean_distance(&rows, EventRoleTag::QuestionEvent, EventRoleTag::OtherEvent);
    println!("mean 2-D distance: question-answer {qa:.4}, question-other {qo:.4}");
    assert!(qa < qo, "question-answer {qa} vs question-other {qo}");
}
