use std::fs;

use tranclr::data::{synth_generate, SynthOptions, DEFAULT_PROPORTIONS};
use tranclr::harness::{load_checkpoint, train, write_artifacts, RunConfig, StepRecord};
use tranclr::{Error, ModelConfig, QAInstance, Setting};

fn corpus(n: usize) -> Vec<QAInstance> {
    synth_generate(n, &DEFAULT_PROPORTIONS, 11, SynthOptions::default()).unwrap()
}

fn small(setting: Setting) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            d_model: 32,
            d_ff: 64,
            heads: 2,
            setting,
            ..ModelConfig::default()
        },
        epochs: 1,
        ..RunConfig::default()
    };
    cfg.optim.lr = 1e-3;
    cfg.optim.weight_decay = 0.01;
    cfg
}

#[test]
fn one_epoch_writes_all_artifacts() {
    let data = corpus(16);
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&small(Setting::Generative), &data, None).unwrap();
    // 16 instances at 2 × 3 per step
    assert_eq!(outcome.log.len(), 3);
    assert!(outcome.final_loss.unwrap().is_finite());
    assert!(outcome.transform.invertible && outcome.transform.det != 0.0);
    write_artifacts(&outcome, dir.path()).unwrap();

    let ckpt = load_checkpoint(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt.model.store.flatten(), outcome.checkpoint.model.store.flatten());
    let log: Vec<StepRecord> = fs::read_to_string(dir.path().join("loss_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log, outcome.log);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("transform.json")).unwrap()).unwrap();
    assert!(t["det"].as_f64().unwrap() != 0.0);
}

#[test]
fn same_seed_same_run() {
    let data = corpus(24);
    for setting in [Setting::Generative, Setting::Extractive] {
        let cfg = RunConfig { epochs: 2, ..small(setting) };
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.final_loss.unwrap().to_bits(), b.final_loss.unwrap().to_bits());
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.model.store.flatten(), b.checkpoint.model.store.flatten());
    }
}

#[test]
fn input_order_does_not_matter() {
    let data = corpus(12);
    let mut rev = data.clone();
    rev.reverse();
    let cfg = small(Setting::Extractive);
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &rev, None).unwrap();
    assert_eq!(a.log, b.log);
}

#[test]
fn invalid_config_fails_before_training() {
    let mut cfg = small(Setting::Generative);
    cfg.loss.tau = -1.0;
    assert!(matches!(train(&cfg, &corpus(4), None), Err(Error::Config(_))));
    let mut cfg = small(Setting::Generative);
    cfg.model.heads = 5;
    assert!(matches!(train(&cfg, &corpus(4), None), Err(Error::Config(_))));
}

#[test]
fn overfits_a_single_batch() {
    let data = corpus(2);
    for setting in [Setting::Generative, Setting::Extractive] {
        let mut cfg = small(setting);
        cfg.batch_size = Some(2);
        cfg.accumulation = Some(1);
        cfg.epochs = 200;
        cfg.optim.lr = 3e-3;
        cfg.optim.weight_decay = 0.0;
        let out = train(&cfg, &data, None).unwrap();
        let last = out.log.last().unwrap();
        assert_eq!(out.log.len(), 200);
        assert!(last.l < 0.05, "{setting:?}: {last:?}");
    }
}

#[test]
fn ablations_shape_the_loss_log() {
    let data = corpus(12);
    let mut cfg = small(Setting::Extractive);
    cfg.ablation.no_tc = true;
    cfg.ablation.no_cl = true;
    let out = train(&cfg, &data, None).unwrap();
    assert!(out.log.iter().all(|r| r.l_tc == 0.0 && r.l_cl == 0.0 && r.l == r.l_qa));

    let mut cfg = small(Setting::Extractive);
    cfg.ablation.no_transm = true;
    let out = train(&cfg, &data, None).unwrap();
    let fresh = tranclr::Model::<f32>::new(tranclr::ModelConfig {
        vocab_size: out.checkpoint.vocab.len(),
        seed: cfg.seed,
        ..cfg.model.clone()
    })
    .unwrap();
    let map = |m: &tranclr::Model<f32>| m.transform_layer().affine_map(&m.store).unwrap();
    assert_eq!(map(&out.checkpoint.model), map(&fresh));
}
