use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::RunConfig;
use crate::autograd::Graph;
use crate::data::QAInstance;
use crate::error::{Error, Result};
use crate::model::{derive_seed, Model};
use crate::objectives::{instance_objective, prepare_instance, PreparedInstance};
use crate::optim::{Adam, Schedule};
use crate::text::{build_vocab, Vocab};

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_qa: f64,
    pub l_tc: f64,
    pub l_cl: f64,
    pub l: f64,
}

/// State of the event map after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub det: f64,
    pub log_abs_det: f64,
    pub condition: f64,
    pub invertible: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Mean total loss over the last epoch; `None` when nothing was trained.
    pub final_loss: Option<f64>,
    pub transform: TransformReport,
    /// Ids dropped because they did not fit the maximum length.
    pub skipped: Vec<String>,
}

fn transform_report(model: &Model<f32>) -> Result<TransformReport> {
    let map = model.transform_layer().affine_map(&model.store)?;
    let lu = map.m.clone().lu();
    let log_abs_det = lu.u().diagonal().iter().map(|x| x.abs().ln()).sum();
    let condition = map.condition();
    Ok(TransformReport {
        det: map.det(),
        log_abs_det,
        condition,
        invertible: condition.is_finite() && condition < crate::transform::MAX_CONDITION,
    })
}

/// Vocabulary over the questions and paragraphs of `train`.
pub fn corpus_vocab(train: &[QAInstance], min_count: usize) -> Result<Vocab> {
    let texts: Vec<&str> = train.iter().flat_map(|i| [i.question.as_str(), i.paragraph.as_str()]).collect();
    build_vocab(&texts, min_count)
}

/// Trains a fresh model on `train`. The vocabulary is built from `train`
/// unless one is given. Instances are visited in an order fixed by the seed
/// and the instance ids, so the input order does not matter.
pub fn train(cfg: &RunConfig, train: &[QAInstance], vocab: Option<Vocab>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = match vocab {
        Some(v) => v,
        None => corpus_vocab(train, cfg.min_count)?,
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.seed = cfg.seed;
    let mut model = Model::<f32>::new(model_cfg)?;
    if cfg.ablation.no_transm {
        model.transform_layer().set_trainable(&mut model.store, false);
    }

    let mut skipped = Vec::new();
    let mut examples: Vec<PreparedInstance> = Vec::with_capacity(train.len());
    for inst in train {
        match prepare_instance(inst, &vocab, cfg.setting(), cfg.model.tagging, cfg.ablation.no_prefix, cfg.model.max_len) {
            Ok(ex) => examples.push(ex),
            Err(Error::Length { len, max }) => {
                log::warn!("skipping {}: {len} tokens exceed the limit of {max}", inst.id);
                skipped.push(inst.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    examples.sort_by(|a, b| a.id.cmp(&b.id));

    let per_step = cfg.batch_size() * cfg.accumulation();
    let steps_per_epoch = examples.len().div_ceil(per_step) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let schedule = Schedule::warmup_linear(total_steps, cfg.optim.warmup_frac);
    let mut adam = Adam::new(cfg.optim, schedule, &model.store);
    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, 0));
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut final_loss = None;

    for epoch in 0..cfg.epochs {
        if examples.is_empty() {
            break;
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch as u64)));
        let mut epoch_total = 0.0;
        for chunk in order.chunks(per_step) {
            let scale = 1.0 / chunk.len() as f32;
            let mut sums = [0.0f64; 4];
            model.store.zero_grad();
            for &i in chunk {
                let grads = {
                    let mut g = Graph::with_params(&model.store);
                    let (vars, bundle) =
                        instance_objective(&model, &mut g, &examples[i], &cfg.loss, &cfg.ablation, true, &mut noise)?;
                    for (s, v) in sums.iter_mut().zip([bundle.l_qa, bundle.l_tc, bundle.l_cl, bundle.l]) {
                        *s += v;
                    }
                    let scaled = g.scale(vars.total, scale)?;
                    g.backward(scaled)?
                };
                model.store.accumulate(&grads)?;
            }
            adam.step(&mut model.store)?;
            let n = chunk.len() as f64;
            epoch_total += sums[3];
            log.push(StepRecord {
                step: adam.steps_taken(),
                epoch,
                lr: cfg.optim.lr * schedule.factor(adam.steps_taken()),
                l_qa: sums[0] / n,
                l_tc: sums[1] / n,
                l_cl: sums[2] / n,
                l: sums[3] / n,
            });
        }
        let mean = epoch_total / examples.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        final_loss = Some(mean);
    }
    model.store.zero_grad();

    let transform = transform_report(&model)?;
    if !transform.invertible {
        log::warn!("event transform is numerically singular after training (condition {:e})", transform.condition);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            vocab,
            ablation: cfg.ablation,
        },
        log,
        final_loss,
        transform,
        skipped,
    })
}

/// Writes `model.ckpt`, `loss_log.jsonl` and `transform.json` into `dir`.
pub fn write_artifacts(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&outcome.checkpoint, dir.join("model.ckpt"))?;
    let log_path = dir.join("loss_log.jsonl");
    let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for rec in &outcome.log {
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&log_path, e))?;
    }
    let t_path = dir.join("transform.json");
    fs::write(&t_path, serde_json::to_string_pretty(&outcome.transform)?).map_err(|e| Error::io(&t_path, e))?;
    Ok(())
}
