//! Small seeded fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tranclr::autograd::{Graph, Tensor};
use tranclr::data::{synth_generate, SynthOptions, DEFAULT_PROPORTIONS};
use tranclr::harness::corpus_vocab;
use tranclr::objectives::{instance_objective, prepare_instance, Ablation, LossConfig, PreparedInstance};
use tranclr::{Model, ModelConfig, Setting};

pub struct Fixture {
    pub model: Model<f32>,
    pub examples: Vec<PreparedInstance>,
}

/// A 2-layer model of width `d` and `n` prepared synthetic instances.
pub fn fixture(setting: Setting, d: usize, n: usize) -> Fixture {
    let corpus = synth_generate(n, &DEFAULT_PROPORTIONS, 11, SynthOptions::default()).expect("synthetic corpus");
    let vocab = corpus_vocab(&corpus, 1).expect("vocabulary");
    let model = Model::new(ModelConfig {
        d_model: d,
        d_ff: 2 * d,
        heads: 2,
        vocab_size: vocab.len(),
        setting,
        ..ModelConfig::default()
    })
    .expect("model");
    let cfg = &model.config;
    let examples = corpus
        .iter()
        .map(|inst| prepare_instance(inst, &vocab, cfg.setting, cfg.tagging, false, cfg.max_len).expect("fits"))
        .collect();
    Fixture { model, examples }
}

impl Fixture {
    /// Forward and backward pass of the full objective on one instance.
    pub fn objective_step(&mut self, i: usize) -> f32 {
        let ex = &self.examples[i % self.examples.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let (value, grads) = {
            let mut g = Graph::with_params(&self.model.store);
            let (vars, _) = instance_objective(&self.model, &mut g, ex, &LossConfig::default(), &Ablation::default(), true, &mut rng)
                .expect("objective");
            (g.scalar(vars.total), g.backward(vars.total).expect("backward"))
        };
        self.model.store.accumulate(&grads).expect("accumulate");
        value
    }

    /// Encoder forward pass only.
    pub fn encode(&self, i: usize) -> f32 {
        let ex = &self.examples[i % self.examples.len()];
        let mut g = Graph::with_params(&self.model.store);
        let h = self.model.encode(&mut g, &ex.seq.ids, None).expect("encode");
        g.value(h)[0]
    }
}

/// Product of two seeded `n × n` matrices through the graph.
pub fn matmul(n: usize, a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    let mut g = Graph::new();
    let x = g.input(a.clone()).expect("input");
    let y = g.input(b.clone()).expect("input");
    let z = g.matmul(x, y).expect("matmul");
    g.value(z)[n - 1]
}

pub fn random_matrix(n: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(n, n, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
