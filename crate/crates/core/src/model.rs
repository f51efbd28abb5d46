//! Small pre-norm transformer. The generative setting adds a decoder with
//! tied input/output embeddings; the extractive setting tags paragraph
//! tokens. Both carry the event transform and the relation type head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::data::RelationType;
use crate::error::{Error, Result};
use crate::text::{AlignedSequence, Special, Vocab};
use crate::transform::TransformLayer;

pub use crate::text::Setting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tagging {
    Io,
    Bio,
}

/// Tag label ids: `O = 0`, `I = 1`, and `B = 2` under BIO.
pub const TAG_O: usize = 0;
pub const TAG_I: usize = 1;
pub const TAG_B: usize = 2;

impl Tagging {
    pub fn labels(self) -> usize {
        match self {
            Tagging::Io => 2,
            Tagging::Bio => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
    pub setting: Setting,
    pub tagging: Tagging,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 0,
            max_len: 192,
            dropout: 0.0,
            seed: 5,
            setting: Setting::Generative,
            tagging: Tagging::Io,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layers, heads, d_model and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= Special::ALL.len() {
            return fail(format!("vocabulary of {} tokens holds no words", self.vocab_size));
        }
        if self.max_len < 4 {
            return fail(format!("max_len {} too small", self.max_len));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: ParamId,
    qkv_bias: ParamId,
    out: ParamId,
    out_bias: ParamId,
}

#[derive(Debug, Clone)]
struct CrossAttention {
    q: ParamId,
    q_bias: ParamId,
    kv: ParamId,
    kv_bias: ParamId,
    out: ParamId,
    out_bias: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross: CrossAttention,
    ln3: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Option<Norm>,
    tag_w: Option<ParamId>,
    tag_b: Option<ParamId>,
    type_w: ParamId,
    type_b: ParamId,
    transform: TransformLayer,
}

/// Dropout randomness for a training-mode forward pass; `None` is eval mode.
pub type DropoutRng<'r> = Option<&'r mut ChaCha8Rng>;

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    layout: Layout,
}

struct Init<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Init<'_, F> {
    fn weight(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = Tensor::randn(rows, cols, std, &mut self.rng);
        self.store.add(name, t, true)
    }

    fn bias(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![1, n]), false)
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gain = self.store.add(format!("{name}.gain"), Tensor::from_fn(1, d, |_, _| F::one()), false);
        Norm {
            gain,
            bias: self.bias(format!("{name}.bias"), d),
        }
    }

    fn attention(&mut self, name: &str, d: usize, out_std: f64) -> Attention {
        let std = (d as f64).powf(-0.5);
        Attention {
            qkv: self.weight(format!("{name}.qkv"), d, 3 * d, std),
            qkv_bias: self.bias(format!("{name}.qkv_bias"), 3 * d),
            out: self.weight(format!("{name}.out"), d, d, out_std),
            out_bias: self.bias(format!("{name}.out_bias"), d),
        }
    }

    fn cross(&mut self, name: &str, d: usize, out_std: f64) -> CrossAttention {
        let std = (d as f64).powf(-0.5);
        CrossAttention {
            q: self.weight(format!("{name}.q"), d, d, std),
            q_bias: self.bias(format!("{name}.q_bias"), d),
            kv: self.weight(format!("{name}.kv"), d, 2 * d, std),
            kv_bias: self.bias(format!("{name}.kv_bias"), 2 * d),
            out: self.weight(format!("{name}.out"), d, d, out_std),
            out_bias: self.bias(format!("{name}.out_bias"), d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize, out_scale: f64) -> FeedForward {
        FeedForward {
            w1: self.weight(format!("{name}.w1"), d, ff, (d as f64).powf(-0.5)),
            b1: self.bias(format!("{name}.b1"), ff),
            w2: self.weight(format!("{name}.w2"), ff, d, (ff as f64).powf(-0.5) * out_scale),
            b2: self.bias(format!("{name}.b2"), d),
        }
    }
}

/// Fixed sinusoidal position table, `len×d`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d_model;
        let out_scale = (2.0 * config.layers as f64).powf(-0.5);
        let out_std = (d as f64).powf(-0.5) * out_scale;

        let embed = init.weight("embed".into(), config.vocab_size, d, (d as f64).powf(-0.5));
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer {
                ln1: init.norm(&format!("enc.{l}.ln1"), d),
                attn: init.attention(&format!("enc.{l}.attn"), d, out_std),
                ln2: init.norm(&format!("enc.{l}.ln2"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, config.d_ff, out_scale),
            })
            .collect();
        let enc_norm = init.norm("enc.norm", d);

        let (decoder, dec_norm, tag_w, tag_b) = match config.setting {
            Setting::Generative => {
                let layers = (0..config.layers)
                    .map(|l| DecoderLayer {
                        ln1: init.norm(&format!("dec.{l}.ln1"), d),
                        self_attn: init.attention(&format!("dec.{l}.self"), d, out_std),
                        ln2: init.norm(&format!("dec.{l}.ln2"), d),
                        cross: init.cross(&format!("dec.{l}.cross"), d, out_std),
                        ln3: init.norm(&format!("dec.{l}.ln3"), d),
                        ffn: init.ffn(&format!("dec.{l}.ffn"), d, config.d_ff, out_scale),
                    })
                    .collect();
                (layers, Some(init.norm("dec.norm", d)), None, None)
            }
            Setting::Extractive => {
                let labels = config.tagging.labels();
                let w = init.weight("tag.w".into(), d, labels, (d as f64).powf(-0.5));
                let b = init.bias("tag.b".into(), labels);
                (Vec::new(), None, Some(w), Some(b))
            }
        };
        let type_w = init.weight("type.w".into(), d, RelationType::COUNT, (d as f64).powf(-0.5));
        let type_b = init.bias("type.b".into(), RelationType::COUNT);
        let mut rng = init.rng;
        let transform = TransformLayer::init(&mut store, "event_transform", d, &mut rng)?;

        Ok(Self {
            config,
            store,
            layout: Layout {
                embed,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
                tag_w,
                tag_b,
                type_w,
                type_b,
                transform,
            },
        })
    }

    pub fn transform_layer(&self) -> TransformLayer {
        self.layout.transform
    }

    pub fn setting(&self) -> Setting {
        self.config.setting
    }

    /// Copy of the model in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    fn embed_tokens(&self, g: &mut Graph<'_, F>, ids: &[u32], rng: &mut DropoutRng<'_>) -> Result<Var> {
        let d = self.config.d_model;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::shape("embed", format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = g.param(self.layout.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.embedding(table, &idx)?;
        let x = g.scale(x, F::of((d as f64).sqrt()))?;
        let pe = positional_encoding(ids.len(), d).into_iter().map(F::of).collect();
        let pe = g.constant(ids.len(), d, pe)?;
        let x = g.add(x, pe)?;
        self.dropout(g, x, rng)
    }

    fn dropout(&self, g: &mut Graph<'_, F>, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, *r),
            _ => Ok(x),
        }
    }

    fn norm(&self, g: &mut Graph<'_, F>, x: Var, n: &Norm) -> Result<Var> {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias, 1e-5)
    }

    fn linear(&self, g: &mut Graph<'_, F>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn heads(&self, g: &mut Graph<'_, F>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let h = self.config.heads;
        let dh = self.config.d_model / h;
        let scale = F::of((dh as f64).powf(-0.5));
        let mut outs = Vec::with_capacity(h);
        for i in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, i * dh, dh)?, g.slice_cols(k, i * dh, dh)?, g.slice_cols(v, i * dh, dh)?)
            };
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale)?;
            let p = g.softmax(s, causal)?;
            outs.push(g.matmul(p, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    fn self_attention(&self, g: &mut Graph<'_, F>, x: Var, a: &Attention, causal: bool) -> Result<Var> {
        let d = self.config.d_model;
        let qkv = self.linear(g, x, a.qkv, a.qkv_bias)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let ctx = self.heads(g, q, k, v, causal)?;
        self.linear(g, ctx, a.out, a.out_bias)
    }

    fn cross_attention(&self, g: &mut Graph<'_, F>, x: Var, memory: Var, a: &CrossAttention) -> Result<Var> {
        let d = self.config.d_model;
        let q = self.linear(g, x, a.q, a.q_bias)?;
        let kv = self.linear(g, memory, a.kv, a.kv_bias)?;
        let k = g.slice_cols(kv, 0, d)?;
        let v = g.slice_cols(kv, d, d)?;
        let ctx = self.heads(g, q, k, v, false)?;
        self.linear(g, ctx, a.out, a.out_bias)
    }

    fn feed_forward(&self, g: &mut Graph<'_, F>, x: Var, f: &FeedForward, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let h = self.linear(g, x, f.w1, f.b1)?;
        let h = g.activation(h, Activation::Gelu)?;
        let h = self.dropout(g, h, rng)?;
        self.linear(g, h, f.w2, f.b2)
    }

    /// Contextual hidden states, one `d`-row per input token.
    pub fn encode(&self, g: &mut Graph<'_, F>, ids: &[u32], mut rng: DropoutRng<'_>) -> Result<Var> {
        if ids.len() > self.config.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let mut x = self.embed_tokens(g, ids, &mut rng)?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, &layer.ln1)?;
            let h = self.self_attention(g, h, &layer.attn, false)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let h = self.feed_forward(g, h, &layer.ffn, &mut rng)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, &self.layout.enc_norm)
    }

    /// Teacher-forced next-token logits (`len(dec_in) × vocab`).
    pub fn decode(&self, g: &mut Graph<'_, F>, memory: Var, dec_in: &[u32], mut rng: DropoutRng<'_>) -> Result<Var> {
        let Some(final_norm) = &self.layout.dec_norm else {
            return Err(Error::Mode { expected: "generative" });
        };
        let mut y = self.embed_tokens(g, dec_in, &mut rng)?;
        for layer in &self.layout.decoder {
            let h = self.norm(g, y, &layer.ln1)?;
            let h = self.self_attention(g, h, &layer.self_attn, true)?;
            let h = self.dropout(g, h, &mut rng)?;
            y = g.add(y, h)?;
            let h = self.norm(g, y, &layer.ln2)?;
            let h = self.cross_attention(g, h, memory, &layer.cross)?;
            let h = self.dropout(g, h, &mut rng)?;
            y = g.add(y, h)?;
            let h = self.norm(g, y, &layer.ln3)?;
            let h = self.feed_forward(g, h, &layer.ffn, &mut rng)?;
            let h = self.dropout(g, h, &mut rng)?;
            y = g.add(y, h)?;
        }
        let y = self.norm(g, y, final_norm)?;
        let table = g.param(self.layout.embed);
        g.matmul_t(y, table)
    }

    /// Per-token label logits for the given (paragraph) positions of `hidden`.
    pub fn tag_logits(&self, g: &mut Graph<'_, F>, hidden: Var, positions: &[usize]) -> Result<Var> {
        let (Some(w), Some(b)) = (self.layout.tag_w, self.layout.tag_b) else {
            return Err(Error::Mode { expected: "extractive" });
        };
        let rows = g.select_rows(hidden, positions)?;
        self.linear(g, rows, w, b)
    }

    /// Applies the event transform, or passes rows through when disabled.
    pub fn event_rows(&self, g: &mut Graph<'_, F>, hidden: Var, positions: &[usize], use_transform: bool) -> Result<Var> {
        let rows = g.select_rows(hidden, positions)?;
        if use_transform {
            self.layout.transform.apply(g, rows)
        } else {
            Ok(rows)
        }
    }

    /// Relation type logits (`1×5`) from the mean of the (transformed)
    /// question token vectors.
    pub fn type_logits(&self, g: &mut Graph<'_, F>, hidden: Var, question: &[usize], use_transform: bool) -> Result<Var> {
        if question.is_empty() {
            return Err(Error::Contract("type classification needs question tokens".into()));
        }
        let rows = self.event_rows(g, hidden, question, use_transform)?;
        let pooled = g.mean_rows(rows)?;
        self.linear(g, pooled, self.layout.type_w, self.layout.type_b)
    }

    /// Greedy decoding until `</s>` or `max_len` tokens.
    pub fn generate(&self, seq: &AlignedSequence, max_len: usize) -> Result<Vec<u32>> {
        if self.config.setting != Setting::Generative {
            return Err(Error::Mode { expected: "generative" });
        }
        let memory = {
            let mut g = Graph::with_params(&self.store);
            let h = self.encode(&mut g, &seq.ids, None)?;
            g.to_tensor(h)
        };
        let mut stepper = Stepper { model: self, memory };
        greedy_decode(&mut stepper, max_len)
    }

    /// Argmax label per paragraph token.
    pub fn tag_tokens(&self, seq: &AlignedSequence, positions: &[usize]) -> Result<Vec<usize>> {
        if self.config.setting != Setting::Extractive {
            return Err(Error::Mode { expected: "extractive" });
        }
        let mut g = Graph::with_params(&self.store);
        let h = self.encode(&mut g, &seq.ids, None)?;
        let logits = self.tag_logits(&mut g, h, positions)?;
        let c = g.shape(logits).1;
        Ok(g.value(logits).chunks(c).map(argmax).collect())
    }
}

pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Source of next-token logits for greedy decoding.
pub trait StepDecoder {
    fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

struct Stepper<'m, F: Scalar> {
    model: &'m Model<F>,
    memory: Tensor<F>,
}

impl<F: Scalar> StepDecoder for Stepper<'_, F> {
    fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.model.store);
        let mem = g.input(self.memory.clone())?;
        let logits = self.model.decode(&mut g, mem, prefix, None)?;
        let (r, c) = g.shape(logits);
        Ok(g.value(logits)[(r - 1) * c..].iter().map(|x| x.f64()).collect())
    }
}

/// Starts from `<s>`; returns the emitted ids without `<s>` or `</s>`.
pub fn greedy_decode<D: StepDecoder + ?Sized>(decoder: &mut D, max_len: usize) -> Result<Vec<u32>> {
    let mut prefix = vec![Special::Bos.id()];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = decoder.next_logits(&prefix)?;
        let next = argmax(&logits) as u32;
        if next == Special::Eos.id() {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

/// Splits decoded ids on the `;` separator into answer strings.
pub fn split_answers(ids: &[u32], vocab: &Vocab) -> Vec<String> {
    ids.split(|&i| i == Special::Semicolon.id())
        .map(|part| {
            part.iter()
                .filter(|&&i| !matches!(i, 0 | 2 | 3))
                .map(|&i| vocab.display(i))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .filter(|s| !s.trim().is_empty())
        .collect()
}

/// Contiguous answer runs (inclusive token ranges) in a tag sequence.
/// Under BIO a `B` always opens a new run; an `I` after `O` opens one too.
pub fn tag_runs(tags: &[usize], scheme: Tagging) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        let begins = scheme == Tagging::Bio && t == TAG_B;
        if t == TAG_O || begins {
            if let Some(s) = open.take() {
                runs.push((s, i - 1));
            }
        }
        if t != TAG_O && open.is_none() {
            open = Some(i);
        }
    }
    if let Some(s) = open {
        runs.push((s, tags.len() - 1));
    }
    runs
}

/// Gold labels for paragraph tokens given the token positions of each answer.
pub fn gold_tags(n_paragraph: usize, answer_token_runs: &[Vec<usize>], scheme: Tagging) -> Vec<usize> {
    let mut tags = vec![TAG_O; n_paragraph];
    for run in answer_token_runs {
        for (k, &i) in run.iter().enumerate() {
            tags[i] = if k == 0 && scheme == Tagging::Bio { TAG_B } else { TAG_I };
        }
    }
    tags
}

/// Random instance-level seed derivation shared by training and sampling.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32));
    r.random()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(setting: Setting, layers: usize, heads: usize, d: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads,
            d_model: d,
            d_ff: 2 * d,
            vocab_size: 20,
            max_len: 32,
            dropout: 0.0,
            seed: 1,
            setting,
            tagging: Tagging::Io,
        }
    }

    #[test]
    fn encode_shape_contract() {
        let m = Model::<f64>::new(tiny(Setting::Generative, 1, 2, 8)).unwrap();
        let mut g = Graph::with_params(&m.store);
        let h = m.encode(&mut g, &[7, 8, 9, 10, 11, 12, 13], None).unwrap();
        assert_eq!(g.shape(h), (7, 8));
    }

    #[test]
    fn shapes_across_config_grid() {
        for setting in [Setting::Generative, Setting::Extractive] {
            for layers in [1, 2] {
                for heads in [1, 2, 4] {
                    for d in [8, 16, 64] {
                        let m = Model::<f32>::new(tiny(setting, layers, heads, d)).unwrap();
                        let mut g = Graph::with_params(&m.store);
                        let h = m.encode(&mut g, &[7, 8, 9, 10, 11], None).unwrap();
                        assert_eq!(g.shape(h), (5, d));
                        match setting {
                            Setting::Generative => {
                                let l = m.decode(&mut g, h, &[2, 7, 8], None).unwrap();
                                assert_eq!(g.shape(l), (3, 20));
                            }
                            Setting::Extractive => {
                                let l = m.tag_logits(&mut g, h, &[2, 3, 4]).unwrap();
                                assert_eq!(g.shape(l), (3, 2));
                            }
                        }
                        let t = m.type_logits(&mut g, h, &[0, 1], true).unwrap();
                        assert_eq!(g.shape(t), (1, 5));
                    }
                }
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut cfg = tiny(Setting::Extractive, 2, 2, 16);
        cfg.dropout = 0.3;
        let m = Model::<f32>::new(cfg).unwrap();
        let run = || {
            let mut g = Graph::with_params(&m.store);
            let h = m.encode(&mut g, &[7, 8, 9], None).unwrap();
            g.value(h).to_vec()
        };
        assert_eq!(run(), run());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::with_params(&m.store);
        let h = m.encode(&mut g, &[7, 8, 9], Some(&mut rng)).unwrap();
        assert_ne!(g.value(h).to_vec(), run());
    }

    #[test]
    fn overlength_and_bad_ids() {
        let m = Model::<f32>::new(tiny(Setting::Generative, 1, 1, 8)).unwrap();
        let mut g = Graph::with_params(&m.store);
        assert!(matches!(m.encode(&mut g, &[7; 33], None), Err(Error::Length { .. })));
        assert!(m.encode(&mut g, &[25], None).is_err());
    }

    #[test]
    fn mode_errors() {
        let gen = Model::<f32>::new(tiny(Setting::Generative, 1, 1, 8)).unwrap();
        let ext = Model::<f32>::new(tiny(Setting::Extractive, 1, 1, 8)).unwrap();
        let seq = AlignedSequence {
            ids: vec![7, 8],
            spans: vec![None, None],
            segments: vec![crate::text::Segment::Paragraph; 2],
        };
        assert!(matches!(ext.generate(&seq, 4), Err(Error::Mode { .. })));
        assert!(matches!(gen.tag_tokens(&seq, &[0, 1]), Err(Error::Mode { .. })));
    }

    struct Forced(Vec<u32>);

    impl StepDecoder for Forced {
        fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
            let want = self.0.get(prefix.len() - 1).copied().unwrap_or(Special::Eos.id());
            let mut l = vec![0.0; 16];
            l[want as usize] = 10.0;
            Ok(l)
        }
    }

    #[test]
    fn forced_logits_are_reproduced() {
        let ids = vec![9, 10, Special::Semicolon.id(), 11];
        assert_eq!(greedy_decode(&mut Forced(ids.clone()), 10).unwrap(), ids);
        assert_eq!(greedy_decode(&mut Forced(ids.clone()), 2).unwrap(), vec![9, 10]);
    }

    #[test]
    fn splitting_on_separator() {
        let v = Vocab::from(vec!["a".to_string(), "b".into(), "c".into()]);
        let ids = [7, 8, Special::Semicolon.id(), 9];
        assert_eq!(split_answers(&ids, &v), vec!["a b", "c"]);
        assert_eq!(split_answers(&[Special::Semicolon.id()], &v), Vec::<String>::new());
        assert!(!split_answers(&[7], &v).is_empty());
    }

    #[test]
    fn io_runs() {
        let tags = [TAG_O, TAG_I, TAG_I, TAG_O, TAG_I];
        assert_eq!(tag_runs(&tags, Tagging::Io), vec![(1, 2), (4, 4)]);
        assert!(tag_runs(&[TAG_O; 4], Tagging::Io).is_empty());
        let bio = [TAG_B, TAG_I, TAG_B, TAG_O, TAG_I];
        assert_eq!(tag_runs(&bio, Tagging::Bio), vec![(0, 1), (2, 2), (4, 4)]);
    }

    #[test]
    fn gold_tag_construction() {
        let runs = vec![vec![1, 2], vec![4]];
        assert_eq!(gold_tags(5, &runs, Tagging::Io), vec![0, 1, 1, 0, 1]);
        assert_eq!(gold_tags(5, &runs, Tagging::Bio), vec![0, 2, 1, 0, 2]);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Setting::Generative, 1, 3, 8);
        assert!(c.validate().is_err());
        c.heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
