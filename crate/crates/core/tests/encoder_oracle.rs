use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tranclr::autograd::Graph;
use tranclr::{Model, ModelConfig, Setting, Tagging};

fn config(d: usize, heads: usize, layers: usize, d_ff: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        d_model: d,
        d_ff,
        vocab_size: 9,
        max_len: 16,
        dropout: 0.0,
        seed: 1,
        setting: Setting::Extractive,
        tagging: Tagging::Io,
    }
}

fn set(model: &mut Model<f64>, name: &str, values: &[f64]) {
    let id = model.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.store.get_mut(id).tensor.data_mut().copy_from_slice(values);
}

fn get(model: &Model<f64>, name: &str) -> Vec<f64> {
    model.store.tensor(model.store.find(name).unwrap()).data().to_vec()
}

fn encode(model: &Model<f64>, ids: &[u32]) -> Vec<f64> {
    let mut g = Graph::with_params(&model.store);
    let h = model.encode(&mut g, ids, None).unwrap();
    g.value(h).to_vec()
}

#[test]
fn zero_branches_leave_normalized_embedding() {
    let mut m = Model::<f64>::new(config(2, 1, 1, 2)).unwrap();
    let names: Vec<String> = m.store.iter().map(|(_, p)| p.name.clone()).collect();
    for n in names.iter().filter(|n| n.starts_with("enc.0.") && !n.contains(".ln")) {
        let len = m.store.tensor(m.store.find(n).unwrap()).len();
        set(&mut m, n, &vec![0.0; len]);
    }
    let mut embed = vec![0.0; 18];
    embed[14..18].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    set(&mut m, "embed", &embed);
    // rows [√2, 0] + [sin 0, cos 0] and [0, √2] + [sin 1, cos 1], then layer norm
    let h = encode(&m, &[7, 8]);
    let want = [0.9998834518358841, -0.9998834518358831, -0.9999838566328545, 0.9999838566328545];
    for (a, b) in h.iter().zip(want) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

// Straight-line reimplementation of the pre-norm encoder on nested vectors.

type Rows = Vec<Vec<f64>>;

fn layer_norm(x: &Rows, gain: &[f64], bias: &[f64]) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j]).collect()
        })
        .collect()
}

fn linear(x: &Rows, w: &[f64], b: &[f64]) -> Rows {
    let out = b.len();
    x.iter()
        .map(|r| (0..out).map(|j| b[j] + r.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(x: &Rows, m: &Model<f64>, p: &str, d: usize, heads: usize) -> Rows {
    let qkv = linear(x, &get(m, &format!("{p}.qkv")), &get(m, &format!("{p}.qkv_bias")));
    let dh = d / heads;
    let n = x.len();
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let col = |r: &Vec<f64>, part: usize, k: usize| r[part * d + h * dh + k];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|k| col(&qkv[i], 0, k) * col(&qkv[j], 1, k)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for j in 0..n {
                let w = (scores[j] - max).exp() / z;
                for k in 0..dh {
                    ctx[i][h * dh + k] += w * col(&qkv[j], 2, k);
                }
            }
        }
    }
    linear(&ctx, &get(m, &format!("{p}.out")), &get(m, &format!("{p}.out_bias")))
}

fn naive_encode(m: &Model<f64>, ids: &[u32]) -> Vec<f64> {
    let c = &m.config;
    let d = c.d_model;
    let embed = get(m, "embed");
    let mut x: Rows = ids
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|i| {
                    let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                    let pe = if i % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() };
                    embed[t as usize * d + i] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect();
    let add = |a: &mut Rows, b: Rows| a.iter_mut().zip(b).for_each(|(r, s)| r.iter_mut().zip(s).for_each(|(u, v)| *u += v));
    for l in 0..c.layers {
        let p = format!("enc.{l}");
        let h = layer_norm(&x, &get(m, &format!("{p}.ln1.gain")), &get(m, &format!("{p}.ln1.bias")));
        add(&mut x, attention(&h, m, &format!("{p}.attn"), d, c.heads));
        let h = layer_norm(&x, &get(m, &format!("{p}.ln2.gain")), &get(m, &format!("{p}.ln2.bias")));
        let h: Rows = linear(&h, &get(m, &format!("{p}.ffn.w1")), &get(m, &format!("{p}.ffn.b1")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        add(&mut x, linear(&h, &get(m, &format!("{p}.ffn.w2")), &get(m, &format!("{p}.ffn.b2"))));
    }
    layer_norm(&x, &get(m, "enc.norm.gain"), &get(m, "enc.norm.bias")).concat()
}

#[test]
fn matches_straight_line_encoder() {
    for (d, heads, layers) in [(2, 1, 1), (4, 2, 2), (8, 4, 1)] {
        let mut m = Model::<f64>::new(config(d, heads, layers, 2 * d)).unwrap();
        // perturb every parameter, norms and biases included
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let flat: Vec<f64> = m.store.flatten().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        m.store.load_flat(&flat).unwrap();
        let ids = [7, 3, 8, 8, 1];
        let got = encode(&m, &ids);
        let want = naive_encode(&m, &ids);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }
}
