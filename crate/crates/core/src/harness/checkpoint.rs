//! Binary checkpoint: magic bytes, a little-endian `u64` header length, a
//! JSON header (model config, vocabulary, ablation flags, parameter names and
//! shapes), then every parameter value as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::Ablation;
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRANCLR\x01";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub ablation: Ablation,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    ablation: Ablation,
    params: Vec<(String, Vec<usize>)>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ckpt.model.config.clone(),
        vocab: ckpt.vocab.clone(),
        ablation: ckpt.ablation,
        params: ckpt
            .model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * ckpt.model.store.num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in ckpt.model.store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(bad("vocabulary size disagrees with the model config"));
    }
    let mut model = Model::<f32>::new(header.config)?;
    let expected: Vec<(String, Vec<usize>)> = model.store.iter().map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec())).collect();
    if expected != header.params {
        return Err(bad("parameter layout does not match the model config"));
    }
    let data = &bytes[16 + len..];
    if data.len() != 4 * model.store.num_values() {
        return Err(Error::Checkpoint(format!(
            "{} data bytes for {} values",
            data.len(),
            model.store.num_values()
        )));
    }
    let flat: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    model.store.load_flat(&flat)?;
    if header.ablation.no_transm {
        model.transform_layer().set_trainable(&mut model.store, false);
    }
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
        ablation: header.ablation,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Setting, Tagging};

    fn ckpt() -> Checkpoint {
        let vocab = Vocab::from(vec!["a".to_string(), "b".into()]);
        let model = Model::new(ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            vocab_size: vocab.len(),
            max_len: 16,
            dropout: 0.1,
            seed: 9,
            setting: Setting::Extractive,
            tagging: Tagging::Bio,
        })
        .unwrap();
        Checkpoint {
            model,
            vocab,
            ablation: Ablation {
                no_cl: true,
                ..Ablation::default()
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.model.config, c.model.config);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.ablation, c.ablation);
        let bits = |m: &Model<f32>| m.store.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&c.model));
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&ckpt()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"nonsense").is_err());
        let mut wrong = bytes.clone();
        wrong[0] ^= 1;
        assert!(decode_checkpoint(&wrong).is_err());
    }
}
