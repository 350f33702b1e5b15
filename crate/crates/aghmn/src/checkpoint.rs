//! Checkpoints: a versioned JSON container of named parameter tensors plus
//! the model configuration, labels and vocabulary needed to rebuild the
//! model. A digest over the configuration guards against loading a
//! checkpoint into a mismatched variant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    digest: String,
    model: ModelConfig,
    labels: Vec<String>,
    vocab: Vec<String>,
    params: Vec<NamedTensor>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Digest over the model configuration and label set.
pub fn config_digest(config: &ModelConfig, labels: &[String]) -> String {
    let canonical = format!(
        "{}|{}",
        serde_json::to_string(config).expect("config serializes"),
        labels.join(",")
    );
    format!("{:016x}", fnv1a64(canonical.as_bytes()))
}

pub fn save_checkpoint(path: &Path, model: &Model, labels: &[String]) -> Result<()> {
    let params: Vec<NamedTensor> = model
        .params
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        digest: config_digest(&model.config, labels),
        model: model.config.clone(),
        labels: labels.to_vec(),
        vocab: model.vocab.words().to_vec(),
        params,
    };
    let json = serde_json::to_string(&file).expect("checkpoint serializes");
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a checkpoint and rebuilds the model. Returns the model and its
/// label list.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| {
        Error::Mismatch(format!("checkpoint `{}` unreadable: {e}", path.display()))
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Mismatch(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let expected = config_digest(&file.model, &file.labels);
    if expected != file.digest {
        return Err(Error::Mismatch(format!(
            "checkpoint digest {} does not match its configuration (expected {expected})",
            file.digest
        )));
    }
    let mut params = ParamSet::new(0);
    for nt in file.params {
        params.insert(&nt.name, Tensor::new(nt.shape, nt.data)?)?;
    }
    let vocab = Vocabulary::from_words(file.vocab);
    let model = Model::from_parts(file.model, vocab, params)?;
    Ok((model, file.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic, random_embeddings};
    use crate::model::{Fusion, Reader, Summarizer};

    fn sample_model() -> (Model, Vec<String>) {
        let (convs, spec) = generate_synthetic(3, (3, 5), 2, 0.2, 50).unwrap();
        let vocab = build_vocab(&convs, 1);
        let table = random_embeddings(&vocab, 4, 50);
        let config = ModelConfig {
            d_w: 4,
            d1: 3,
            k: 2,
            n_classes: 2,
            reader: Reader::Bigru,
            fusion: Fusion::Unif,
            summarizer: Summarizer::Agru,
            dropout_p: 0.3,
        };
        (Model::new(config, vocab, table.matrix, 50).unwrap(), spec.labels)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (model, labels) = sample_model();
        save_checkpoint(&path, &model, &labels).unwrap();
        let (loaded, loaded_labels) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_labels, labels);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab.words(), model.vocab.words());
        for (name, t) in model.params.iter() {
            assert_eq!(loaded.params.get(name).unwrap(), t, "param {name}");
        }
    }

    #[test]
    fn tampered_digest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (model, labels) = sample_model();
        save_checkpoint(&path, &model, &labels).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Flip the stored variant without updating the digest.
        let tampered = text.replace("\"unif\"", "\"bif\"");
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Mismatch(_))));
    }
}
