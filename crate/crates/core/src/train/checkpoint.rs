use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::reader::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const FORMAT: &str = "cas-reader-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Everything needed to resume training or evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Epoch the parameters were selected at, if any epoch completed.
    pub epoch: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    train_config: TrainConfig,
    model: ModelConfig,
    epoch: Option<usize>,
    vocab_file: String,
    vocab_size: usize,
    adam: AdamMeta,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn array_layout(params: &ModelParams) -> Vec<ArrayEntry> {
    let names = ModelParams::tensor_names();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut out = Vec::with_capacity(3 * names.len());
    for prefix in ["", "adam.m.", "adam.v."] {
        for (n, s) in names.iter().zip(&shapes) {
            out.push(ArrayEntry {
                name: format!("{prefix}{n}"),
                shape: s.clone(),
            });
        }
    }
    out
}

/// Writes a directory with a JSON manifest, the parameter and optimizer
/// arrays as little-endian f64 in manifest order, and the vocabulary.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        train_config: ckpt.config.clone(),
        model: ckpt.params.config,
        epoch: ckpt.epoch,
        vocab_file: VOCAB_FILE.into(),
        vocab_size: ckpt.vocab.size(),
        adam: AdamMeta {
            t: ckpt.adam.t,
            lr: ckpt.adam.lr,
            beta1: ckpt.adam.beta1,
            beta2: ckpt.adam.beta2,
            epsilon: ckpt.adam.epsilon,
        },
        arrays: array_layout(&ckpt.params),
    };
    let mut bytes = Vec::with_capacity(3 * 8 * ckpt.params.num_parameters());
    let blocks = ckpt
        .params
        .tensors()
        .into_iter()
        .map(Tensor::data)
        .chain(ckpt.adam.m.iter().map(Vec::as_slice))
        .chain(ckpt.adam.v.iter().map(Vec::as_slice));
    for block in blocks {
        for x in block {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, data).map_err(|e| Error::io(p, e))
    };
    write(MANIFEST_FILE, format!("{text}\n").as_bytes())?;
    write(ARRAYS_FILE, &bytes)?;
    ckpt.vocab.save(&dir.join(VOCAB_FILE))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    load_checkpoint_with_vocab(dir, None)
}

/// Loads a checkpoint, optionally with a vocabulary file other than the
/// one stored alongside it. The vocabulary must match the embedding size.
pub fn load_checkpoint_with_vocab(dir: &Path, vocab_override: Option<&Path>) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Corruption(format!(
            "unsupported checkpoint {} version {} (expected {FORMAT} version {VERSION})",
            manifest.format, manifest.version
        )));
    }
    manifest.model.validate()?;

    let names = ModelParams::tensor_names();
    if manifest.arrays.len() != 3 * names.len() {
        return Err(Error::Corruption(format!(
            "manifest lists {} arrays, expected {}",
            manifest.arrays.len(),
            3 * names.len()
        )));
    }
    let arrays_path = dir.join(ARRAYS_FILE);
    let bytes = std::fs::read(&arrays_path).map_err(|e| Error::io(&arrays_path, e))?;
    let mut offset = 0usize;
    let mut blocks = Vec::with_capacity(manifest.arrays.len());
    for (k, entry) in manifest.arrays.iter().enumerate() {
        let expected_name = match k / names.len() {
            0 => names[k].clone(),
            1 => format!("adam.m.{}", names[k % names.len()]),
            _ => format!("adam.v.{}", names[k % names.len()]),
        };
        if entry.name != expected_name {
            return Err(Error::Corruption(format!(
                "array {k} is {:?}, expected {expected_name:?}",
                entry.name
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let need = numel * 8;
        if bytes.len() < offset + need {
            return Err(Error::Corruption(format!(
                "array {} is truncated: needs {need} bytes at offset {offset}, file has {}",
                entry.name,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += need;
        blocks.push((entry.shape.clone(), data));
    }
    if offset != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after the last array",
            bytes.len() - offset
        )));
    }

    let vocab_path = match vocab_override {
        Some(p) => p.to_path_buf(),
        None => dir.join(&manifest.vocab_file),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.size() != manifest.model.vocab_size || manifest.vocab_size != manifest.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary {} has {} ids but the checkpoint embeds {}",
            vocab_path.display(),
            vocab.size(),
            manifest.model.vocab_size
        )));
    }

    let n = names.len();
    let mut it = blocks.into_iter();
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let (shape, data) = it.next().expect("count checked");
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Corruption(e.to_string()))?);
    }
    let params = ModelParams::from_tensors(manifest.model, tensors)
        .map_err(|e| Error::Corruption(format!("parameter shapes do not match the model: {e}")))?;
    let m: Vec<Vec<f64>> = it.by_ref().take(n).map(|(_, d)| d).collect();
    let v: Vec<Vec<f64>> = it.map(|(_, d)| d).collect();
    for (k, t) in params.tensors().iter().enumerate() {
        if m[k].len() != t.numel() || v[k].len() != t.numel() {
            return Err(Error::Corruption(format!("optimizer state for {} has the wrong size", names[k])));
        }
    }
    Ok(Checkpoint {
        params,
        adam: AdamState {
            m,
            v,
            t: manifest.adam.t,
            lr: manifest.adam.lr,
            beta1: manifest.adam.beta1,
            beta2: manifest.adam.beta2,
            epsilon: manifest.adam.epsilon,
        },
        config: manifest.train_config,
        vocab,
        epoch: manifest.epoch,
    })
}
