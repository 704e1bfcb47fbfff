use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchConfig, UNetWeights};
use crate::text::{load_vocab, save_vocab, Vocabulary};

pub const MANIFEST_FILE: &str = "model.json";
const WEIGHTS_FILE: &str = "weights.bin";
const VOCAB_STEM: &str = "vocab";

/// `model.json`: architecture plus references to the weight and vocabulary files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub arch: ArchConfig,
    pub weights: String,
    pub vocab: String,
    pub weights_hash: String,
    #[serde(default)]
    pub training: serde_json::Value,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Writes `model.json`, `weights.bin` and `vocab.{json,bin}` into `dir`.
pub fn save_model(dir: &Path, w: &UNetWeights, vocab: &Vocabulary, training: serde_json::Value) -> Result<ModelManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    w.save(&dir.join(WEIGHTS_FILE))?;
    save_vocab(vocab, dir, VOCAB_STEM)?;
    let manifest = ModelManifest {
        arch: w.config.clone(),
        weights: WEIGHTS_FILE.into(),
        vocab: format!("{VOCAB_STEM}.json"),
        weights_hash: w.content_hash(),
        training,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a model from its directory or its `model.json`.
pub fn load_model(path: &Path) -> Result<(UNetWeights, Vocabulary, ModelManifest)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    manifest.arch.validate()?;
    let base = mpath.parent().unwrap_or(Path::new("."));
    let w = UNetWeights::load(&base.join(&manifest.weights), &manifest.arch)?;
    if w.content_hash() != manifest.weights_hash {
        return Err(Error::Format(format!(
            "{}: weights hash does not match the manifest",
            base.join(&manifest.weights).display()
        )));
    }
    let vocab = load_vocab(&base.join(&manifest.vocab))?;
    if vocab.d_txt() != manifest.arch.d_txt {
        return Err(Error::Config(format!(
            "vocabulary width {} differs from model text width {}",
            vocab.d_txt(),
            manifest.arch.d_txt
        )));
    }
    Ok((w, vocab, manifest))
}
