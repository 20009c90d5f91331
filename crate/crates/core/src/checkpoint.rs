//! Serialized model weights with a JSON sidecar.
//!
//! On disk a checkpoint named `motion_vae` is the pair `motion_vae.ckpt`
//! (libtorch tensor archive) and `motion_vae.json` (metadata). Both files are
//! written to a temporary name first and renamed into place.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::VarStore;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    BackgroundAe,
    MotionVae,
    ContentVae,
    Decoder,
    Generator,
    Critic,
}

impl ModelType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelType::BackgroundAe => "background_ae",
            ModelType::MotionVae => "motion_vae",
            ModelType::ContentVae => "content_vae",
            ModelType::Decoder => "decoder",
            ModelType::Generator => "generator",
            ModelType::Critic => "critic",
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Checkpoint(format!("unknown model type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_type: ModelType,
    pub config_hash: String,
    pub step: usize,
    pub created_at: String,
    pub format_version: u32,
    /// Full model configuration, used to rebuild the network before loading.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: Vec<u8>,
}

pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn from_var_store<C: Serialize>(
        vs: &VarStore,
        model_type: ModelType,
        config: &C,
        step: usize,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        vs.save_to_stream(&mut weights)?;
        Ok(Self {
            meta: CheckpointMeta {
                model_type,
                config_hash: config_hash(config)?,
                step,
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                format_version: FORMAT_VERSION,
                config: serde_json::to_value(config)?,
            },
            weights,
        })
    }

    pub fn expect_type(&self, expected: ModelType) -> Result<()> {
        if self.meta.model_type != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {expected}",
                self.meta.model_type
            )));
        }
        if self.meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                self.meta.format_version
            )));
        }
        Ok(())
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config in {} checkpoint: {e}", self.meta.model_type)))
    }

    /// Copy the stored weights into `vs` after checking the model type.
    pub fn load_into(&self, vs: &mut VarStore, expected: ModelType) -> Result<()> {
        self.expect_type(expected)?;
        vs.load_from_stream(Cursor::new(&self.weights))?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights_path = dir.join(format!("{name}.ckpt"));
        let meta_path = dir.join(format!("{name}.json"));
        write_atomic(&weights_path, &self.weights)?;
        write_atomic(&meta_path, &serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(weights_path)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let meta = read_meta(&dir.join(format!("{name}.json")))?;
        let weights_path = dir.join(format!("{name}.ckpt"));
        let weights = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        Ok(Self { meta, weights })
    }
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed sidecar {}: {e}", path.display())))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
