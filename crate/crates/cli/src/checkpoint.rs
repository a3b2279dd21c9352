//! Versioned, checksummed model checkpoints.
//!
//! The file is JSON: `{"format_version":1,"sha256":"<hex>","payload":{...}}`,
//! with the digest taken over the payload's exact bytes. Floats are written
//! in shortest round-trip form and parsed exactly, so a load reproduces
//! every parameter bit for bit.

use std::path::Path;

use ci_stonet_core::model::StoNetModel;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: StoNetModel,
}

impl Checkpoint {
    pub fn new(model: StoNetModel, config_hash: impl Into<String>, seed: u64) -> Self {
        Checkpoint {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.into(),
            seed,
            model,
        }
    }
}

#[derive(Deserialize)]
struct Envelope<'a> {
    format_version: u32,
    sha256: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_string(ckpt: &Checkpoint) -> String {
    let payload = serde_json::to_string(ckpt).expect("checkpoint serializes");
    format!(
        "{{\"format_version\":{FORMAT_VERSION},\"sha256\":\"{}\",\"payload\":{payload}}}",
        digest_hex(payload.as_bytes())
    )
}

pub fn from_str(text: &str, path: &Path) -> CliResult<Checkpoint> {
    let err = |message: String| CliError::Checkpoint { path: path.to_path_buf(), message };
    let env: Envelope = serde_json::from_str(text).map_err(|e| err(format!("unreadable: {e}")))?;
    if env.format_version != FORMAT_VERSION {
        return Err(err(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            env.format_version
        )));
    }
    let actual = digest_hex(env.payload.get().as_bytes());
    if actual != env.sha256 {
        return Err(err(format!("checksum mismatch (stored {}, computed {actual})", env.sha256)));
    }
    let ckpt: Checkpoint = serde_json::from_str(env.payload.get()).map_err(|e| err(format!("bad payload: {e}")))?;
    ckpt.model.validate().map_err(|e| err(format!("invalid model: {e}")))?;
    Ok(ckpt)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, to_string(ckpt)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    from_str(&text, path)
}
