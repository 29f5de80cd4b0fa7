//! Feedforward networks, the reverse-mode tape used to train them, and the
//! metric and controller parameterizations.
//!
//! Checkpoints are JSON. An [`Mlp`] serializes as
//! `{"widths": [..], "activations": ["tanh" | "softplus" | "linear", ..], "params": [..]}`
//! with `params` flattened per layer as the row-major `out × in` weight
//! matrix followed by the `out` biases. Files written by [`save_json`] wrap
//! the payload as `{"version": 1, "kind": .., "data": ..}`.

pub mod controller;
pub mod metric;
pub mod mlp;
pub mod tape;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use controller::TanhController;
pub use metric::PsdMetricNet;
pub use mlp::{Activation, Mlp};
pub use tape::Var;

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    data: T,
}

pub fn save_json<T: Serialize>(path: &Path, kind: &str, data: &T) -> Result<()> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        data,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&env)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let env: Envelope<T> = serde_json::from_str(&text)?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "{}: checkpoint version {} (expected {})",
            path.display(),
            env.version,
            CHECKPOINT_VERSION
        )));
    }
    if env.kind != kind {
        return Err(Error::invalid(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            env.kind
        )));
    }
    Ok(env.data)
}
