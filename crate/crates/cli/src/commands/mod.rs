pub mod bench;
pub mod caption;
pub mod maskdump;
pub mod plot;
pub mod sample;
pub mod train;

use std::fs;
use std::path::Path;

use hseq_core::trainer::{Checkpoint, TrainConfig};
use hseq_core::{Error, Result};

/// Load and validate a run config, turning JSON failures into
/// path:line:column diagnostics.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: TrainConfig = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })
}

pub fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| {
        Error::Config(format!("cannot create output directory {}: {e}", path.display()))
    })
}
