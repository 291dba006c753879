use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{Algo, PolicyBundle};
use super::train::TrainRunState;
use crate::nn::ParamEntry;
use crate::{Error, Result, RunConfig};

pub const CHECKPOINT_FORMAT: &str = "skymec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    algo: Algo,
    config_hash: String,
    bundle_version: u64,
    run: Option<TrainRunState>,
    params: Vec<ParamEntry>,
}

/// Write `bytes` next to `path` and rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parameters only; optimizer moments are not kept.
pub fn checkpoint_save(bundle: &PolicyBundle, run: Option<&TrainRunState>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        algo: bundle.algo,
        config_hash: cfg.hash(),
        bundle_version: bundle.version,
        run: run.cloned(),
        params: bundle.store.entries(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn checkpoint_load(path: &Path, cfg: &RunConfig) -> Result<(PolicyBundle, Option<TrainRunState>)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let file: CheckpointFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format {} v{}, expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
            path.display(),
            file.format,
            file.version
        )));
    }
    let hash = cfg.hash();
    if file.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {} does not match the loaded config ({hash})",
            path.display(),
            file.config_hash
        )));
    }
    let mut bundle = PolicyBundle::new(cfg, file.algo, 0)?;
    bundle
        .store
        .load_entries(&file.params)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    bundle.version = file.bundle_version;
    Ok((bundle, file.run))
}
