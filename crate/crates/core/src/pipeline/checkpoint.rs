//! Checkpoint manifests, parameter archives on disk and the stage-directory
//! layout:
//!
//! ```text
//! <stage dir>/
//!   .lock                  held while a stage is training
//!   losses.csv             one row per step
//!   epoch-001/manifest.json, *.fwp
//!   ...
//!   manifest.json          final manifest, written last
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainRunConfig;
use crate::error::{Error, IoContext, Result};
use crate::ganloss::Stage;
use crate::nn::params::sha256_hex;
use crate::nn::Archive;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_VERSION: u32 = 1;

pub fn code_version() -> String {
    format!("framewalk-core {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveRef {
    /// Path relative to the directory holding the manifest.
    pub path: String,
    /// SHA-256 of the archive file bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: u64,
    pub last_gen_loss: f64,
    pub last_d_loss_mean: f64,
    /// Mean generator loss over the last completed epoch.
    pub epoch_gen_loss_mean: f64,
    pub epoch_d_loss_mean: f64,
}

/// Frame generator a video-stage checkpoint was trained against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGenRef {
    pub manifest: PathBuf,
    pub param_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub config: TrainRunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub complete: bool,
    pub archives: BTreeMap<String, ArchiveRef>,
    /// Content hash of each model's parameters (see `ParamStore::content_hash`).
    pub param_hashes: BTreeMap<String, String>,
    pub loss_summary: LossSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_generator: Option<FrameGenRef>,
    pub created: String,
    pub code_version: String,
}

/// The manifest file for `path`, which may name the file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Writes via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

impl CheckpointManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        if !file.exists() {
            return Err(Error::MissingCheckpoint(file));
        }
        let text = fs::read_to_string(&file).at(&file)?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version { what: "manifest", found: m.format_version, expected: MANIFEST_VERSION });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Reads archive `role`, resolving its path against `base` (the manifest's
    /// directory) and verifying the recorded hash.
    pub fn read_archive(&self, base: &Path, role: &str) -> Result<Archive> {
        let r = self
            .archives
            .get(role)
            .ok_or_else(|| Error::Corrupt(format!("manifest lists no {role:?} archive")))?;
        let path = base.join(&r.path);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.clone()),
            _ => Error::Io { path: path.clone(), source: e },
        })?;
        let found = sha256_hex(&bytes);
        if found != r.sha256 {
            return Err(Error::HashMismatch { path, expected: r.sha256.clone(), found });
        }
        Archive::from_bytes(&bytes)
    }
}

/// A loaded manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    pub fn open(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let manifest = CheckpointManifest::load(&file)?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, manifest })
    }

    pub fn archive(&self, role: &str) -> Result<Archive> {
        self.manifest.read_archive(&self.dir, role)
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<&Self> {
        if self.manifest.stage != stage {
            return Err(Error::Config(format!(
                "{} holds a {} checkpoint, expected {stage}",
                self.dir.display(),
                self.manifest.stage
            )));
        }
        Ok(self)
    }
}

/// Exclusive lock on a stage directory, released on drop.
#[derive(Debug)]
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn epoch_dir_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}")
}

/// The most recent epoch checkpoint under `dir` whose archives verify.
pub fn latest_epoch(dir: &Path) -> Result<Option<Checkpoint>> {
    let Ok(entries) = fs::read_dir(dir) else { return Ok(None) };
    let mut epochs: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("epoch-")?.parse().ok())
        .collect();
    epochs.sort_unstable();
    for epoch in epochs.into_iter().rev() {
        let path = dir.join(epoch_dir_name(epoch)).join(MANIFEST_FILE);
        if let Ok(ck) = Checkpoint::open(&path) {
            let ok = ck.manifest.archives.keys().all(|role| ck.archive(role).is_ok());
            if ok {
                return Ok(Some(ck));
            }
            log::warn!("skipping unreadable checkpoint {}", path.display());
        }
    }
    Ok(None)
}

/// Writes one epoch checkpoint: archives plus a manifest in `dir/epoch-XXX`.
/// Returns the manifest (paths relative to the epoch directory).
pub fn write_epoch(
    dir: &Path,
    mut manifest: CheckpointManifest,
    archives: &[(&str, &Archive)],
) -> Result<CheckpointManifest> {
    let edir = dir.join(epoch_dir_name(manifest.epoch));
    fs::create_dir_all(&edir).at(&edir)?;
    manifest.archives.clear();
    for (role, archive) in archives {
        let bytes = archive.to_bytes();
        let name = format!("{role}.fwp");
        write_atomic(&edir.join(&name), &bytes)?;
        manifest.archives.insert(role.to_string(), ArchiveRef { path: name, sha256: sha256_hex(&bytes) });
    }
    manifest.created = chrono::Utc::now().to_rfc3339();
    manifest.save(&edir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Promotes an epoch manifest to the stage's final manifest.
pub fn finalize(dir: &Path, epoch_manifest: &CheckpointManifest) -> Result<CheckpointManifest> {
    let mut m = epoch_manifest.clone();
    let prefix = epoch_dir_name(m.epoch);
    for r in m.archives.values_mut() {
        r.path = format!("{prefix}/{}", r.path);
    }
    m.complete = true;
    m.created = chrono::Utc::now().to_rfc3339();
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Keeps the header and rows with `step < keep_below` (rows logged after the
/// last checkpoint are dropped before resuming).
pub fn trim_losses(path: &Path, keep_below: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, line)| *i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < keep_below))
        .map(|(_, l)| l)
        .collect();
    write_atomic(path, (kept.join("\n") + "\n").as_bytes())
}
