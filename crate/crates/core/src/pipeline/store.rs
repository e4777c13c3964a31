use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Checkpoint;

/// Written next to each stage checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Hash of everything the stage depends on: config section, seed, data
    /// and upstream stages.
    pub fingerprint: String,
    pub seed: u64,
    pub data_fingerprint: String,
    pub checkpoint_sha256: String,
    /// Final losses and other training figures.
    pub report: serde_json::Value,
    /// Whether this process trained the stage (false when reused).
    #[serde(skip)]
    pub trained: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMode {
    /// Reuse matching checkpoints, train the rest.
    Train,
    /// Fail on any stage without a matching checkpoint.
    LoadOnly,
}

/// Where stage checkpoints live. Without a root everything is trained in memory.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    pub root: Option<PathBuf>,
    pub mode: StageMode,
}

/// What a stage depends on.
pub struct StageKey<'a> {
    pub name: &'a str,
    pub seed: u64,
    pub data_fingerprint: &'a str,
    pub config: serde_json::Value,
    pub upstream: Vec<&'a str>,
}

impl StageKey<'_> {
    pub fn fingerprint(&self) -> String {
        let v = serde_json::json!({
            "stage": self.name,
            "seed": self.seed,
            "data": self.data_fingerprint,
            "config": self.config,
            "upstream": self.upstream,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ck.write_to(&mut buf)?;
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl CheckpointStore {
    pub fn in_memory() -> Self {
        Self { root: None, mode: StageMode::Train }
    }

    pub fn at(root: impl Into<PathBuf>, mode: StageMode) -> Self {
        Self { root: Some(root.into()), mode }
    }

    fn paths(&self, stage: &str) -> Option<(PathBuf, PathBuf)> {
        self.root
            .as_ref()
            .map(|r| (r.join(format!("{stage}.ckpt")), r.join(format!("{stage}.manifest.json"))))
    }

    fn try_reuse(&self, stage: &str, fingerprint: &str) -> Result<Option<(Checkpoint, StageManifest)>> {
        let Some((ck_path, man_path)) = self.paths(stage) else { return Ok(None) };
        let Ok(text) = fs::read_to_string(&man_path) else { return Ok(None) };
        let Ok(manifest) = serde_json::from_str::<StageManifest>(&text) else {
            log::warn!("{}: unreadable manifest", man_path.display());
            return Ok(None);
        };
        if manifest.fingerprint != fingerprint {
            log::info!("{stage}: inputs changed since the stored checkpoint");
            return Ok(None);
        }
        let Ok(bytes) = fs::read(&ck_path) else { return Ok(None) };
        if hex::encode(Sha256::digest(&bytes)) != manifest.checkpoint_sha256 {
            log::warn!("{}: checksum does not match its manifest", ck_path.display());
            return Ok(None);
        }
        Ok(Some((Checkpoint::read_from(&bytes[..])?, manifest)))
    }

    /// Loads the stage when a checkpoint with the same fingerprint exists,
    /// otherwise trains it (in [`StageMode::Train`]) and stores the result.
    pub fn run<M>(
        &self,
        key: &StageKey<'_>,
        train: impl FnOnce() -> Result<(M, Checkpoint, serde_json::Value)>,
        load: impl FnOnce(&Checkpoint) -> Result<M>,
    ) -> Result<(M, StageManifest)> {
        let fingerprint = key.fingerprint();
        if let Some((ck, manifest)) = self.try_reuse(key.name, &fingerprint)? {
            log::info!("{}: reusing checkpoint", key.name);
            return Ok((load(&ck)?, manifest));
        }
        if self.mode == StageMode::LoadOnly {
            return Err(Error::MissingStage(key.name.to_string()));
        }
        let t0 = Instant::now();
        log::info!("{}: training", key.name);
        let (model, ck, report) = train()?;
        let bytes = checkpoint_bytes(&ck)?;
        let manifest = StageManifest {
            stage: key.name.to_string(),
            fingerprint,
            seed: key.seed,
            data_fingerprint: key.data_fingerprint.to_string(),
            checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
            report,
            trained: true,
        };
        if let Some((ck_path, man_path)) = self.paths(key.name) {
            fs::create_dir_all(ck_path.parent().unwrap_or(Path::new(".")))?;
            write_atomic(&ck_path, &bytes)?;
            write_atomic(&man_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        }
        log::info!("{}: done in {:.1}s", key.name, t0.elapsed().as_secs_f64());
        Ok((model, manifest))
    }
}
