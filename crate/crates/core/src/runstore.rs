//! On-disk experiment state.
//!
//! ```text
//! <root>/runs/<run_id>/manifest          JSON, rewritten atomically
//! <root>/runs/<run_id>/ckpt_<tokens>.bin
//! <root>/runs/<run_id>/log.csv
//! <root>/results/<experiment>/*.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cbs_meter::CheckpointSource;
use crate::engine::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RunLog};
use crate::error::{Error, Result};
use crate::tasks::TaskSpec;

pub const MANIFEST_FILE: &str = "manifest";
pub const LOG_FILE: &str = "log.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    /// Hex SHA-256 of `config_text`.
    pub config_fingerprint: String,
    pub config_text: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub schedule_summary: String,
    /// Token position to checkpoint file name, relative to the run directory.
    pub checkpoints: BTreeMap<u64, String>,
    pub status: RunStatus,
}

pub fn fingerprint_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RunManifest {
    pub fn fingerprint_matches(&self) -> bool {
        fingerprint_text(&self.config_text) == self.config_fingerprint
    }
}

fn check_run_id(run_id: &str) -> Result<()> {
    let ok = !run_id.is_empty()
        && run_id != "."
        && run_id != ".."
        && run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "run id {run_id:?} may only contain letters, digits, '-', '_' and '.'"
        )))
    }
}

/// Root of a directory tree holding runs and results.
#[derive(Clone, Debug)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["runs", "results"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Creates `results/<experiment>` if needed and returns it.
    pub fn results_dir(&self, experiment: &str) -> Result<PathBuf> {
        check_run_id(experiment)?;
        let dir = self.root.join("results").join(experiment);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn register_run(
        &self,
        run_id: &str,
        config_text: &str,
        seed: u64,
        task: TaskSpec,
        schedule_summary: String,
    ) -> Result<RunHandle> {
        check_run_id(run_id)?;
        let dir = self.run_dir(run_id);
        if dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Conflict(format!("run {run_id:?} already exists")));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let handle = RunHandle {
            dir,
            manifest: RunManifest {
                run_id: run_id.to_owned(),
                config_fingerprint: fingerprint_text(config_text),
                config_text: config_text.to_owned(),
                seed,
                task,
                schedule_summary,
                checkpoints: BTreeMap::new(),
                status: RunStatus::Running,
            },
        };
        handle.persist()?;
        Ok(handle)
    }

    /// Removes a run directory so it can be registered again.
    pub fn remove_run(&self, run_id: &str) -> Result<()> {
        check_run_id(run_id)?;
        let dir = self.run_dir(run_id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    pub fn open_run(&self, run_id: &str) -> Result<RunHandle> {
        check_run_id(run_id)?;
        let dir = self.run_dir(run_id);
        let path = dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("no run {run_id:?} under {}", self.root.display())))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let manifest: RunManifest = serde_json::from_str(&text)?;
        if manifest.run_id != run_id {
            return Err(Error::Conflict(format!(
                "manifest in {} names run {:?}",
                dir.display(),
                manifest.run_id
            )));
        }
        if !manifest.fingerprint_matches() {
            return Err(Error::Conflict(format!("config fingerprint mismatch for run {run_id:?}")));
        }
        Ok(RunHandle { dir, manifest })
    }
}

/// A registered run; every mutation rewrites the manifest.
#[derive(Clone, Debug)]
pub struct RunHandle {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunHandle {
    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    fn persist(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Indexes an already written checkpoint file. Positions must increase.
    pub fn record_checkpoint(&mut self, tokens: u64, file_name: &str) -> Result<()> {
        if let Some((&last, _)) = self.manifest.checkpoints.last_key_value() {
            if tokens <= last {
                return Err(Error::Conflict(format!(
                    "checkpoint at {tokens} tokens is not after the last one at {last}"
                )));
            }
        }
        if !self.dir.join(file_name).is_file() {
            return Err(Error::NotFound(format!("checkpoint file {file_name} is missing")));
        }
        self.manifest.checkpoints.insert(tokens, file_name.to_owned());
        self.persist()
    }

    /// Writes `ckpt_<tokens>.bin` and indexes it.
    pub fn save_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<PathBuf> {
        let name = format!("ckpt_{}.bin", ckpt.tokens_seen);
        let path = self.dir.join(&name);
        save_checkpoint(ckpt, &path)?;
        self.record_checkpoint(ckpt.tokens_seen, &name)?;
        Ok(path)
    }

    /// Exact-match lookup.
    pub fn find_checkpoint(&self, tokens: u64) -> Result<PathBuf> {
        let index = &self.manifest.checkpoints;
        if let Some(name) = index.get(&tokens) {
            return Ok(self.dir.join(name));
        }
        let below = index.range(..tokens).next_back().map(|(t, _)| *t);
        let above = index.range(tokens..).next().map(|(t, _)| *t);
        let nearest: Vec<String> = below.into_iter().chain(above).map(|t| t.to_string()).collect();
        let hint = if nearest.is_empty() {
            "the run has no checkpoints".to_owned()
        } else {
            format!("nearest available: {}", nearest.join(", "))
        };
        Err(Error::NotFound(format!(
            "run {:?} has no checkpoint at {tokens} tokens; {hint}",
            self.manifest.run_id
        )))
    }

    pub fn checkpoint_positions(&self) -> Vec<u64> {
        self.manifest.checkpoints.keys().copied().collect()
    }

    pub fn set_status(&mut self, status: RunStatus) -> Result<()> {
        self.manifest.status = status;
        self.persist()
    }

    pub fn write_log(&self, log: &RunLog) -> Result<()> {
        log.write_csv(&self.log_path())
    }

    pub fn read_log(&self) -> Result<RunLog> {
        RunLog::read_csv(&self.log_path())
    }

    /// Checks that every indexed checkpoint exists and parses.
    pub fn verify(&self) -> Result<()> {
        for &tokens in self.manifest.checkpoints.keys() {
            let ckpt = load_checkpoint(&self.find_checkpoint(tokens)?)?;
            if ckpt.tokens_seen != tokens {
                return Err(Error::Conflict(format!(
                    "checkpoint indexed at {tokens} tokens holds {}",
                    ckpt.tokens_seen
                )));
            }
        }
        Ok(())
    }
}

impl CheckpointSource for RunHandle {
    fn checkpoint_at(&self, tokens: u64) -> Result<Checkpoint> {
        load_checkpoint(&self.find_checkpoint(tokens)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::tasks::{QuadraticTask, QuadraticTaskSpec};

    fn spec() -> QuadraticTaskSpec {
        QuadraticTaskSpec::isotropic(2, 1.0, 0.5)
    }

    fn register(store: &RunStore, id: &str) -> RunHandle {
        store
            .register_run(id, "seed = 1\n", 1, TaskSpec::Quadratic(spec()), "constant 4".into())
            .unwrap()
    }

    #[test]
    fn register_find_and_conflicts() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::open(tmp.path()).unwrap();
        let mut run = register(&store, "base");
        assert!(matches!(run.find_checkpoint(1000), Err(Error::NotFound(_))));
        assert!(matches!(
            store.register_run("base", "x", 1, TaskSpec::Quadratic(spec()), String::new()),
            Err(Error::Conflict(_))
        ));
        assert!(store.register_run("../escape", "x", 1, TaskSpec::Quadratic(spec()), String::new()).is_err());

        let task = QuadraticTask::new(spec()).unwrap();
        let mut ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 1).unwrap();
        ckpt.tokens_seen = 1000;
        let path = run.save_checkpoint(&ckpt).unwrap();
        assert_eq!(run.find_checkpoint(1000).unwrap(), path);
        assert!(path.ends_with("runs/base/ckpt_1000.bin"));
        assert_eq!(run.checkpoint_at(1000).unwrap(), ckpt);

        ckpt.tokens_seen = 500;
        assert!(matches!(run.save_checkpoint(&ckpt), Err(Error::Conflict(_))));
        ckpt.tokens_seen = 3000;
        run.save_checkpoint(&ckpt).unwrap();
        match run.find_checkpoint(2000) {
            Err(Error::NotFound(msg)) => assert!(msg.contains("1000, 3000"), "{msg}"),
            other => panic!("{other:?}"),
        }
        run.verify().unwrap();
    }

    #[test]
    fn manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::open(tmp.path()).unwrap();
        let mut run = register(&store, "r1");
        run.set_status(RunStatus::Complete).unwrap();
        let back = store.open_run("r1").unwrap();
        assert_eq!(back.manifest(), run.manifest());
        assert!(back.manifest().fingerprint_matches());
        assert!(matches!(store.open_run("missing"), Err(Error::NotFound(_))));
        let text = fs::read_to_string(run.dir().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"status\": \"complete\""));
    }

    #[test]
    fn interrupted_write_keeps_the_previous_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::open(tmp.path()).unwrap();
        let run = register(&store, "r2");
        let before = store.open_run("r2").unwrap().manifest().clone();
        // A crash mid-write leaves a truncated temp file that never got renamed.
        let mut changed = before.clone();
        changed.status = RunStatus::Failed;
        let full = serde_json::to_string_pretty(&changed).unwrap();
        let tmp_path = run.dir().join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp_path, &full.as_bytes()[..full.len() / 2]).unwrap();
        assert_eq!(store.open_run("r2").unwrap().manifest(), &before);
        // The next successful write replaces the stale temp file.
        let mut again = store.open_run("r2").unwrap();
        again.set_status(RunStatus::Failed).unwrap();
        assert_eq!(store.open_run("r2").unwrap().manifest().status, RunStatus::Failed);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::open(tmp.path()).unwrap();
        let run = register(&store, "r3");
        let path = run.dir().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("seed = 1", "seed = 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(store.open_run("r3"), Err(Error::Conflict(_))));
    }
}
