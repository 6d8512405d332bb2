//! Run directories.
//!
//! ```text
//! <dir>/ledger.ndjson            one verdict per line
//! <dir>/snapshot.json            state at the start of the latest epoch
//! <dir>/checkpoint.bin           projection matching snapshot.json
//! <dir>/checkpoints/epoch_NNN.bin projection after training epoch NNN
//! <dir>/reports.json, progress.csv, clusters.json
//! ```

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crate::annotation::{read_ledger, LedgerRecord};
use crate::dataset::EmbeddingDataset;
use crate::evaluation::{write_progress_csv, write_report_json, EvalReport};
use crate::trainer::{load_checkpoint, save_checkpoint, CheckpointHeader, Projection};

use super::session::{
    run_iteration, Annotator, OracleAnnotator, ReplayAnnotator, RunSnapshot, Session, Step,
};
use super::{EngineConfig, EngineError, Result};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| EngineError::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.ndjson")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.root.join("snapshot.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn epoch_checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("epoch_{epoch:03}.bin"))
    }

    pub fn reports_path(&self) -> PathBuf {
        self.root.join("reports.json")
    }

    pub fn progress_path(&self) -> PathBuf {
        self.root.join("progress.csv")
    }

    pub fn clusters_path(&self) -> PathBuf {
        self.root.join("clusters.json")
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot_path().exists()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| EngineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| EngineError::io(path, e))
}

fn header(config: &EngineConfig, projection: &Projection, epoch: usize) -> CheckpointHeader {
    CheckpointHeader {
        d_base: projection.d_base(),
        d_emb: projection.d_emb(),
        tau: config.tau,
        momentum: config.momentum,
        epoch,
        learning_rate: projection.learning_rate,
    }
}

/// Writes the latest epoch-boundary snapshot and its checkpoint.
pub fn save_boundary(dir: &RunDir, session: &Session) -> Result<()> {
    let Some((snapshot, projection)) = session.boundary() else {
        return Ok(());
    };
    let tmp = dir.checkpoint_path().with_extension("tmp");
    save_checkpoint(
        &tmp,
        &header(session.config(), projection, snapshot.epoch),
        projection,
    )?;
    fs::rename(&tmp, dir.checkpoint_path()).map_err(|e| EngineError::io(&tmp, e))?;
    let json = serde_json::to_vec(snapshot).map_err(|e| EngineError::Snapshot(e.to_string()))?;
    write_atomic(&dir.snapshot_path(), &json)
}

/// Rewrites the ledger, reports, progress table and final clusters.
pub fn write_outputs(dir: &RunDir, session: &Session) -> Result<()> {
    let mut ledger = Vec::new();
    session.ledger().export_ndjson(&mut ledger)?;
    write_atomic(&dir.ledger_path(), &ledger)?;
    write_reports(dir, session.reports())?;
    let clusters =
        serde_json::to_vec(session.clusters()).map_err(|e| EngineError::Snapshot(e.to_string()))?;
    write_atomic(&dir.clusters_path(), &clusters)
}

pub fn write_reports(dir: &RunDir, reports: &[EvalReport]) -> Result<()> {
    let mut json = Vec::new();
    write_report_json(reports, &mut json)?;
    write_atomic(&dir.reports_path(), &json)?;
    let mut csv = Vec::new();
    write_progress_csv(reports, &mut csv)?;
    write_atomic(&dir.progress_path(), &csv)
}

/// Appends one verdict and flushes it to disk.
pub fn append_ledger(dir: &RunDir, record: &LedgerRecord) -> Result<()> {
    let path = dir.ledger_path();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| EngineError::io(&path, e))?;
    let mut line = serde_json::to_vec(record).map_err(|e| EngineError::Snapshot(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line)
        .map_err(|e| EngineError::io(&path, e))?;
    file.sync_data().map_err(|e| EngineError::io(&path, e))
}

pub fn load_ledger(path: &Path) -> Result<Vec<LedgerRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).map_err(|e| EngineError::io(path, e))?;
    Ok(read_ledger(BufReader::new(file))?)
}

/// Feeds recorded verdicts to the session, training through epoch ends,
/// until the records run out or the run finishes. Epochs completed along
/// the way are persisted to `dir` when given. Returns the number of records
/// consumed.
pub fn replay_records(
    session: &mut Session,
    records: Vec<LedgerRecord>,
    dir: Option<&RunDir>,
) -> Result<usize> {
    let total = records.len();
    let mut annotator = ReplayAnnotator::new(records);
    loop {
        match session.next_pair()? {
            Step::Pair(p) => {
                if annotator.remaining() == 0 {
                    break;
                }
                let (v, source) = annotator.annotate(&p, session.dataset())?;
                session.submit_verdict(p.pair_id, v, source)?;
            }
            Step::Training => {
                let report = session.advance()?;
                if let Some(dir) = dir {
                    persist_epoch(dir, session, report.epoch)?;
                }
            }
            Step::Done => break,
        }
    }
    if annotator.remaining() > 0 {
        return Err(EngineError::ReplayDivergence {
            seq: (total - annotator.remaining()) as u64,
            reason: "run finished with verdicts left over".into(),
        });
    }
    Ok(total)
}

/// Writes the checkpoint of a finished training epoch, the new boundary
/// and the run outputs.
pub fn persist_epoch(dir: &RunDir, session: &Session, epoch: usize) -> Result<()> {
    save_checkpoint(
        &dir.epoch_checkpoint_path(epoch),
        &header(session.config(), session.projection(), epoch),
        session.projection(),
    )?;
    save_boundary(dir, session)?;
    write_outputs(dir, session)
}

/// Reopens the run in `dir`: restores the last epoch boundary and replays
/// verdicts recorded after it.
pub fn resume(dir: &RunDir, config: EngineConfig, dataset: &EmbeddingDataset) -> Result<Session> {
    let bytes =
        fs::read(dir.snapshot_path()).map_err(|e| EngineError::io(&dir.snapshot_path(), e))?;
    let snapshot: RunSnapshot =
        serde_json::from_slice(&bytes).map_err(|e| EngineError::Snapshot(e.to_string()))?;
    let (_, projection) = load_checkpoint(&dir.checkpoint_path())?;
    let already = snapshot.ledger.budget_used();
    let records = load_ledger(&dir.ledger_path())?;
    if records.len() < already {
        return Err(EngineError::Snapshot(format!(
            "ledger has {} verdicts but the snapshot already holds {already}",
            records.len()
        )));
    }
    let mut session = Session::restore(config, dataset, snapshot, projection)?;
    replay_records(
        &mut session,
        records.into_iter().skip(already).collect(),
        Some(dir),
    )?;
    Ok(session)
}

/// Runs (or resumes) an oracle-annotated simulation, persisting after
/// every epoch.
pub fn simulate(
    config: EngineConfig,
    dataset: &EmbeddingDataset,
    out: impl Into<PathBuf>,
) -> Result<Session> {
    if !dataset.has_identities() {
        return Err(EngineError::Config(
            "simulation needs ground-truth identities".into(),
        ));
    }
    let dir = RunDir::create(out)?;
    let mut session = if dir.has_snapshot() {
        resume(&dir, config, dataset)?
    } else {
        Session::new(config, dataset)?
    };
    simulate_epochs(&dir, &mut session, &mut OracleAnnotator, usize::MAX)?;
    Ok(session)
}

/// Runs at most `max_epochs` more epochs with `annotator`, persisting after
/// each one.
pub fn simulate_epochs(
    dir: &RunDir,
    session: &mut Session,
    annotator: &mut dyn Annotator,
    max_epochs: usize,
) -> Result<()> {
    save_boundary(dir, session)?;
    write_outputs(dir, session)?;
    for _ in 0..max_epochs {
        let Some(report) = run_iteration(session, annotator)? else {
            break;
        };
        persist_epoch(dir, session, report.epoch)?;
    }
    Ok(())
}
