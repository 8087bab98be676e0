//! Run directories: layout, locking, persistence and the manifest.
//!
//! ```text
//! <run>/config.toml      resolved configuration
//! <run>/manifest.json    plan, timeline, file digests
//! <run>/graph.edges      concept graph
//! <run>/tasks.txt        question/answer pairs
//! <run>/metrics.log      header line, then one JSON StepMetrics per line
//! <run>/snapshots/       web edge lists and policy checkpoints
//! <run>/reports/         intervention reports and analysis tables
//! ```

mod analyze;
mod compare;
mod runner;

pub use analyze::{analyze_run, AnalysisSummary};
pub use compare::{compare_runs, Comparison, RunSide};
pub use runner::{replay, run_plan, AnnealTrigger, InterventionKind, Plan, ReplayReport};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{ConceptGraph, TaskSet};
use crate::intervene::Protocol;
use crate::policy::Policy;
use crate::trainer::StepMetrics;

pub const RUN_ROOT_ENV: &str = "CONET_RUN_ROOT";
pub const METRICS_HEADER: &str = "# conet-metrics v1";
pub const MANIFEST_FORMAT: &str = "conet-manifest v1";

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRAPH_FILE: &str = "graph.edges";
pub const TASKS_FILE: &str = "tasks.txt";
pub const METRICS_FILE: &str = "metrics.log";
pub const LOCK_FILE: &str = ".lock";

/// Relative run paths resolve against `$CONET_RUN_ROOT` when it is set.
pub fn resolve_run_dir(path: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn web_snapshot_name(step: usize) -> String {
    format!("snapshots/web-{step:06}.edges")
}

pub fn policy_checkpoint_name(step: usize) -> String {
    format!("snapshots/policy-{step:06}.ckpt")
}

pub fn intervention_checkpoint_name(step: usize, event: usize, phase: &str) -> String {
    format!("snapshots/policy-{step:06}-{phase}-{event}.ckpt")
}

pub fn intervention_report_name(event: usize) -> String {
    format!("reports/intervention-{event}.json")
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked { path }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    loop {
        let buf = f.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        hasher.update(buf);
        let n = buf.len();
        f.consume(n);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimelineEntry {
    /// Steps `from + 1 ..= to` were trained.
    Train { from: usize, to: usize },
    Intervention {
        event: usize,
        protocol: Protocol,
        /// Completed training steps when the intervention ran.
        step: usize,
        trigger: String,
        report: String,
        checkpoint_before: String,
        checkpoint_after: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub master_seed: u64,
    pub config: TrainConfig,
    pub plan: Plan,
    pub timeline: Vec<TimelineEntry>,
    /// Relative path to sha256 hex digest, for every artifact in the run.
    pub files: BTreeMap<String, String>,
    /// Latest checkpoint from which the run can resume.
    pub last_checkpoint: Option<String>,
    pub completed_steps: usize,
    pub complete: bool,
}

impl RunManifest {
    pub fn new(config: TrainConfig, plan: Plan) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            code_version: format!("conet {}", env!("CARGO_PKG_VERSION")),
            master_seed: config.master_seed,
            config,
            plan,
            timeline: Vec::new(),
            files: BTreeMap::new(),
            last_checkpoint: None,
            completed_steps: 0,
            complete: false,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format("manifest", format!("unsupported format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), |out| {
            serde_json::to_writer_pretty(&mut *out, self).map_err(|e| Error::format("manifest", e.to_string()))?;
            writeln!(out)?;
            Ok(())
        })
    }

    /// Records the digest of `rel` as it currently exists on disk.
    pub fn record(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let d = file_digest(&dir.join(rel))?;
        self.files.insert(rel.to_string(), d);
        Ok(())
    }

    /// Extends the trailing train span or starts a new one.
    pub(crate) fn note_trained(&mut self, to: usize) {
        match self.timeline.last_mut() {
            Some(TimelineEntry::Train { to: end, .. }) if *end + 1 == to => *end = to,
            _ => self.timeline.push(TimelineEntry::Train { from: to - 1, to }),
        }
        self.completed_steps = to;
    }

    /// Files whose on-disk digest differs from the inventory, or that are missing.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (rel, want) in &self.files {
            let p = dir.join(rel);
            if !p.exists() || &file_digest(&p)? != want {
                bad.push(rel.clone());
            }
        }
        Ok(bad)
    }
}

/// Opened, read-only view of a run directory.
#[derive(Clone, Debug)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub graph: ConceptGraph,
    pub tasks: TaskSet,
    pub metrics: Vec<StepMetrics>,
}

impl RunData {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(dir)?;
        let graph = ConceptGraph::read_edge_list(BufReader::new(File::open(dir.join(GRAPH_FILE))?))?;
        let tasks = TaskSet::read(BufReader::new(File::open(dir.join(TASKS_FILE))?), &graph)?;
        let metrics = read_metrics(&dir.join(METRICS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            graph,
            tasks,
            metrics,
        })
    }

    pub fn load_policy(&self, rel: &str) -> Result<(Policy, usize)> {
        let (p, _, step) = Policy::read_checkpoint(BufReader::new(File::open(self.dir.join(rel))?))?;
        Ok((p, step))
    }

    pub fn reports(&self) -> Result<Vec<crate::intervene::InterventionReport>> {
        let mut out = Vec::new();
        for e in &self.manifest.timeline {
            if let TimelineEntry::Intervention { report, .. } = e {
                let text = fs::read_to_string(self.dir.join(report))?;
                out.push(serde_json::from_str(&text).map_err(|e| Error::format("intervention report", e.to_string()))?);
            }
        }
        Ok(out)
    }
}

pub fn write_metrics_header(path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    Ok(())
}

pub fn metrics_line(m: &StepMetrics) -> String {
    serde_json::to_string(m).expect("metrics serialize")
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = BufReader::new(File::open(path)?);
    let mut lines = f.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == METRICS_HEADER => {}
        Some(Ok(h)) => return Err(Error::format("metrics", format!("unsupported header `{h}`"))),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(Error::format("metrics", "empty file")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics =
            serde_json::from_str(&line).map_err(|e| Error::format("metrics", format!("record {}: {e}", i + 1)))?;
        out.push(m);
    }
    Ok(out)
}

/// Keeps the header and records with `step <= keep_through`.
pub(crate) fn truncate_metrics(path: &Path, keep_through: usize) -> Result<()> {
    let kept: Vec<StepMetrics> = read_metrics(path)?.into_iter().filter(|m| m.step <= keep_through).collect();
    write_atomic(path, |out| {
        writeln!(out, "{METRICS_HEADER}")?;
        for m in &kept {
            writeln!(out, "{}", metrics_line(m))?;
        }
        Ok(())
    })
}
