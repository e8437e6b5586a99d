//! Run artifacts: manifest, CSV logs, top-k report, checkpoint files.
//!
//! CSV bytes are a pure function of the run record, so reruns and resumed
//! runs reproduce them exactly; wall-clock timestamps live only in the
//! manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ma2ml_core::rng::fnv1a;
use ma2ml_core::space::JointSpace;
use ma2ml_core::trainer::{Checkpoint, RunRecord, Variant};

use crate::config::RunConfig;

pub const PIPELINES_CSV: &str = "pipelines.csv";
pub const ITERATIONS_CSV: &str = "iterations.csv";
pub const TOPK_JSON: &str = "topk.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// FNV-1a of the resolved config document.
    pub config_hash: String,
    pub space_fingerprint: String,
    pub seed: u64,
    pub variant: Variant,
    pub max_iter: usize,
    pub created_unix: u64,
    pub finished_unix: Option<u64>,
    /// The fully resolved run config (flags already applied).
    pub resolved_config: RunConfig,
    /// Space config path as resolved at launch.
    pub space_path: String,
    pub artifacts: ArtifactPaths,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub pipelines_csv: String,
    pub iterations_csv: String,
    pub topk_json: String,
    pub checkpoint_json: String,
}

impl ArtifactPaths {
    pub fn in_dir() -> Self {
        ArtifactPaths {
            pipelines_csv: PIPELINES_CSV.into(),
            iterations_csv: ITERATIONS_CSV.into(),
            topk_json: TOPK_JSON.into(),
            checkpoint_json: CHECKPOINT_JSON.into(),
        }
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a(canonical.as_bytes()))
}

pub fn fingerprint_hex(space: &JointSpace) -> String {
    format!("{:016x}", space.fingerprint())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per evaluated pipeline:
/// `iteration,batch_index,reward,accuracy,cost,actions` with the action
/// indices semicolon-joined; failed evaluations leave the value fields
/// empty.
pub fn render_pipelines_csv(record: &RunRecord) -> String {
    let mut out = String::from("iteration,batch_index,reward,accuracy,cost,actions\n");
    for eval in &record.evals {
        let actions = eval
            .action
            .flat()
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            eval.iteration,
            eval.batch_index,
            fmt_opt(eval.reward),
            fmt_opt(eval.accuracy),
            fmt_opt(eval.cost),
            actions
        ));
    }
    out
}

/// Per-iteration summary:
/// `iteration,mean_reward,max_reward,entropy_<agent>...,kl_<agent>...,critic_loss`.
pub fn render_iterations_csv(record: &RunRecord, space: &JointSpace) -> String {
    let mut header = String::from("iteration,mean_reward,max_reward");
    for agent in &space.agents {
        header.push_str(&format!(",entropy_{}", agent.name));
    }
    for agent in &space.agents {
        header.push_str(&format!(",kl_{}", agent.name));
    }
    header.push_str(",critic_loss\n");
    let mut out = header;
    for s in &record.summaries {
        let mut row = format!(
            "{},{},{}",
            s.iteration,
            fmt_opt(s.mean_reward),
            fmt_opt(s.max_reward)
        );
        for h in &s.entropy {
            row.push_str(&format!(",{h}"));
        }
        for kl in &s.kl {
            row.push_str(&format!(",{kl}"));
        }
        row.push_str(&format!(",{}\n", fmt_opt(s.critic_loss)));
        out.push_str(&row);
    }
    out
}

#[derive(Debug, Serialize)]
struct TopkReportEntry<'a> {
    rank: usize,
    reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    hifi_reward: Option<f64>,
    iteration: usize,
    batch_index: usize,
    actions: Vec<usize>,
    pipeline: &'a ma2ml_core::space::DecodedPipeline,
}

/// Decoded top-k pipelines with rewards, best first.
pub fn render_topk_json(record: &RunRecord, space: &JointSpace) -> Result<String> {
    let decoded: Vec<ma2ml_core::space::DecodedPipeline> = record
        .topk
        .iter()
        .map(|e| space.decode_action(&e.action))
        .collect::<Result<_, _>>()?;
    let entries: Vec<TopkReportEntry> = record
        .topk
        .iter()
        .zip(&decoded)
        .enumerate()
        .map(|(i, (e, pipeline))| TopkReportEntry {
            rank: i + 1,
            reward: e.reward,
            hifi_reward: e.hifi_reward,
            iteration: e.iteration,
            batch_index: e.batch_index,
            actions: e.action.flat(),
            pipeline,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&entries)? + "\n")
}

pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {dir:?}"))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let text = serde_json::to_string_pretty(manifest)? + "\n";
        std::fs::write(self.path(MANIFEST_JSON), text)?;
        Ok(())
    }

    pub fn read_manifest(dir_or_file: &Path) -> Result<(PathBuf, RunManifest)> {
        let path = if dir_or_file.is_dir() {
            dir_or_file.join(MANIFEST_JSON)
        } else {
            dir_or_file.to_path_buf()
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading manifest {path:?}"))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {path:?}"))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((dir, manifest))
    }

    pub fn write_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let text = serde_json::to_string(ckpt)?;
        std::fs::write(self.path(CHECKPOINT_JSON), text)?;
        Ok(())
    }

    pub fn read_checkpoint(&self) -> Result<Checkpoint> {
        let path = self.path(CHECKPOINT_JSON);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading checkpoint {path:?}"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_logs(&self, record: &RunRecord, space: &JointSpace) -> Result<()> {
        std::fs::write(self.path(PIPELINES_CSV), render_pipelines_csv(record))?;
        std::fs::write(
            self.path(ITERATIONS_CSV),
            render_iterations_csv(record, space),
        )?;
        std::fs::write(self.path(TOPK_JSON), render_topk_json(record, space)?)?;
        Ok(())
    }
}
