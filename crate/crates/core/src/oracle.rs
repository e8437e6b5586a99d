//! Reward oracles standing in for pipeline training, plus the
//! FLOPs-constrained multi-objective reward transform.
//!
//! Every oracle is deterministic given `(action, seed)` and stateless after
//! construction, so evaluations can run from many threads. Synthetic rewards
//! are affinely normalized into `[0.05, 0.95]` to stay in the accuracy-like
//! range the critic and EMA baseline expect without saturating at 0 or 1.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fnv1a, stream};
use crate::space::{DecodedPipeline, JointAction, JointSpace};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("multi-objective reward needs a cost, but the oracle result has none")]
    MissingCost,
    #[error("multi-objective reward applied to a failed oracle result")]
    FailedResult,
    #[error("tabular oracle file error: {0}")]
    TabularIo(#[from] std::io::Error),
    #[error("tabular oracle row {row}: {message}")]
    TabularSchema { row: usize, message: String },
}

/// Outcome of evaluating one decoded pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Stands for top-1 validation accuracy; in [0, 1] when not failed.
    pub accuracy: f64,
    /// Stands for FLOPs; positive when present.
    pub cost: Option<f64>,
    pub failed: bool,
}

impl OracleResult {
    pub fn ok(accuracy: f64) -> Self {
        OracleResult {
            accuracy,
            cost: None,
            failed: false,
        }
    }

    pub fn with_cost(accuracy: f64, cost: f64) -> Self {
        OracleResult {
            accuracy,
            cost: Some(cost),
            failed: false,
        }
    }

    pub fn failure() -> Self {
        OracleResult {
            accuracy: 0.0,
            cost: None,
            failed: true,
        }
    }
}

/// Parameters of `R = Acc x (cost / constraint)^w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiObjectiveSpec {
    pub w: f64,
    pub flops_constraint: f64,
}

impl MultiObjectiveSpec {
    pub fn new(flops_constraint: f64) -> Self {
        MultiObjectiveSpec {
            w: -0.07,
            flops_constraint,
        }
    }
}

/// accuracy x (cost/constraint)^w in double precision.
pub fn multi_objective_reward(
    res: &OracleResult,
    spec: &MultiObjectiveSpec,
) -> Result<f64, OracleError> {
    if res.failed {
        return Err(OracleError::FailedResult);
    }
    let cost = res.cost.ok_or(OracleError::MissingCost)?;
    Ok(res.accuracy * (cost / spec.flops_constraint).powf(spec.w))
}

/// Anything that maps a joint action to a reward outcome.
pub trait RewardOracle: Send + Sync {
    fn evaluate(&self, space: &JointSpace, action: &JointAction) -> OracleResult;

    /// High-fidelity re-evaluation for the final top-k, when the oracle
    /// distinguishes fidelities (e.g. a noisy search-time mode).
    fn evaluate_hifi(&self, _space: &JointSpace, _action: &JointAction) -> Option<OracleResult> {
        None
    }

    /// How many evaluations may usefully run at once.
    fn max_concurrency(&self) -> usize {
        1
    }
}

const NORM_LO: f64 = 0.05;
const NORM_HI: f64 = 0.95;

/// Enumeration cap above which synthetic normalization bounds are sampled.
const ENUM_CAP: u64 = 1_000_000;

/// Sample count for normalization bounds on non-enumerable spaces. With 10^5
/// uniform draws the sample max sits above the 99.99th percentile of the
/// reward distribution with probability ~1 - 10^-4; values beyond the
/// sampled bounds are clamped into [0, 1].
const NORM_SAMPLES: u64 = 100_000;

/// Per-dimension additive random tables: `raw(A) = sum over dims of f[d][a_d]`.
fn make_dim_tables(space: &JointSpace, seed: u64) -> Vec<Vec<f64>> {
    let mut tables = Vec::with_capacity(space.num_dimensions());
    let mut dim_index = 0u64;
    for agent in &space.agents {
        for dim in &agent.dimensions {
            let mut rng = stream(seed, "oracle-f", dim_index);
            tables.push((0..dim.cardinality).map(|_| rng.gen::<f64>()).collect());
            dim_index += 1;
        }
    }
    tables
}

fn separable_raw(tables: &[Vec<f64>], action: &JointAction) -> f64 {
    let mut sum = 0.0;
    let mut d = 0;
    for agent in &action.indices {
        for &index in agent {
            sum += tables[d][index];
            d += 1;
        }
    }
    sum
}

/// Evaluates the separable raw sum at the per-dimension arg-extreme action,
/// keeping the exact summation order of [`separable_raw`] so the bound is
/// bit-identical to the enumerated extreme.
fn separable_extreme(tables: &[Vec<f64>], take_max: bool) -> f64 {
    let mut sum = 0.0;
    for table in tables {
        let v = table
            .iter()
            .copied()
            .fold(if take_max { f64::NEG_INFINITY } else { f64::INFINITY }, |m, v| {
                if take_max {
                    m.max(v)
                } else {
                    m.min(v)
                }
            });
        sum += v;
    }
    sum
}

fn normalize(raw: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo < 1e-12 {
        return 0.5;
    }
    let v = NORM_LO + (raw - lo) / (hi - lo) * (NORM_HI - NORM_LO);
    v.clamp(0.0, 1.0)
}

/// Fully separable synthetic landscape: the reward of a joint action is the
/// normalized sum of independent per-dimension contributions. No agent
/// interaction; greedy per-agent search is optimal here.
pub struct SeparableOracle {
    tables: Vec<Vec<f64>>,
    raw_lo: f64,
    raw_hi: f64,
}

impl SeparableOracle {
    pub fn new(space: &JointSpace, seed: u64) -> Self {
        Self::from_tables(make_dim_tables(space, seed))
    }

    pub fn from_tables(tables: Vec<Vec<f64>>) -> Self {
        let raw_lo = separable_extreme(&tables, false);
        let raw_hi = separable_extreme(&tables, true);
        SeparableOracle {
            tables,
            raw_lo,
            raw_hi,
        }
    }
}

impl RewardOracle for SeparableOracle {
    fn evaluate(&self, _space: &JointSpace, action: &JointAction) -> OracleResult {
        OracleResult::ok(normalize(
            separable_raw(&self.tables, action),
            self.raw_lo,
            self.raw_hi,
        ))
    }
}

/// Synthetic landscape with pairwise agent interactions, emulating the
/// cooperation between pipeline modules that credit assignment must exploit:
///
/// `raw(A) = (1-c) * sum_i f_i(A_i) + c * sum_{i<j} g_ij(A_i mod K, A_j mod K)`
///
/// where the `f` part reuses the separable tables and each `g_ij` is a seeded
/// K x K bucket table over flattened agent action indices. Also emits a
/// synthetic per-action cost, log-uniform in [300M, 1200M], so the
/// multi-objective transform has an active trade-off around the 600M/900M
/// constraints.
pub struct CoupledOracle {
    seed: u64,
    coupling: f64,
    buckets: u64,
    noise: f64,
    tables: Vec<Vec<f64>>,
    pair_tables: Vec<Vec<f64>>, // row-major K x K per (i, j) pair, i < j
    raw_lo: f64,
    raw_hi: f64,
}

impl CoupledOracle {
    pub fn new(space: &JointSpace, seed: u64, coupling: f64) -> Self {
        Self::with_options(space, seed, coupling, 8, 0.0)
    }

    pub fn with_options(
        space: &JointSpace,
        seed: u64,
        coupling: f64,
        buckets: u64,
        noise: f64,
    ) -> Self {
        assert!((0.0..=1.0).contains(&coupling), "coupling in [0, 1]");
        assert!(buckets >= 2);
        let tables = make_dim_tables(space, seed);
        let n = space.num_agents();
        let mut pair_tables = Vec::new();
        let mut pair_index = 0u64;
        for i in 0..n {
            for _j in (i + 1)..n {
                let mut rng = stream(seed, "oracle-g", pair_index);
                pair_tables.push(
                    (0..buckets * buckets)
                        .map(|_| rng.gen::<f64>())
                        .collect::<Vec<f64>>(),
                );
                pair_index += 1;
            }
        }
        let mut oracle = CoupledOracle {
            seed,
            coupling,
            buckets,
            noise,
            tables,
            pair_tables,
            raw_lo: 0.0,
            raw_hi: 1.0,
        };
        let (lo, hi) = oracle.raw_bounds(space);
        oracle.raw_lo = lo;
        oracle.raw_hi = hi;
        oracle
    }

    fn raw(&self, space: &JointSpace, action: &JointAction) -> f64 {
        let sep = separable_raw(&self.tables, action);
        let mut pair_sum = 0.0;
        let n = space.num_agents();
        let mut pair = 0;
        for i in 0..n {
            let bi = space.agent_flat_index_mod(action, i, self.buckets);
            for j in (i + 1)..n {
                let bj = space.agent_flat_index_mod(action, j, self.buckets);
                pair_sum += self.pair_tables[pair][(bi * self.buckets + bj) as usize];
                pair += 1;
            }
        }
        (1.0 - self.coupling) * sep + self.coupling * pair_sum
    }

    fn raw_bounds(&self, space: &JointSpace) -> (f64, f64) {
        match space.joint_cardinality() {
            Some(total) if total <= ENUM_CAP => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for action in space.enumerate_actions() {
                    let v = self.raw(space, &action);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            }
            _ => {
                let mut rng = stream(self.seed, "oracle-norm", 0);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for _ in 0..NORM_SAMPLES {
                    let action = JointAction {
                        indices: space
                            .agents
                            .iter()
                            .map(|a| {
                                a.dimensions
                                    .iter()
                                    .map(|d| rng.gen_range(0..d.cardinality))
                                    .collect()
                            })
                            .collect(),
                    };
                    let v = self.raw(space, &action);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            }
        }
    }

    fn clean_result(&self, space: &JointSpace, action: &JointAction) -> OracleResult {
        let accuracy = normalize(self.raw(space, action), self.raw_lo, self.raw_hi);
        // log-uniform cost in [300M, 1200M], keyed by a stable action hash
        let mut bytes = Vec::with_capacity(action.flat().len() * 8 + 8);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for index in action.flat() {
            bytes.extend_from_slice(&(index as u64).to_le_bytes());
        }
        let u = fnv1a(&bytes) as f64 / u64::MAX as f64;
        let cost = (3.0e8_f64.ln() + u * 4.0_f64.ln()).exp();
        OracleResult::with_cost(accuracy, cost)
    }
}

impl RewardOracle for CoupledOracle {
    fn evaluate(&self, space: &JointSpace, action: &JointAction) -> OracleResult {
        let mut res = self.clean_result(space, action);
        if self.noise > 0.0 {
            // deterministic per-action perturbation: the low-fidelity reward
            // is a rank-corrupted view of the clean one
            let mut bytes = Vec::with_capacity(action.flat().len() * 8 + 8);
            bytes.extend_from_slice(&self.seed.wrapping_add(0x9e37).to_le_bytes());
            for index in action.flat() {
                bytes.extend_from_slice(&(index as u64).to_le_bytes());
            }
            let h = fnv1a(&bytes);
            let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
            let u2 = ((fnv1a(&h.to_le_bytes()) >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
            let gauss = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            res.accuracy = (res.accuracy + self.noise * gauss).clamp(0.0, 1.0);
        }
        res
    }

    fn evaluate_hifi(&self, space: &JointSpace, action: &JointAction) -> Option<OracleResult> {
        (self.noise > 0.0).then(|| self.clean_result(space, action))
    }
}

/// File-backed lookup oracle. Unknown actions evaluate as failed.
#[derive(Debug)]
pub struct TabularOracle {
    rows: HashMap<Vec<usize>, (f64, Option<f64>)>,
}

impl TabularOracle {
    pub fn load(path: &std::path::Path, space: &JointSpace) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, space)
    }

    pub fn parse(text: &str, space: &JointSpace) -> Result<Self, OracleError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(OracleError::TabularSchema {
            row: 0,
            message: "empty file".into(),
        })?;
        let mut expected: Vec<String> = space
            .agents
            .iter()
            .flat_map(|a| {
                a.dimensions
                    .iter()
                    .map(move |d| format!("a_{}_{}", a.name, d.name))
            })
            .collect();
        expected.push("accuracy".into());
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let has_cost = cols.last() == Some(&"cost");
        let key_cols = if has_cost { cols.len() - 1 } else { cols.len() };
        if key_cols != expected.len()
            || cols[..expected.len()]
                .iter()
                .zip(&expected)
                .any(|(a, b)| a != b)
        {
            return Err(OracleError::TabularSchema {
                row: 1,
                message: format!(
                    "header mismatch: expected `{}[,cost]`, found `{}`",
                    expected.join(","),
                    header
                ),
            });
        }
        let n_dims = space.num_dimensions();
        let cards: Vec<usize> = space
            .agents
            .iter()
            .flat_map(|a| a.dimensions.iter().map(|d| d.cardinality))
            .collect();
        let mut rows = HashMap::new();
        for (line_no, line) in lines {
            let row = line_no + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(OracleError::TabularSchema {
                    row,
                    message: format!("expected {} fields, found {}", cols.len(), fields.len()),
                });
            }
            let mut key = Vec::with_capacity(n_dims);
            for (d, field) in fields[..n_dims].iter().enumerate() {
                let index: usize = field.parse().map_err(|_| OracleError::TabularSchema {
                    row,
                    message: format!("bad action index `{field}`"),
                })?;
                if index >= cards[d] {
                    return Err(OracleError::TabularSchema {
                        row,
                        message: format!(
                            "action index {index} out of range for `{}` (cardinality {})",
                            cols[d], cards[d]
                        ),
                    });
                }
                key.push(index);
            }
            let accuracy: f64 = fields[n_dims].parse().map_err(|_| OracleError::TabularSchema {
                row,
                message: format!("bad accuracy `{}`", fields[n_dims]),
            })?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(OracleError::TabularSchema {
                    row,
                    message: format!("accuracy {accuracy} outside [0, 1]"),
                });
            }
            let cost = if has_cost && !fields[n_dims + 1].is_empty() {
                let c: f64 = fields[n_dims + 1].parse().map_err(|_| OracleError::TabularSchema {
                    row,
                    message: format!("bad cost `{}`", fields[n_dims + 1]),
                })?;
                if c <= 0.0 {
                    return Err(OracleError::TabularSchema {
                        row,
                        message: format!("cost {c} must be positive"),
                    });
                }
                Some(c)
            } else {
                None
            };
            if rows.insert(key, (accuracy, cost)).is_some() {
                return Err(OracleError::TabularSchema {
                    row,
                    message: "duplicate action row".into(),
                });
            }
        }
        Ok(TabularOracle { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl RewardOracle for TabularOracle {
    fn evaluate(&self, _space: &JointSpace, action: &JointAction) -> OracleResult {
        match self.rows.get(&action.flat()) {
            Some(&(accuracy, cost)) => OracleResult {
                accuracy,
                cost,
                failed: false,
            },
            None => OracleResult::failure(),
        }
    }
}

/// Response document expected from an external evaluator.
#[derive(Debug, Deserialize)]
struct WireResponse {
    accuracy: f64,
    #[serde(default)]
    cost: Option<f64>,
}

/// Subprocess oracle: one child per evaluation. The decoded pipeline is
/// written to the child's stdin as a single JSON line; the child must answer
/// with one JSON line `{"accuracy": <real>, "cost": <real, optional>}` on
/// stdout and exit 0. Nonzero exit, malformed output, or timeout all map to
/// a failed result, with the child's stderr echoed for diagnosis.
pub struct ExternalCommandOracle {
    pub command: Vec<String>,
    pub timeout: Duration,
    pub concurrency: usize,
}

impl ExternalCommandOracle {
    pub fn new(command: Vec<String>, timeout: Duration, concurrency: usize) -> Self {
        assert!(!command.is_empty(), "external oracle needs a command");
        ExternalCommandOracle {
            command,
            timeout,
            concurrency: concurrency.max(1),
        }
    }

    fn run(&self, request: &str) -> Result<OracleResult, String> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn `{}`: {e}", self.command[0]))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let request = format!("{request}\n");
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(request.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let out_reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stdout.read_to_string(&mut buf);
            buf
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        // reader threads stay parked while any grandchild
                        // holds the pipes; leave them detached
                        return Err(format!(
                            "timeout after {:.1}s",
                            self.timeout.as_secs_f64()
                        ));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(format!("wait: {e}")),
            }
        };
        let _ = writer.join();
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(format!("exit status {status}; stderr: {}", stderr.trim()));
        }
        let line = stdout
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| format!("no output; stderr: {}", stderr.trim()))?;
        let resp: WireResponse = serde_json::from_str(line)
            .map_err(|e| format!("malformed response `{}`: {e}", line.trim()))?;
        if !(0.0..=1.0).contains(&resp.accuracy) {
            return Err(format!("accuracy {} outside [0, 1]", resp.accuracy));
        }
        if let Some(c) = resp.cost {
            if c <= 0.0 {
                return Err(format!("cost {c} must be positive"));
            }
        }
        Ok(OracleResult {
            accuracy: resp.accuracy,
            cost: resp.cost,
            failed: false,
        })
    }
}

impl RewardOracle for ExternalCommandOracle {
    fn evaluate(&self, space: &JointSpace, action: &JointAction) -> OracleResult {
        let decoded = match space.decode_action(action) {
            Ok(doc) => doc,
            Err(e) => {
                eprintln!("external oracle: undecodable action: {e}");
                return OracleResult::failure();
            }
        };
        let request = serde_json::to_string(&decoded).expect("decoded pipeline serializes");
        match self.run(&request) {
            Ok(res) => res,
            Err(reason) => {
                eprintln!("external oracle failed: {reason}");
                OracleResult::failure()
            }
        }
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}

/// Serves decoded-pipeline requests on stdin with JSON responses on stdout,
/// one line each, until EOF. This is the other side of the
/// [`ExternalCommandOracle`] wire protocol; the CLI exposes it so any run can
/// be driven out-of-process against the built-in oracles.
pub fn serve_requests<O: RewardOracle + ?Sized>(
    space: &JointSpace,
    oracle: &O,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DecodedPipeline = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let action = space
            .action_from_decoded(&doc)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        let res = oracle.evaluate(space, &action);
        let mut doc = serde_json::Map::new();
        doc.insert("accuracy".into(), res.accuracy.into());
        if let Some(cost) = res.cost {
            doc.insert("cost".into(), cost.into());
        }
        writeln!(output, "{}", serde_json::Value::Object(doc))?;
    }
    Ok(())
}
