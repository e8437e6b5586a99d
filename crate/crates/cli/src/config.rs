//! Run configuration: file schema, flag/env overrides, and oracle
//! construction.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ma2ml_core::oracle::{
    CoupledOracle, ExternalCommandOracle, MultiObjectiveSpec, RewardOracle, SeparableOracle,
    TabularOracle,
};
use ma2ml_core::space::JointSpace;
use ma2ml_core::trainer::{BaselineMode, CriticKind, Hyperparams, Variant};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleConfig {
    Separable {
        #[serde(default)]
        seed: Option<u64>,
    },
    Coupled {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_coupling")]
        coupling: f64,
        #[serde(default = "default_buckets")]
        buckets: u64,
        #[serde(default)]
        noise: f64,
    },
    Tabular {
        path: String,
    },
    Exec {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
        #[serde(default)]
        max_concurrency: Option<usize>,
    },
}

fn default_coupling() -> f64 {
    0.7
}
fn default_buckets() -> u64 {
    8
}
fn default_timeout() -> f64 {
    3600.0
}

impl OracleConfig {
    /// Parses the `--oracle` flag grammar:
    /// `separable | coupled | tabular:PATH | exec:CMD`.
    pub fn from_flag(flag: &str) -> Result<Self> {
        if let Some(path) = flag.strip_prefix("tabular:") {
            return Ok(OracleConfig::Tabular { path: path.into() });
        }
        if let Some(cmd) = flag.strip_prefix("exec:") {
            return Ok(OracleConfig::Exec {
                command: vec!["sh".into(), "-c".into(), cmd.into()],
                timeout_seconds: default_timeout(),
                max_concurrency: None,
            });
        }
        match flag {
            "separable" => Ok(OracleConfig::Separable { seed: None }),
            "coupled" => Ok(OracleConfig::Coupled {
                seed: None,
                coupling: default_coupling(),
                buckets: default_buckets(),
                noise: 0.0,
            }),
            other => bail!("unknown oracle `{other}` (separable|coupled|tabular:PATH|exec:CMD)"),
        }
    }

    pub fn build(
        &self,
        space: &JointSpace,
        fallback_seed: u64,
        config_dir: &Path,
    ) -> Result<Box<dyn RewardOracle>> {
        Ok(match self {
            OracleConfig::Separable { seed } => Box::new(SeparableOracle::new(
                space,
                seed.unwrap_or(fallback_seed),
            )),
            OracleConfig::Coupled {
                seed,
                coupling,
                buckets,
                noise,
            } => Box::new(CoupledOracle::with_options(
                space,
                seed.unwrap_or(fallback_seed),
                *coupling,
                *buckets,
                *noise,
            )),
            OracleConfig::Tabular { path } => {
                let resolved = resolve_path(config_dir, path);
                Box::new(
                    TabularOracle::load(&resolved, space)
                        .with_context(|| format!("loading tabular oracle {resolved:?}"))?,
                )
            }
            OracleConfig::Exec {
                command,
                timeout_seconds,
                max_concurrency,
            } => {
                if command.is_empty() {
                    bail!("exec oracle needs a command");
                }
                Box::new(ExternalCommandOracle::new(
                    command.clone(),
                    Duration::from_secs_f64(*timeout_seconds),
                    max_concurrency.unwrap_or(24),
                ))
            }
        })
    }
}

/// Partial hyper-parameters as they appear in config files; unset fields
/// take the built-in defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub lambda: Option<f64>,
    pub eta_theta: Option<f64>,
    pub eta_phi: Option<f64>,
    pub tau: Option<f64>,
    pub batch_size: Option<usize>,
    pub minibatch_size: Option<usize>,
    /// "exact" or a positive sample count.
    pub baseline_samples: Option<BaselineSpec>,
    pub max_iter: Option<usize>,
    pub topk: Option<usize>,
    pub seed: Option<u64>,
    pub ema_decay: Option<f64>,
    pub critic: Option<CriticKind>,
    pub hidden_width: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselineSpec {
    Keyword(String),
    Samples(usize),
}

impl BaselineSpec {
    fn to_mode(&self) -> Result<BaselineMode> {
        match self {
            BaselineSpec::Keyword(k) if k == "exact" => Ok(BaselineMode::Exact),
            BaselineSpec::Keyword(k) => bail!("baseline_samples must be \"exact\" or a count, got `{k}`"),
            BaselineSpec::Samples(m) => Ok(BaselineMode::MonteCarlo(*m)),
        }
    }
}

impl HyperConfig {
    pub fn merge_into(&self, base: Hyperparams) -> Result<Hyperparams> {
        let mut hp = base;
        if let Some(v) = self.lambda {
            hp.lambda = v;
        }
        if let Some(v) = self.eta_theta {
            hp.eta_theta = v;
        }
        if let Some(v) = self.eta_phi {
            hp.eta_phi = v;
        }
        if let Some(v) = self.tau {
            hp.tau = v;
        }
        if let Some(v) = self.batch_size {
            hp.batch_size = v;
        }
        if let Some(v) = self.minibatch_size {
            hp.minibatch_size = v;
        }
        if let Some(v) = &self.baseline_samples {
            hp.baseline = v.to_mode()?;
        }
        if let Some(v) = self.max_iter {
            hp.max_iter = v;
        }
        if let Some(v) = self.topk {
            hp.topk = v;
        }
        if let Some(v) = self.seed {
            hp.seed = v;
        }
        if let Some(v) = self.ema_decay {
            hp.ema_decay = v;
        }
        if let Some(v) = self.critic {
            hp.critic = v;
        }
        if let Some(v) = self.hidden_width {
            hp.hidden_width = v;
        }
        Ok(hp)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    pub out_dir: Option<String>,
}

/// The run config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path to the space config, relative to this file.
    pub space_ref: String,
    pub oracle: OracleConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub hyperparams: HyperConfig,
    /// FLOPs-constrained multi-objective reward transform, when present.
    #[serde(default)]
    pub reward: Option<MultiObjectiveSpec>,
    #[serde(default)]
    pub logging: LoggingConfig,
    /// Checkpoint every N iterations (0 or absent: final checkpoint only).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_variant() -> Variant {
    Variant::Ma2ml
}

pub fn resolve_path(base_dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

/// A run config fully resolved against flags and the filesystem.
pub struct ResolvedRun {
    pub config: RunConfig,
    pub config_dir: PathBuf,
    pub space: JointSpace,
    pub hyperparams: Hyperparams,
    pub out_dir: PathBuf,
}

/// Flag-level overrides (already env-merged by clap).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub out: Option<PathBuf>,
    pub oracle: Option<String>,
    pub flops_constraint: Option<f64>,
    pub w: Option<f64>,
}

pub fn load_run_config(config_path: &Path, overrides: &Overrides) -> Result<ResolvedRun> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {config_path:?}"))?;
    let mut config: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {config_path:?}"))?;
    let config_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    if let Some(v) = overrides.variant {
        config.variant = v;
    }
    if let Some(seed) = overrides.seed {
        config.hyperparams.seed = Some(seed);
    }
    if let Some(mi) = overrides.max_iter {
        config.hyperparams.max_iter = Some(mi);
    }
    if let Some(flag) = &overrides.oracle {
        config.oracle = OracleConfig::from_flag(flag)?;
    }
    match (overrides.flops_constraint, overrides.w) {
        (None, None) => {}
        (constraint, w) => {
            let base = config
                .reward
                .or_else(|| constraint.map(MultiObjectiveSpec::new));
            let mut spec = base.ok_or_else(|| {
                anyhow!("--w needs a flops constraint (flag or config reward section)")
            })?;
            if let Some(c) = constraint {
                spec.flops_constraint = c;
            }
            if let Some(w) = w {
                spec.w = w;
            }
            config.reward = Some(spec);
        }
    }

    let space_path = resolve_path(&config_dir, &config.space_ref);
    let space_text = std::fs::read_to_string(&space_path)
        .with_context(|| format!("reading space config {space_path:?}"))?;
    let space = JointSpace::parse(&space_text)
        .with_context(|| format!("parsing space config {space_path:?}"))?;

    let hyperparams = config.hyperparams.merge_into(Hyperparams::default())?;
    hyperparams.validate()?;

    let out_dir = overrides
        .out
        .clone()
        .or_else(|| {
            config
                .logging
                .out_dir
                .as_ref()
                .map(|d| resolve_path(&config_dir, d))
        })
        .ok_or_else(|| anyhow!("no output directory (--out or logging.out_dir)"))?;

    Ok(ResolvedRun {
        config,
        config_dir,
        space,
        hyperparams,
        out_dir,
    })
}
