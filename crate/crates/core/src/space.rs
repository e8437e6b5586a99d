//! Joint categorical action space shared by all agents.
//!
//! A space is an ordered list of agents, each an ordered list of categorical
//! dimensions. Actions are index vectors with the same shape. The space
//! never interprets labels; it only validates, encodes, and decodes them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::fnv1a;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("space config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("space must declare at least one agent")]
    NoAgents,
    #[error("agent `{agent}` declares no dimensions")]
    NoDimensions { agent: String },
    #[error("duplicate agent name `{0}`")]
    DuplicateAgent(String),
    #[error("duplicate dimension name `{dim}` in agent `{agent}`")]
    DuplicateDimension { agent: String, dim: String },
    #[error("dimension `{agent}.{dim}` has cardinality {cardinality}, need at least 2")]
    BadCardinality {
        agent: String,
        dim: String,
        cardinality: usize,
    },
    #[error("dimension `{agent}.{dim}` has {labels} labels for cardinality {cardinality}")]
    LabelCountMismatch {
        agent: String,
        dim: String,
        labels: usize,
        cardinality: usize,
    },
    #[error("dimension `{agent}.{dim}` repeats label `{label}`")]
    DuplicateLabel {
        agent: String,
        dim: String,
        label: String,
    },
    #[error("action shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("action index {index} out of range for `{agent}.{dim}` (cardinality {cardinality})")]
    IndexOutOfRange {
        agent: String,
        dim: String,
        index: usize,
        cardinality: usize,
    },
    #[error("decoded document does not match space: {0}")]
    DecodedMismatch(String),
}

/// One categorical dimension: a name, a cardinality, and optional decoded
/// labels (operation names, learning-rate values, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub cardinality: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

/// One pipeline module modeled as an agent: an ordered list of dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpace {
    pub name: String,
    pub dimensions: Vec<DimensionSpec>,
}

impl AgentSpace {
    /// Number of distinct flattened actions for this agent, if it fits in u64.
    pub fn flat_cardinality(&self) -> Option<u64> {
        let mut n: u64 = 1;
        for d in &self.dimensions {
            n = n.checked_mul(d.cardinality as u64)?;
        }
        Some(n)
    }
}

/// The validated product space of all agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSpace {
    pub agents: Vec<AgentSpace>,
}

/// Per agent, an ordered vector of chosen indices, one per dimension.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub indices: Vec<Vec<usize>>,
}

impl JointAction {
    /// All dimension choices in agent order, flattened.
    pub fn flat(&self) -> Vec<usize> {
        self.indices.iter().flatten().copied().collect()
    }
}

/// Decoded pipeline document: the oracle wire schema. Values are labels when
/// the dimension declares them, raw indices otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPipeline {
    pub agents: Vec<DecodedAgent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedAgent {
    pub name: String,
    pub choices: Vec<DecodedChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedChoice {
    pub dimension: String,
    pub value: serde_json::Value,
}

impl JointSpace {
    /// Parses and validates a space config document.
    pub fn parse(config: &str) -> Result<Self, SpaceError> {
        let space: JointSpace = serde_json::from_str(config)?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.agents.is_empty() {
            return Err(SpaceError::NoAgents);
        }
        let mut agent_names = std::collections::HashSet::new();
        for agent in &self.agents {
            if !agent_names.insert(agent.name.as_str()) {
                return Err(SpaceError::DuplicateAgent(agent.name.clone()));
            }
            if agent.dimensions.is_empty() {
                return Err(SpaceError::NoDimensions {
                    agent: agent.name.clone(),
                });
            }
            let mut dim_names = std::collections::HashSet::new();
            for dim in &agent.dimensions {
                if !dim_names.insert(dim.name.as_str()) {
                    return Err(SpaceError::DuplicateDimension {
                        agent: agent.name.clone(),
                        dim: dim.name.clone(),
                    });
                }
                if dim.cardinality < 2 {
                    return Err(SpaceError::BadCardinality {
                        agent: agent.name.clone(),
                        dim: dim.name.clone(),
                        cardinality: dim.cardinality,
                    });
                }
                if let Some(labels) = &dim.labels {
                    if labels.len() != dim.cardinality {
                        return Err(SpaceError::LabelCountMismatch {
                            agent: agent.name.clone(),
                            dim: dim.name.clone(),
                            labels: labels.len(),
                            cardinality: dim.cardinality,
                        });
                    }
                    let mut seen = std::collections::HashSet::new();
                    for label in labels {
                        if !seen.insert(label.as_str()) {
                            return Err(SpaceError::DuplicateLabel {
                                agent: agent.name.clone(),
                                dim: dim.name.clone(),
                                label: label.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_dimensions(&self) -> usize {
        self.agents.iter().map(|a| a.dimensions.len()).sum()
    }

    /// Sum of cardinalities over all dimensions (one-hot encoding width).
    pub fn onehot_width(&self) -> usize {
        self.agents
            .iter()
            .flat_map(|a| &a.dimensions)
            .map(|d| d.cardinality)
            .sum()
    }

    /// Σ log10(cardinality) over all dimensions.
    pub fn log10_cardinality(&self) -> f64 {
        self.agents
            .iter()
            .flat_map(|a| &a.dimensions)
            .map(|d| (d.cardinality as f64).log10())
            .sum()
    }

    /// Total number of joint actions, if it fits in u64.
    pub fn joint_cardinality(&self) -> Option<u64> {
        let mut n: u64 = 1;
        for agent in &self.agents {
            for dim in &agent.dimensions {
                n = n.checked_mul(dim.cardinality as u64)?;
            }
        }
        Some(n)
    }

    /// Stable fingerprint of the space definition, for checkpoint matching.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(
            serde_json::to_string(self)
                .expect("space serializes")
                .as_bytes(),
        )
    }

    pub fn validate_action(&self, action: &JointAction) -> Result<(), SpaceError> {
        if action.indices.len() != self.agents.len() {
            return Err(SpaceError::ShapeMismatch(format!(
                "action has {} agents, space has {}",
                action.indices.len(),
                self.agents.len()
            )));
        }
        for (agent, choices) in self.agents.iter().zip(&action.indices) {
            if choices.len() != agent.dimensions.len() {
                return Err(SpaceError::ShapeMismatch(format!(
                    "agent `{}` has {} dimensions, action provides {}",
                    agent.name,
                    agent.dimensions.len(),
                    choices.len()
                )));
            }
            for (dim, &index) in agent.dimensions.iter().zip(choices) {
                if index >= dim.cardinality {
                    return Err(SpaceError::IndexOutOfRange {
                        agent: agent.name.clone(),
                        dim: dim.name.clone(),
                        index,
                        cardinality: dim.cardinality,
                    });
                }
            }
        }
        Ok(())
    }

    /// Positions of the ones in the concatenated one-hot encoding, in
    /// dimension order. Infallible for actions that already validated.
    pub fn active_indices(&self, action: &JointAction) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_dimensions());
        let mut offset = 0;
        for (agent, choices) in self.agents.iter().zip(&action.indices) {
            for (dim, &index) in agent.dimensions.iter().zip(choices) {
                out.push(offset + index);
                offset += dim.cardinality;
            }
        }
        out
    }

    /// Concatenated one-hot encoding over all dimensions.
    pub fn encode_onehot(&self, action: &JointAction) -> Result<Vec<f64>, SpaceError> {
        self.validate_action(action)?;
        let mut out = vec![0.0; self.onehot_width()];
        let mut offset = 0;
        for (agent, choices) in self.agents.iter().zip(&action.indices) {
            for (dim, &index) in agent.dimensions.iter().zip(choices) {
                out[offset + index] = 1.0;
                offset += dim.cardinality;
            }
        }
        Ok(out)
    }

    /// Emits the decoded pipeline document for the oracle wire schema.
    pub fn decode_action(&self, action: &JointAction) -> Result<DecodedPipeline, SpaceError> {
        self.validate_action(action)?;
        let agents = self
            .agents
            .iter()
            .zip(&action.indices)
            .map(|(agent, choices)| DecodedAgent {
                name: agent.name.clone(),
                choices: agent
                    .dimensions
                    .iter()
                    .zip(choices)
                    .map(|(dim, &index)| DecodedChoice {
                        dimension: dim.name.clone(),
                        value: match &dim.labels {
                            Some(labels) => serde_json::Value::String(labels[index].clone()),
                            None => serde_json::Value::from(index),
                        },
                    })
                    .collect(),
            })
            .collect();
        Ok(DecodedPipeline { agents })
    }

    /// Looks indices back up from a decoded document (the wire round trip).
    pub fn action_from_decoded(&self, doc: &DecodedPipeline) -> Result<JointAction, SpaceError> {
        if doc.agents.len() != self.agents.len() {
            return Err(SpaceError::DecodedMismatch(format!(
                "document has {} agents, space has {}",
                doc.agents.len(),
                self.agents.len()
            )));
        }
        let mut indices = Vec::with_capacity(self.agents.len());
        for (agent, decoded) in self.agents.iter().zip(&doc.agents) {
            if decoded.name != agent.name {
                return Err(SpaceError::DecodedMismatch(format!(
                    "expected agent `{}`, document has `{}`",
                    agent.name, decoded.name
                )));
            }
            if decoded.choices.len() != agent.dimensions.len() {
                return Err(SpaceError::DecodedMismatch(format!(
                    "agent `{}` expects {} choices, document has {}",
                    agent.name,
                    agent.dimensions.len(),
                    decoded.choices.len()
                )));
            }
            let mut choices = Vec::with_capacity(agent.dimensions.len());
            for (dim, choice) in agent.dimensions.iter().zip(&decoded.choices) {
                if choice.dimension != dim.name {
                    return Err(SpaceError::DecodedMismatch(format!(
                        "agent `{}` expects dimension `{}`, document has `{}`",
                        agent.name, dim.name, choice.dimension
                    )));
                }
                let index = match (&dim.labels, &choice.value) {
                    (Some(labels), serde_json::Value::String(s)) => {
                        labels.iter().position(|l| l == s).ok_or_else(|| {
                            SpaceError::DecodedMismatch(format!(
                                "`{}.{}` has no label `{s}`",
                                agent.name, dim.name
                            ))
                        })?
                    }
                    (None, serde_json::Value::Number(n)) => {
                        n.as_u64().map(|v| v as usize).ok_or_else(|| {
                            SpaceError::DecodedMismatch(format!(
                                "`{}.{}` index must be a nonnegative integer",
                                agent.name, dim.name
                            ))
                        })?
                    }
                    _ => {
                        return Err(SpaceError::DecodedMismatch(format!(
                            "`{}.{}` value has the wrong type",
                            agent.name, dim.name
                        )))
                    }
                };
                choices.push(index);
            }
            indices.push(choices);
        }
        let action = JointAction { indices };
        self.validate_action(&action)?;
        Ok(action)
    }

    /// Mixed-radix rank of an action among all joint actions, dimension-major
    /// in declaration order. Requires an enumerable space.
    pub fn action_rank(&self, action: &JointAction) -> Result<u64, SpaceError> {
        self.validate_action(action)?;
        let mut rank: u64 = 0;
        for (agent, choices) in self.agents.iter().zip(&action.indices) {
            for (dim, &index) in agent.dimensions.iter().zip(choices) {
                rank = rank * dim.cardinality as u64 + index as u64;
            }
        }
        Ok(rank)
    }

    /// Inverse of [`action_rank`](Self::action_rank).
    pub fn action_from_rank(&self, mut rank: u64) -> JointAction {
        let mut flat_rev = Vec::with_capacity(self.num_dimensions());
        for agent in self.agents.iter().rev() {
            for dim in agent.dimensions.iter().rev() {
                flat_rev.push((rank % dim.cardinality as u64) as usize);
                rank /= dim.cardinality as u64;
            }
        }
        let mut it = flat_rev.into_iter().rev();
        JointAction {
            indices: self
                .agents
                .iter()
                .map(|a| (0..a.dimensions.len()).map(|_| it.next().unwrap()).collect())
                .collect(),
        }
    }

    /// Iterates every joint action of an enumerable space in rank order.
    pub fn enumerate_actions(&self) -> impl Iterator<Item = JointAction> + '_ {
        let total = self
            .joint_cardinality()
            .expect("enumerate_actions requires an enumerable space");
        (0..total).map(|rank| self.action_from_rank(rank))
    }

    /// Flattened per-agent action index (mixed radix over that agent's
    /// dimensions), reduced modulo `k`. Well-defined even when the agent's
    /// flat cardinality overflows u64.
    pub fn agent_flat_index_mod(&self, action: &JointAction, agent: usize, k: u64) -> u64 {
        let mut acc: u64 = 0;
        for (dim, &index) in self.agents[agent]
            .dimensions
            .iter()
            .zip(&action.indices[agent])
        {
            acc = (acc * (dim.cardinality as u64 % k) + index as u64) % k;
        }
        acc
    }
}
