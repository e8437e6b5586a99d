//! Centralized action-value function and the replay buffer feeding it.
//!
//! Two critics share one interface: [`TabularQ`] keeps exact per-cell running
//! means over an enumerable joint space (the verification workhorse), and
//! [`NeuralQ`] is a one-hidden-layer tanh regressor over the one-hot action
//! encoding, trained by full-batch gradient descent on squared error with
//! exact backpropagation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{JointAction, JointSpace};

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
    #[error("tabular critic has no observation for action rank {0}")]
    UnknownCell(u64),
    #[error("joint space too large for a tabular critic ({0} > {1} actions)")]
    SpaceTooLarge(u64, u64),
    #[error("non-finite critic loss (step rejected; reduce the critic learning rate)")]
    NonFiniteLoss,
    #[error("critic batch is empty")]
    EmptyBatch,
}

/// One stored outcome. The trainer treats state as a constant token, so an
/// experience is just the joint action and its observed reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub action: JointAction,
    pub reward: f64,
}

/// FIFO buffer of experiences with uniform with-replacement sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: std::collections::VecDeque<Experience>,
    /// Total pushes ever; `total_pushed - len` is the id of the oldest entry.
    total_pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            entries: std::collections::VecDeque::new(),
            total_pushed: 0,
        }
    }

    /// Unbounded within a run.
    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.entries.iter()
    }

    pub fn push(&mut self, exp: Experience) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(exp);
        self.total_pushed += 1;
    }

    /// `batch_size` uniform draws with replacement over the whole buffer.
    pub fn sample(
        &self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Experience>, CriticError> {
        self.sample_from(0, batch_size, rng)
    }

    /// Uniform draws restricted to entries with id ≥ `min_id` (ids count
    /// pushes from the start of the run). The on-policy variant passes the
    /// id of the first experience of the current iteration.
    pub fn sample_from(
        &self,
        min_id: u64,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Experience>, CriticError> {
        Ok(self
            .sample_indices(min_id, batch_size, rng)?
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect())
    }

    /// Like [`sample_from`](Self::sample_from) but returns buffer positions,
    /// letting callers audit which entries a draw touched.
    pub fn sample_indices(
        &self,
        min_id: u64,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, CriticError> {
        self.sample_indices_range(min_id, self.total_pushed, batch_size, rng)
    }

    /// Uniform draws over entries with id in `[min_id, max_id)`. The trainer
    /// uses the upper bound to respect store-then-sample order within an
    /// evaluation batch: the update after pipeline `k` may only draw
    /// experiences stored up to `k`.
    pub fn sample_indices_range(
        &self,
        min_id: u64,
        max_id: u64,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, CriticError> {
        let oldest = self.total_pushed - self.entries.len() as u64;
        let start = min_id.saturating_sub(oldest) as usize;
        let end = (max_id.min(self.total_pushed).saturating_sub(oldest) as usize)
            .min(self.entries.len());
        if start >= end {
            return Err(CriticError::EmptyBuffer);
        }
        let n = end - start;
        Ok((0..batch_size)
            .map(|_| start + rng.gen_range(0..n))
            .collect())
    }

    pub fn get(&self, index: usize) -> &Experience {
        &self.entries[index]
    }

    /// Ids of the entries a hypothetical draw would have touched; used by the
    /// on-policy access audit.
    pub fn id_of_index(&self, index: usize) -> u64 {
        self.total_pushed - self.entries.len() as u64 + index as u64
    }
}

/// Exact critic: dense running means over every joint action of an
/// enumerable space. Unvisited cells are distinct from zero and reported as
/// errors by [`eval`](TabularQ::eval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    sums: Vec<f64>,
    counts: Vec<u64>,
    global_sum: f64,
    global_count: u64,
}

/// Hard cap on tabular critic size.
pub const TABULAR_MAX_ACTIONS: u64 = 1_000_000;

impl TabularQ {
    pub fn new(space: &JointSpace) -> Result<Self, CriticError> {
        let total = space
            .joint_cardinality()
            .ok_or(CriticError::SpaceTooLarge(u64::MAX, TABULAR_MAX_ACTIONS))?;
        if total > TABULAR_MAX_ACTIONS {
            return Err(CriticError::SpaceTooLarge(total, TABULAR_MAX_ACTIONS));
        }
        Ok(TabularQ {
            sums: vec![0.0; total as usize],
            counts: vec![0; total as usize],
            global_sum: 0.0,
            global_count: 0,
        })
    }

    pub fn fit(&mut self, space: &JointSpace, batch: &[Experience]) {
        for exp in batch {
            let rank = space.action_rank(&exp.action).expect("action fits space") as usize;
            self.sums[rank] += exp.reward;
            self.counts[rank] += 1;
            self.global_sum += exp.reward;
            self.global_count += 1;
        }
    }

    /// Running mean of the cell; errors on never-visited cells.
    pub fn eval(&self, space: &JointSpace, action: &JointAction) -> Result<f64, CriticError> {
        let rank = space.action_rank(action).expect("action fits space");
        if self.counts[rank as usize] == 0 {
            return Err(CriticError::UnknownCell(rank));
        }
        Ok(self.sums[rank as usize] / self.counts[rank as usize] as f64)
    }

    /// Cell mean when known, global observed mean otherwise (0 before any
    /// observation). The counterfactual baseline enumerates candidate cells
    /// that may not have been visited yet; the global mean is the neutral
    /// prior for those.
    pub fn eval_or_prior(&self, space: &JointSpace, action: &JointAction) -> f64 {
        match self.eval(space, action) {
            Ok(v) => v,
            Err(_) if self.global_count > 0 => self.global_sum / self.global_count as f64,
            Err(_) => 0.0,
        }
    }
}

/// One-hidden-layer tanh regressor over the one-hot joint-action encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralQ {
    pub input_width: usize,
    pub hidden_width: usize,
    /// `w1[h][i]`, row-major by hidden unit.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Flat gradient of the [`NeuralQ`] parameters, same layout as the weights.
#[derive(Debug, Clone)]
pub struct NeuralQGrad {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl NeuralQ {
    /// Symmetric uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn new(input_width: usize, hidden_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound1 = 1.0 / (input_width as f64).sqrt();
        let bound2 = 1.0 / (hidden_width as f64).sqrt();
        NeuralQ {
            input_width,
            hidden_width,
            w1: (0..hidden_width)
                .map(|_| {
                    (0..input_width)
                        .map(|_| rng.gen_range(-bound1..bound1))
                        .collect()
                })
                .collect(),
            b1: (0..hidden_width).map(|_| rng.gen_range(-bound1..bound1)).collect(),
            w2: (0..hidden_width).map(|_| rng.gen_range(-bound2..bound2)).collect(),
            b2: rng.gen_range(-bound2..bound2),
        }
    }

    pub fn zeros(input_width: usize, hidden_width: usize) -> Self {
        NeuralQ {
            input_width,
            hidden_width,
            w1: vec![vec![0.0; input_width]; hidden_width],
            b1: vec![0.0; hidden_width],
            w2: vec![0.0; hidden_width],
            b2: 0.0,
        }
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        debug_assert_eq!(input.len(), self.input_width);
        let mut out = self.b2;
        for h in 0..self.hidden_width {
            let mut z = self.b1[h];
            for (w, x) in self.w1[h].iter().zip(input) {
                z += w * x;
            }
            out += self.w2[h] * z.tanh();
        }
        out
    }

    /// Mean squared error over the batch and its exact parameter gradient.
    #[allow(clippy::needless_range_loop)]
    pub fn loss_and_grad(&self, batch: &[(Vec<f64>, f64)]) -> Result<(f64, NeuralQGrad), CriticError> {
        if batch.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        let mut grad = NeuralQGrad {
            w1: vec![vec![0.0; self.input_width]; self.hidden_width],
            b1: vec![0.0; self.hidden_width],
            w2: vec![0.0; self.hidden_width],
            b2: 0.0,
        };
        let inv_n = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (input, target) in batch {
            let mut hidden = vec![0.0; self.hidden_width];
            let mut out = self.b2;
            for h in 0..self.hidden_width {
                let mut z = self.b1[h];
                for (w, x) in self.w1[h].iter().zip(input) {
                    z += w * x;
                }
                hidden[h] = z.tanh();
                out += self.w2[h] * hidden[h];
            }
            let err = out - target;
            loss += err * err * inv_n;
            // dL/dout = 2*err/n
            let dout = 2.0 * err * inv_n;
            grad.b2 += dout;
            for h in 0..self.hidden_width {
                grad.w2[h] += dout * hidden[h];
                let dz = dout * self.w2[h] * (1.0 - hidden[h] * hidden[h]);
                grad.b1[h] += dz;
                for (g, x) in grad.w1[h].iter_mut().zip(input) {
                    *g += dz * x;
                }
            }
        }
        if !loss.is_finite() {
            return Err(CriticError::NonFiniteLoss);
        }
        Ok((loss, grad))
    }

    /// One full-batch gradient-descent step; returns the pre-step loss.
    pub fn update(&mut self, batch: &[(Vec<f64>, f64)], lr: f64) -> Result<f64, CriticError> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        for h in 0..self.hidden_width {
            for (w, g) in self.w1[h].iter_mut().zip(&grad.w1[h]) {
                *w -= lr * g;
            }
            self.b1[h] -= lr * grad.b1[h];
            self.w2[h] -= lr * grad.w2[h];
        }
        self.b2 -= lr * grad.b2;
        Ok(loss)
    }

    /// Forward pass over the active one-hot positions only. The input is a
    /// concatenation of one-hot blocks, so the dense dot product collapses
    /// to a column gather.
    #[allow(clippy::needless_range_loop)]
    pub fn forward_active(&self, active: &[usize]) -> f64 {
        let mut out = self.b2;
        for h in 0..self.hidden_width {
            let mut z = self.b1[h];
            let row = &self.w1[h];
            for &a in active {
                z += row[a];
            }
            out += self.w2[h] * z.tanh();
        }
        out
    }

    /// Gradient step over active-position batches. Bit-identical to
    /// [`update`] on the equivalent one-hot inputs: zero input positions
    /// contribute exact `+0.0` terms in the dense path, so skipping them
    /// changes nothing, and the gradient is accumulated before the step in
    /// the same order.
    #[allow(clippy::needless_range_loop)]
    pub fn update_active(
        &mut self,
        batch: &[(&[usize], f64)],
        lr: f64,
    ) -> Result<f64, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        // column-compressed w1 gradient over the touched inputs
        let mut col_index = vec![usize::MAX; self.input_width];
        let mut touched: Vec<usize> = Vec::new();
        for (active, _) in batch {
            for &a in *active {
                if col_index[a] == usize::MAX {
                    col_index[a] = touched.len();
                    touched.push(a);
                }
            }
        }
        let mut gw1 = vec![vec![0.0; touched.len()]; self.hidden_width];
        let mut gb1 = vec![0.0; self.hidden_width];
        let mut gw2 = vec![0.0; self.hidden_width];
        let mut gb2 = 0.0;
        let inv_n = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut hidden = vec![0.0; self.hidden_width];
        for (active, target) in batch {
            let mut out = self.b2;
            for h in 0..self.hidden_width {
                let mut z = self.b1[h];
                let row = &self.w1[h];
                for &a in *active {
                    z += row[a];
                }
                hidden[h] = z.tanh();
                out += self.w2[h] * hidden[h];
            }
            let err = out - target;
            loss += err * err * inv_n;
            let dout = 2.0 * err * inv_n;
            gb2 += dout;
            for h in 0..self.hidden_width {
                gw2[h] += dout * hidden[h];
                let dz = dout * self.w2[h] * (1.0 - hidden[h] * hidden[h]);
                gb1[h] += dz;
                for &a in *active {
                    gw1[h][col_index[a]] += dz;
                }
            }
        }
        if !loss.is_finite() {
            return Err(CriticError::NonFiniteLoss);
        }
        for h in 0..self.hidden_width {
            for (slot, &a) in touched.iter().enumerate() {
                self.w1[h][a] -= lr * gw1[h][slot];
            }
            self.b1[h] -= lr * gb1[h];
            self.w2[h] -= lr * gw2[h];
        }
        self.b2 -= lr * gb2;
        Ok(loss)
    }
}

/// The centralized critic behind a single dispatch point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QFunction {
    Tabular(TabularQ),
    Neural(NeuralQ),
}

impl QFunction {
    /// Value estimate with the strict unknown-cell contract.
    pub fn eval(&self, space: &JointSpace, action: &JointAction) -> Result<f64, CriticError> {
        match self {
            QFunction::Tabular(q) => q.eval(space, action),
            QFunction::Neural(q) => Ok(q.forward_active(&space.active_indices(action))),
        }
    }

    /// Value estimate that never fails: unknown tabular cells fall back to
    /// the global observed mean.
    pub fn eval_lenient(&self, space: &JointSpace, action: &JointAction) -> f64 {
        match self {
            QFunction::Tabular(q) => q.eval_or_prior(space, action),
            QFunction::Neural(q) => q.forward_active(&space.active_indices(action)),
        }
    }

    /// Fits the critic on a minibatch; returns the pre-step MSE loss.
    pub fn update(
        &mut self,
        space: &JointSpace,
        batch: &[Experience],
        lr: f64,
    ) -> Result<f64, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        match self {
            QFunction::Tabular(q) => {
                let loss = batch
                    .iter()
                    .map(|e| {
                        let err = q.eval_or_prior(space, &e.action) - e.reward;
                        err * err
                    })
                    .sum::<f64>()
                    / batch.len() as f64;
                q.fit(space, batch);
                Ok(loss)
            }
            QFunction::Neural(q) => {
                let active: Vec<(Vec<usize>, f64)> = batch
                    .iter()
                    .map(|e| (space.active_indices(&e.action), e.reward))
                    .collect();
                let views: Vec<(&[usize], f64)> =
                    active.iter().map(|(a, r)| (a.as_slice(), *r)).collect();
                q.update_active(&views, lr)
            }
        }
    }
}
