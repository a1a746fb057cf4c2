//! Double-DQN agent: Q-network, replay, exploration and optimization.

pub mod checkpoint;
mod kernels;
pub mod network;
pub mod optim;
pub mod replay;
pub mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowShape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMetadata, LineageEntry};
pub use network::{Gradients, LayerSpec, Mode, NetworkArchitecture, QNetworkParams, Tensor};
pub use optim::{rmsprop_step, RmsPropConfig, RmsPropState};
pub use replay::{ReplayBuffer, Transition};
pub use schedule::EpsilonSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Huber loss with threshold 1.
    Huber,
    /// Plain squared error.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub target_update_interval: u64,
    pub warmup_random_steps: u64,
    pub batch_size: usize,
    pub loss: Loss,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub replay_capacity: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            learning_rate: 0.001,
            target_update_interval: 4000,
            warmup_random_steps: 10_000,
            batch_size: 32,
            loss: Loss::Huber,
            rms_decay: 0.95,
            rms_epsilon: 1e-6,
            replay_capacity: ReplayBuffer::DEFAULT_CAPACITY,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("agent: {m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.rms_epsilon > 0.0) {
            return bad("learning rate and rmsprop epsilon must be positive");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad("rmsprop decay must lie in (0, 1)");
        }
        if self.target_update_interval == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("target interval, batch size and replay capacity must be positive");
        }
        Ok(())
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            decay: self.rms_decay,
            epsilon: self.rms_epsilon,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Epsilon-greedy choice: uniform with probability `epsilon`, else the
/// greedy action.
pub fn select_action<R: Rng + ?Sized>(
    params: &QNetworkParams,
    obs: &FlowShape,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..params.num_actions()));
    }
    Ok(argmax(&params.forward(obs)?))
}

/// Double-DQN bootstrap targets: the online network picks the next action,
/// the target network values it.
pub fn ddqn_targets(
    batch: &[&Transition],
    online: &QNetworkParams,
    target: &QNetworkParams,
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Usage("ddqn targets need a nonempty batch".into()));
    }
    let live: Vec<&FlowShape> = batch.iter().filter(|t| !t.done).map(|t| &t.next_state).collect();
    let mut bootstrap = Vec::with_capacity(live.len());
    if !live.is_empty() {
        let input = online.encode(live.iter().copied())?;
        let q_online = online.predict_batch(&input, live.len())?;
        let q_target = target.predict_batch(&input, live.len())?;
        let a = online.num_actions();
        for s in 0..live.len() {
            let best = argmax(&q_online[s * a..(s + 1) * a]);
            bootstrap.push(q_target[s * a + best]);
        }
    }
    let mut live_values = bootstrap.into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            if t.done {
                t.reward
            } else {
                t.reward + gamma * live_values.next().expect("one value per live transition")
            }
        })
        .collect())
}

/// Mean loss between `Q(s_i, a_i)` and `targets[i]`, with gradients flowing
/// only through the taken action's output.
pub fn loss_and_grads(
    online: &QNetworkParams,
    batch: &[&Transition],
    targets: &[f64],
    loss: Loss,
) -> Result<(f64, Gradients)> {
    let (l, g, _) = loss_and_grads_cached(online, batch, targets, loss)?;
    Ok((l, g))
}

pub(crate) fn loss_and_grads_cached(
    online: &QNetworkParams,
    batch: &[&Transition],
    targets: &[f64],
    loss: Loss,
) -> Result<(f64, Gradients, network::ForwardCache)> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(Error::Shape(format!(
            "{} transitions with {} targets",
            batch.len(),
            targets.len()
        )));
    }
    let a = online.num_actions();
    if let Some(t) = batch.iter().find(|t| t.action >= a) {
        return Err(Error::Parameter(format!("transition action {} out of range", t.action)));
    }
    let n = batch.len();
    let input = online.encode(batch.iter().map(|t| &t.state))?;
    let (q, cache) = online.forward_batch(&input, n, Mode::Train)?;
    let mut grad_out = vec![0.0; q.len()];
    let mut total = 0.0;
    for (s, (t, &y)) in batch.iter().zip(targets).enumerate() {
        let d = q[s * a + t.action] - y;
        let (l, g) = match loss {
            Loss::Huber if d.abs() <= 1.0 => (0.5 * d * d, d),
            Loss::Huber => (d.abs() - 0.5, d.signum()),
            Loss::Mse => (d * d, 2.0 * d),
        };
        total += l;
        grad_out[s * a + t.action] = g / n as f64;
    }
    let grads = online.backward(&cache, &grad_out);
    Ok((total / n as f64, grads, cache))
}

/// Makes `target` an exact copy of `online`.
pub fn sync_target(online: &QNetworkParams, target: &mut QNetworkParams) -> Result<()> {
    target.copy_from(online)
}

/// Online and target networks with their optimizer and replay memory.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    config: AgentConfig,
    online: QNetworkParams,
    target: QNetworkParams,
    optimizer: RmsPropState,
    replay: ReplayBuffer,
    gradient_steps: u64,
    target_syncs: u64,
}

impl DqnAgent {
    /// Fresh agent with seeded initialization; target starts as a copy of online.
    pub fn new<R: Rng + ?Sized>(arch: &NetworkArchitecture, config: AgentConfig, rng: &mut R) -> Result<Self> {
        let online = QNetworkParams::init(arch, rng)?;
        let optimizer = RmsPropState::new(&online);
        DqnAgent::from_parts(online, optimizer, config)
    }

    pub fn from_parts(online: QNetworkParams, optimizer: RmsPropState, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        optimizer.check_matches(&online)?;
        Ok(DqnAgent {
            target: online.clone(),
            online,
            optimizer,
            replay: ReplayBuffer::new(config.replay_capacity)?,
            config,
            gradient_steps: 0,
            target_syncs: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn online(&self) -> &QNetworkParams {
        &self.online
    }

    pub fn target(&self) -> &QNetworkParams {
        &self.target
    }

    pub fn optimizer(&self) -> &RmsPropState {
        &self.optimizer
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn replay_mut(&mut self) -> &mut ReplayBuffer {
        &mut self.replay
    }

    pub fn gradient_steps(&self) -> u64 {
        self.gradient_steps
    }

    pub fn target_syncs(&self) -> u64 {
        self.target_syncs
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &FlowShape, epsilon: f64, rng: &mut R) -> Result<usize> {
        select_action(&self.online, obs, epsilon, rng)
    }

    pub fn remember(&mut self, t: Transition) {
        self.replay.push(t);
    }

    pub fn can_learn(&self) -> bool {
        self.replay.len() >= self.config.batch_size
    }

    /// One gradient step on a replay minibatch, then a target sync if the
    /// step count hits the interval. Returns the minibatch loss.
    pub fn learn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let batch = self.replay.sample(self.config.batch_size, rng)?;
        let targets = ddqn_targets(&batch, &self.online, &self.target, self.config.gamma)?;
        let (loss, grads, cache) = loss_and_grads_cached(&self.online, &batch, &targets, self.config.loss)?;
        if self.online.architecture().has_batch_norm() {
            self.online.update_running_stats(&cache);
        }
        rmsprop_step(&mut self.online, &grads, &mut self.optimizer, &self.config.rmsprop())?;
        self.gradient_steps += 1;
        if self.gradient_steps.is_multiple_of(self.config.target_update_interval) {
            sync_target(&self.online, &mut self.target)?;
            self.target_syncs += 1;
        }
        Ok(loss)
    }
}
