//! Double deep Q-learning for imbalanced binary classification. Each
//! episode walks the labeled feature rows in order; the agent's action is
//! the predicted class, rewards are scaled by the class-imbalance ratio,
//! and a missed minority case (false negative) can terminate the episode.

use crate::metrics::{confusion, scores};
use crate::net::{Adam, NetError, QNetwork};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("empty training data")]
    EmptyData,
    #[error("feature row {index} has width {got}, expected {want}")]
    RowWidth { index: usize, got: usize, want: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("class ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// One stored interaction: state, chosen action, reward, next state
/// (empty when terminal), terminal flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Fixed-capacity FIFO ring buffer with uniform sampling without
/// replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            items: Vec::with_capacity(capacity.min(4096)),
            capacity,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn sample<'a>(&'a self, batch: usize, rng: &mut StreamRng) -> Vec<&'a Transition> {
        let k = batch.min(self.items.len());
        rng.sample_distinct(self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Hyperparameters; defaults follow the reference configuration:
/// hidden widths (96, 64), discount 0.95, epsilon decay 0.995 per
/// episode, Adam at 0.0005.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    pub epsilon_decay: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_sync_every: u64,
    pub n_episodes: usize,
    pub terminate_on_false_negative: bool,
    /// stop early once the held-out G-mean reaches this level (checked
    /// every `eval_every` episodes); `None` trains the full budget
    pub early_stop_gmean: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![96, 64],
            gamma: 0.95,
            lr: 0.0005,
            epsilon_start: 1.0,
            epsilon_min: 0.01,
            epsilon_decay: 0.995,
            batch_size: 64,
            buffer_capacity: 100_000,
            target_sync_every: 500,
            n_episodes: 120,
            terminate_on_false_negative: true,
            early_stop_gmean: None,
            eval_every: 5,
            seed: 0,
        }
    }
}

/// Reward for predicting `action` when the true label is `label`:
/// +1 / -1 on minority (high-risk) rows, +rho / -rho on majority rows.
/// `terminal` is true on a false negative when that option is enabled.
pub fn reward_and_terminal(
    action: usize,
    label: u8,
    rho: f64,
    terminate_on_fn: bool,
) -> (f64, bool) {
    match (label, action) {
        (1, 1) => (1.0, false),            // true positive
        (1, 0) => (-1.0, terminate_on_fn), // false negative
        (0, 0) => (rho, false),            // true negative
        _ => (-rho, false),                // false positive
    }
}

/// Per-episode training log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub cumulative_reward: f64,
    pub epsilon: f64,
    pub train_gmean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub online: QNetwork,
    pub config: AgentConfig,
    pub log: Vec<EpisodeLog>,
    pub grad_steps: u64,
    pub stopped_early: bool,
}

/// R + gamma * Q_target(s', argmax_a Q_online(s', a)); just R at a
/// terminal transition. Action selection and evaluation use different
/// networks, which is the double-Q correction.
pub fn td_target(
    online: &QNetwork,
    target: &QNetwork,
    t: &Transition,
    gamma: f64,
) -> Result<f64, AgentError> {
    if t.terminal {
        return Ok(t.reward);
    }
    let q_online = online.forward(&t.next_state)?;
    let best = argmax_tie_low(&q_online);
    let q_target = target.forward(&t.next_state)?;
    Ok(t.reward + gamma * q_target[best])
}

/// Greedy argmax; exact ties resolve to the lowest index.
pub fn argmax_tie_low(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy action over two classes.
pub fn select_action(
    online: &QNetwork,
    state: &[f64],
    epsilon: f64,
    rng: &mut StreamRng,
) -> Result<usize, AgentError> {
    if rng.next_f64() < epsilon {
        Ok(rng.next_index(2))
    } else {
        Ok(argmax_tie_low(&online.forward(state)?))
    }
}

fn validate_data(features: &[Vec<f64>], labels: &[u8], rho: f64) -> Result<usize, AgentError> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(AgentError::EmptyData);
    }
    let want = features[0].len();
    for (index, row) in features.iter().enumerate() {
        if row.len() != want {
            return Err(AgentError::RowWidth {
                index,
                got: row.len(),
                want,
            });
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(AgentError::BadLabel(l));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(AgentError::BadRatio(rho));
    }
    Ok(want)
}

/// One minibatch gradient step on the online network, averaging per-
/// sample TD gradients. Returns the mean squared TD error.
fn train_step(
    online: &mut QNetwork,
    target: &QNetwork,
    opt: &mut Adam,
    batch: &[&Transition],
    gamma: f64,
    step: u64,
) -> Result<f64, AgentError> {
    let mut grad = vec![0.0; online.n_params()];
    let mut loss = 0.0;
    for t in batch {
        let y = td_target(online, target, t, gamma)?;
        let cache = online.forward_cached(&t.state)?;
        let g = online.backward(&cache, t.action, y);
        let q = online.forward(&t.state)?;
        let e = q[t.action] - y;
        loss += e * e;
        for (acc, gi) in grad.iter_mut().zip(&g.0) {
            *acc += gi;
        }
    }
    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(AgentError::NonFiniteLoss { step });
    }
    opt.step(online, &crate::net::Gradient(grad))?;
    Ok(loss)
}

/// Greedy predictions for every row.
pub fn predict(net: &QNetwork, features: &[Vec<f64>]) -> Result<Vec<u8>, AgentError> {
    features
        .iter()
        .map(|row| Ok(argmax_tie_low(&net.forward(row)?) as u8))
        .collect()
}

fn greedy_gmean(net: &QNetwork, features: &[Vec<f64>], labels: &[u8]) -> Result<f64, AgentError> {
    let preds = predict(net, features)?;
    let cm = confusion(&preds, labels).expect("aligned lengths");
    Ok(scores(&cm).expect("non-empty matrix").g_mean)
}

/// Train a DDQN classifier on chronological feature rows.
///
/// Episodes tile the data: each starts where the previous one stopped
/// (wrapping at the end), walks rows in order, and ends either at the
/// data boundary or at a false negative when termination is enabled.
/// Epsilon decays once per episode. `eval` is an optional held-out slice
/// used for the early-stopping check.
pub fn train(
    features: &[Vec<f64>],
    labels: &[u8],
    rho: f64,
    config: &AgentConfig,
    eval: Option<(&[Vec<f64>], &[u8])>,
) -> Result<TrainedAgent, AgentError> {
    let d = validate_data(features, labels, rho)?;
    if let Some((ef, el)) = eval {
        validate_data(ef, el, rho)?;
    }
    let mut widths = vec![d];
    widths.extend_from_slice(&config.hidden);
    widths.push(2);
    let mut online = QNetwork::new(&widths, config.seed);
    let mut target = QNetwork::new(&widths, config.seed);
    target.copy_from(&online)?;
    let mut opt = Adam::new(online.n_params(), config.lr);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut act_rng = StreamRng::new(config.seed, "ddqn.action", 0);
    let mut sample_rng = StreamRng::new(config.seed, "ddqn.sample", 1);

    let n = features.len();
    let mut cursor = 0usize;
    let mut epsilon = config.epsilon_start;
    let mut grad_steps = 0u64;
    let mut log = Vec::with_capacity(config.n_episodes);
    let mut stopped_early = false;

    for episode in 0..config.n_episodes {
        let mut cumulative_reward = 0.0;
        for offset in 0..n {
            let i = (cursor + offset) % n;
            let action = select_action(&online, &features[i], epsilon, &mut act_rng)?;
            let (reward, fn_terminal) =
                reward_and_terminal(action, labels[i], rho, config.terminate_on_false_negative);
            let at_boundary = offset == n - 1 || i == n - 1;
            let terminal = fn_terminal || at_boundary;
            cumulative_reward += reward;
            buffer.push(Transition {
                state: features[i].clone(),
                action,
                reward,
                next_state: if terminal {
                    Vec::new()
                } else {
                    features[(i + 1) % n].clone()
                },
                terminal,
            });

            if buffer.len() >= config.batch_size {
                let batch = buffer.sample(config.batch_size, &mut sample_rng);
                grad_steps += 1;
                train_step(&mut online, &target, &mut opt, &batch, config.gamma, grad_steps)?;
                if grad_steps % config.target_sync_every == 0 {
                    target.copy_from(&online)?;
                }
            }
            if terminal {
                cursor = (i + 1) % n;
                break;
            }
        }
        epsilon = (epsilon * config.epsilon_decay).max(config.epsilon_min);
        let train_gmean = greedy_gmean(&online, features, labels)?;
        log.push(EpisodeLog {
            episode,
            cumulative_reward,
            epsilon,
            train_gmean,
        });
        if let (Some(goal), Some((ef, el))) = (config.early_stop_gmean, eval) {
            if (episode + 1) % config.eval_every.max(1) == 0
                && greedy_gmean(&online, ef, el)? >= goal
            {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainedAgent {
        online,
        config: config.clone(),
        log,
        grad_steps,
        stopped_early,
    })
}

/// Write the per-episode log as CSV (episode,cum_reward,epsilon,gmean).
pub fn write_log_csv<W: std::io::Write>(log: &[EpisodeLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "episode,cum_reward,epsilon,gmean")?;
    for row in log {
        writeln!(
            w,
            "{},{},{},{}",
            row.episode, row.cumulative_reward, row.epsilon, row.train_gmean
        )?;
    }
    Ok(())
}
